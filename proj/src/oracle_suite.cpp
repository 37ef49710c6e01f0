#include "madnet/oracle_suite.hpp"

#include "madnet/moments.hpp"
#include "madnet/oracle.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>

namespace madnet {

namespace {

using oracle::FiniteDistribution;
using oracle::LinearFunctionalVector;

struct Case {
  FiniteDistribution dist;
  LinearFunctionalVector ell;
  Eigen::VectorXd beta;
};

Eigen::VectorXd scalar_x(double v) { return Eigen::VectorXd::Constant(1, v); }

Case random_case(std::mt19937_64& rng, int max_support) {
  std::uniform_int_distribution<int> size_dist(2, std::max(2, max_support));
  std::uniform_real_distribution<double> unif(-2.0, 2.0);
  std::uniform_real_distribution<double> pos(0.05, 1.0);
  const int n = size_dist(rng);
  Case c;
  c.dist.probs.resize(n);
  c.dist.reg.resize(n);
  c.ell.coeffs.resize(n);
  for (int i = 0; i < n; ++i) {
    c.dist.support.push_back({static_cast<double>(i % 2), scalar_x(static_cast<double>(i / 2))});
    c.dist.probs[i] = pos(rng);
    c.dist.reg[i] = unif(rng);
    c.ell.coeffs[i] = unif(rng);
  }
  c.dist.probs /= c.dist.probs.sum();
  do {
    c.beta.resize(n);
    for (int i = 0; i < n; ++i) c.beta[i] = unif(rng);
  } while (std::abs(c.ell.apply(c.beta)) < 0.1);
  return c;
}

/// Binary treatment on K covariate strata with propensities p_k; ATE
/// functional and beta = a.
struct BinaryStrata {
  Case c;
  Eigen::VectorXd p;  ///< propensity of each support point's stratum
};

BinaryStrata binary_strata(const Eigen::VectorXd& px, const Eigen::VectorXd& pk) {
  BinaryStrata b;
  const Eigen::Index k = px.size();
  b.c.dist.probs.resize(2 * k);
  b.p.resize(2 * k);
  for (Eigen::Index j = 0; j < k; ++j) {
    for (int a = 0; a <= 1; ++a) {
      const Eigen::Index i = 2 * j + a;
      b.c.dist.support.push_back({static_cast<double>(a), scalar_x(static_cast<double>(j))});
      b.c.dist.probs[i] = px[j] * (a == 1 ? pk[j] : 1.0 - pk[j]);
      b.p[i] = pk[j];
    }
  }
  b.c.ell = induced_functional(b.c.dist, MomentFunctional(EstimandKind::ATE));
  b.c.beta = b.c.dist.tabulate([](double a, const Eigen::VectorXd&) { return a; });
  return b;
}

BinaryStrata fixed_d1() { return binary_strata(Eigen::VectorXd::Ones(1), Eigen::VectorXd::Constant(1, 0.5)); }
BinaryStrata fixed_d2() { return binary_strata(Eigen::Vector2d(0.5, 0.5), Eigen::Vector2d(0.2, 0.5)); }

BinaryStrata random_strata(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> k_dist(2, 10);
  std::uniform_real_distribution<double> prop(0.05, 0.95);
  std::uniform_real_distribution<double> mass(0.1, 1.0);
  const int k = k_dist(rng);
  Eigen::VectorXd px(k), pk(k);
  for (int j = 0; j < k; ++j) {
    px[j] = mass(rng);
    pk[j] = prop(rng);
  }
  return binary_strata(px / px.sum(), pk);
}

/// beta_perp = p + (a - p)(1 - kappa / (p (1 - p))), kappa = 1 / E[1 / (p (1 - p))].
Eigen::VectorXd ate_closed_form(const BinaryStrata& b) {
  const auto& dist = b.c.dist;
  double inv = 0.0;
  for (Eigen::Index i = 0; i < dist.size(); ++i) inv += dist.probs[i] / (b.p[i] * (1.0 - b.p[i]));
  const double kappa = 1.0 / inv;
  Eigen::VectorXd out(dist.size());
  for (Eigen::Index i = 0; i < dist.size(); ++i) {
    const double p = b.p[i];
    out[i] = p + (dist.support[static_cast<size_t>(i)].a - p) * (1.0 - kappa / (p * (1.0 - p)));
  }
  return out;
}

class Tracker {
 public:
  void add(const std::string& name, double tolerance, bool informational = false) {
    checks_.push_back({name, 0.0, tolerance, informational});
  }
  void record(size_t idx, double residual) {
    auto& c = checks_[idx];
    // NaN must register as a failure
    if (!(residual <= c.max_residual)) c.max_residual = std::isnan(residual) ? INFINITY : residual;
  }
  std::vector<IdentityCheck> take() { return std::move(checks_); }

 private:
  std::vector<IdentityCheck> checks_;
};

enum CheckId : size_t {
  kReconstruction,
  kConstraint,
  kOrthogonality,
  kNormIdentity,
  kMixedBias,
  kSufficiency,
  kMuDecomposition,
  kAteClosedForm,
  kAdeConstraint,
  kAdeConditionalMean,
  kAdePrintedSign,
};

double max_abs(const Eigen::VectorXd& v) { return v.size() == 0 ? 0.0 : v.cwiseAbs().maxCoeff(); }

void check_case(const Case& c, const SuiteOptions& opt, std::mt19937_64& rng, Tracker& t) {
  const auto& dist = c.dist;
  const Eigen::VectorXd alpha = oracle::riesz_exact(dist, c.ell);
  const Eigen::VectorXd perp = oracle::project_orthocomplement(dist, c.ell, c.beta);
  Eigen::VectorXd rec = oracle::reconstruct_rr(dist, c.ell, c.beta, perp);
  if (opt.flip_reconstruction_sign) rec = -rec;

  t.record(kReconstruction, max_abs(rec - alpha));
  t.record(kConstraint, std::abs(c.ell.apply(perp)));

  std::normal_distribution<double> normal;
  const Eigen::VectorXd diff = c.beta - perp;
  for (int k = 0; k < 10; ++k) {
    Eigen::VectorXd g(dist.size());
    for (auto& v : g) v = normal(rng);
    const Eigen::VectorXd f = oracle::project_orthocomplement(dist, c.ell, g);
    t.record(kOrthogonality, std::abs(dist.inner(diff, f)));
  }

  const double h_beta = c.ell.apply(c.beta);
  t.record(kNormIdentity, std::abs(std::sqrt(dist.norm2(alpha)) - std::abs(h_beta) / std::sqrt(dist.norm2(diff))));

  for (int k = 0; k < 100; ++k) {
    Eigen::VectorXd mu_hat = dist.reg, alpha_hat = alpha;
    for (Eigen::Index i = 0; i < dist.size(); ++i) {
      mu_hat[i] += normal(rng);
      alpha_hat[i] += normal(rng);
    }
    const auto mb = oracle::verify_mixed_bias(dist, c.ell, mu_hat, alpha_hat);
    t.record(kMixedBias, std::abs(mb.lhs - mb.rhs));
  }

  const auto suff = oracle::verify_sufficiency(dist, c.ell, c.beta);
  t.record(kSufficiency, std::abs(suff.lhs - suff.rhs));
  t.record(kMuDecomposition, oracle::verify_mu_decomposition(dist, c.ell, c.beta));
}

void check_strata(const BinaryStrata& b, const SuiteOptions& opt, std::mt19937_64& rng, Tracker& t) {
  Case c = b.c;
  std::normal_distribution<double> normal;
  c.dist.reg.resize(c.dist.size());
  for (auto& v : c.dist.reg) v = normal(rng);
  check_case(c, opt, rng, t);
  const Eigen::VectorXd perp = oracle::project_orthocomplement(c.dist, c.ell, c.beta);
  t.record(kAteClosedForm, max_abs(perp - ate_closed_form(b)));
}

/// ADE on a quadrature discretisation of A | X ~ Normal(m(x), sd^2). The
/// projection of beta = a is E[A | X]; the opposite sign in front of the
/// score term would give a function with h = 2.
void check_ade(std::mt19937_64& rng, Tracker& t) {
  std::uniform_int_distribution<int> k_dist(1, 6);
  std::uniform_real_distribution<double> unif(-1.5, 1.5);
  std::uniform_real_distribution<double> sd_dist(0.5, 2.0);
  std::uniform_real_distribution<double> mass(0.1, 1.0);
  const int k = k_dist(rng);
  std::vector<Eigen::VectorXd> xs;
  Eigen::VectorXd px(k), means(k);
  for (int j = 0; j < k; ++j) {
    xs.push_back(scalar_x(static_cast<double>(j)));
    px[j] = mass(rng);
    means[j] = unif(rng);
  }
  const double sd = sd_dist(rng);
  const auto dist = oracle::gaussian_treatment_distribution(xs, px / px.sum(), means, sd, 8);
  const auto ell = induced_functional(dist, MomentFunctional(EstimandKind::ADE));
  const Eigen::VectorXd beta = dist.tabulate([](double a, const Eigen::VectorXd&) { return a; });
  const Eigen::VectorXd perp = oracle::project_orthocomplement(dist, ell, beta);
  t.record(kAdeConstraint, std::abs(ell.apply(perp)));

  Eigen::VectorXd cond_mean(dist.size()), score(dist.size());
  for (Eigen::Index i = 0; i < dist.size(); ++i) {
    const auto& z = dist.support[static_cast<size_t>(i)];
    const double m = means[static_cast<Eigen::Index>(std::lround(z.x[0]))];
    cond_mean[i] = m;
    score[i] = -(z.a - m) / (sd * sd);  // p'(a|x) / p(a|x)
  }
  t.record(kAdeConditionalMean, max_abs(perp - cond_mean));
  const Eigen::VectorXd printed = beta - score / dist.norm2(score);
  t.record(kAdePrintedSign, std::abs(ell.apply(printed)));
}

}  // namespace

bool SuiteReport::pass() const { return first_failure() == nullptr; }

const IdentityCheck* SuiteReport::first_failure() const {
  for (const auto& c : checks) {
    if (!c.pass()) return &c;
  }
  return nullptr;
}

nlohmann::json SuiteReport::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& c : checks) {
    rows.push_back({{"identity", c.name},
                    {"max_residual", c.max_residual},
                    {"tolerance", c.tolerance},
                    {"informational", c.informational},
                    {"pass", c.pass()}});
  }
  return {{"cases", cases}, {"seconds", seconds}, {"pass", pass()}, {"checks", rows}};
}

SuiteReport run_identity_suite(const SuiteOptions& options) {
  const auto start = std::chrono::steady_clock::now();
  Tracker t;
  t.add("reconstruction_vs_exact_rr", 1e-9);
  t.add("constraint_h_beta_perp", 1e-11);
  t.add("orthogonality_to_complement", 1e-10);
  t.add("norm_identity", 1e-9);
  t.add("mixed_bias", 1e-10);
  t.add("sufficiency", 1e-10);
  t.add("mu_decomposition", 1e-10);
  t.add("ate_closed_form_vs_projection", 1e-10);
  t.add("ade_projection_constraint", 1e-10);
  t.add("ade_projection_vs_conditional_mean", 1e-9);
  t.add("ade_printed_sign_constraint", 0.0, true);

  std::mt19937_64 rng(options.seed);
  check_strata(fixed_d1(), options, rng, t);
  check_strata(fixed_d2(), options, rng, t);
  // two strata with equal propensity share beta - beta_perp values, so the
  // sufficiency check pools them
  check_strata(binary_strata(Eigen::Vector3d(0.3, 0.3, 0.4), Eigen::Vector3d(0.5, 0.5, 0.3)), options, rng, t);
  for (int i = 0; i < options.cases; ++i) {
    check_case(random_case(rng, options.max_support), options, rng, t);
    check_strata(random_strata(rng), options, rng, t);
    check_ade(rng, t);
  }

  SuiteReport report;
  report.checks = t.take();
  report.cases = options.cases;
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace madnet
