#include "madnet/errors.hpp"
#include "madnet/estimators.hpp"
#include "madnet/oracle.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace madnet;

namespace {

Dataset toy_data() {
  Dataset d;
  d.y = Eigen::Vector2d(2.0, 0.0);
  d.a = Eigen::Vector2d(1.0, 0.0);
  d.x = Eigen::MatrixXd::Zero(2, 1);
  return d;
}

DifferentiableFunction affine(double slope, double intercept) {
  return DifferentiableFunction(
      [=](const Eigen::VectorXd& a, const Eigen::MatrixXd&) { return Eigen::VectorXd(slope * a.array() + intercept); },
      [=](const Eigen::VectorXd& a, const Eigen::MatrixXd&) { return Eigen::VectorXd::Constant(a.size(), slope).eval(); });
}

FittedNuisances toy_nuisances(double perp = 0.5) {
  const MomentFunctional ate(EstimandKind::ATE);
  return {affine(1.0, 0.0), affine(0.0, perp), beta_default(ate), ate};
}

/// Table function on a finite support: value of the support point with the
/// same (a, x); finite support nuisances have no derivative.
DifferentiableFunction lookup(const oracle::FiniteDistribution& dist, const Eigen::VectorXd& values) {
  return DifferentiableFunction::pointwise([dist, values](double a, const Eigen::Ref<const Eigen::RowVectorXd>& x) {
    for (Eigen::Index i = 0; i < dist.size(); ++i) {
      const auto& p = dist.support[static_cast<size_t>(i)];
      if (p.a == a && (p.x.transpose() - x).cwiseAbs().maxCoeff() == 0.0) return values[i];
    }
    throw DomainError("point not in support");
  });
}

/// X in {-1, 0, 2}, binary A with p(x) = (0.2, 0.5, 0.7).
oracle::FiniteDistribution three_strata() {
  oracle::FiniteDistribution d;
  const double px[3] = {0.3, 0.5, 0.2};
  const double xs[3] = {-1.0, 0.0, 2.0};
  const double p[3] = {0.2, 0.5, 0.7};
  d.probs.resize(6);
  d.reg.resize(6);
  for (int k = 0; k < 3; ++k) {
    for (int a = 0; a < 2; ++a) {
      const int i = 2 * k + a;
      d.support.push_back({static_cast<double>(a), Eigen::VectorXd::Constant(1, xs[k])});
      d.probs[i] = px[k] * (a ? p[k] : 1.0 - p[k]);
      d.reg[i] = std::sin(3.0 * xs[k]) + (1.5 + xs[k]) * a;
    }
  }
  return d;
}

Dataset support_dataset(const oracle::FiniteDistribution& dist) {
  Dataset d;
  d.a.resize(dist.size());
  d.x.resize(dist.size(), 1);
  for (Eigen::Index i = 0; i < dist.size(); ++i) {
    d.a[i] = dist.support[static_cast<size_t>(i)].a;
    d.x(i, 0) = dist.support[static_cast<size_t>(i)].x[0];
  }
  d.y = dist.reg;  // E[Y | Z] replaces Y under population weights
  return d;
}

NuisanceTable random_table(std::mt19937_64& rng, Eigen::Index n) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::bernoulli_distribution coin(0.4);
  NuisanceTable t;
  auto fill = [&](Eigen::VectorXd& v) {
    v.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = normal(rng);
  };
  t.a.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) t.a[i] = coin(rng) ? 1.0 : 0.0;
  fill(t.y);
  fill(t.mu);
  fill(t.m_mu);
  t.beta = t.a;
  t.m_beta = Eigen::VectorXd::Ones(n);
  fill(t.beta_perp);
  fill(t.m_beta_perp);
  t.m_treatment = Eigen::VectorXd::Ones(n);
  return t;
}

double rel(double a, double b) { return std::abs(a - b) / std::max(1.0, std::abs(b)); }

}  // namespace

TEST_CASE("toy data worked examples") {
  const auto t = tabulate(toy_nuisances(), toy_data());
  const auto rr = rr_from_beta_perp(t);
  CHECK(rr.h_difference == doctest::Approx(1.0));
  CHECK(rr.mean_square == doctest::Approx(0.25));
  CHECK(rr.table.alpha[0] == doctest::Approx(2.0));
  CHECK(rr.table.alpha[1] == doctest::Approx(-2.0));

  const auto d = direct(t);
  CHECK(d.psi_hat == doctest::Approx(1.0));
  const auto r = dr(t, rr.table);
  CHECK(r.psi_hat == doctest::Approx(2.0));
  CHECK(r.std_error == doctest::Approx(1.0));
  CHECK(r.ci_lo == doctest::Approx(2.0 - 1.96));
  CHECK(r.ci_hi == doctest::Approx(2.0 + 1.96));
  const auto tm = tmle_linear(t, rr.table);
  CHECK(tm.psi_hat == doctest::Approx(2.0));
  CHECK(*tm.diagnostics.scale_factor == doctest::Approx(1.0));
  const auto p = perp_dr(t);
  CHECK(p.psi_hat == doctest::Approx(2.0));
  CHECK(*p.diagnostics.scale_factor == doctest::Approx(4.0));
  CHECK(*p.diagnostics.mean_bias_correction == doctest::Approx(0.25));
  const auto w = ipw(t, rr.table);
  CHECK(w.psi_hat == doctest::Approx(2.0));
  CHECK(moment_identity_diag(t, rr.table) == doctest::Approx(0.0));
  CHECK(*w.diagnostics.moment_identity_error == doctest::Approx(0.0));

  const auto rr_fn = rr_from_beta_perp(toy_nuisances(), toy_data());
  CHECK(rr_fn(1.0, Eigen::RowVectorXd::Zero(1)) == doctest::Approx(2.0));
  CHECK(rr_fn(0.0, Eigen::RowVectorXd::Zero(1)) == doctest::Approx(-2.0));
}

TEST_CASE("simple estimator cases") {
  const auto t = tabulate(toy_nuisances(), toy_data());
  AlphaTable zero{Eigen::VectorXd::Zero(2), Eigen::VectorXd::Zero(2)};
  CHECK(ipw(t, zero).psi_hat == 0.0);
  CHECK(moment_identity_diag(t, zero) == doctest::Approx(-1.0));

  // residuals all zero: DR = Direct and TMLE = Direct
  auto fit = t;
  fit.y = fit.mu;
  const auto rr = rr_from_beta_perp(fit).table;
  CHECK(dr(fit, rr).psi_hat == direct(fit).psi_hat);
  CHECK(tmle_linear(fit, rr).psi_hat == direct(fit).psi_hat);

  // constant outcome model gives a zero ATE
  const MomentFunctional ate(EstimandKind::ATE);
  const auto flat = tabulate({affine(0.0, 3.0), affine(0.0, 0.5), beta_default(ate), ate}, toy_data());
  CHECK(direct(flat).psi_hat == 0.0);

  // treated fraction q: E_n[A * 4(A - 0.5)] - 1 = 2q - 1
  Dataset three = toy_data();
  three.y = Eigen::Vector3d(1.0, 0.0, 1.0);
  three.a = Eigen::Vector3d(1.0, 0.0, 1.0);
  three.x = Eigen::MatrixXd::Zero(3, 1);
  const auto t3 = tabulate(toy_nuisances(), three);
  AlphaTable four{4.0 * (t3.a.array() - 0.5).matrix(), Eigen::VectorXd::Constant(3, 4.0)};
  CHECK(moment_identity_diag(t3, four) == doctest::Approx(2.0 * 2.0 / 3.0 - 1.0));
}

TEST_CASE("degenerate representer") {
  // beta_perp = beta + c: the moment of the difference vanishes, alpha_hat = 0
  const MomentFunctional ate(EstimandKind::ATE);
  const auto shifted = tabulate({affine(1.0, 0.0), affine(1.0, 0.3), beta_default(ate), ate}, toy_data());
  const auto rr = rr_from_beta_perp(shifted);
  CHECK(std::abs(rr.h_difference) < 1e-15);
  CHECK(rr.table.alpha.cwiseAbs().maxCoeff() < 1e-14);
  CHECK(moment_identity_diag(shifted, rr.table) == doctest::Approx(-1.0));

  const auto same = tabulate({affine(1.0, 0.0), affine(1.0, 0.0), beta_default(ate), ate}, toy_data());
  CHECK_THROWS_AS(rr_from_beta_perp(same), DegenerateError);
  CHECK_THROWS_AS(perp_dr(same), DegenerateError);
  const auto rows = estimate_all(same);
  REQUIRE(rows.size() == 5);
  CHECK(rows[0].report.has_value());
  CHECK(rows[0].report->psi_hat == doctest::Approx(1.0));
  CHECK_FALSE(rows[4].report.has_value());
  CHECK(rows[4].error.find("beta_perp") != std::string::npos);
  CHECK(rows[4].to_json().contains("error"));
}

TEST_CASE("constant shift of beta_perp keeps h_n of the difference") {
  const auto base = tabulate(toy_nuisances(0.5), toy_data());
  const auto moved = tabulate(toy_nuisances(0.6), toy_data());
  CHECK(rr_from_beta_perp(moved).h_difference == doctest::Approx(rr_from_beta_perp(base).h_difference));
  // the mean square changes with the shift, so the estimate moves as well
  CHECK(perp_dr(moved).psi_hat == doctest::Approx(1.0 + 0.2 / 0.26));
}

TEST_CASE("perp_dr, dr after reconstruction and tmle on beta - beta_perp agree") {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    const auto t = random_table(rng, 5 + trial);
    const auto p = perp_dr(t);
    const auto d = dr(t, rr_from_beta_perp(t).table);
    const AlphaTable raw{t.beta - t.beta_perp, t.m_beta - t.m_beta_perp};
    const auto tm = tmle_linear(t, raw);
    CHECK(rel(d.psi_hat, p.psi_hat) <= 1e-12);
    CHECK(rel(tm.psi_hat, p.psi_hat) <= 1e-12);
    CHECK(rel(d.std_error, p.std_error) <= 1e-12);
  }
}

TEST_CASE("tmle is invariant to rescaling alpha") {
  std::mt19937_64 rng(32);
  const auto t = random_table(rng, 40);
  const AlphaTable base{t.beta - t.beta_perp, t.m_beta - t.m_beta_perp};
  const double psi = tmle_linear(t, base).psi_hat;
  for (double c : {-2.0, 0.1, 10.0}) {
    const AlphaTable scaled{c * base.alpha, c * base.m_alpha};
    CHECK(rel(tmle_linear(t, scaled).psi_hat, psi) <= 1e-14);
  }
  CHECK_THROWS_AS(tmle_linear(t, AlphaTable{Eigen::VectorXd::Zero(40), Eigen::VectorXd::Zero(40)}), DegenerateError);
}

TEST_CASE("double robustness on a finite support") {
  const auto dist = three_strata();
  const MomentFunctional ate(EstimandKind::ATE);
  const double psi = oracle::exact_estimand(dist, induced_functional(dist, ate));
  const Eigen::VectorXd beta = dist.tabulate([](double a, const Eigen::VectorXd&) { return a; });
  const Eigen::VectorXd perp = oracle::project_orthocomplement(dist, induced_functional(dist, ate), beta);
  const Dataset rows = support_dataset(dist);

  std::mt19937_64 rng(33);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int trial = 0; trial < 10; ++trial) {
    Eigen::VectorXd noise(dist.size());
    for (Eigen::Index i = 0; i < noise.size(); ++i) noise[i] = normal(rng);
    // correct outcome model, wrong beta_perp
    auto t = tabulate({lookup(dist, dist.reg), lookup(dist, perp + noise), beta_default(ate), ate}, rows);
    t.weights = dist.probs;
    CHECK(std::abs(perp_dr(t).psi_hat - psi) <= 1e-10);
    // wrong outcome model, correct beta_perp
    t = tabulate({lookup(dist, dist.reg + noise), lookup(dist, perp), beta_default(ate), ate}, rows);
    t.weights = dist.probs;
    CHECK(std::abs(perp_dr(t).psi_hat - psi) <= 1e-10);
    // both wrong: generally biased
    t = tabulate({lookup(dist, dist.reg + noise), lookup(dist, perp + noise), beta_default(ate), ate}, rows);
    t.weights = dist.probs;
    CHECK(std::abs(perp_dr(t).psi_hat - psi) > 1e-8);
  }
}

TEST_CASE("influence-curve standard errors match the replicate spread") {
  // Y = sin(2x) + (1 + 0.5 x) A + N(0, 1), p(x) = logistic(0.8 x); true ATE = 1.
  // beta_perp = A - alpha / 4 with the true alpha; perturbed outcome model.
  std::mt19937_64 rng(34);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const int reps = 200;
  const Eigen::Index n = 500;
  Eigen::VectorXd estimates(reps), errors(reps);
  int covered = 0;
  for (int r = 0; r < reps; ++r) {
    NuisanceTable t;
    t.y.resize(n);
    t.a.resize(n);
    t.mu.resize(n);
    t.m_mu.resize(n);
    t.beta_perp.resize(n);
    t.m_beta_perp.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double x = normal(rng);
      const double p = 1.0 / (1.0 + std::exp(-0.8 * x));
      const double a = unif(rng) < p ? 1.0 : 0.0;
      const auto mu = [x](double aa) { return std::sin(2.0 * x) + (1.0 + 0.5 * x) * aa + 0.3 * std::cos(x); };
      const auto alpha = [p](double aa) { return aa / p - (1.0 - aa) / (1.0 - p); };
      t.a[i] = a;
      t.y[i] = std::sin(2.0 * x) + (1.0 + 0.5 * x) * a + normal(rng);
      t.mu[i] = mu(a);
      t.m_mu[i] = mu(1.0) - mu(0.0);
      t.beta_perp[i] = a - alpha(a) / 4.0;
      t.m_beta_perp[i] = 1.0 - (alpha(1.0) - alpha(0.0)) / 4.0;
    }
    t.beta = t.a;
    t.m_beta = Eigen::VectorXd::Ones(n);
    t.m_treatment = Eigen::VectorXd::Ones(n);
    const auto rep = perp_dr(t);
    estimates[r] = rep.psi_hat;
    errors[r] = rep.std_error;
    if (rep.ci_lo <= 1.0 && 1.0 <= rep.ci_hi) ++covered;
  }
  const double ratio = sample_sd(estimates) / errors.mean();
  CHECK(ratio >= 0.8);
  CHECK(ratio <= 1.25);
  CHECK(covered >= 0.88 * reps);
}

TEST_CASE("estimator names and json") {
  for (const auto k : all_estimators()) CHECK(estimator_from_string(to_string(k)) == k);
  CHECK_THROWS_AS(estimator_from_string("ols"), ConfigError);
  const auto t = tabulate(toy_nuisances(), toy_data());
  const auto j = perp_dr(t).to_json();
  CHECK(j.at("estimator") == "perp_dr");
  CHECK(j.at("ci95").size() == 2);
  CHECK(j.at("diagnostics").at("scale_factor").get<double>() == doctest::Approx(4.0));
}
