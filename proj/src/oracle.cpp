#include "madnet/oracle.hpp"

#include "madnet/errors.hpp"

#include <cmath>
#include <string>

namespace madnet::oracle {

namespace {

void check_lengths(const FiniteDistribution& dist, const Eigen::VectorXd& v, const char* what) {
  if (v.size() != dist.size()) {
    throw DimensionError(std::string(what) + ": length " + std::to_string(v.size()) +
                         " does not match support size " + std::to_string(dist.size()));
  }
}

bool same_point(const SupportPoint& p, const SupportPoint& q) {
  return p.a == q.a && p.x.size() == q.x.size() && p.x == q.x;
}

}  // namespace

void FiniteDistribution::validate() const {
  if (support.empty()) throw DimensionError("finite distribution: empty support");
  check_lengths(*this, probs, "probs");
  if (reg.size() != 0) check_lengths(*this, reg, "reg");
  if (noise_var) check_lengths(*this, *noise_var, "noise_var");
  if ((probs.array() <= 0.0).any()) throw DomainError("finite distribution: weights must be positive");
  if (std::abs(probs.sum() - 1.0) > 1e-12) {
    throw DomainError("finite distribution: weights sum to " + std::to_string(probs.sum()));
  }
  const auto d = support.front().x.size();
  for (size_t i = 0; i < support.size(); ++i) {
    if (support[i].x.size() != d) throw DimensionError("finite distribution: ragged covariates");
    for (size_t j = i + 1; j < support.size(); ++j) {
      if (same_point(support[i], support[j])) {
        throw DomainError("finite distribution: duplicate support point " + std::to_string(i) +
                          "/" + std::to_string(j));
      }
    }
  }
}

double FiniteDistribution::inner(const Eigen::VectorXd& f, const Eigen::VectorXd& g) const {
  check_lengths(*this, f, "inner product");
  check_lengths(*this, g, "inner product");
  return (probs.array() * f.array() * g.array()).sum();
}

double LinearFunctionalVector::apply(const Eigen::VectorXd& f) const {
  if (f.size() != coeffs.size()) throw DimensionError("functional applied to wrong length vector");
  return coeffs.dot(f);
}

Eigen::VectorXd riesz_exact(const FiniteDistribution& dist, const LinearFunctionalVector& ell) {
  check_lengths(dist, ell.coeffs, "functional");
  return ell.coeffs.cwiseQuotient(dist.probs);
}

Eigen::VectorXd project_orthocomplement(const FiniteDistribution& dist,
                                        const LinearFunctionalVector& ell,
                                        const Eigen::VectorXd& beta) {
  check_lengths(dist, beta, "beta");
  const Eigen::VectorXd alpha = riesz_exact(dist, ell);
  const double alpha_norm2 = dist.norm2(alpha);
  if (!(alpha_norm2 > 0.0)) throw DegenerateError("functional is identically zero on the support");
  // <beta, alpha> = h(beta)
  return beta - (ell.apply(beta) / alpha_norm2) * alpha;
}

Eigen::VectorXd reconstruct_rr(const FiniteDistribution& dist, const LinearFunctionalVector& ell,
                               const Eigen::VectorXd& beta, const Eigen::VectorXd& beta_perp) {
  check_lengths(dist, beta, "beta");
  check_lengths(dist, beta_perp, "beta_perp");
  const Eigen::VectorXd diff = beta - beta_perp;
  const double denom = dist.norm2(diff);
  if (!(denom > 0.0)) throw DegenerateError("beta - beta_perp vanishes; h(beta) must be nonzero");
  return (ell.apply(beta) / denom) * diff;
}

double exact_estimand(const FiniteDistribution& dist, const LinearFunctionalVector& ell) {
  check_lengths(dist, dist.reg, "reg");
  return ell.apply(dist.reg);
}

IdentityPair verify_mixed_bias(const FiniteDistribution& dist, const LinearFunctionalVector& ell,
                               const Eigen::VectorXd& mu_hat, const Eigen::VectorXd& alpha_hat) {
  check_lengths(dist, mu_hat, "mu_hat");
  check_lengths(dist, alpha_hat, "alpha_hat");
  const Eigen::VectorXd alpha = riesz_exact(dist, ell);
  const double psi = exact_estimand(dist, ell);
  IdentityPair out;
  out.lhs = ell.apply(mu_hat) + dist.inner(alpha_hat, dist.reg - mu_hat) - psi;
  out.rhs = -dist.inner(mu_hat - dist.reg, alpha_hat - alpha);
  return out;
}

double verify_mu_decomposition(const FiniteDistribution& dist, const LinearFunctionalVector& ell,
                               const Eigen::VectorXd& beta) {
  const double h_beta = ell.apply(beta);
  if (h_beta == 0.0) throw DegenerateError("mu decomposition requires h(beta) != 0");
  const Eigen::VectorXd beta_perp = project_orthocomplement(dist, ell, beta);
  const Eigen::VectorXd mu_perp = project_orthocomplement(dist, ell, dist.reg);
  const double psi = exact_estimand(dist, ell);
  const Eigen::VectorXd residual = dist.reg - mu_perp - (psi / h_beta) * (beta - beta_perp);
  return residual.cwiseAbs().maxCoeff();
}

IdentityPair verify_sufficiency(const FiniteDistribution& dist, const LinearFunctionalVector& ell,
                                const Eigen::VectorXd& beta, double group_tol) {
  const Eigen::VectorXd diff = beta - project_orthocomplement(dist, ell, beta);
  const Eigen::Index n = dist.size();
  std::vector<Eigen::Index> group(static_cast<size_t>(n), -1);
  std::vector<Eigen::Index> leaders;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (size_t g = 0; g < leaders.size(); ++g) {
      if (std::abs(diff[i] - diff[leaders[g]]) <= group_tol) {
        group[static_cast<size_t>(i)] = static_cast<Eigen::Index>(g);
        break;
      }
    }
    if (group[static_cast<size_t>(i)] < 0) {
      group[static_cast<size_t>(i)] = static_cast<Eigen::Index>(leaders.size());
      leaders.push_back(i);
    }
  }
  Eigen::VectorXd mass = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(leaders.size()));
  Eigen::VectorXd total = Eigen::VectorXd::Zero(mass.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    mass[group[static_cast<size_t>(i)]] += dist.probs[i];
    total[group[static_cast<size_t>(i)]] += dist.probs[i] * dist.reg[i];
  }
  Eigen::VectorXd eta(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto g = group[static_cast<size_t>(i)];
    eta[i] = total[g] / mass[g];
  }
  const Eigen::VectorXd alpha = riesz_exact(dist, ell);
  return {dist.inner(alpha, eta), exact_estimand(dist, ell)};
}

std::pair<Eigen::VectorXd, Eigen::VectorXd> gauss_hermite(int nodes) {
  if (nodes < 1) throw DomainError("gauss_hermite: need at least one node");
  // Golub-Welsch on the Jacobi matrix of the probabilists' Hermite polynomials.
  Eigen::MatrixXd jacobi = Eigen::MatrixXd::Zero(nodes, nodes);
  for (int k = 1; k < nodes; ++k) {
    jacobi(k - 1, k) = jacobi(k, k - 1) = std::sqrt(static_cast<double>(k));
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(jacobi);
  Eigen::VectorXd weights = solver.eigenvectors().row(0).transpose().array().square();
  return {solver.eigenvalues(), weights / weights.sum()};
}

FiniteDistribution gaussian_treatment_distribution(const std::vector<Eigen::VectorXd>& x_values,
                                                   const Eigen::VectorXd& x_probs,
                                                   const Eigen::VectorXd& means, double sd,
                                                   int nodes) {
  if (static_cast<Eigen::Index>(x_values.size()) != x_probs.size() ||
      x_probs.size() != means.size()) {
    throw DimensionError("gaussian_treatment_distribution: mismatched covariate inputs");
  }
  if (!(sd > 0.0)) throw DomainError("gaussian_treatment_distribution: sd must be positive");
  const auto [z, w] = gauss_hermite(nodes);
  FiniteDistribution dist;
  dist.probs.resize(static_cast<Eigen::Index>(x_values.size()) * nodes);
  Eigen::Index i = 0;
  for (size_t k = 0; k < x_values.size(); ++k) {
    for (int j = 0; j < nodes; ++j, ++i) {
      dist.support.push_back({means[static_cast<Eigen::Index>(k)] + sd * z[j], x_values[k]});
      dist.probs[i] = x_probs[static_cast<Eigen::Index>(k)] * w[j];
    }
  }
  return dist;
}

nlohmann::json to_json(const FiniteDistribution& dist) {
  nlohmann::json support = nlohmann::json::array();
  for (const auto& p : dist.support) {
    nlohmann::json row = nlohmann::json::array({p.a});
    for (Eigen::Index k = 0; k < p.x.size(); ++k) row.push_back(p.x[k]);
    support.push_back(row);
  }
  nlohmann::json doc;
  doc["support"] = support;
  doc["probs"] = std::vector<double>(dist.probs.data(), dist.probs.data() + dist.probs.size());
  doc["reg"] = std::vector<double>(dist.reg.data(), dist.reg.data() + dist.reg.size());
  if (dist.noise_var) {
    doc["noise_var"] = std::vector<double>(dist.noise_var->data(),
                                           dist.noise_var->data() + dist.noise_var->size());
  }
  return doc;
}

FiniteDistribution distribution_from_json(const nlohmann::json& doc) {
  const auto as_vector = [](const nlohmann::json& j, const char* key) {
    if (!j.is_array()) throw ParseError(std::string("distribution json: '") + key + "' must be an array");
    Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
    for (size_t i = 0; i < j.size(); ++i) v[static_cast<Eigen::Index>(i)] = j[i].get<double>();
    return v;
  };
  FiniteDistribution dist;
  try {
    for (const auto& row : doc.at("support")) {
      if (!row.is_array() || row.empty()) throw ParseError("distribution json: support rows must be [a, x...]");
      SupportPoint p;
      p.a = row[0].get<double>();
      p.x.resize(static_cast<Eigen::Index>(row.size()) - 1);
      for (size_t k = 1; k < row.size(); ++k) p.x[static_cast<Eigen::Index>(k) - 1] = row[k].get<double>();
      dist.support.push_back(std::move(p));
    }
    dist.probs = as_vector(doc.at("probs"), "probs");
    if (doc.contains("reg")) dist.reg = as_vector(doc.at("reg"), "reg");
    if (doc.contains("noise_var")) dist.noise_var = as_vector(doc.at("noise_var"), "noise_var");
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("distribution json: ") + e.what());
  }
  dist.validate();
  return dist;
}

}  // namespace madnet::oracle
