#pragma once

// Exact computations on finite discrete distributions.
//
// On a finite support the inner product <f, g> = E[f(Z) g(Z)] is the weighted
// dot product sum_i w_i f_i g_i, and a linear functional h is a coefficient
// vector l with h(f) = sum_i l_i f_i. Everything here is closed form.

#include <Eigen/Dense>
#include <json.hpp>

#include <optional>
#include <utility>
#include <vector>

namespace madnet::oracle {

struct SupportPoint {
  double a = 0.0;
  Eigen::VectorXd x;
};

struct FiniteDistribution {
  std::vector<SupportPoint> support;
  Eigen::VectorXd probs;
  Eigen::VectorXd reg;  ///< mu(z_i); may be empty when no regression is attached
  std::optional<Eigen::VectorXd> noise_var;

  Eigen::Index size() const { return static_cast<Eigen::Index>(support.size()); }

  /// Positive weights summing to one, distinct support points, matching lengths.
  void validate() const;

  double inner(const Eigen::VectorXd& f, const Eigen::VectorXd& g) const;
  double norm2(const Eigen::VectorXd& f) const { return inner(f, f); }

  /// Values of a function of (a, x) on the support.
  template <class F>
  Eigen::VectorXd tabulate(F&& f) const {
    Eigen::VectorXd out(size());
    for (Eigen::Index i = 0; i < size(); ++i) {
      out[i] = f(support[static_cast<size_t>(i)].a, support[static_cast<size_t>(i)].x);
    }
    return out;
  }
};

/// Coefficients l with h(f) = sum_i l_i f(z_i).
struct LinearFunctionalVector {
  Eigen::VectorXd coeffs;

  double apply(const Eigen::VectorXd& f) const;
};

Eigen::VectorXd riesz_exact(const FiniteDistribution& dist, const LinearFunctionalVector& ell);

/// Projection of beta onto {f : h(f) = 0}.
Eigen::VectorXd project_orthocomplement(const FiniteDistribution& dist,
                                        const LinearFunctionalVector& ell,
                                        const Eigen::VectorXd& beta);

/// alpha = h(beta) / ||beta - beta_perp||^2 * (beta - beta_perp).
Eigen::VectorXd reconstruct_rr(const FiniteDistribution& dist, const LinearFunctionalVector& ell,
                               const Eigen::VectorXd& beta, const Eigen::VectorXd& beta_perp);

/// Psi = sum_i l_i mu_i.
double exact_estimand(const FiniteDistribution& dist, const LinearFunctionalVector& ell);

struct IdentityPair {
  double lhs = 0.0;
  double rhs = 0.0;
};

/// Mixed-bias factorisation of the one-step estimator's expected error.
IdentityPair verify_mixed_bias(const FiniteDistribution& dist, const LinearFunctionalVector& ell,
                               const Eigen::VectorXd& mu_hat, const Eigen::VectorXd& alpha_hat);

/// Max abs residual of mu = mu_perp + Psi / h(beta) * (beta - beta_perp).
double verify_mu_decomposition(const FiniteDistribution& dist, const LinearFunctionalVector& ell,
                               const Eigen::VectorXd& beta);

/// (h(eta), Psi) where eta is the regression of mu on beta - beta_perp.
/// Groups are formed by matching beta - beta_perp within `group_tol`.
IdentityPair verify_sufficiency(const FiniteDistribution& dist, const LinearFunctionalVector& ell,
                                const Eigen::VectorXd& beta, double group_tol = 1e-9);

/// Gauss-Hermite nodes and weights for the standard normal law (weights sum to 1).
std::pair<Eigen::VectorXd, Eigen::VectorXd> gauss_hermite(int nodes);

/// Discretisation of A | X = x_k ~ Normal(means[k], sd^2) on Gauss-Hermite
/// nodes, with covariate value x_k taken with probability x_probs[k].
/// `reg`, when given, is evaluated on the support.
FiniteDistribution gaussian_treatment_distribution(const std::vector<Eigen::VectorXd>& x_values,
                                                   const Eigen::VectorXd& x_probs,
                                                   const Eigen::VectorXd& means, double sd,
                                                   int nodes);

nlohmann::json to_json(const FiniteDistribution& dist);
FiniteDistribution distribution_from_json(const nlohmann::json& doc);

}  // namespace madnet::oracle
