#pragma once

// Point estimators of an average moment estimand (Direct, IPW, one-step DR,
// linear TMLE and the DR form built from beta - beta_perp), with
// influence-curve standard errors.

#include "madnet/dataset.hpp"
#include "madnet/moments.hpp"

#include <Eigen/Dense>
#include <json.hpp>

#include <optional>
#include <string>
#include <vector>

namespace madnet {

enum class EstimatorKind { DIRECT, IPW, DR, TMLE, PERP_DR };

std::string to_string(EstimatorKind kind);
EstimatorKind estimator_from_string(const std::string& name);
const std::vector<EstimatorKind>& all_estimators();

struct FittedNuisances {
  DifferentiableFunction mu_hat;         ///< outcome regression, original scale
  DifferentiableFunction beta_perp_hat;
  KnownBeta beta;
  MomentFunctional moment;
};

/// Nuisances evaluated once on the estimation rows. When `weights` is
/// nonempty it replaces the uniform 1/n weights of the sample mean (for
/// example population probabilities on a finite support).
struct NuisanceTable {
  Eigen::VectorXd y;
  Eigen::VectorXd a;
  Eigen::VectorXd mu, m_mu;                ///< mu_hat(Z_i), m(mu_hat, W_i)
  Eigen::VectorXd beta, m_beta;            ///< beta(Z_i), m(beta, W_i)
  Eigen::VectorXd beta_perp, m_beta_perp;  ///< beta_perp_hat(Z_i), m(beta_perp_hat, W_i)
  Eigen::VectorXd m_treatment;             ///< m(a, W_i) for f(a, x) = a
  Eigen::VectorXd weights;

  Eigen::Index size() const { return y.size(); }
  /// Weighted (or plain) mean over rows.
  double average(const Eigen::VectorXd& v) const;
  void validate() const;
};

NuisanceTable tabulate(const FittedNuisances& nuis, const Dataset& data);

/// Representer values on the table rows and their moments m(alpha_hat, W_i).
struct AlphaTable {
  Eigen::VectorXd alpha;
  Eigen::VectorXd m_alpha;
};

struct RieszFromBetaPerp {
  double h_difference = 0.0;  ///< h_n(beta - beta_perp_hat)
  double mean_square = 0.0;   ///< E_n[(beta - beta_perp_hat)^2]
  double scale = 0.0;         ///< h_difference / mean_square
  AlphaTable table;
};

/// alpha_hat = scale * (beta - beta_perp_hat), constants estimated on the
/// table rows. DegenerateError when E_n[(beta - beta_perp_hat)^2] = 0.
RieszFromBetaPerp rr_from_beta_perp(const NuisanceTable& table);

/// Function form with the constants estimated on `data`.
DifferentiableFunction rr_from_beta_perp(const FittedNuisances& nuis, const Dataset& data);

struct EstimateDiagnostics {
  std::optional<double> moment_identity_error;  ///< E_n[A alpha_hat] - h_n(A)
  std::optional<double> scale_factor;
  std::optional<double> mean_bias_correction;
};

struct EstimateReport {
  EstimatorKind kind = EstimatorKind::DIRECT;
  double psi_hat = 0.0;
  double std_error = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
  EstimateDiagnostics diagnostics;

  nlohmann::json to_json() const;
};

/// h_n(mu_hat); naive SE from the spread of m(mu_hat, W).
EstimateReport direct(const NuisanceTable& table);
/// E_n[Y alpha_hat]; naive SE from the spread of Y alpha_hat.
EstimateReport ipw(const NuisanceTable& table, const AlphaTable& alpha);
/// h_n(mu_hat) + E_n[alpha_hat (Y - mu_hat)].
EstimateReport dr(const NuisanceTable& table, const AlphaTable& alpha);
/// Fluctuation mu_hat + t alpha_hat solving E_n[alpha_hat (Y - mu_t)] = 0.
EstimateReport tmle_linear(const NuisanceTable& table, const AlphaTable& alpha);
/// DR estimator in terms of beta - beta_perp_hat.
EstimateReport perp_dr(const NuisanceTable& table);

/// E_n[A alpha_hat] - h_n(A). For ATE and ADE h_n(A) = 1.
double moment_identity_diag(const NuisanceTable& table, const AlphaTable& alpha);

/// One estimator's result or the reason it could not be computed.
struct EstimateRow {
  EstimatorKind kind = EstimatorKind::DIRECT;
  std::optional<EstimateReport> report;
  std::string error;

  nlohmann::json to_json() const;
};

/// Runs the requested estimators. IPW, DR and TMLE use `alpha` when given
/// and the representer reconstructed from beta_perp_hat otherwise.
std::vector<EstimateRow> estimate_all(const NuisanceTable& table,
                                      const std::vector<EstimatorKind>& kinds = all_estimators(),
                                      const std::optional<AlphaTable>& alpha = std::nullopt);

}  // namespace madnet
