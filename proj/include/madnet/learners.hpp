#pragma once

// Losses and training for the multi-headed network: the moment-penalised
// objective, the automatic-debiasing baseline, the damped multiplier method,
// two-stage training with early stopping, and per-epoch diagnostics.

#include "madnet/dataset.hpp"
#include "madnet/estimators.hpp"
#include "madnet/moments.hpp"
#include "madnet/neural.hpp"
#include "madnet/oracle.hpp"

#include <Eigen/Dense>
#include <json.hpp>

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace madnet {

enum class LossKind { MADNET, AD, BDMM };

std::string to_string(LossKind kind);
LossKind loss_from_string(const std::string& name);

struct MadnetLossSpec {
  double lambda_tilde = 5.0;  ///< weight of |h_n(f1)|
  double rho = 1.0;           ///< weight of the outcome regression loss
  void validate() const;
};

/// Multiplier state of the damped differential multiplier method.
struct BdmmState {
  double lambda = 0.0;
  double delta = 0.0;          ///< damping weight of h_n^2
  double multiplier_lr = 0.1;  ///< ascent step on lambda
  void validate() const;
};

struct StageConfig {
  int max_epochs = 100;
  double learning_rate = 1e-4;
  int patience = 2;
  int batch_size = 64;
  double weight_decay = 1e-3;
  bool early_stopping = true;  ///< off: run all epochs and keep the final weights
};

struct TrainConfig {
  std::vector<StageConfig> stages;
  double split_fraction = 0.8;
  std::uint64_t seed = 0;
  LossKind loss = LossKind::MADNET;
  MadnetLossSpec madnet;
  BdmmState bdmm;
  double outcome_bias_learning_rate = 0.9;

  void validate() const;
  /// Fast training at 1e-4 then fine-tuning at 1e-5 (binary treatments).
  static TrainConfig binary_schedule();
  /// Fast training at 1e-3 then fine-tuning at 1e-4 (continuous treatments).
  static TrainConfig continuous_schedule();

  nlohmann::json to_json() const;
  /// Missing keys keep the values of `base`.
  static TrainConfig from_json(const nlohmann::json& j, const TrainConfig& base);
};

// ---------------------------------------------------------------------------
// Loss evaluation on per-row network outputs

/// Per-row inputs of one loss evaluation. `weight` holds the row weights of
/// the empirical mean (1/n for a sample) and `h` the weighted moment h_n(f1).
struct LossInputs {
  Eigen::VectorXd weight;
  Eigen::VectorXd beta;
  Eigen::VectorXd y;
  Eigen::VectorXd a_tilde;
  Eigen::VectorXd f1, f2, f3;  ///< outputs at the observed treatment
  double h = 0.0;
};

struct LossValue {
  double total = 0.0;
  double fit = 0.0;         ///< E_n[(beta - f1)^2] or, for AD, E_n[f1^2] - 2 h_n(f1)
  double constraint = 0.0;  ///< penalty or Lagrangian term in h_n(f1)
  double regression = 0.0;  ///< E_n[(Y - mu)^2]
  Eigen::VectorXd d_f1, d_f2, d_f3;
  double d_h = 0.0;  ///< derivative with respect to h_n(f1)
  double h = 0.0;
};

struct LossParams {
  LossKind kind = LossKind::MADNET;
  MadnetLossSpec madnet;
  BdmmState bdmm;
};

/// Value and output gradients of the selected objective. The subgradient of
/// |h| at h = 0 is taken as 0.
LossValue evaluate_loss(const LossParams& params, const LossInputs& in);

/// Min-max normalised treatment used to mix the outcome heads.
struct TreatmentScale {
  double min = 0.0;
  double max = 1.0;
  static TreatmentScale from(const Eigen::VectorXd& a);
  double operator()(double a) const { return (a - min) / (max - min); }
  Eigen::VectorXd operator()(const Eigen::VectorXd& a) const;
};

/// Loss of `net` on a batch. `y` must already be on the training scale.
/// Fills `grad` (resized as needed) with the parameter gradient when non-null.
LossValue network_loss(const nn::MultiHeadNet& net, const LossParams& params, const MomentFunctional& m,
                       const KnownBeta& beta, const TreatmentScale& scale, const Dataset& batch,
                       Eigen::VectorXd* grad);

// ---------------------------------------------------------------------------
// Tabular learner on a finite support

/// Gradient descent on a function with one free value per support point,
/// using population weights in place of the empirical mean. Only the f1
/// terms of the objective are used. BDMM also runs ascent on its multiplier
/// after every step.
struct TabularTrajectory {
  Eigen::VectorXd f;           ///< final iterate
  std::vector<double> h;       ///< h(f) before each step
  std::vector<double> lambda;  ///< multiplier after each step (BDMM)
};

TabularTrajectory tabular_descent(const oracle::FiniteDistribution& dist, const oracle::LinearFunctionalVector& ell,
                                  const Eigen::VectorXd& beta, LossParams params, const Eigen::VectorXd& f0,
                                  int steps, double learning_rate);

/// The oscillation toy problem: ATE on three covariate strata with
/// p(x) = (0.2, 0.5, 0.7), beta(a, x) = a, f started at beta, 200 steps at
/// learning rate 0.05 and multiplier step 0.5.
struct ToyProblem {
  oracle::FiniteDistribution dist;
  oracle::LinearFunctionalVector ell;
  Eigen::VectorXd beta;
  int steps = 200;
  double learning_rate = 0.05;
  double multiplier_lr = 0.5;
};
ToyProblem toy_problem();
TabularTrajectory run_toy_problem(const ToyProblem& toy, LossParams params);

// ---------------------------------------------------------------------------
// Early stopping

/// Tracks the best validation loss; improvement must be strict.
class EarlyStopping {
 public:
  explicit EarlyStopping(int patience) : patience_(patience) {}
  /// Records one epoch; returns true when it is the new best.
  bool update(double val_loss);
  bool should_stop() const { return wait_ >= patience_; }
  int best_epoch() const { return best_epoch_; }
  double best_loss() const { return best_; }

 private:
  int patience_;
  int wait_ = 0;
  int epoch_ = 0;
  int best_epoch_ = 0;
  double best_ = 0.0;
};

// ---------------------------------------------------------------------------
// Training

struct EpochRecord {
  int epoch = 0;  ///< 1-based, counted across stages
  int stage = 0;  ///< 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double constraint_violation = 0.0;   ///< signed h_n(f1) on validation
  double moment_identity_error = 0.0;  ///< E_n[A alpha_hat] - h_n(A) on validation
  double ipw_drift = 0.0;              ///< E_n[Y alpha_hat] - h_n(mu_hat) on validation
  double lambda = 0.0;                 ///< multiplier (BDMM only)
};

void write_diagnostics_csv(std::ostream& out, const std::vector<EpochRecord>& log);
std::vector<EpochRecord> read_diagnostics_csv(std::istream& in);

struct TrainedModel {
  explicit TrainedModel(nn::MultiHeadNet network) : net(std::move(network)) {}

  nn::MultiHeadNet net;
  LossKind loss = LossKind::MADNET;
  double y_scale = 1.0;
  TreatmentScale treatment;
  std::vector<EpochRecord> log;
  std::vector<Eigen::Index> train_index;
  std::vector<Eigen::Index> validation_index;

  /// mu_hat on the original outcome scale.
  DifferentiableFunction outcome() const;
  /// Output f1: beta_perp_hat (MADNET, BDMM) or alpha_hat (AD).
  DifferentiableFunction head_f1() const;

  nlohmann::json to_json() const;
  static TrainedModel from_json(const nlohmann::json& j);
};

/// Optional per-epoch observer (e.g. progress output).
using EpochCallback = std::function<void(const EpochRecord&)>;

TrainedModel train(const Dataset& data, const nn::MultiHeadSpec& net_spec, const TrainConfig& config,
                   const MomentFunctional& m, const KnownBeta& beta, const EpochCallback& on_epoch = nullptr);

/// Validation metrics for one model state; see EpochRecord.
struct EpochMetrics {
  double val_loss = 0.0;
  double h = 0.0;
  double moment_identity_error = 0.0;
  double ipw_drift = 0.0;
};

EpochMetrics epoch_diagnostics(const TrainedModel& model, const Dataset& validation, const MomentFunctional& m,
                               const KnownBeta& beta, const LossParams& params);

/// Nuisance table of a trained model on `data`. For AD models the
/// representer comes from f1 directly and is returned in `alpha`.
struct ModelTable {
  NuisanceTable table;
  std::optional<AlphaTable> alpha;
};
ModelTable tabulate(const TrainedModel& model, const Dataset& data, const MomentFunctional& m,
                    const KnownBeta& beta);

}  // namespace madnet
