#pragma once

// Synthetic data with known ground truth, and CSV ingestion.
//
//   SYNTH_BINARY      X ~ N(0, I), logit p(x) = s (0.8 x1 - 0.6 x2 + 0.4 x3),
//                     p clipped to [0.02, 0.98], Y = tau A + g(x) + e,
//                     g(x) = 2 sin(x1) + 0.5 x2^2 + x1 x3 + 0.5 x4.
//   IHDP_STYLE        X ~ N(0, I), same propensity family,
//                     E[Y | A=0, x] = exp(w'(x + 0.5)), E[Y | A=1, x] = v'x + omega,
//                     sparse random w, v drawn from the seed, omega set so the ATE is tau.
//   SYNTH_CONTINUOUS  A | X ~ N(m0 + b'x, sd^2) with b = s (0.6, -0.4, 0.3),
//                     Y = c1 A + c3 A^3 + g(x) + e; ADE = c1 + 3 c3 E[A^2] in closed form.
//   BHP_STYLE         A | X ~ N(m(x), sd(x)^2), m(x) = m0 + s (tanh(x1) + 0.3 x2),
//                     sd(x) = sd (0.5 + logistic(x3)); ADE by Monte Carlo.
//
// Covariate terms that refer to a missing column (d too small) are dropped.

#include "madnet/dataset.hpp"
#include "madnet/moments.hpp"

#include <Eigen/Dense>
#include <json.hpp>

#include <cstdint>
#include <iosfwd>
#include <string>

namespace madnet {

enum class ScenarioKind { SYNTH_BINARY, SYNTH_CONTINUOUS, IHDP_STYLE, BHP_STYLE };

std::string to_string(ScenarioKind kind);
ScenarioKind scenario_from_string(const std::string& name);

struct ScenarioSpec {
  ScenarioKind kind = ScenarioKind::SYNTH_BINARY;
  Eigen::Index n = 1000;
  Eigen::Index d = 10;
  std::uint64_t seed = 0;
  double tau = 1.0;                  ///< binary: average treatment effect
  double propensity_strength = 1.0;  ///< binary: logit slope; continuous: confounding slope
  double noise_sd = 1.0;
  double c1 = 1.0;  ///< continuous: linear effect
  double c3 = 0.1;  ///< continuous: cubic effect
  double treatment_mean = 0.0;
  double treatment_sd = 1.0;

  void validate() const;
  bool binary() const { return kind == ScenarioKind::SYNTH_BINARY || kind == ScenarioKind::IHDP_STYLE; }
  /// ATE for binary scenarios, ADE otherwise.
  EstimandKind estimand() const { return binary() ? EstimandKind::ATE : EstimandKind::ADE; }

  nlohmann::json to_json() const;
  /// Missing keys keep the values of `base`.
  static ScenarioSpec from_json(const nlohmann::json& j, const ScenarioSpec& base);
};

enum class TruthMethod { CLOSED_FORM, MC_ORACLE };

struct GroundTruth {
  double psi_true = 0.0;
  TruthMethod method = TruthMethod::CLOSED_FORM;
  Eigen::Index n_mc = 0;
  double mc_se = 0.0;
};

struct Scenario {
  Dataset data;
  GroundTruth truth;
  TrueNuisance nuisance;      ///< propensity (binary) or treatment score (continuous)
  DifferentiableFunction mu;  ///< E[Y | A, X]
};

Scenario generate(const ScenarioSpec& spec);
Scenario gen_binary(const ScenarioSpec& spec);
Scenario gen_continuous(const ScenarioSpec& spec);

/// Monte Carlo ADE of a continuous scenario: n_mc starts at `n_start` and
/// doubles until the standard error is at most 1% of |psi|.
GroundTruth continuous_mc_truth(const ScenarioSpec& spec, Eigen::Index n_start = 20000);

/// Reads a header-first CSV. Columns other than the outcome and treatment
/// become covariates in file order. Treatments within 1e-9 of {0, 1} are
/// snapped when every value is.
Dataset load_csv(const std::string& path, const std::string& outcome_col, const std::string& treatment_col);
Dataset read_csv(std::istream& in, const std::string& outcome_col, const std::string& treatment_col);
void write_csv(std::ostream& out, const Dataset& data, const std::string& outcome_col = "y",
               const std::string& treatment_col = "a");

}  // namespace madnet
