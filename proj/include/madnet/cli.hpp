#pragma once

// Command-line driver: run configuration, the replicate pipeline shared by
// the benchmark and diagnose commands, and the command dispatcher.

#include "madnet/estimators.hpp"
#include "madnet/learners.hpp"
#include "madnet/moments.hpp"
#include "madnet/neural.hpp"
#include "madnet/scenarios.hpp"

#include <json.hpp>

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace madnet::cli {

enum ExitCode : int { kSuccess = 0, kFailure = 1, kUsage = 2 };

struct CsvSource {
  std::string path;
  std::string outcome = "y";
  std::string treatment = "a";
};

/// Everything a command needs. JSON layout:
///
///   {
///     "estimand": "ATE",                      // defaults to the scenario's
///     "policy": {"type": "constant", "value": 1},   // APE / IPE only
///     "scenario": {"kind": "SYNTH_BINARY", "n": 1000, ...},   // or
///     "csv": {"path": "data.csv", "outcome": "y", "treatment": "a"},
///     "network": {"trunk_width": 200, "trunk_depth": 3, "head_width": 100,
///                 "head_depth": 2, "activation": "elu"},
///     "training": {"stages": [...], "loss": "madnet", "lambda_tilde": 5, ...},
///     "replicates": 20,
///     "seed": 0,
///     "out": "madnet_out",
///     "learning_rates": [1e-4, 1e-3],         // diagnose: first-stage rates
///     "estimators": ["direct", "ipw", "perp_dr"],
///     "checkpoint": "madnet_out/model.json"   // estimate
///   }
///
/// Without "training.stages" the two-stage schedule matching the estimand's
/// treatment type is used.
struct RunConfig {
  std::optional<EstimandKind> estimand;
  std::optional<nlohmann::json> policy;
  std::optional<ScenarioSpec> scenario;
  std::optional<CsvSource> csv;
  nn::MultiHeadSpec network;
  bool network_given = false;
  TrainConfig training;
  bool stages_given = false;
  int replicates = 1;
  std::uint64_t seed = 0;
  std::string out = "madnet_out";
  std::vector<double> learning_rates{1e-4, 1e-3};
  std::vector<EstimatorKind> estimators;  ///< empty: command default
  std::string checkpoint;

  static RunConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;

  /// Fills defaults that depend on other fields and checks consistency.
  /// Throws ConfigError.
  void finalize();
  EstimandKind resolved_estimand() const;
};

/// One replicate's data: generated from the scenario with seed
/// `scenario.seed + replicate`, or the CSV file.
struct ReplicateData {
  Dataset data;
  std::optional<GroundTruth> truth;
};

ReplicateData load_replicate(const RunConfig& cfg, int replicate);
MomentFunctional make_moment(const RunConfig& cfg, const Dataset& data);
/// Training configuration of one replicate, seeded with seed + replicate.
TrainConfig replicate_training(const RunConfig& cfg, int replicate);

/// Stages rescaled so the first stage runs at `first_stage_lr`; later stages
/// keep their ratio to the first.
TrainConfig with_learning_rate(TrainConfig cfg, double first_stage_lr);

/// Outcome of one benchmark replicate.
struct ReplicateResult {
  int replicate = 0;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  double psi_true = 0.0;
  double constraint_violation = 0.0;   ///< h_n(f1) on validation, final weights
  double moment_identity_error = 0.0;  ///< on validation, final weights
  int epochs = 0;
  std::vector<EstimateRow> rows;
  std::vector<EpochRecord> log;
};

ReplicateResult run_replicate(const RunConfig& cfg, int replicate);

struct SummaryRow {
  EstimatorKind kind = EstimatorKind::DIRECT;
  int completed = 0;
  double mean_ae = 0.0;
  double median_ae = 0.0;
  std::optional<double> se_mae;  ///< absent with fewer than two replicates
  double coverage = 0.0;         ///< share of CIs containing the truth
};

struct BenchmarkResult {
  std::vector<ReplicateResult> replicates;
  std::vector<SummaryRow> summary;
  int failed = 0;
};

/// Runs every replicate on `workers` threads and summarises the estimators.
BenchmarkResult run_benchmark(const RunConfig& cfg, int workers);
std::vector<SummaryRow> summarize(const std::vector<ReplicateResult>& reps,
                                  const std::vector<EstimatorKind>& kinds);

void write_replicates_csv(std::ostream& out, const BenchmarkResult& result);
void write_summary_csv(std::ostream& out, const std::vector<SummaryRow>& summary);

/// Long-format trajectories: replicate,lr,epoch,metric,value.
void write_trajectories_csv(std::ostream& out,
                            const std::vector<std::pair<double, std::vector<ReplicateResult>>>& runs);

/// Worker count from MADNET_WORKERS (default: hardware concurrency, at least 1).
int worker_count();

/// Fixed-width table of estimator rows.
void print_estimate_table(std::ostream& out, const std::vector<EstimateRow>& rows);

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace madnet::cli
