#include "madnet/cli.hpp"

#include "madnet/errors.hpp"
#include "madnet/oracle_suite.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <thread>

namespace madnet::cli {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

RunConfig RunConfig::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  static const std::vector<std::string> known = {"estimand", "policy",       "scenario",       "csv",
                                                 "network",  "training",     "replicates",     "seed",
                                                 "out",      "learning_rates", "estimators",   "checkpoint"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) throw ConfigError("unknown config key '" + key + "'");
  }
  RunConfig c;
  c.training = TrainConfig::binary_schedule();  // stages replaced in finalize() unless given
  try {
    if (j.contains("estimand")) c.estimand = estimand_from_string(j.at("estimand").get<std::string>());
    if (j.contains("policy")) c.policy = j.at("policy");
    if (j.contains("scenario")) c.scenario = ScenarioSpec::from_json(j.at("scenario"), ScenarioSpec{});
    if (j.contains("csv")) {
      const auto& s = j.at("csv");
      CsvSource src;
      src.path = s.at("path").get<std::string>();
      src.outcome = s.value("outcome", src.outcome);
      src.treatment = s.value("treatment", src.treatment);
      c.csv = src;
    }
    if (j.contains("network")) {
      json net = j.at("network");
      net["input_dim"] = 2;  // replaced by the data dimension at training time
      c.network = nn::MultiHeadSpec::from_json(net);
      c.network_given = true;
    }
    if (j.contains("training")) {
      c.stages_given = j.at("training").contains("stages");
      c.training = TrainConfig::from_json(j.at("training"), c.training);
    }
    c.replicates = j.value("replicates", c.replicates);
    c.seed = j.value("seed", c.seed);
    c.out = j.value("out", c.out);
    if (j.contains("learning_rates")) c.learning_rates = j.at("learning_rates").get<std::vector<double>>();
    if (j.contains("estimators")) {
      for (const auto& name : j.at("estimators")) c.estimators.push_back(estimator_from_string(name.get<std::string>()));
    }
    c.checkpoint = j.value("checkpoint", c.checkpoint);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const madnet::ParseError& e) {
    throw ConfigError(e.what());
  }
  return c;
}

json RunConfig::to_json() const {
  json j;
  j["estimand"] = to_string(resolved_estimand());
  if (policy) j["policy"] = *policy;
  if (scenario) j["scenario"] = scenario->to_json();
  if (csv) j["csv"] = {{"path", csv->path}, {"outcome", csv->outcome}, {"treatment", csv->treatment}};
  json net = network.to_json();
  net.erase("input_dim");
  j["network"] = net;
  j["training"] = training.to_json();
  j["replicates"] = replicates;
  j["seed"] = seed;
  j["out"] = out;
  j["learning_rates"] = learning_rates;
  json est = json::array();
  for (const auto k : estimators) est.push_back(to_string(k));
  j["estimators"] = est;
  if (!checkpoint.empty()) j["checkpoint"] = checkpoint;
  return j;
}

EstimandKind RunConfig::resolved_estimand() const {
  if (estimand) return *estimand;
  if (scenario) return scenario->estimand();
  throw ConfigError("no estimand given and no scenario to infer it from");
}

void RunConfig::finalize() {
  if (scenario.has_value() == csv.has_value()) throw ConfigError("exactly one of 'scenario' and 'csv' must be given");
  const EstimandKind kind = resolved_estimand();
  const bool binary = kind == EstimandKind::ATE || kind == EstimandKind::APE;
  if (scenario && scenario->binary() != binary) {
    throw ConfigError("estimand " + to_string(kind) + " does not match the treatment type of scenario " +
                      to_string(scenario->kind));
  }
  const bool needs_policy = kind == EstimandKind::APE || kind == EstimandKind::IPE;
  if (needs_policy != policy.has_value()) {
    throw ConfigError(needs_policy ? "estimand " + to_string(kind) + " needs a 'policy'"
                                   : "estimand " + to_string(kind) + " takes no 'policy'");
  }
  if (!stages_given) {
    TrainConfig schedule = binary ? TrainConfig::binary_schedule() : TrainConfig::continuous_schedule();
    training.stages = schedule.stages;
    stages_given = true;
  }
  if (replicates < 0) throw ConfigError("replicates must be >= 0");
  for (const double lr : learning_rates) {
    if (!(lr > 0.0)) throw ConfigError("learning rates must be positive");
  }
  training.validate();
}

// ---------------------------------------------------------------------------
// Replicates

ReplicateData load_replicate(const RunConfig& cfg, int replicate) {
  ReplicateData r;
  if (cfg.scenario) {
    ScenarioSpec spec = *cfg.scenario;
    spec.seed = cfg.seed + static_cast<std::uint64_t>(replicate);
    Scenario sc = generate(spec);
    r.data = std::move(sc.data);
    r.truth = sc.truth;
  } else {
    r.data = load_csv(cfg.csv->path, cfg.csv->outcome, cfg.csv->treatment);
  }
  return r;
}

MomentFunctional make_moment(const RunConfig& cfg, const Dataset& data) {
  std::optional<Policy> policy;
  if (cfg.policy) policy = Policy::from_json(*cfg.policy, data.covariate_names);
  return MomentFunctional(cfg.resolved_estimand(), policy);
}

TrainConfig replicate_training(const RunConfig& cfg, int replicate) {
  TrainConfig t = cfg.training;
  t.seed = cfg.seed + static_cast<std::uint64_t>(replicate);
  return t;
}

TrainConfig with_learning_rate(TrainConfig cfg, double first_stage_lr) {
  if (cfg.stages.empty()) return cfg;
  const double ratio = first_stage_lr / cfg.stages.front().learning_rate;
  for (auto& s : cfg.stages) s.learning_rate *= ratio;
  return cfg;
}

namespace {

ReplicateResult run_one(const RunConfig& cfg, int replicate, const TrainConfig& training, bool estimate) {
  ReplicateResult res;
  res.replicate = replicate;
  res.seed = cfg.seed + static_cast<std::uint64_t>(replicate);
  try {
    const ReplicateData rd = load_replicate(cfg, replicate);
    if (rd.truth) res.psi_true = rd.truth->psi_true;
    const MomentFunctional m = make_moment(cfg, rd.data);
    const KnownBeta beta = beta_default(m);
    const TrainedModel model = train(rd.data, cfg.network, training, m, beta);
    const Dataset val = rd.data.subset(model.validation_index);
    const EpochMetrics met =
        epoch_diagnostics(model, val, m, beta, LossParams{training.loss, training.madnet, training.bdmm});
    res.constraint_violation = met.h;
    res.moment_identity_error = met.moment_identity_error;
    res.epochs = static_cast<int>(model.log.size());
    res.log = model.log;
    if (estimate) {
      const ModelTable mt = tabulate(model, rd.data, m, beta);
      res.rows = estimate_all(mt.table, cfg.estimators.empty() ? all_estimators() : cfg.estimators, mt.alpha);
    }
    res.ok = true;
  } catch (const std::exception& e) {
    res.ok = false;
    res.error = e.what();
  }
  return res;
}

/// Calls fn(i) for i in [0, count) on up to `workers` threads.
void parallel_for(int count, int workers, const std::function<void(int)>& fn) {
  workers = std::max(1, std::min(workers, count));
  if (workers == 1) {
    for (int i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (int i = next++; i < count; i = next++) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string fmt(double v, int precision = 6) {
  if (std::isnan(v)) return "NA";
  std::ostringstream s;
  s << std::setprecision(precision) << v;
  return s.str();
}

}  // namespace

ReplicateResult run_replicate(const RunConfig& cfg, int replicate) {
  return run_one(cfg, replicate, replicate_training(cfg, replicate), true);
}

std::vector<SummaryRow> summarize(const std::vector<ReplicateResult>& reps, const std::vector<EstimatorKind>& kinds) {
  std::vector<SummaryRow> out;
  for (const auto kind : kinds) {
    SummaryRow row;
    row.kind = kind;
    std::vector<double> ae;
    int covered = 0;
    for (const auto& r : reps) {
      if (!r.ok) continue;
      for (const auto& e : r.rows) {
        if (e.kind != kind || !e.report) continue;
        ae.push_back(std::abs(e.report->psi_hat - r.psi_true));
        if (e.report->ci_lo <= r.psi_true && r.psi_true <= e.report->ci_hi) ++covered;
      }
    }
    row.completed = static_cast<int>(ae.size());
    if (!ae.empty()) {
      Eigen::Map<const Eigen::VectorXd> v(ae.data(), static_cast<Eigen::Index>(ae.size()));
      row.mean_ae = v.mean();
      row.median_ae = median(ae);
      if (ae.size() >= 2) row.se_mae = sample_sd(v) / std::sqrt(static_cast<double>(ae.size()));
      row.coverage = static_cast<double>(covered) / static_cast<double>(ae.size());
    } else {
      row.mean_ae = row.median_ae = row.coverage = std::nan("");
    }
    out.push_back(row);
  }
  return out;
}

BenchmarkResult run_benchmark(const RunConfig& cfg, int workers) {
  BenchmarkResult res;
  res.replicates.resize(static_cast<size_t>(cfg.replicates));
  parallel_for(cfg.replicates, workers, [&](int i) { res.replicates[static_cast<size_t>(i)] = run_replicate(cfg, i); });
  for (const auto& r : res.replicates) res.failed += r.ok ? 0 : 1;
  res.summary = summarize(res.replicates, cfg.estimators.empty() ? all_estimators() : cfg.estimators);
  return res;
}

int worker_count() {
  if (const char* env = std::getenv("MADNET_WORKERS")) {
    try {
      const int w = std::stoi(env);
      if (w >= 1) return w;
    } catch (const std::exception&) {
    }
    throw ConfigError(std::string("MADNET_WORKERS must be a positive integer, got '") + env + "'");
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

// ---------------------------------------------------------------------------
// Output files

void write_replicates_csv(std::ostream& out, const BenchmarkResult& result) {
  out << "replicate,seed,estimator,psi_hat,std_error,ci_lo,ci_hi,psi_true,abs_error,covered,"
         "constraint_violation,moment_identity_error,status,message\n";
  const auto old = out.precision(17);
  const auto quote = [](const std::string& s) {
    std::string q = "\"";
    for (const char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
    return q + "\"";
  };
  for (const auto& r : result.replicates) {
    if (!r.ok) {
      out << r.replicate << ',' << r.seed << ",,,,,," << r.psi_true << ",,,,," << "failed," << quote(r.error) << '\n';
      continue;
    }
    for (const auto& e : r.rows) {
      out << r.replicate << ',' << r.seed << ',' << to_string(e.kind) << ',';
      if (e.report) {
        const auto& p = *e.report;
        const bool covered = p.ci_lo <= r.psi_true && r.psi_true <= p.ci_hi;
        out << p.psi_hat << ',' << p.std_error << ',' << p.ci_lo << ',' << p.ci_hi << ',' << r.psi_true << ','
            << std::abs(p.psi_hat - r.psi_true) << ',' << (covered ? 1 : 0) << ',' << r.constraint_violation << ','
            << r.moment_identity_error << ",ok,\n";
      } else {
        out << ",,,," << r.psi_true << ",,," << r.constraint_violation << ',' << r.moment_identity_error << ",error,"
            << quote(e.error) << '\n';
      }
    }
  }
  out.precision(old);
}

void write_summary_csv(std::ostream& out, const std::vector<SummaryRow>& summary) {
  out << "estimator,completed,mean_ae,median_ae,se_mae,coverage\n";
  const auto old = out.precision(17);
  for (const auto& s : summary) {
    out << to_string(s.kind) << ',' << s.completed << ',' << fmt(s.mean_ae, 17) << ',' << fmt(s.median_ae, 17) << ','
        << (s.se_mae ? fmt(*s.se_mae, 17) : "NA") << ',' << fmt(s.coverage, 17) << '\n';
  }
  out.precision(old);
}

void write_trajectories_csv(std::ostream& out,
                            const std::vector<std::pair<double, std::vector<ReplicateResult>>>& runs) {
  out << "replicate,lr,epoch,metric,value\n";
  const auto old = out.precision(17);
  for (const auto& [lr, reps] : runs) {
    for (const auto& r : reps) {
      for (const auto& e : r.log) {
        const std::pair<const char*, double> metrics[] = {{"train_loss", e.train_loss},
                                                          {"val_loss", e.val_loss},
                                                          {"constraint_violation", e.constraint_violation},
                                                          {"moment_identity_error", e.moment_identity_error},
                                                          {"ipw_drift", e.ipw_drift},
                                                          {"lambda", e.lambda}};
        for (const auto& [name, value] : metrics) {
          out << r.replicate << ',' << lr << ',' << e.epoch << ',' << name << ',' << fmt(value, 17) << '\n';
        }
      }
    }
  }
  out.precision(old);
}

void print_estimate_table(std::ostream& out, const std::vector<EstimateRow>& rows) {
  out << std::left << std::setw(9) << "estimator" << std::right << std::setw(13) << "estimate" << std::setw(13)
      << "std_error" << std::setw(27) << "ci95" << std::setw(15) << "moment_ident" << '\n';
  for (const auto& r : rows) {
    out << std::left << std::setw(9) << to_string(r.kind) << std::right;
    if (!r.report) {
      out << "  error: " << r.error << '\n';
      continue;
    }
    const auto& p = *r.report;
    const std::string ci = "[" + fmt(p.ci_lo) + ", " + fmt(p.ci_hi) + "]";
    out << std::setw(13) << fmt(p.psi_hat) << std::setw(13) << fmt(p.std_error) << std::setw(27) << ci
        << std::setw(15)
        << (p.diagnostics.moment_identity_error ? fmt(*p.diagnostics.moment_identity_error) : std::string("-"))
        << '\n';
  }
}

// ---------------------------------------------------------------------------
// Commands

namespace {

/// Values given on the command line; each overrides the config file.
struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  bool json = false;

  std::optional<std::string> estimand, scenario, csv, outcome_col, treatment_col, loss, estimator, checkpoint;
  std::optional<long> n;
  std::optional<double> lambda_tilde, rho, delta;
  std::optional<int> replicates;
  std::vector<double> lrs;

  int cases = 200;
  bool flip_sign = false;
};

void add_common(CLI::App* cmd, Flags& f) {
  cmd->add_option("--config", f.config, "JSON run configuration");
  cmd->add_option("--seed", f.seed, "master seed (replicate i uses seed + i)");
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_flag("--json", f.json, "machine-readable output on stdout");
}

void add_run_options(CLI::App* cmd, Flags& f) {
  cmd->add_option("--estimand", f.estimand, "ATE, APE, ADE or IPE");
  cmd->add_option("--scenario", f.scenario, "SYNTH_BINARY, SYNTH_CONTINUOUS, IHDP_STYLE or BHP_STYLE");
  cmd->add_option("--n", f.n, "scenario sample size");
  cmd->add_option("--csv", f.csv, "CSV data file instead of a scenario");
  cmd->add_option("--outcome-col", f.outcome_col, "CSV outcome column");
  cmd->add_option("--treatment-col", f.treatment_col, "CSV treatment column");
  cmd->add_option("--loss", f.loss, "madnet, ad or bdmm");
  cmd->add_option("--lambda-tilde", f.lambda_tilde, "weight of |h_n(f1)|");
  cmd->add_option("--rho", f.rho, "weight of the outcome regression loss");
  cmd->add_option("--delta", f.delta, "damping weight of h_n^2 (bdmm)");
  cmd->add_option("--replicates", f.replicates, "replicate count");
  cmd->add_option("--lr", f.lrs, "first-stage learning rate (repeatable)");
  cmd->add_option("--estimator", f.estimator, "report a single estimator");
  cmd->add_option("--checkpoint", f.checkpoint, "model checkpoint (estimate)");
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config '" + path + "': " + e.what());
  }
}

RunConfig build_config(const Flags& f) {
  json j = f.config.empty() ? json::object() : read_json_file(f.config);
  if (f.scenario) {
    j.erase("csv");
    json s = j.contains("scenario") ? j["scenario"] : json::object();
    s["kind"] = *f.scenario;
    j["scenario"] = s;
  }
  if (f.n) {
    if (!j.contains("scenario")) throw ConfigError("--n needs a scenario");
    j["scenario"]["n"] = *f.n;
  }
  if (f.csv) {
    j.erase("scenario");
    json s = j.contains("csv") ? j["csv"] : json::object();
    s["path"] = *f.csv;
    j["csv"] = s;
  }
  if (f.outcome_col || f.treatment_col) {
    if (!j.contains("csv")) throw ConfigError("--outcome-col/--treatment-col need a CSV source");
    if (f.outcome_col) j["csv"]["outcome"] = *f.outcome_col;
    if (f.treatment_col) j["csv"]["treatment"] = *f.treatment_col;
  }
  if (f.estimand) j["estimand"] = *f.estimand;
  if (!j.contains("scenario") && !j.contains("csv")) j["scenario"] = json::object();
  json& t = j["training"];
  if (t.is_null()) t = json::object();
  if (f.loss) t["loss"] = *f.loss;
  if (f.lambda_tilde) t["lambda_tilde"] = *f.lambda_tilde;
  if (f.rho) t["rho"] = *f.rho;
  if (f.delta) t["bdmm"]["delta"] = *f.delta;
  if (f.seed) j["seed"] = *f.seed;
  if (f.out) j["out"] = *f.out;
  if (f.replicates) j["replicates"] = *f.replicates;
  if (!f.lrs.empty()) j["learning_rates"] = f.lrs;
  if (f.estimator) j["estimators"] = json::array({*f.estimator});
  if (f.checkpoint) j["checkpoint"] = *f.checkpoint;

  RunConfig cfg = RunConfig::from_json(j);
  cfg.finalize();
  return cfg;
}

fs::path prepare_out(const RunConfig& cfg) {
  const fs::path dir(cfg.out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw ConfigError("cannot create output directory '" + cfg.out + "'");
  const fs::path probe = dir / ".write_probe";
  {
    std::ofstream p(probe);
    if (!p) throw ConfigError("output directory '" + cfg.out + "' is not writable");
  }
  fs::remove(probe, ec);
  std::ofstream(dir / "config.json") << cfg.to_json().dump(2) << '\n';
  return dir;
}

template <class Write>
void write_file(const fs::path& path, Write&& write) {
  std::ofstream f(path);
  if (!f) throw ConfigError("cannot write '" + path.string() + "'");
  write(f);
}

int cmd_oracle(const Flags& f, std::ostream& out, std::ostream& err) {
  SuiteOptions opt;
  opt.cases = f.cases;
  if (f.config.empty()) {
    opt.seed = f.seed.value_or(0);
  } else {
    const json j = read_json_file(f.config);
    opt.seed = f.seed.value_or(j.value("seed", std::uint64_t{0}));
  }
  opt.flip_reconstruction_sign = f.flip_sign;
  if (opt.cases < 0) throw ConfigError("--cases must be >= 0");
  const SuiteReport report = run_identity_suite(opt);
  if (f.out) {
    std::error_code ec;
    fs::create_directories(*f.out, ec);
    write_file(fs::path(*f.out) / "oracle_report.json", [&](std::ostream& o) { o << report.to_json().dump(2) << '\n'; });
  }
  if (f.json) {
    out << report.to_json().dump(2) << '\n';
  } else {
    out << report.cases << " random distributions plus fixed cases, " << fmt(report.seconds, 3) << " s\n";
    out << std::left << std::setw(38) << "identity" << std::right << std::setw(14) << "max_residual" << std::setw(12)
        << "tolerance" << "  status\n";
    for (const auto& c : report.checks) {
      out << std::left << std::setw(38) << c.name << std::right << std::setw(14) << fmt(c.max_residual, 3)
          << std::setw(12) << (c.informational ? std::string("-") : fmt(c.tolerance, 3)) << "  "
          << (c.informational ? "info" : (c.pass() ? "ok" : "FAIL")) << '\n';
    }
  }
  if (const auto* bad = report.first_failure()) {
    err << "identity '" << bad->name << "' exceeds tolerance: " << bad->max_residual << " > " << bad->tolerance << '\n';
    return kFailure;
  }
  return kSuccess;
}

int cmd_train(const Flags& f, std::ostream& out, std::ostream& err) {
  const RunConfig cfg = build_config(f);
  const fs::path dir = prepare_out(cfg);
  const ReplicateData rd = load_replicate(cfg, 0);
  const MomentFunctional m = make_moment(cfg, rd.data);
  const KnownBeta beta = beta_default(m);
  const TrainConfig training = replicate_training(cfg, 0);
  const TrainedModel model = train(rd.data, cfg.network, training, m, beta);
  const EpochMetrics met = epoch_diagnostics(model, rd.data.subset(model.validation_index), m, beta,
                                             LossParams{training.loss, training.madnet, training.bdmm});
  write_file(dir / "model.json", [&](std::ostream& o) { o << model.to_json().dump() << '\n'; });
  write_file(dir / "diagnostics.csv", [&](std::ostream& o) { write_diagnostics_csv(o, model.log); });
  const json summary = {{"loss", to_string(model.loss)},
                        {"epochs", model.log.size()},
                        {"constraint_violation", met.h},
                        {"validation_loss", met.val_loss},
                        {"moment_identity_error", met.moment_identity_error},
                        {"checkpoint", (dir / "model.json").string()},
                        {"diagnostics", (dir / "diagnostics.csv").string()}};
  if (f.json) {
    out << summary.dump(2) << '\n';
  } else {
    out << "trained " << to_string(model.loss) << " for " << model.log.size() << " epochs\n"
        << "final constraint violation h_n(f1): " << fmt(met.h) << '\n'
        << "final validation loss: " << fmt(met.val_loss) << '\n'
        << "checkpoint: " << (dir / "model.json").string() << '\n';
  }
  (void)err;
  return kSuccess;
}

int cmd_estimate(const Flags& f, std::ostream& out, std::ostream& err) {
  const RunConfig cfg = build_config(f);
  const fs::path dir = prepare_out(cfg);
  const std::string ckpt = cfg.checkpoint.empty() ? (dir / "model.json").string() : cfg.checkpoint;
  std::ifstream in(ckpt);
  if (!in) throw ConfigError("cannot open checkpoint '" + ckpt + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("checkpoint '" + ckpt + "': " + e.what());
  }
  TrainedModel model = [&] {
    try {
      return TrainedModel::from_json(j);
    } catch (const Error& e) {
      throw ConfigError(std::string("checkpoint '") + ckpt + "': " + e.what());
    }
  }();
  const ReplicateData rd = load_replicate(cfg, 0);
  nn::MultiHeadSpec expected = cfg.network;
  expected.input_dim = 1 + rd.data.dim();
  if (model.net.spec().input_dim != expected.input_dim || (cfg.network_given && !(model.net.spec() == expected))) {
    throw ConfigError("checkpoint architecture " + model.net.spec().to_json().dump() + " does not match " +
                      expected.to_json().dump());
  }
  const MomentFunctional m = make_moment(cfg, rd.data);
  const KnownBeta beta = beta_default(m);
  const ModelTable mt = tabulate(model, rd.data, m, beta);
  const auto rows = estimate_all(mt.table, cfg.estimators.empty() ? all_estimators() : cfg.estimators, mt.alpha);
  json report = {{"estimand", to_string(m.kind())}, {"n", rd.data.size()}, {"checkpoint", ckpt}};
  if (rd.truth) report["psi_true"] = rd.truth->psi_true;
  report["estimates"] = json::array();
  for (const auto& r : rows) report["estimates"].push_back(r.to_json());
  write_file(dir / "estimates.json", [&](std::ostream& o) { o << report.dump(2) << '\n'; });
  if (f.json) {
    out << report.dump(2) << '\n';
  } else {
    out << to_string(m.kind()) << " on " << rd.data.size() << " rows";
    if (rd.truth) out << " (true value " << fmt(rd.truth->psi_true) << ")";
    out << '\n';
    print_estimate_table(out, rows);
  }
  (void)err;
  return kSuccess;
}

bool too_many_failures(int failed, int total) { return total > 0 && 10 * failed > total; }

int cmd_benchmark(const Flags& f, std::ostream& out, std::ostream& err) {
  RunConfig cfg = build_config(f);
  if (cfg.replicates < 1) throw ConfigError("benchmark needs at least one replicate");
  if (!cfg.scenario) throw ConfigError("benchmark needs a scenario with known ground truth");
  if (cfg.estimators.empty()) cfg.estimators = {EstimatorKind::DIRECT, EstimatorKind::IPW, EstimatorKind::PERP_DR};
  const fs::path dir = prepare_out(cfg);
  const int workers = worker_count();
  const BenchmarkResult res = run_benchmark(cfg, workers);
  write_file(dir / "benchmark_replicates.csv", [&](std::ostream& o) { write_replicates_csv(o, res); });
  write_file(dir / "benchmark_summary.csv", [&](std::ostream& o) { write_summary_csv(o, res.summary); });
  for (const auto& r : res.replicates) {
    if (!r.ok) err << "replicate " << r.replicate << " failed: " << r.error << '\n';
  }
  if (f.json) {
    json s = json::array();
    for (const auto& row : res.summary) {
      s.push_back({{"estimator", to_string(row.kind)},
                   {"completed", row.completed},
                   {"mean_ae", row.mean_ae},
                   {"median_ae", row.median_ae},
                   {"se_mae", row.se_mae ? json(*row.se_mae) : json(nullptr)},
                   {"coverage", row.coverage}});
    }
    out << json{{"replicates", cfg.replicates}, {"failed", res.failed}, {"summary", s}}.dump(2) << '\n';
  } else {
    out << cfg.replicates << " replicates of " << to_string(cfg.scenario->kind) << ", " << res.failed << " failed\n";
    out << std::left << std::setw(9) << "estimator" << std::right << std::setw(12) << "mean_ae" << std::setw(12)
        << "median_ae" << std::setw(12) << "se_mae" << std::setw(10) << "coverage" << '\n';
    for (const auto& row : res.summary) {
      out << std::left << std::setw(9) << to_string(row.kind) << std::right << std::setw(12) << fmt(row.mean_ae, 4)
          << std::setw(12) << fmt(row.median_ae, 4) << std::setw(12) << (row.se_mae ? fmt(*row.se_mae, 4) : "NA")
          << std::setw(10) << fmt(row.coverage, 3) << '\n';
    }
  }
  return too_many_failures(res.failed, cfg.replicates) ? kFailure : kSuccess;
}

int cmd_diagnose(const Flags& f, std::ostream& out, std::ostream& err) {
  const RunConfig cfg = build_config(f);
  if (cfg.replicates < 1) throw ConfigError("diagnose needs at least one replicate");
  if (cfg.learning_rates.empty()) throw ConfigError("diagnose needs at least one learning rate");
  const fs::path dir = prepare_out(cfg);
  const int n_lr = static_cast<int>(cfg.learning_rates.size());
  std::vector<std::pair<double, std::vector<ReplicateResult>>> runs;
  for (const double lr : cfg.learning_rates) runs.emplace_back(lr, std::vector<ReplicateResult>(static_cast<size_t>(cfg.replicates)));
  parallel_for(n_lr * cfg.replicates, worker_count(), [&](int k) {
    const int l = k / cfg.replicates, r = k % cfg.replicates;
    const TrainConfig t = with_learning_rate(replicate_training(cfg, r), cfg.learning_rates[static_cast<size_t>(l)]);
    runs[static_cast<size_t>(l)].second[static_cast<size_t>(r)] = run_one(cfg, r, t, false);
  });
  const fs::path file = dir / ("diagnose_" + to_string(cfg.training.loss) + ".csv");
  write_file(file, [&](std::ostream& o) { write_trajectories_csv(o, runs); });

  int failed = 0;
  json summary = json::array();
  for (const auto& [lr, reps] : runs) {
    std::vector<double> mie;
    for (const auto& r : reps) {
      if (r.ok) {
        mie.push_back(r.moment_identity_error);
      } else {
        ++failed;
        err << "replicate " << r.replicate << " (lr " << lr << ") failed: " << r.error << '\n';
      }
    }
    double mean = std::nan(""), se = std::nan("");
    if (!mie.empty()) {
      Eigen::Map<const Eigen::VectorXd> v(mie.data(), static_cast<Eigen::Index>(mie.size()));
      mean = v.mean();
      if (mie.size() >= 2) se = sample_sd(v) / std::sqrt(static_cast<double>(mie.size()));
    }
    summary.push_back({{"lr", lr}, {"completed", mie.size()}, {"mean_moment_identity_error", mean}, {"se", se}});
    if (!f.json) {
      out << "lr " << fmt(lr, 3) << ": final moment identity error " << fmt(mean, 4) << " (se " << fmt(se, 3)
          << ") over " << mie.size() << " replicates\n";
    }
  }
  if (f.json) {
    out << json{{"loss", to_string(cfg.training.loss)}, {"trajectories", file.string()}, {"summary", summary}}.dump(2)
        << '\n';
  } else {
    out << "trajectories: " << file.string() << '\n';
  }
  return too_many_failures(failed, n_lr * cfg.replicates) ? kFailure : kSuccess;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Automatic debiasing with moment-constrained learning"};
  app.require_subcommand(1);
  Flags f;
  auto* oracle = app.add_subcommand("oracle", "run the finite-distribution identity suite");
  add_common(oracle, f);
  oracle->add_option("--cases", f.cases, "random distributions to draw");
  oracle->add_flag("--inject-sign-flip", f.flip_sign, "negative control: negate the reconstructed representer")
      ->group("");
  auto* train_cmd = app.add_subcommand("train", "train one model and write a checkpoint");
  auto* estimate = app.add_subcommand("estimate", "estimate from a checkpoint");
  auto* bench = app.add_subcommand("benchmark", "replicated generate-train-estimate runs");
  auto* diag = app.add_subcommand("diagnose", "per-epoch trajectories across replicates and learning rates");
  for (auto* cmd : {train_cmd, estimate, bench, diag}) {
    add_common(cmd, f);
    add_run_options(cmd, f);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kSuccess : kUsage;
  }

  try {
    if (oracle->parsed()) return cmd_oracle(f, out, err);
    if (train_cmd->parsed()) return cmd_train(f, out, err);
    if (estimate->parsed()) return cmd_estimate(f, out, err);
    if (bench->parsed()) return cmd_benchmark(f, out, err);
    if (diag->parsed()) return cmd_diagnose(f, out, err);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const madnet::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kUsage;
}

}  // namespace madnet::cli
