#include "madnet/scenarios.hpp"

#include "madnet/errors.hpp"
#include "madnet/rng.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <random>
#include <sstream>

namespace madnet {

using Eigen::Index;

namespace {

enum Stream : std::uint64_t { kCovariates = 10, kTreatment, kNoise, kSurface, kMonteCarlo };

double logistic(double t) { return 1.0 / (1.0 + std::exp(-t)); }

/// Column j of a covariate row, or 0 when the design has fewer columns.
template <class Row>
double cov(const Row& x, Index j) {
  return j < x.size() ? x[j] : 0.0;
}

template <class Row>
double g_binary(const Row& x) {
  return 2.0 * std::sin(cov(x, 0)) + 0.5 * cov(x, 1) * cov(x, 1) + cov(x, 0) * cov(x, 2) + 0.5 * cov(x, 3);
}

template <class Row>
double g_continuous(const Row& x) {
  return std::cos(cov(x, 0)) + 0.5 * cov(x, 1) * cov(x, 1) + 0.5 * cov(x, 2);
}

Eigen::MatrixXd normal_matrix(Index rows, Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd m(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    for (Index j = 0; j < cols; ++j) m(i, j) = normal(rng);
  }
  return m;
}

std::vector<std::string> default_names(Index d) {
  std::vector<std::string> names;
  for (Index j = 0; j < d; ++j) names.push_back("x" + std::to_string(j + 1));
  return names;
}

/// Treatment law of the continuous scenarios.
struct TreatmentLaw {
  ScenarioSpec spec;

  template <class Row>
  double mean(const Row& x) const {
    const double s = spec.propensity_strength;
    if (spec.kind == ScenarioKind::BHP_STYLE) return spec.treatment_mean + s * (std::tanh(cov(x, 0)) + 0.3 * cov(x, 1));
    return spec.treatment_mean + s * (0.6 * cov(x, 0) - 0.4 * cov(x, 1) + 0.3 * cov(x, 2));
  }

  template <class Row>
  double sd(const Row& x) const {
    if (spec.kind == ScenarioKind::BHP_STYLE) return spec.treatment_sd * (0.5 + logistic(cov(x, 2)));
    return spec.treatment_sd;
  }
};

DifferentiableFunction make_mu(std::function<double(double, const Eigen::Ref<const Eigen::RowVectorXd>&)> value,
                               std::function<double(double, const Eigen::Ref<const Eigen::RowVectorXd>&)> slope) {
  return DifferentiableFunction::pointwise(std::move(value), std::move(slope));
}

}  // namespace

std::string to_string(ScenarioKind kind) {
  switch (kind) {
    case ScenarioKind::SYNTH_BINARY: return "SYNTH_BINARY";
    case ScenarioKind::SYNTH_CONTINUOUS: return "SYNTH_CONTINUOUS";
    case ScenarioKind::IHDP_STYLE: return "IHDP_STYLE";
    case ScenarioKind::BHP_STYLE: return "BHP_STYLE";
  }
  return "?";
}

ScenarioKind scenario_from_string(const std::string& name) {
  std::string up = name;
  std::transform(up.begin(), up.end(), up.begin(), [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
  for (const auto k : {ScenarioKind::SYNTH_BINARY, ScenarioKind::SYNTH_CONTINUOUS, ScenarioKind::IHDP_STYLE,
                       ScenarioKind::BHP_STYLE}) {
    if (to_string(k) == up) return k;
  }
  throw ConfigError("unknown scenario '" + name + "'");
}

void ScenarioSpec::validate() const {
  if (n < 20) throw ConfigError("scenario needs n >= 20, got " + std::to_string(n));
  if (d < 1) throw ConfigError("scenario needs d >= 1");
  if (!(noise_sd >= 0.0)) throw ConfigError("noise_sd must be >= 0");
  if (!(treatment_sd > 0.0)) throw ConfigError("treatment_sd must be > 0");
}

nlohmann::json ScenarioSpec::to_json() const {
  return {{"kind", to_string(kind)},
          {"n", n},
          {"d", d},
          {"seed", seed},
          {"tau", tau},
          {"propensity_strength", propensity_strength},
          {"noise_sd", noise_sd},
          {"c1", c1},
          {"c3", c3},
          {"treatment_mean", treatment_mean},
          {"treatment_sd", treatment_sd}};
}

ScenarioSpec ScenarioSpec::from_json(const nlohmann::json& j, const ScenarioSpec& base) {
  ScenarioSpec s = base;
  try {
    if (j.contains("kind")) s.kind = scenario_from_string(j.at("kind").get<std::string>());
    s.n = j.value("n", s.n);
    s.d = j.value("d", s.d);
    s.seed = j.value("seed", s.seed);
    s.tau = j.value("tau", s.tau);
    s.propensity_strength = j.value("propensity_strength", s.propensity_strength);
    s.noise_sd = j.value("noise_sd", s.noise_sd);
    s.c1 = j.value("c1", s.c1);
    s.c3 = j.value("c3", s.c3);
    s.treatment_mean = j.value("treatment_mean", s.treatment_mean);
    s.treatment_sd = j.value("treatment_sd", s.treatment_sd);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("scenario: ") + e.what());
  }
  s.validate();
  return s;
}

Scenario generate(const ScenarioSpec& spec) {
  return spec.binary() ? gen_binary(spec) : gen_continuous(spec);
}

Scenario gen_binary(const ScenarioSpec& spec) {
  spec.validate();
  if (!spec.binary()) throw ConfigError("gen_binary called with " + to_string(spec.kind));
  std::mt19937_64 cov_rng(derive_seed(spec.seed, kCovariates));
  std::mt19937_64 treat_rng(derive_seed(spec.seed, kTreatment));
  std::mt19937_64 noise_rng(derive_seed(spec.seed, kNoise));

  Scenario sc;
  Dataset& data = sc.data;
  data.x = normal_matrix(spec.n, spec.d, cov_rng);
  data.covariate_names = default_names(spec.d);
  const double s = spec.propensity_strength;
  auto propensity = [s](const Eigen::Ref<const Eigen::RowVectorXd>& x) {
    return std::clamp(logistic(s * (0.8 * cov(x, 0) - 0.6 * cov(x, 1) + 0.4 * cov(x, 2))), 0.02, 0.98);
  };

  if (spec.kind == ScenarioKind::SYNTH_BINARY) {
    const double tau = spec.tau;
    sc.mu = make_mu([tau](double a, const auto& x) { return tau * a + g_binary(x); },
                    [tau](double, const auto&) { return tau; });
    sc.truth = {tau, TruthMethod::CLOSED_FORM, 0, 0.0};
  } else {
    // sparse response surface drawn from the seed
    std::mt19937_64 surface_rng(derive_seed(spec.seed, kSurface));
    std::discrete_distribution<int> level({0.6, 0.1, 0.1, 0.1, 0.1});
    Eigen::VectorXd w(spec.d), v(spec.d);
    for (Index j = 0; j < spec.d; ++j) w[j] = 0.1 * level(surface_rng);
    for (Index j = 0; j < spec.d; ++j) v[j] = 0.1 * level(surface_rng);
    const double control_mean = std::exp(0.5 * w.sum() + 0.5 * w.squaredNorm());
    const double omega = spec.tau + control_mean;
    sc.mu = make_mu(
        [w, v, omega](double a, const auto& x) {
          const double mu0 = std::exp(x.dot(w.transpose()) + 0.5 * w.sum());
          const double mu1 = x.dot(v.transpose()) + omega;
          return a * mu1 + (1.0 - a) * mu0;
        },
        nullptr);
    sc.truth = {spec.tau, TruthMethod::CLOSED_FORM, 0, 0.0};
  }
  sc.nuisance.propensity = propensity;

  data.a.resize(spec.n);
  data.y.resize(spec.n);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (Index i = 0; i < spec.n; ++i) data.a[i] = unif(treat_rng) < propensity(data.x.row(i)) ? 1.0 : 0.0;
  const Eigen::VectorXd mean_y = sc.mu.values(data.a, data.x);
  for (Index i = 0; i < spec.n; ++i) data.y[i] = mean_y[i] + spec.noise_sd * normal(noise_rng);
  return sc;
}

Scenario gen_continuous(const ScenarioSpec& spec) {
  spec.validate();
  if (spec.binary()) throw ConfigError("gen_continuous called with " + to_string(spec.kind));
  std::mt19937_64 cov_rng(derive_seed(spec.seed, kCovariates));
  std::mt19937_64 treat_rng(derive_seed(spec.seed, kTreatment));
  std::mt19937_64 noise_rng(derive_seed(spec.seed, kNoise));
  const TreatmentLaw law{spec};

  Scenario sc;
  Dataset& data = sc.data;
  data.x = normal_matrix(spec.n, spec.d, cov_rng);
  data.covariate_names = default_names(spec.d);
  data.a.resize(spec.n);
  data.y.resize(spec.n);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (Index i = 0; i < spec.n; ++i) {
    const auto x = data.x.row(i);
    data.a[i] = law.mean(x) + law.sd(x) * normal(treat_rng);
  }
  const double c1 = spec.c1, c3 = spec.c3;
  sc.mu = make_mu([c1, c3](double a, const auto& x) { return c1 * a + c3 * a * a * a + g_continuous(x); },
                  [c1, c3](double a, const auto&) { return c1 + 3.0 * c3 * a * a; });
  sc.nuisance.score = [law](double a, const Eigen::Ref<const Eigen::RowVectorXd>& x) {
    const double s = law.sd(x);
    return -(a - law.mean(x)) / (s * s);
  };
  const Eigen::VectorXd mean_y = sc.mu.values(data.a, data.x);
  for (Index i = 0; i < spec.n; ++i) data.y[i] = mean_y[i] + spec.noise_sd * normal(noise_rng);

  if (spec.kind == ScenarioKind::SYNTH_CONTINUOUS) {
    // E[A^2] = m0^2 + |b|^2 + sd^2 for X ~ N(0, I); b restricted to the available columns
    const double s = spec.propensity_strength;
    const double b[3] = {0.6 * s, -0.4 * s, 0.3 * s};
    double b2 = 0.0;
    for (Index j = 0; j < std::min<Index>(3, spec.d); ++j) b2 += b[j] * b[j];
    const double ea2 = spec.treatment_mean * spec.treatment_mean + b2 + spec.treatment_sd * spec.treatment_sd;
    sc.truth = {c1 + 3.0 * c3 * ea2, TruthMethod::CLOSED_FORM, 0, 0.0};
  } else {
    sc.truth = continuous_mc_truth(spec);
  }
  return sc;
}

GroundTruth continuous_mc_truth(const ScenarioSpec& spec, Index n_start) {
  if (spec.binary()) throw ConfigError("Monte Carlo truth is defined for continuous scenarios");
  const TreatmentLaw law{spec};
  std::mt19937_64 rng(derive_seed(spec.seed, kMonteCarlo));
  std::normal_distribution<double> normal(0.0, 1.0);
  // running sums of the ADE integrand c1 + 3 c3 A^2
  double sum = 0.0, sum_sq = 0.0;
  Index drawn = 0;
  Eigen::RowVectorXd x(spec.d);
  for (Index target = std::max<Index>(n_start, 2);; target *= 2) {
    for (; drawn < target; ++drawn) {
      for (Index j = 0; j < spec.d; ++j) x[j] = normal(rng);
      const double a = law.mean(x) + law.sd(x) * normal(rng);
      const double v = spec.c1 + 3.0 * spec.c3 * a * a;
      sum += v;
      sum_sq += v * v;
    }
    const double n = static_cast<double>(drawn);
    const double psi = sum / n;
    const double var = std::max(0.0, (sum_sq - n * psi * psi) / (n - 1.0));
    const double se = std::sqrt(var / n);
    if (se <= 0.01 * std::abs(psi) || drawn >= (Index{1} << 26)) {
      if (se > 0.01 * std::abs(psi)) {
        throw NumericalError("Monte Carlo truth did not reach 1% relative error (psi near zero?)");
      }
      return {psi, TruthMethod::MC_ORACLE, drawn, se};
    }
  }
}

// ---------------------------------------------------------------------------
// CSV

namespace {

/// Splits one RFC-4180 record; quoted fields may hold commas and doubled quotes.
std::vector<std::string> split_record(const std::string& line, int row) {
  std::vector<std::string> cells;
  std::string cur;
  bool quoted = false;
  for (size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      cells.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  if (quoted) throw ParseError("csv row " + std::to_string(row) + ": unterminated quoted field");
  cells.push_back(cur);
  return cells;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

}  // namespace

Dataset load_csv(const std::string& path, const std::string& outcome_col, const std::string& treatment_col) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open csv file '" + path + "'");
  return read_csv(in, outcome_col, treatment_col);
}

Dataset read_csv(std::istream& in, const std::string& outcome_col, const std::string& treatment_col) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError("csv: missing header row");
  std::vector<std::string> header = split_record(line, 1);
  for (auto& h : header) h = trim(h);
  const auto find = [&](const std::string& name) -> Index {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw ParseError("csv: column '" + name + "' not found in header");
    return it - header.begin();
  };
  const Index yc = find(outcome_col);
  const Index ac = find(treatment_col);
  std::vector<Index> xcols;
  Dataset data;
  for (Index j = 0; j < static_cast<Index>(header.size()); ++j) {
    if (j != yc && j != ac) {
      xcols.push_back(j);
      data.covariate_names.push_back(header[static_cast<size_t>(j)]);
    }
  }

  std::vector<std::vector<double>> rows;
  int row = 1;
  int nan_count = 0;
  while (std::getline(in, line)) {
    ++row;
    if (trim(line).empty()) continue;
    const auto cells = split_record(line, row);
    if (cells.size() != header.size()) {
      throw ParseError("csv row " + std::to_string(row) + ": " + std::to_string(cells.size()) + " fields, header has " +
                       std::to_string(header.size()));
    }
    std::vector<double> vals(cells.size());
    for (size_t j = 0; j < cells.size(); ++j) {
      const std::string cell = trim(cells[j]);
      size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(cell, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (cell.empty() || used != cell.size()) {
        throw ParseError("csv row " + std::to_string(row) + ", column '" + header[j] + "': non-numeric value '" +
                         cell + "'");
      }
      if (std::isnan(v)) ++nan_count;
      vals[j] = v;
    }
    rows.push_back(std::move(vals));
  }
  if (nan_count > 0) throw ParseError("csv: " + std::to_string(nan_count) + " NaN cells; missing values are not supported");
  const auto n = static_cast<Index>(rows.size());
  data.y.resize(n);
  data.a.resize(n);
  data.x.resize(n, static_cast<Index>(xcols.size()));
  for (Index i = 0; i < n; ++i) {
    const auto& r = rows[static_cast<size_t>(i)];
    data.y[i] = r[static_cast<size_t>(yc)];
    data.a[i] = r[static_cast<size_t>(ac)];
    for (size_t k = 0; k < xcols.size(); ++k) data.x(i, static_cast<Index>(k)) = r[static_cast<size_t>(xcols[k])];
  }
  const bool near_binary = (data.a.array().abs().min((data.a.array() - 1.0).abs()) <= 1e-9).all();
  if (near_binary) data.a = round_binary(data.a);
  data.validate();
  return data;
}

void write_csv(std::ostream& out, const Dataset& data, const std::string& outcome_col, const std::string& treatment_col) {
  data.validate();
  const auto quote = [](const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
    return q + "\"";
  };
  out << quote(outcome_col) << ',' << quote(treatment_col);
  for (Index j = 0; j < data.dim(); ++j) {
    const std::string name =
        data.covariate_names.empty() ? "x" + std::to_string(j + 1) : data.covariate_names[static_cast<size_t>(j)];
    out << ',' << quote(name);
  }
  out << '\n';
  const auto old = out.precision(17);
  for (Index i = 0; i < data.size(); ++i) {
    out << data.y[i] << ',' << data.a[i];
    for (Index j = 0; j < data.dim(); ++j) out << ',' << data.x(i, j);
    out << '\n';
  }
  out.precision(old);
}

}  // namespace madnet
