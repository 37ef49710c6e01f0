#include "madnet/estimators.hpp"

#include "madnet/errors.hpp"

#include <cmath>

namespace madnet {

namespace {

constexpr double kNormalQuantile975 = 1.96;

struct Spread {
  double mean = 0.0;
  double std_error = 0.0;
};

/// Mean of the per-row influence values and its standard error. With uniform
/// weights this is sd(phi) / sqrt(n), sd using the n-1 denominator.
Spread spread(const NuisanceTable& t, const Eigen::VectorXd& phi) {
  const Eigen::Index n = phi.size();
  Spread s;
  if (t.weights.size() == 0) {
    s.mean = phi.mean();
    s.std_error = n > 1 ? sample_sd(phi) / std::sqrt(static_cast<double>(n)) : 0.0;
    return s;
  }
  const Eigen::VectorXd& w = t.weights;
  s.mean = w.dot(phi);
  const double sum_w2 = w.squaredNorm();
  if (sum_w2 < 1.0 - 1e-15) {
    const double var = w.dot((phi.array() - s.mean).square().matrix()) / (1.0 - sum_w2);
    s.std_error = std::sqrt(var * sum_w2);
  }
  return s;
}

EstimateReport make_report(EstimatorKind kind, double psi, double se) {
  EstimateReport r;
  r.kind = kind;
  r.psi_hat = psi;
  r.std_error = se;
  r.ci_lo = psi - kNormalQuantile975 * se;
  r.ci_hi = psi + kNormalQuantile975 * se;
  return r;
}

void check_alpha(const NuisanceTable& t, const AlphaTable& alpha) {
  if (alpha.alpha.size() != t.size() || alpha.m_alpha.size() != t.size()) {
    throw DimensionError("representer table has " + std::to_string(alpha.alpha.size()) + " rows, expected " +
                         std::to_string(t.size()));
  }
}

Eigen::VectorXd residual(const NuisanceTable& t) { return t.y - t.mu; }

}  // namespace

std::string to_string(EstimatorKind kind) {
  switch (kind) {
    case EstimatorKind::DIRECT: return "direct";
    case EstimatorKind::IPW: return "ipw";
    case EstimatorKind::DR: return "dr";
    case EstimatorKind::TMLE: return "tmle";
    case EstimatorKind::PERP_DR: return "perp_dr";
  }
  return "?";
}

EstimatorKind estimator_from_string(const std::string& name) {
  for (const auto k : all_estimators()) {
    if (to_string(k) == name) return k;
  }
  throw ConfigError("unknown estimator '" + name + "' (expected direct, ipw, dr, tmle or perp_dr)");
}

const std::vector<EstimatorKind>& all_estimators() {
  static const std::vector<EstimatorKind> kinds = {EstimatorKind::DIRECT, EstimatorKind::IPW, EstimatorKind::DR,
                                                   EstimatorKind::TMLE, EstimatorKind::PERP_DR};
  return kinds;
}

double NuisanceTable::average(const Eigen::VectorXd& v) const {
  if (v.size() == 0) throw DomainError("average over an empty table");
  return weights.size() ? weights.dot(v) : v.mean();
}

void NuisanceTable::validate() const {
  const Eigen::Index n = y.size();
  if (n == 0) throw DomainError("empty estimation table");
  for (const auto* v : {&a, &mu, &m_mu, &beta, &m_beta, &beta_perp, &m_beta_perp, &m_treatment}) {
    if (v->size() != n) throw DimensionError("estimation table columns have unequal lengths");
  }
  if (weights.size() != 0 && weights.size() != n) throw DimensionError("estimation weights have the wrong length");
}

NuisanceTable tabulate(const FittedNuisances& nuis, const Dataset& data) {
  data.validate();
  NuisanceTable t;
  t.y = data.y;
  t.a = data.a;
  t.mu = nuis.mu_hat.values(data.a, data.x);
  t.m_mu = moment_values(nuis.moment, nuis.mu_hat, data);
  t.beta = nuis.beta.beta.values(data.a, data.x);
  t.m_beta = moment_values(nuis.moment, nuis.beta.beta, data);
  t.beta_perp = nuis.beta_perp_hat.values(data.a, data.x);
  t.m_beta_perp = moment_values(nuis.moment, nuis.beta_perp_hat, data);
  const DifferentiableFunction treatment(
      [](const Eigen::VectorXd& a, const Eigen::MatrixXd&) { return a; },
      [](const Eigen::VectorXd& a, const Eigen::MatrixXd&) { return Eigen::VectorXd::Ones(a.size()).eval(); });
  t.m_treatment = moment_values(nuis.moment, treatment, data);
  return t;
}

RieszFromBetaPerp rr_from_beta_perp(const NuisanceTable& t) {
  t.validate();
  RieszFromBetaPerp r;
  const Eigen::VectorXd diff = t.beta - t.beta_perp;
  r.h_difference = t.average(t.m_beta - t.m_beta_perp);
  r.mean_square = t.average(diff.cwiseAbs2());
  if (!(r.mean_square > 0.0)) {
    throw DegenerateError("E_n[(beta - beta_perp_hat)^2] = 0: the fitted beta_perp equals beta");
  }
  r.scale = r.h_difference / r.mean_square;
  r.table.alpha = r.scale * diff;
  r.table.m_alpha = r.scale * (t.m_beta - t.m_beta_perp);
  return r;
}

DifferentiableFunction rr_from_beta_perp(const FittedNuisances& nuis, const Dataset& data) {
  const double scale = rr_from_beta_perp(tabulate(nuis, data)).scale;
  const auto beta = nuis.beta.beta;
  const auto perp = nuis.beta_perp_hat;
  return DifferentiableFunction(
      [=](const Eigen::VectorXd& a, const Eigen::MatrixXd& x) {
        return Eigen::VectorXd(scale * (beta.values(a, x) - perp.values(a, x)));
      },
      [=](const Eigen::VectorXd& a, const Eigen::MatrixXd& x) {
        return Eigen::VectorXd(scale * (beta.derivatives(a, x) - perp.derivatives(a, x)));
      });
}

double moment_identity_diag(const NuisanceTable& t, const AlphaTable& alpha) {
  check_alpha(t, alpha);
  return t.average(t.a.cwiseProduct(alpha.alpha)) - t.average(t.m_treatment);
}

EstimateReport direct(const NuisanceTable& t) {
  t.validate();
  const Spread s = spread(t, t.m_mu);
  return make_report(EstimatorKind::DIRECT, s.mean, s.std_error);
}

EstimateReport ipw(const NuisanceTable& t, const AlphaTable& alpha) {
  t.validate();
  check_alpha(t, alpha);
  const Spread s = spread(t, t.y.cwiseProduct(alpha.alpha));
  auto r = make_report(EstimatorKind::IPW, s.mean, s.std_error);
  r.diagnostics.moment_identity_error = moment_identity_diag(t, alpha);
  return r;
}

EstimateReport dr(const NuisanceTable& t, const AlphaTable& alpha) {
  t.validate();
  check_alpha(t, alpha);
  const Eigen::VectorXd correction = alpha.alpha.cwiseProduct(residual(t));
  const Spread s = spread(t, t.m_mu + correction);
  auto r = make_report(EstimatorKind::DR, s.mean, s.std_error);
  r.diagnostics.moment_identity_error = moment_identity_diag(t, alpha);
  r.diagnostics.mean_bias_correction = t.average(correction);
  return r;
}

EstimateReport tmle_linear(const NuisanceTable& t, const AlphaTable& alpha) {
  t.validate();
  check_alpha(t, alpha);
  const double alpha_sq = t.average(alpha.alpha.cwiseAbs2());
  if (!(alpha_sq > 0.0)) throw DegenerateError("TMLE: E_n[alpha_hat^2] = 0");
  const Eigen::VectorXd res = residual(t);
  const double score = t.average(alpha.alpha.cwiseProduct(res));
  const double step = score / alpha_sq;
  // targeted outcome model mu* = mu + step * alpha
  const Eigen::VectorXd res_star = res - step * alpha.alpha;
  const double remaining = t.average(alpha.alpha.cwiseProduct(res_star));
  if (std::abs(remaining) > 1e-10 * std::max(1.0, std::abs(score))) {
    throw NumericalError("TMLE: targeting score not solved (residual " + std::to_string(remaining) + ")");
  }
  const Eigen::VectorXd m_star = t.m_mu + step * alpha.m_alpha;
  const double psi = t.average(t.m_mu) + t.average(alpha.m_alpha) / alpha_sq * score;
  const Spread s = spread(t, m_star + alpha.alpha.cwiseProduct(res_star));
  auto r = make_report(EstimatorKind::TMLE, psi, s.std_error);
  r.diagnostics.moment_identity_error = moment_identity_diag(t, alpha);
  r.diagnostics.scale_factor = t.average(alpha.m_alpha) / alpha_sq;
  r.diagnostics.mean_bias_correction = score;
  return r;
}

EstimateReport perp_dr(const NuisanceTable& t) {
  const RieszFromBetaPerp rr = rr_from_beta_perp(t);
  const Eigen::VectorXd res = residual(t);
  const double unscaled = t.average((t.beta - t.beta_perp).cwiseProduct(res));
  const double psi = t.average(t.m_mu) + rr.scale * unscaled;
  const Spread s = spread(t, t.m_mu + rr.table.alpha.cwiseProduct(res));
  auto r = make_report(EstimatorKind::PERP_DR, psi, s.std_error);
  r.diagnostics.moment_identity_error = moment_identity_diag(t, rr.table);
  r.diagnostics.scale_factor = rr.scale;
  r.diagnostics.mean_bias_correction = unscaled;
  return r;
}

nlohmann::json EstimateReport::to_json() const {
  nlohmann::json j = {{"estimator", to_string(kind)},
                      {"psi_hat", psi_hat},
                      {"std_error", std_error},
                      {"ci95", {ci_lo, ci_hi}}};
  nlohmann::json d = nlohmann::json::object();
  if (diagnostics.moment_identity_error) d["moment_identity_error"] = *diagnostics.moment_identity_error;
  if (diagnostics.scale_factor) d["scale_factor"] = *diagnostics.scale_factor;
  if (diagnostics.mean_bias_correction) d["mean_bias_correction"] = *diagnostics.mean_bias_correction;
  j["diagnostics"] = d;
  return j;
}

nlohmann::json EstimateRow::to_json() const {
  if (report) return report->to_json();
  return {{"estimator", to_string(kind)}, {"error", error}};
}

std::vector<EstimateRow> estimate_all(const NuisanceTable& t, const std::vector<EstimatorKind>& kinds,
                                      const std::optional<AlphaTable>& alpha) {
  std::optional<AlphaTable> rr = alpha;
  std::string rr_error;
  if (!rr) {
    try {
      rr = rr_from_beta_perp(t).table;
    } catch (const Error& e) {
      rr_error = e.what();
    }
  }
  std::vector<EstimateRow> rows;
  for (const auto kind : kinds) {
    EstimateRow row;
    row.kind = kind;
    try {
      switch (kind) {
        case EstimatorKind::DIRECT: row.report = direct(t); break;
        case EstimatorKind::PERP_DR: row.report = perp_dr(t); break;
        default:
          if (!rr) throw DegenerateError(rr_error);
          row.report = kind == EstimatorKind::IPW ? ipw(t, *rr) : kind == EstimatorKind::DR ? dr(t, *rr)
                                                                                           : tmle_linear(t, *rr);
      }
    } catch (const Error& e) {
      row.error = e.what();
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace madnet
