#include "madnet/moments.hpp"

#include "madnet/errors.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace madnet {

std::string to_string(EstimandKind kind) {
  switch (kind) {
    case EstimandKind::ATE: return "ATE";
    case EstimandKind::APE: return "APE";
    case EstimandKind::ADE: return "ADE";
    case EstimandKind::IPE: return "IPE";
  }
  return "?";
}

EstimandKind estimand_from_string(const std::string& name) {
  std::string upper = name;
  std::transform(upper.begin(), upper.end(), upper.begin(), [](unsigned char c) { return std::toupper(c); });
  if (upper == "ATE") return EstimandKind::ATE;
  if (upper == "APE") return EstimandKind::APE;
  if (upper == "ADE") return EstimandKind::ADE;
  if (upper == "IPE") return EstimandKind::IPE;
  throw ConfigError("unknown estimand '" + name + "' (expected ATE, APE, ADE or IPE)");
}

// ---------------------------------------------------------------------------
// Policy

Policy::Policy(Fn fn, nlohmann::json description)
    : fn_(std::move(fn)), description_(std::move(description)) {}

Policy Policy::constant(double value) {
  return Policy([value](const Eigen::Ref<const Eigen::RowVectorXd>&) { return value; },
                {{"type", "constant"}, {"value", value}});
}

Policy Policy::threshold(const std::string& column, Eigen::Index index, double cutoff, double above,
                         double below) {
  return Policy(
      [=](const Eigen::Ref<const Eigen::RowVectorXd>& x) {
        if (index >= x.size()) throw DimensionError("policy: covariate index out of range");
        return x[index] > cutoff ? above : below;
      },
      {{"type", "threshold"}, {"column", column}, {"cutoff", cutoff}, {"above", above}, {"below", below}});
}

Policy Policy::table(const std::string& column, Eigen::Index index,
                     std::vector<std::pair<double, double>> entries, double fallback) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& [k, v] : entries) rows.push_back({k, v});
  std::map<double, double> lookup(entries.begin(), entries.end());
  return Policy(
      [=](const Eigen::Ref<const Eigen::RowVectorXd>& x) {
        if (index >= x.size()) throw DimensionError("policy: covariate index out of range");
        const auto it = lookup.find(x[index]);
        return it == lookup.end() ? fallback : it->second;
      },
      {{"type", "table"}, {"column", column}, {"entries", rows}, {"fallback", fallback}});
}

Policy Policy::from_json(const nlohmann::json& j, const std::vector<std::string>& covariates) {
  const auto column_index = [&](const std::string& name) -> Eigen::Index {
    const auto it = std::find(covariates.begin(), covariates.end(), name);
    if (it == covariates.end()) throw ConfigError("policy: unknown covariate '" + name + "'");
    return static_cast<Eigen::Index>(it - covariates.begin());
  };
  try {
    const auto type = j.at("type").get<std::string>();
    if (type == "constant") return constant(j.at("value").get<double>());
    if (type == "threshold") {
      const auto col = j.at("column").get<std::string>();
      return threshold(col, column_index(col), j.at("cutoff").get<double>(), j.value("above", 1.0),
                       j.value("below", 0.0));
    }
    if (type == "table") {
      const auto col = j.at("column").get<std::string>();
      std::vector<std::pair<double, double>> entries;
      for (const auto& row : j.at("entries")) entries.emplace_back(row.at(0).get<double>(), row.at(1).get<double>());
      return table(col, column_index(col), std::move(entries), j.value("fallback", 0.0));
    }
    throw ConfigError("policy: unknown type '" + type + "'");
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("policy: ") + e.what());
  }
}

Eigen::VectorXd Policy::evaluate(const Eigen::MatrixXd& x) const {
  Eigen::VectorXd out(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) out[i] = fn_(x.row(i));
  return out;
}

// ---------------------------------------------------------------------------
// MomentFunctional / DifferentiableFunction

MomentFunctional::MomentFunctional(EstimandKind kind, std::optional<Policy> policy)
    : kind_(kind), policy_(std::move(policy)) {
  const bool wants_policy = kind == EstimandKind::APE || kind == EstimandKind::IPE;
  if (wants_policy && !policy_) throw ConfigError(to_string(kind) + " requires a policy");
  if (!wants_policy && policy_) throw ConfigError(to_string(kind) + " does not take a policy");
}

DifferentiableFunction::DifferentiableFunction(BatchFn value, BatchFn derivative)
    : value_(std::move(value)), derivative_(std::move(derivative)) {}

DifferentiableFunction DifferentiableFunction::pointwise(PointFn value, PointFn derivative) {
  const auto lift = [](PointFn fn) -> BatchFn {
    if (!fn) return nullptr;
    return [fn](const Eigen::VectorXd& a, const Eigen::MatrixXd& x) {
      Eigen::VectorXd out(a.size());
      for (Eigen::Index i = 0; i < a.size(); ++i) out[i] = fn(a[i], x.row(i));
      return out;
    };
  };
  return DifferentiableFunction(lift(std::move(value)), lift(std::move(derivative)));
}

Eigen::VectorXd DifferentiableFunction::values(const Eigen::VectorXd& a, const Eigen::MatrixXd& x) const {
  if (!value_) throw ConfigError("function has no evaluator");
  if (a.size() != x.rows()) throw DimensionError("function evaluation: a and x row counts differ");
  return value_(a, x);
}

Eigen::VectorXd DifferentiableFunction::derivatives(const Eigen::VectorXd& a, const Eigen::MatrixXd& x) const {
  if (!derivative_) {
    throw ConfigError("function has no treatment-derivative evaluator (required by ADE/IPE moments)");
  }
  if (a.size() != x.rows()) throw DimensionError("function evaluation: a and x row counts differ");
  return derivative_(a, x);
}

double DifferentiableFunction::operator()(double a, const Eigen::RowVectorXd& x) const {
  return values(Eigen::VectorXd::Constant(1, a), x)[0];
}

double DifferentiableFunction::derivative(double a, const Eigen::RowVectorXd& x) const {
  return derivatives(Eigen::VectorXd::Constant(1, a), x)[0];
}

DifferentiableFunction DifferentiableFunction::combine(double c1, const DifferentiableFunction& f,
                                                       double c2, const DifferentiableFunction& g) {
  BatchFn value = [=](const Eigen::VectorXd& a, const Eigen::MatrixXd& x) {
    return Eigen::VectorXd(c1 * f.values(a, x) + c2 * g.values(a, x));
  };
  BatchFn deriv;
  if (f.has_derivative() && g.has_derivative()) {
    deriv = [=](const Eigen::VectorXd& a, const Eigen::MatrixXd& x) {
      return Eigen::VectorXd(c1 * f.derivatives(a, x) + c2 * g.derivatives(a, x));
    };
  }
  return DifferentiableFunction(std::move(value), std::move(deriv));
}

// ---------------------------------------------------------------------------
// Moments

Eigen::VectorXd round_binary(const Eigen::VectorXd& a, double tol) {
  Eigen::VectorXd out(a.size());
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const double r = std::round(a[i]);
    if ((r != 0.0 && r != 1.0) || std::abs(a[i] - r) > tol) {
      throw DomainError("treatment value " + std::to_string(a[i]) + " at row " + std::to_string(i) +
                        " is not binary");
    }
    out[i] = r;
  }
  return out;
}

std::vector<MomentTerm> moment_terms(const MomentFunctional& m, const Eigen::VectorXd& a,
                                     const Eigen::MatrixXd& x) {
  const Eigen::Index n = a.size();
  if (x.rows() != n) throw DimensionError("moment terms: a and x row counts differ");
  if (m.binary_treatment()) {
    for (Eigen::Index i = 0; i < n; ++i) {
      if (a[i] != 0.0 && a[i] != 1.0) {
        throw DomainError(to_string(m.kind()) + " needs binary treatment; got a=" +
                          std::to_string(a[i]) + " at row " + std::to_string(i));
      }
    }
  }
  const Eigen::VectorXd ones = Eigen::VectorXd::Ones(n);
  switch (m.kind()) {
    case EstimandKind::ATE:
      return {{EvalPoint::Treated, false, ones}, {EvalPoint::Control, false, -ones}};
    case EstimandKind::APE: {
      const Eigen::VectorXd pi = m.policy()->evaluate(x);
      for (Eigen::Index i = 0; i < n; ++i) {
        if (pi[i] != 0.0 && pi[i] != 1.0) throw DomainError("APE policy must take values in {0,1}");
      }
      return {{EvalPoint::Treated, false, pi}, {EvalPoint::Control, false, ones - pi}};
    }
    case EstimandKind::ADE:
      return {{EvalPoint::Observed, true, ones}};
    case EstimandKind::IPE: {
      const Eigen::VectorXd pi = m.policy()->evaluate(x);
      if ((pi.array().abs() > 1.0).any()) throw DomainError("IPE policy must take values in [-1,1]");
      return {{EvalPoint::Observed, true, pi}};
    }
  }
  return {};
}

namespace {

Eigen::VectorXd point_treatments(EvalPoint point, const Eigen::VectorXd& a) {
  switch (point) {
    case EvalPoint::Treated: return Eigen::VectorXd::Ones(a.size());
    case EvalPoint::Control: return Eigen::VectorXd::Zero(a.size());
    case EvalPoint::Observed: break;
  }
  return a;
}

Eigen::VectorXd moment_columns(const MomentFunctional& m, const DifferentiableFunction& f,
                               const Eigen::VectorXd& a, const Eigen::MatrixXd& x) {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(a.size());
  for (const auto& term : moment_terms(m, a, x)) {
    const Eigen::VectorXd at = point_treatments(term.point, a);
    const Eigen::VectorXd v = term.derivative ? f.derivatives(at, x) : f.values(at, x);
    out += term.weight.cwiseProduct(v);
  }
  return out;
}

}  // namespace

double moment_apply(const MomentFunctional& m, const DifferentiableFunction& f, const Observation& w) {
  Eigen::MatrixXd x = w.x;
  return moment_columns(m, f, Eigen::VectorXd::Constant(1, w.a), x)[0];
}

Eigen::VectorXd moment_values(const MomentFunctional& m, const DifferentiableFunction& f,
                              const Dataset& data) {
  return moment_columns(m, f, data.a, data.x);
}

double empirical_moment(const MomentFunctional& m, const DifferentiableFunction& f, const Dataset& data) {
  if (data.size() == 0) throw DomainError("empirical moment of an empty dataset");
  return moment_values(m, f, data).mean();
}

KnownBeta beta_default(const MomentFunctional& m) {
  const auto identity = DifferentiableFunction(
      [](const Eigen::VectorXd& a, const Eigen::MatrixXd&) { return a; },
      [](const Eigen::VectorXd& a, const Eigen::MatrixXd&) { return Eigen::VectorXd::Ones(a.size()).eval(); });
  switch (m.kind()) {
    case EstimandKind::ATE:
    case EstimandKind::ADE:
      return {identity, 1.0};
    case EstimandKind::APE: {
      const Policy pi = *m.policy();
      return {DifferentiableFunction(
                  [pi](const Eigen::VectorXd& a, const Eigen::MatrixXd& x) {
                    return Eigen::VectorXd(a.array() + 1.0 - pi.evaluate(x).array());
                  },
                  [](const Eigen::VectorXd& a, const Eigen::MatrixXd&) {
                    return Eigen::VectorXd::Ones(a.size()).eval();
                  }),
              1.0};
    }
    case EstimandKind::IPE: {
      const Policy pi = *m.policy();
      const auto inverse = [pi](const Eigen::MatrixXd& x) {
        Eigen::VectorXd p = pi.evaluate(x);
        for (Eigen::Index i = 0; i < p.size(); ++i) {
          if (p[i] == 0.0) {
            throw DomainError("IPE beta a/pi(x) undefined where pi(x) = 0 (row " + std::to_string(i) +
                              "); use the zero-extended beta instead");
          }
        }
        return Eigen::VectorXd(p.cwiseInverse());
      };
      return {DifferentiableFunction(
                  [inverse](const Eigen::VectorXd& a, const Eigen::MatrixXd& x) {
                    return Eigen::VectorXd(a.cwiseProduct(inverse(x)));
                  },
                  [inverse](const Eigen::VectorXd&, const Eigen::MatrixXd& x) { return inverse(x); }),
              1.0};
    }
  }
  throw ConfigError("unknown estimand");
}

KnownBeta beta_ipe_zero_extended(const MomentFunctional& m, const Dataset& data) {
  if (m.kind() != EstimandKind::IPE) throw ConfigError("zero-extended beta applies to IPE only");
  if (data.size() == 0) throw DomainError("zero-extended beta: empty dataset");
  const Policy pi = *m.policy();
  const auto inverse = [pi](const Eigen::MatrixXd& x) {
    Eigen::VectorXd p = pi.evaluate(x);
    for (Eigen::Index i = 0; i < p.size(); ++i) p[i] = p[i] == 0.0 ? 0.0 : 1.0 / p[i];
    return p;
  };
  const Eigen::VectorXd p = pi.evaluate(data.x);
  const double nonzero = static_cast<double>((p.array() != 0.0).count()) / static_cast<double>(p.size());
  if (nonzero == 0.0) throw DegenerateError("zero-extended beta: policy is zero on every row");
  return {DifferentiableFunction(
              [inverse](const Eigen::VectorXd& a, const Eigen::MatrixXd& x) {
                return Eigen::VectorXd(a.cwiseProduct(inverse(x)));
              },
              [inverse](const Eigen::VectorXd&, const Eigen::MatrixXd& x) { return inverse(x); }),
          nonzero};
}

DifferentiableFunction rr_closed_form(const MomentFunctional& m, const TrueNuisance& nuisance) {
  const auto positive = [](double p) {
    if (!(p > 0.0 && p < 1.0)) throw DomainError("positivity violation: p(x) = " + std::to_string(p));
    return p;
  };
  switch (m.kind()) {
    case EstimandKind::ATE: {
      if (!nuisance.propensity) throw ConfigError("ATE closed-form RR needs the propensity");
      auto prop = nuisance.propensity;
      return DifferentiableFunction::pointwise([prop, positive](double a, const auto& x) {
        const double p = positive(prop(x));
        return (a - p) / (p * (1.0 - p));
      });
    }
    case EstimandKind::APE: {
      if (!nuisance.propensity) throw ConfigError("APE closed-form RR needs the propensity");
      auto prop = nuisance.propensity;
      const Policy pi = *m.policy();
      return DifferentiableFunction::pointwise([prop, pi, positive](double a, const auto& x) {
        const double p = positive(prop(x));
        const double target = pi(x);
        return (target * (a - p) + p * (1.0 - a)) / (p * (1.0 - p));
      });
    }
    case EstimandKind::ADE: {
      if (!nuisance.score) throw ConfigError("ADE closed-form RR needs the density score");
      auto score = nuisance.score;
      return DifferentiableFunction::pointwise([score](double a, const auto& x) { return -score(a, x); });
    }
    case EstimandKind::IPE: {
      if (!nuisance.score) throw ConfigError("IPE closed-form RR needs the density score");
      auto score = nuisance.score;
      const Policy pi = *m.policy();
      return DifferentiableFunction::pointwise(
          [score, pi](double a, const auto& x) { return -pi(x) * score(a, x); });
    }
  }
  throw ConfigError("unknown estimand");
}

oracle::LinearFunctionalVector induced_functional(const oracle::FiniteDistribution& dist,
                                                  const MomentFunctional& m) {
  dist.validate();
  const Eigen::Index n = dist.size();
  const Eigen::Index d = dist.support.front().x.size();
  Eigen::VectorXd a(n);
  Eigen::MatrixXd x(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    a[i] = dist.support[static_cast<size_t>(i)].a;
    x.row(i) = dist.support[static_cast<size_t>(i)].x.transpose();
  }

  // Support points sharing a covariate value.
  std::vector<std::vector<Eigen::Index>> groups;
  std::vector<Eigen::Index> group_of(static_cast<size_t>(n), -1);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (size_t g = 0; g < groups.size(); ++g) {
      if (x.row(groups[g].front()) == x.row(i)) {
        groups[g].push_back(i);
        group_of[static_cast<size_t>(i)] = static_cast<Eigen::Index>(g);
        break;
      }
    }
    if (group_of[static_cast<size_t>(i)] < 0) {
      group_of[static_cast<size_t>(i)] = static_cast<Eigen::Index>(groups.size());
      groups.push_back({i});
    }
  }
  const auto find_point = [&](Eigen::Index j, double target) {
    for (Eigen::Index i : groups[static_cast<size_t>(group_of[static_cast<size_t>(j)])]) {
      if (a[i] == target) return i;
    }
    throw DomainError("moment needs f at a=" + std::to_string(target) +
                      " but that point is not in the support");
  };

  Eigen::VectorXd ell = Eigen::VectorXd::Zero(n);
  for (const auto& term : moment_terms(m, a, x)) {
    for (Eigen::Index j = 0; j < n; ++j) {
      const double w = dist.probs[j] * term.weight[j];
      if (w == 0.0) continue;
      if (!term.derivative) {
        const Eigen::Index i = term.point == EvalPoint::Treated   ? find_point(j, 1.0)
                               : term.point == EvalPoint::Control ? find_point(j, 0.0)
                                                                  : j;
        ell[i] += w;
        continue;
      }
      // f'(a_j) = sum_i f_i L_i'(a_j) for the Lagrange basis through the group's nodes,
      // using barycentric weights.
      const auto& nodes = groups[static_cast<size_t>(group_of[static_cast<size_t>(j)])];
      if (nodes.size() < 2) throw DomainError("derivative moment needs at least two treatment values per covariate value");
      std::vector<double> bary(nodes.size(), 1.0);
      for (size_t p = 0; p < nodes.size(); ++p) {
        for (size_t q = 0; q < nodes.size(); ++q) {
          if (p != q) bary[p] /= (a[nodes[p]] - a[nodes[q]]);
        }
      }
      size_t self = 0;
      while (nodes[self] != j) ++self;
      double diagonal = 0.0;
      for (size_t p = 0; p < nodes.size(); ++p) {
        if (p == self) continue;
        const double entry = (bary[p] / bary[self]) / (a[j] - a[nodes[p]]);
        ell[nodes[p]] += w * entry;
        diagonal -= entry;
      }
      ell[j] += w * diagonal;
    }
  }
  return {ell};
}

}  // namespace madnet
