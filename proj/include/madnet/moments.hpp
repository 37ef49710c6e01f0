#pragma once

// Moment functionals m(f, W) for the four average moment estimands, the
// known functions beta with h(beta) = 1, and closed-form Riesz representers
// for synthetic scenarios.

#include "madnet/dataset.hpp"
#include "madnet/oracle.hpp"

#include <Eigen/Dense>
#include <json.hpp>

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace madnet {

enum class EstimandKind { ATE, APE, ADE, IPE };

std::string to_string(EstimandKind kind);
EstimandKind estimand_from_string(const std::string& name);

/// Treatment policy x -> pi(x). Built from one of three config shapes:
/// constant, threshold on a named covariate, or table lookup on a named covariate.
class Policy {
 public:
  using Fn = std::function<double(const Eigen::Ref<const Eigen::RowVectorXd>&)>;

  Policy(Fn fn, nlohmann::json description);

  static Policy constant(double value);
  static Policy threshold(const std::string& column, Eigen::Index index, double cutoff,
                          double above, double below);
  static Policy table(const std::string& column, Eigen::Index index,
                      std::vector<std::pair<double, double>> entries, double fallback);

  /// Parses {"type": "constant"|"threshold"|"table", ...}; column names are
  /// resolved against `covariates`.
  static Policy from_json(const nlohmann::json& j, const std::vector<std::string>& covariates);

  double operator()(const Eigen::Ref<const Eigen::RowVectorXd>& x) const { return fn_(x); }
  Eigen::VectorXd evaluate(const Eigen::MatrixXd& x) const;
  const nlohmann::json& description() const { return description_; }

 private:
  Fn fn_;
  nlohmann::json description_;
};

class MomentFunctional {
 public:
  /// APE/IPE require a policy; ATE/ADE reject one.
  explicit MomentFunctional(EstimandKind kind, std::optional<Policy> policy = std::nullopt);

  EstimandKind kind() const { return kind_; }
  const std::optional<Policy>& policy() const { return policy_; }
  bool binary_treatment() const { return kind_ == EstimandKind::ATE || kind_ == EstimandKind::APE; }
  bool needs_derivative() const { return !binary_treatment(); }

 private:
  EstimandKind kind_;
  std::optional<Policy> policy_;
};

/// f(a, x) with an optional exact treatment derivative. Evaluation is batched:
/// `a` holds n treatments and row i of `x` the matching covariates.
class DifferentiableFunction {
 public:
  using BatchFn = std::function<Eigen::VectorXd(const Eigen::VectorXd&, const Eigen::MatrixXd&)>;
  using PointFn = std::function<double(double, const Eigen::Ref<const Eigen::RowVectorXd>&)>;

  DifferentiableFunction() = default;
  DifferentiableFunction(BatchFn value, BatchFn derivative = nullptr);

  static DifferentiableFunction pointwise(PointFn value, PointFn derivative = nullptr);

  bool has_derivative() const { return static_cast<bool>(derivative_); }
  Eigen::VectorXd values(const Eigen::VectorXd& a, const Eigen::MatrixXd& x) const;
  Eigen::VectorXd derivatives(const Eigen::VectorXd& a, const Eigen::MatrixXd& x) const;
  double operator()(double a, const Eigen::RowVectorXd& x) const;
  double derivative(double a, const Eigen::RowVectorXd& x) const;

  /// c1 * f + c2 * g.
  static DifferentiableFunction combine(double c1, const DifferentiableFunction& f, double c2,
                                        const DifferentiableFunction& g);

 private:
  BatchFn value_;
  BatchFn derivative_;
};

struct KnownBeta {
  DifferentiableFunction beta;
  std::optional<double> h_beta;
};

struct Observation {
  double y = 0.0;
  double a = 0.0;
  Eigen::RowVectorXd x;
};

/// Where a moment term evaluates f: at the observed treatment, or at a = 1 / a = 0.
enum class EvalPoint { Observed, Treated, Control };

/// m(f, W_i) = sum over terms of weight_i * (f or f') at the term's point.
struct MomentTerm {
  EvalPoint point = EvalPoint::Observed;
  bool derivative = false;
  Eigen::VectorXd weight;
};

/// Decomposition of m over n rows. Validates treatment values and policy ranges.
std::vector<MomentTerm> moment_terms(const MomentFunctional& m, const Eigen::VectorXd& a,
                                     const Eigen::MatrixXd& x);

/// Treatments clamped exactly onto {0,1} when within `tol`; DomainError otherwise.
Eigen::VectorXd round_binary(const Eigen::VectorXd& a, double tol = 1e-9);

double moment_apply(const MomentFunctional& m, const DifferentiableFunction& f, const Observation& w);

/// Per-row moments m(f, W_i).
Eigen::VectorXd moment_values(const MomentFunctional& m, const DifferentiableFunction& f,
                              const Dataset& data);

/// h_n(f) = E_n[m(f, W)].
double empirical_moment(const MomentFunctional& m, const DifferentiableFunction& f,
                        const Dataset& data);

/// beta with h(beta) = 1: a (ATE, ADE), a + 1 - pi(x) (APE), a / pi(x) (IPE).
KnownBeta beta_default(const MomentFunctional& m);

/// IPE variant that tolerates pi(x) = 0: beta = a / pi(x) where pi != 0 and 0
/// elsewhere, with h(beta) = Pr[pi(X) != 0] estimated on `data`.
KnownBeta beta_ipe_zero_extended(const MomentFunctional& m, const Dataset& data);

/// True nuisance functions of a synthetic scenario.
struct TrueNuisance {
  std::function<double(const Eigen::Ref<const Eigen::RowVectorXd>&)> propensity;  ///< p(x), ATE/APE
  std::function<double(double, const Eigen::Ref<const Eigen::RowVectorXd>&)> score;  ///< p'(a|x)/p(a|x), ADE/IPE
};

/// Printed closed-form Riesz representer of each estimand.
DifferentiableFunction rr_closed_form(const MomentFunctional& m, const TrueNuisance& nuisance);

/// Coefficient vector of f -> E[m(f, W)] on a finite support. Derivative
/// moments differentiate the interpolating polynomial through the support
/// points that share a covariate value.
oracle::LinearFunctionalVector induced_functional(const oracle::FiniteDistribution& dist,
                                                  const MomentFunctional& m);

}  // namespace madnet
