#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <vector>

namespace madnet {

/// Observations W = (Y, A, X). Row i of `x` holds the covariates of unit i.
struct Dataset {
  Eigen::VectorXd y;
  Eigen::VectorXd a;
  Eigen::MatrixXd x;
  std::vector<std::string> covariate_names;

  Eigen::Index size() const { return y.size(); }
  Eigen::Index dim() const { return x.cols(); }

  /// Throws DimensionError / NumericalError when the invariants break.
  void validate() const;

  /// Rows selected by `index`, in that order.
  Dataset subset(const std::vector<Eigen::Index>& index) const;

  /// Network input matrix, one column per unit: row 0 is the treatment,
  /// rows 1..d the covariates.
  Eigen::MatrixXd inputs() const;
};

struct Split {
  Dataset train;
  Dataset validation;
  std::vector<Eigen::Index> train_index;
  std::vector<Eigen::Index> validation_index;
};

/// Uniform random partition; the training part gets floor(fraction * n) rows.
Split split(const Dataset& data, double fraction, std::uint64_t seed);

struct Standardized {
  Dataset data;
  double scale = 1.0;  ///< y' = y / scale
};

/// Divides y by its sample standard deviation.
Standardized standardize_outcome(const Dataset& data);

double mean(const Eigen::VectorXd& v);
/// Sample standard deviation with the n-1 denominator.
double sample_sd(const Eigen::VectorXd& v);

}  // namespace madnet
