#include "madnet/dataset.hpp"

#include "madnet/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace madnet {

void Dataset::validate() const {
  const auto n = y.size();
  if (a.size() != n || x.rows() != n) {
    throw DimensionError("dataset: inconsistent row counts (y=" + std::to_string(n) +
                         ", a=" + std::to_string(a.size()) +
                         ", x=" + std::to_string(x.rows()) + ")");
  }
  if (!covariate_names.empty() && static_cast<Eigen::Index>(covariate_names.size()) != x.cols()) {
    throw DimensionError("dataset: covariate name count does not match x columns");
  }
  if (!y.allFinite() || !a.allFinite() || !x.allFinite()) {
    throw NumericalError("dataset: non-finite values present");
  }
}

Dataset Dataset::subset(const std::vector<Eigen::Index>& index) const {
  Dataset out;
  const auto m = static_cast<Eigen::Index>(index.size());
  out.y.resize(m);
  out.a.resize(m);
  out.x.resize(m, x.cols());
  for (Eigen::Index i = 0; i < m; ++i) {
    const auto r = index[static_cast<size_t>(i)];
    out.y[i] = y[r];
    out.a[i] = a[r];
    out.x.row(i) = x.row(r);
  }
  out.covariate_names = covariate_names;
  return out;
}

Eigen::MatrixXd Dataset::inputs() const {
  Eigen::MatrixXd z(x.cols() + 1, size());
  z.row(0) = a.transpose();
  z.bottomRows(x.cols()) = x.transpose();
  return z;
}

Split split(const Dataset& data, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw DomainError("split fraction must lie in (0, 1)");
  const auto n = data.size();
  const auto n_train = static_cast<Eigen::Index>(std::floor(fraction * static_cast<double>(n)));
  if (n_train < 1 || n_train >= n) {
    throw DomainError("split of " + std::to_string(n) + " rows at fraction " + std::to_string(fraction) +
                      " leaves an empty side");
  }
  std::vector<Eigen::Index> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  Split s;
  s.train_index.assign(order.begin(), order.begin() + n_train);
  s.validation_index.assign(order.begin() + n_train, order.end());
  s.train = data.subset(s.train_index);
  s.validation = data.subset(s.validation_index);
  return s;
}

Standardized standardize_outcome(const Dataset& data) {
  const double sd = sample_sd(data.y);
  if (!(sd > 0.0)) throw DegenerateError("cannot standardize a constant outcome");
  Standardized out{data, sd};
  out.data.y /= sd;
  return out;
}

double mean(const Eigen::VectorXd& v) {
  if (v.size() == 0) throw DomainError("mean of empty vector");
  return v.mean();
}

double sample_sd(const Eigen::VectorXd& v) {
  if (v.size() < 2) throw DomainError("sample sd needs at least two values");
  const double m = v.mean();
  return std::sqrt((v.array() - m).square().sum() / static_cast<double>(v.size() - 1));
}

}  // namespace madnet
