#pragma once

// Shared fixtures for the test binaries: the two small reference
// distributions and a generator of random finite distributions.

#include "madnet/oracle.hpp"

#include <Eigen/Dense>

#include <random>

namespace madnet::testing {

/// One covariate value, p = 0.5, support (a=0), (a=1).
inline oracle::FiniteDistribution d1() {
  oracle::FiniteDistribution d;
  d.support = {{0.0, Eigen::VectorXd::Zero(1)}, {1.0, Eigen::VectorXd::Zero(1)}};
  d.probs = Eigen::Vector2d(0.5, 0.5);
  d.reg = Eigen::Vector2d(0.0, 1.0);
  return d;
}

/// X in {0,1} equiprobable, p(0) = 0.2, p(1) = 0.5; support (a,x) ordered
/// (0,0), (1,0), (0,1), (1,1).
inline oracle::FiniteDistribution d2() {
  oracle::FiniteDistribution d;
  const auto x = [](double v) { return Eigen::VectorXd::Constant(1, v); };
  d.support = {{0.0, x(0.0)}, {1.0, x(0.0)}, {0.0, x(1.0)}, {1.0, x(1.0)}};
  d.probs = Eigen::Vector4d(0.4, 0.1, 0.25, 0.25);
  d.reg = Eigen::Vector4d(1.0, 3.0, 2.0, 5.0);
  return d;
}

inline Eigen::VectorXd ate_coeffs_d2() { return Eigen::Vector4d(-0.5, 0.5, -0.5, 0.5); }

/// Random distribution with distinct support points, random regression and
/// random functional; beta is drawn so that |h(beta)| >= 0.1.
struct RandomCase {
  oracle::FiniteDistribution dist;
  oracle::LinearFunctionalVector ell;
  Eigen::VectorXd beta;
};

inline RandomCase random_case(std::mt19937_64& rng, int max_support = 50) {
  std::uniform_int_distribution<int> size_dist(2, max_support);
  std::uniform_real_distribution<double> unif(-2.0, 2.0);
  std::uniform_real_distribution<double> pos(0.05, 1.0);
  const int n = size_dist(rng);
  RandomCase c;
  c.dist.probs.resize(n);
  c.dist.reg.resize(n);
  c.ell.coeffs.resize(n);
  for (int i = 0; i < n; ++i) {
    // distinct by construction: the covariate records the index
    c.dist.support.push_back({static_cast<double>(i % 2), Eigen::VectorXd::Constant(1, static_cast<double>(i))});
    c.dist.probs[i] = pos(rng);
    c.dist.reg[i] = unif(rng);
    c.ell.coeffs[i] = unif(rng);
  }
  c.dist.probs /= c.dist.probs.sum();
  do {
    c.beta = Eigen::VectorXd(n);
    for (int i = 0; i < n; ++i) c.beta[i] = unif(rng);
  } while (std::abs(c.ell.apply(c.beta)) < 0.1);
  return c;
}

inline double max_abs_diff(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  return (a - b).cwiseAbs().maxCoeff();
}

}  // namespace madnet::testing
