#include "madnet/errors.hpp"
#include "madnet/oracle.hpp"
#include "test_support.hpp"

#include <doctest.h>

#include <cmath>

using namespace madnet;
using namespace madnet::oracle;
using madnet::testing::max_abs_diff;

TEST_CASE("riesz_exact on reference distributions") {
  const auto dist1 = testing::d1();
  const Eigen::VectorXd a1 = riesz_exact(dist1, {Eigen::Vector2d(-1.0, 1.0)});
  CHECK(max_abs_diff(a1, Eigen::Vector2d(-2.0, 2.0)) < 1e-15);

  const auto dist2 = testing::d2();
  const Eigen::VectorXd a2 = riesz_exact(dist2, {testing::ate_coeffs_d2()});
  CHECK(max_abs_diff(a2, Eigen::Vector4d(-1.25, 5.0, -2.0, 2.0)) < 1e-15);

  // (a - p) / (p (1 - p)) with p(0) = 0.2, p(1) = 0.5
  const auto closed = [](double a, double p) { return (a - p) / (p * (1.0 - p)); };
  CHECK(a2[0] == doctest::Approx(closed(0, 0.2)).epsilon(1e-14));
  CHECK(a2[1] == doctest::Approx(closed(1, 0.2)).epsilon(1e-14));
  CHECK(a2[3] == doctest::Approx(closed(1, 0.5)).epsilon(1e-14));

  Eigen::VectorXd ell = testing::ate_coeffs_d2();
  ell[2] = 0.0;
  CHECK(riesz_exact(dist2, {ell})[2] == 0.0);

  CHECK_THROWS_AS(riesz_exact(dist2, {Eigen::Vector2d(1.0, 1.0)}), DimensionError);
}

TEST_CASE("project_orthocomplement") {
  const auto dist1 = testing::d1();
  const LinearFunctionalVector ell1{Eigen::Vector2d(-1.0, 1.0)};
  CHECK(max_abs_diff(project_orthocomplement(dist1, ell1, Eigen::Vector2d(0.0, 1.0)), Eigen::Vector2d(0.5, 0.5)) <
        1e-15);

  const auto dist2 = testing::d2();
  const LinearFunctionalVector ell2{testing::ate_coeffs_d2()};
  const Eigen::Vector4d beta(0.0, 1.0, 0.0, 1.0);
  const Eigen::VectorXd bp = project_orthocomplement(dist2, ell2, beta);
  // beta - alpha / 5.125
  const Eigen::Vector4d expected(1.25 / 5.125, 1.0 - 5.0 / 5.125, 2.0 / 5.125, 1.0 - 2.0 / 5.125);
  CHECK(max_abs_diff(bp, expected) < 1e-15);
  CHECK(bp[0] == doctest::Approx(0.243902).epsilon(1e-5));
  CHECK(bp[1] == doctest::Approx(0.024390).epsilon(1e-4));
  CHECK(std::abs(ell2.apply(bp)) < 1e-12);

  // idempotent
  CHECK(max_abs_diff(project_orthocomplement(dist2, ell2, bp), bp) < 1e-15);

  CHECK_THROWS_AS(project_orthocomplement(dist2, {Eigen::Vector4d::Zero()}, beta), DegenerateError);
}

TEST_CASE("reconstruct_rr recovers the exact representer") {
  const auto dist1 = testing::d1();
  const LinearFunctionalVector ell1{Eigen::Vector2d(-1.0, 1.0)};
  const Eigen::Vector2d beta1(0.0, 1.0);
  CHECK(max_abs_diff(reconstruct_rr(dist1, ell1, beta1, Eigen::Vector2d(0.5, 0.5)), Eigen::Vector2d(-2.0, 2.0)) <
        1e-12);

  const auto dist2 = testing::d2();
  const LinearFunctionalVector ell2{testing::ate_coeffs_d2()};
  const Eigen::Vector4d beta(0.0, 1.0, 0.0, 1.0);
  const Eigen::VectorXd alpha = reconstruct_rr(dist2, ell2, beta, project_orthocomplement(dist2, ell2, beta));
  CHECK(max_abs_diff(alpha, Eigen::Vector4d(-1.25, 5.0, -2.0, 2.0)) < 1e-10);

  const Eigen::VectorXd scaled = 3.7 * beta;
  const Eigen::VectorXd alpha_scaled =
      reconstruct_rr(dist2, ell2, scaled, project_orthocomplement(dist2, ell2, scaled));
  CHECK(max_abs_diff(alpha_scaled, alpha) < 1e-12);

  CHECK_THROWS_AS(reconstruct_rr(dist2, ell2, beta, beta), DegenerateError);
}

TEST_CASE("exact_estimand") {
  auto dist2 = testing::d2();
  const LinearFunctionalVector ell{testing::ate_coeffs_d2()};
  CHECK(exact_estimand(dist2, ell) == doctest::Approx(2.5).epsilon(1e-15));
  const Eigen::VectorXd alpha = riesz_exact(dist2, ell);
  CHECK(std::abs(dist2.inner(alpha, dist2.reg) - 2.5) < 1e-12);

  dist2.reg = Eigen::Vector4d(0.0, 1.0, 0.0, 1.0);  // mu = a
  CHECK(exact_estimand(dist2, ell) == doctest::Approx(1.0));
  dist2.reg = Eigen::Vector4d::Constant(4.2);
  CHECK(std::abs(exact_estimand(dist2, ell)) < 1e-15);
}

TEST_CASE("mixed-bias identity") {
  auto dist1 = testing::d1();
  const LinearFunctionalVector ell1{Eigen::Vector2d(-1.0, 1.0)};
  const Eigen::VectorXd alpha = riesz_exact(dist1, ell1);

  const auto exact_mu = verify_mixed_bias(dist1, ell1, dist1.reg, Eigen::Vector2d(7.0, -3.0));
  CHECK(std::abs(exact_mu.lhs) < 1e-15);
  CHECK(std::abs(exact_mu.rhs) < 1e-15);

  const Eigen::VectorXd mu_hat = dist1.reg + Eigen::Vector2d(1.0, -1.0);
  const Eigen::VectorXd alpha_hat = alpha + Eigen::Vector2d(2.0, 0.0);
  const auto pair = verify_mixed_bias(dist1, ell1, mu_hat, alpha_hat);
  CHECK(pair.lhs == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(pair.rhs == doctest::Approx(-1.0).epsilon(1e-12));

  const auto exact_alpha = verify_mixed_bias(dist1, ell1, Eigen::Vector2d(3.0, 8.0), alpha);
  CHECK(std::abs(exact_alpha.lhs) < 1e-14);
  CHECK(std::abs(exact_alpha.rhs) < 1e-14);
}

TEST_CASE("mu decomposition") {
  auto dist2 = testing::d2();
  const LinearFunctionalVector ell{testing::ate_coeffs_d2()};
  const Eigen::Vector4d beta(0.0, 1.0, 0.0, 1.0);
  CHECK(verify_mu_decomposition(dist2, ell, beta) <= 1e-10);

  // Psi = 0: mu already in the complement
  dist2.reg = Eigen::Vector4d(1.0, 1.0, 2.0, 2.0);
  CHECK(max_abs_diff(project_orthocomplement(dist2, ell, dist2.reg), dist2.reg) < 1e-15);
  CHECK(verify_mu_decomposition(dist2, ell, beta) <= 1e-15);

  // mu along beta - beta_perp projects to zero
  const Eigen::VectorXd direction = beta - project_orthocomplement(dist2, ell, beta);
  dist2.reg = 2.5 * direction;
  CHECK(project_orthocomplement(dist2, ell, dist2.reg).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK(verify_mu_decomposition(dist2, ell, beta) <= 1e-10);
}

TEST_CASE("sufficiency of the unscaled representer") {
  // beta - beta_perp injective on D2
  const auto dist2 = testing::d2();
  const LinearFunctionalVector ell{testing::ate_coeffs_d2()};
  const Eigen::Vector4d beta(0.0, 1.0, 0.0, 1.0);
  const auto p = verify_sufficiency(dist2, ell, beta);
  CHECK(p.lhs == doctest::Approx(p.rhs).epsilon(1e-12));

  // D1 extended: two covariate values with identical propensity 0.5 share
  // beta - beta_perp, so eta pools their regressions.
  FiniteDistribution dist;
  const auto x = [](double v) { return Eigen::VectorXd::Constant(1, v); };
  dist.support = {{0.0, x(0.0)}, {1.0, x(0.0)}, {0.0, x(1.0)}, {1.0, x(1.0)}};
  dist.probs = Eigen::Vector4d(0.25, 0.25, 0.25, 0.25);
  dist.reg = Eigen::Vector4d(1.0, 2.0, 3.0, 6.0);
  const LinearFunctionalVector ell_ext{Eigen::Vector4d(-0.5, 0.5, -0.5, 0.5)};
  const auto q = verify_sufficiency(dist, ell_ext, beta);
  // pooled means: eta(a=0) = 2, eta(a=1) = 4; alpha = 4(a - 0.5)
  const double by_hand = 0.25 * (-2.0 * 2.0 + 2.0 * 4.0 - 2.0 * 2.0 + 2.0 * 4.0);
  CHECK(q.lhs == doctest::Approx(by_hand).epsilon(1e-14));
  CHECK(q.rhs == doctest::Approx(0.5 * (2.0 - 1.0) + 0.5 * (6.0 - 3.0)).epsilon(1e-14));
  CHECK(std::abs(q.lhs - q.rhs) <= 1e-10);

  // constant regression
  dist.reg = Eigen::Vector4d::Constant(3.0);
  const auto c = verify_sufficiency(dist, ell_ext, beta);
  CHECK(std::abs(c.lhs) < 1e-14);
  CHECK(std::abs(c.rhs) < 1e-14);
}

TEST_CASE("identities on random finite distributions") {
  std::mt19937_64 rng(20240611);
  std::uniform_real_distribution<double> unif(-1.0, 1.0);
  for (int rep = 0; rep < 200; ++rep) {
    const auto c = testing::random_case(rng);
    const auto& dist = c.dist;
    const Eigen::VectorXd alpha = riesz_exact(dist, c.ell);
    const Eigen::VectorXd bp = project_orthocomplement(dist, c.ell, c.beta);
    CHECK(max_abs_diff(reconstruct_rr(dist, c.ell, c.beta, bp), alpha) <= 1e-9);
    CHECK(std::abs(c.ell.apply(bp)) <= 1e-11);
    const double norm_alpha = std::sqrt(dist.norm2(alpha));
    CHECK(std::abs(norm_alpha - std::abs(c.ell.apply(c.beta)) / std::sqrt(dist.norm2(c.beta - bp))) <= 1e-9);

    // beta - beta_perp is orthogonal to the complement
    for (int k = 0; k < 10; ++k) {
      Eigen::VectorXd f(dist.size());
      for (Eigen::Index i = 0; i < f.size(); ++i) f[i] = unif(rng);
      const Eigen::VectorXd f_perp = project_orthocomplement(dist, c.ell, f);
      CHECK(std::abs(dist.inner(c.beta - bp, f_perp)) <= 1e-11);
    }
    if (rep < 20) {
      for (int k = 0; k < 100; ++k) {
        Eigen::VectorXd dm(dist.size()), da(dist.size());
        for (Eigen::Index i = 0; i < dm.size(); ++i) {
          dm[i] = unif(rng);
          da[i] = unif(rng);
        }
        const auto mb = verify_mixed_bias(dist, c.ell, dist.reg + dm, alpha + da);
        CHECK(std::abs(mb.lhs - mb.rhs) <= 1e-10);
      }
    }
    CHECK(verify_mu_decomposition(dist, c.ell, c.beta) <= 1e-10);
    const auto s = verify_sufficiency(dist, c.ell, c.beta);
    CHECK(std::abs(s.lhs - s.rhs) <= 1e-10);
  }
}

TEST_CASE("distribution validation and json round trip") {
  auto dist = testing::d2();
  dist.validate();
  const auto back = distribution_from_json(to_json(dist));
  CHECK(back.size() == dist.size());
  CHECK(back.probs == dist.probs);
  CHECK(back.reg == dist.reg);
  CHECK(back.support[3].a == 1.0);
  CHECK(back.support[3].x[0] == 1.0);

  auto bad = dist;
  bad.probs[0] = 0.5;
  CHECK_THROWS_AS(bad.validate(), DomainError);
  bad = dist;
  bad.support[1] = bad.support[0];
  CHECK_THROWS_AS(bad.validate(), DomainError);
  bad = dist;
  bad.reg = Eigen::Vector3d::Zero();
  CHECK_THROWS_AS(bad.validate(), DimensionError);
  CHECK_THROWS_AS(distribution_from_json(nlohmann::json::parse(R"({"support": 3, "probs": [1]})")), ParseError);
}

TEST_CASE("gauss-hermite rule integrates normal moments") {
  const auto [z, w] = gauss_hermite(8);
  CHECK(w.sum() == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(std::abs(w.dot(z)) < 1e-13);
  CHECK(w.dot(z.cwiseAbs2()) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(w.dot(z.array().pow(4).matrix()) == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(w.dot(z.array().pow(6).matrix()) == doctest::Approx(15.0).epsilon(1e-12));
}
