#include "madnet/errors.hpp"
#include "madnet/neural.hpp"

#include <doctest.h>

#include <cmath>
#include <cstring>
#include <random>

using namespace madnet;
using namespace madnet::nn;

namespace {

Eigen::MatrixXd random_matrix(Index rows, Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
  return m;
}

/// Loss sum(G .* f) + sum(T .* df/da) over the three heads.
struct Probe {
  Eigen::MatrixXd g[3];
  Eigen::MatrixXd t[3];

  double eval(const MultiHeadNet& net, const Eigen::MatrixXd& z) const {
    MultiHeadNet::Pass pass;
    net.forward(z, kAllHeads, true, pass);
    double total = 0.0;
    for (int h = 0; h < 3; ++h) {
      total += g[h].cwiseProduct(pass.value(h)).sum() + t[h].cwiseProduct(pass.tangent_of(h)).sum();
    }
    return total;
  }
};

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-3});
}

}  // namespace

TEST_CASE("ELU derivative at -1") {
  Mlp net({1, {}, Activation::ELU, 1});
  // f(a) = elu(a) requires an activated layer: single hidden unit, output weight 1
  Mlp one({1, {1}, Activation::ELU, 1});
  one.parameters() << 1.0, 0.0, 1.0, 0.0;
  const Eigen::MatrixXd a = Eigen::MatrixXd::Constant(1, 1, -1.0);
  CHECK(one.forward(a)(0, 0) == doctest::Approx(std::exp(-1.0) - 1.0));
  CHECK(std::abs(one.dforward_da(a)(0, 0) - std::exp(-1.0)) < 1e-15);
  CHECK(net.parameters().size() == 2);
}

TEST_CASE("linear net value and treatment derivative") {
  Mlp lin({3, {}, Activation::ReLU, 1});
  lin.parameters() << 2.0, -1.0, 0.5, 0.25;
  const Eigen::Vector3d z(1.5, 2.0, -4.0);
  CHECK(lin.forward(z)(0, 0) == doctest::Approx(2.0 * 1.5 - 2.0 - 2.0 + 0.25));
  CHECK(lin.dforward_da(z)(0, 0) == 2.0);

  // one dense layer, squared loss on one sample: gradient 2 (f - y) * input
  const double y = 1.0;
  DenseStack::Trace trace;
  lin.forward(z, false, trace);
  const double f = trace.out(0, 0);
  const Eigen::MatrixXd g = Eigen::MatrixXd::Constant(1, 1, 2.0 * (f - y));
  const Eigen::VectorXd grad = lin.backward(trace, &g, nullptr);
  for (int i = 0; i < 3; ++i) CHECK(grad[i] == doctest::Approx(2.0 * (f - y) * z[i]));
  CHECK(grad[3] == doctest::Approx(2.0 * (f - y)));
}

TEST_CASE("zero weights give the output biases") {
  MultiHeadSpec spec{3, 6, 2, 5, 2, Activation::ELU};
  MultiHeadNet net(spec);
  const auto groups = net.groups();
  net.parameters().setZero();
  net.parameters()[groups[3].begin] = 0.7;
  net.parameters()[groups[5].begin] = -1.1;
  net.parameters()[groups[1].end - 1] = 0.2;
  std::mt19937_64 rng(1);
  const Eigen::MatrixXd out = net.predict(random_matrix(3, 4, rng));
  CHECK((out.row(0).array() == 0.2).all());
  CHECK((out.row(1).array() == 0.7).all());
  CHECK((out.row(2).array() == -1.1).all());
}

TEST_CASE("batched forward equals row-by-row forward") {
  MultiHeadNet net({4, 8, 3, 6, 2, Activation::ELU});
  net.initialize(5);
  std::mt19937_64 rng(2);
  const Eigen::MatrixXd z = random_matrix(4, 9, rng);
  const Eigen::MatrixXd batch = net.predict(z);
  const Eigen::MatrixXd dbatch = net.dforward_da(z);
  for (Index i = 0; i < z.cols(); ++i) {
    CHECK((net.predict(z.col(i)) - batch.col(i)).cwiseAbs().maxCoeff() < 1e-14);
    CHECK((net.dforward_da(z.col(i)) - dbatch.col(i)).cwiseAbs().maxCoeff() < 1e-14);
  }
  CHECK_THROWS_AS(net.predict(random_matrix(3, 2, rng)), DimensionError);
}

TEST_CASE("parameter gradients match central differences on random nets") {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> width(1, 8), depth(0, 3), dim(1, 4);
  for (int trial = 0; trial < 20; ++trial) {
    MultiHeadSpec spec;
    spec.input_dim = 1 + dim(rng);
    spec.trunk_width = width(rng);
    spec.trunk_depth = depth(rng);
    spec.head_width = width(rng);
    spec.head_depth = depth(rng);
    spec.activation = trial % 2 == 0 ? Activation::ELU : Activation::ReLU;
    CAPTURE(trial);
    MultiHeadNet net(spec);
    net.initialize(static_cast<std::uint64_t>(trial));
    // nonzero biases so ReLU kinks are not hit at zero
    std::normal_distribution<double> small(0.0, 0.1);
    for (Index i = 0; i < net.parameter_count(); ++i) net.parameters()[i] += small(rng);
    const Index n = 8;
    const Eigen::MatrixXd z = random_matrix(spec.input_dim, n, rng);
    Probe probe;
    MultiHeadNet::Adjoint adj;
    for (int h = 0; h < 3; ++h) {
      probe.g[h] = random_matrix(1, n, rng);
      probe.t[h] = random_matrix(1, n, rng);
      adj.value[h] = probe.g[h];
      adj.tangent[h] = probe.t[h];
    }
    MultiHeadNet::Pass pass;
    net.forward(z, kAllHeads, true, pass);
    Eigen::VectorXd grad = Eigen::VectorXd::Zero(net.parameter_count());
    net.backward(pass, adj, grad);

    // A ReLU kink between the probes makes df/da jump; such coordinates are
    // detected by disagreeing one-sided differences and skipped.
    double worst = 0.0;
    int skipped = 0;
    const double step = 1e-5;
    const double centre = probe.eval(net, z);
    for (Index i = 0; i < net.parameter_count(); ++i) {
      const double saved = net.parameters()[i];
      net.parameters()[i] = saved + step;
      const double up = probe.eval(net, z);
      net.parameters()[i] = saved - step;
      const double down = probe.eval(net, z);
      net.parameters()[i] = saved;
      if (spec.activation == Activation::ReLU &&
          relative_error((up - centre) / step, (centre - down) / step) > 1e-2) {
        ++skipped;
        continue;
      }
      worst = std::max(worst, relative_error(grad[i], (up - down) / (2 * step)));
    }
    CHECK(skipped * 20 <= net.parameter_count());
    CHECK(worst <= 1e-5);
  }
}

TEST_CASE("forward-mode treatment derivative matches reverse-mode input gradient") {
  std::mt19937_64 rng(77);
  for (const auto act : {Activation::ELU, Activation::ReLU}) {
    MultiHeadNet net({3, 8, 3, 7, 2, act});
    net.initialize(9);
    const Eigen::MatrixXd z = random_matrix(3, 16, rng);
    const Eigen::MatrixXd forward_mode = net.dforward_da(z);
    for (int h = 0; h < 3; ++h) {
      MultiHeadNet::Pass pass;
      net.forward(z, kAllHeads, false, pass);
      MultiHeadNet::Adjoint adj;
      adj.value[h] = Eigen::MatrixXd::Ones(1, z.cols());
      Eigen::VectorXd grad;
      Eigen::MatrixXd g_input;
      net.backward(pass, adj, grad, &g_input);
      CHECK((g_input.row(0) - forward_mode.row(h)).cwiseAbs().maxCoeff() <= 1e-10);
    }
    // and central differences on the smooth activation
    if (act == Activation::ELU) {
      const double step = 1e-5;
      Eigen::MatrixXd up = z, down = z;
      up.row(0).array() += step;
      down.row(0).array() -= step;
      const Eigen::MatrixXd fd = (net.predict(up) - net.predict(down)) / (2 * step);
      for (Index i = 0; i < fd.size(); ++i) {
        CHECK(relative_error(forward_mode.data()[i], fd.data()[i]) <= 1e-6);
      }
    }
  }
}

TEST_CASE("AdamW worked examples") {
  const std::vector<ParamGroup> one{{"w", 0, 1}};
  {
    AdamW opt(one, 0.1, 0.0);
    Eigen::VectorXd w = Eigen::VectorXd::Ones(1);
    opt.step(w, Eigen::VectorXd::Constant(1, 0.5));
    CHECK(w[0] == doctest::Approx(1.0 - 0.1 * 0.5 / (0.5 + 1e-8)).epsilon(1e-14));
    CHECK(std::abs(w[0] - 0.9) < 1e-7);
    CHECK(opt.first_moment()[0] == doctest::Approx(0.05));
    CHECK(opt.second_moment()[0] == doctest::Approx(0.00025));
  }
  {
    AdamW opt(one, 0.1, 0.0);
    Eigen::VectorXd w = Eigen::VectorXd::Constant(1, 3.0);
    opt.step(w, Eigen::VectorXd::Zero(1));
    CHECK(w[0] == 3.0);
  }
  {
    AdamW opt(one, 0.1, 0.001);
    Eigen::VectorXd w = Eigen::VectorXd::Constant(1, 2.0);
    opt.step(w, Eigen::VectorXd::Zero(1));
    CHECK(w[0] == doctest::Approx(2.0 * (1.0 - 1e-4)).epsilon(1e-15));
  }
  {
    AdamW opt({{"a", 0, 1}, {"b", 1, 2}}, 0.1, 0.0);
    opt.set_group_learning_rate("b", 0.9);
    CHECK(opt.group_learning_rate("b") == 0.9);
    Eigen::VectorXd w = Eigen::VectorXd::Zero(2);
    opt.step(w, Eigen::VectorXd::Ones(2));
    CHECK(w[0] == doctest::Approx(-0.1).epsilon(1e-6));
    CHECK(w[1] == doctest::Approx(-0.9).epsilon(1e-6));
    Eigen::VectorXd bad = Eigen::VectorXd::Ones(2);
    bad[1] = std::nan("");
    try {
      opt.step(w, bad);
      FAIL("expected NumericalError");
    } catch (const NumericalError& e) {
      CHECK(std::string(e.what()).find("'b'") != std::string::npos);
    }
    CHECK_THROWS_AS(opt.set_group_learning_rate("zzz", 1.0), ConfigError);
  }
}

TEST_CASE("parameter count audit") {
  for (Index d : {1, 5, 25}) {
    MultiHeadSpec spec;
    spec.input_dim = 1 + d;
    MultiHeadNet net(spec);
    CHECK(net.parameter_count() == MultiHeadNet::analytic_parameter_count(spec));
    const auto groups = net.groups();
    CHECK(groups[0].name == "trunk");
    CHECK(groups[0].end - groups[0].begin == (d + 1 + 1) * 200 + 2 * (200 * 200 + 200));
    CHECK(groups[1].end - groups[1].begin == 201);
    CHECK(groups[3].end - groups[3].begin == 1);
    CHECK(groups.back().end == net.parameter_count());
  }
  MultiHeadSpec flat{2, 4, 0, 3, 0, Activation::ELU};
  CHECK(MultiHeadNet(flat).parameter_count() == MultiHeadNet::analytic_parameter_count(flat));
  CHECK(MultiHeadNet::analytic_parameter_count(flat) == 3 * 3);
}

TEST_CASE("checkpoint round trip is bit exact") {
  MultiHeadNet net({3, 7, 2, 5, 1, Activation::ReLU});
  net.initialize(13);
  net.parameters().array() += 1.0 / 3.0;
  const auto text = checkpoint_json(net).dump();
  const MultiHeadNet back = net_from_checkpoint(nlohmann::json::parse(text));
  CHECK(back.spec() == net.spec());
  CHECK(back.parameters().size() == net.parameters().size());
  CHECK(std::memcmp(back.parameters().data(), net.parameters().data(),
                    sizeof(double) * static_cast<size_t>(net.parameter_count())) == 0);

  auto broken = checkpoint_json(net);
  broken["parameters"]["trunk"].erase(0);
  CHECK_THROWS_AS(net_from_checkpoint(broken), DimensionError);
  CHECK_THROWS_AS(net_from_checkpoint(nlohmann::json::object()), ParseError);
}

TEST_CASE("identical seeds give identical initialisations") {
  MultiHeadNet a({3, 20, 3, 10, 2, Activation::ELU});
  MultiHeadNet b({3, 20, 3, 10, 2, Activation::ELU});
  a.initialize(42);
  b.initialize(42);
  CHECK(a.parameters() == b.parameters());
  b.initialize(43);
  CHECK(a.parameters() != b.parameters());
  const auto groups = a.groups();
  const double limit = std::sqrt(6.0 / (3.0 + 20.0));
  CHECK(a.parameters().head(60).cwiseAbs().maxCoeff() <= limit);
  CHECK(a.parameters().segment(60, 20).isZero());
}
