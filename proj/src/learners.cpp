#include "madnet/learners.hpp"

#include "madnet/errors.hpp"
#include "madnet/rng.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <memory>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>

namespace madnet {

using Eigen::Index;

std::string to_string(LossKind kind) {
  switch (kind) {
    case LossKind::MADNET: return "madnet";
    case LossKind::AD: return "ad";
    case LossKind::BDMM: return "bdmm";
  }
  return "?";
}

LossKind loss_from_string(const std::string& name) {
  if (name == "madnet" || name == "MADNET") return LossKind::MADNET;
  if (name == "ad" || name == "AD") return LossKind::AD;
  if (name == "bdmm" || name == "BDMM") return LossKind::BDMM;
  throw ConfigError("unknown loss '" + name + "' (expected madnet, ad or bdmm)");
}

void MadnetLossSpec::validate() const {
  if (!(lambda_tilde >= 0.0) || !(rho >= 0.0)) throw ConfigError("lambda_tilde and rho must be >= 0");
}

void BdmmState::validate() const {
  if (!(delta >= 0.0)) throw ConfigError("bdmm damping delta must be >= 0");
  if (!(multiplier_lr >= 0.0)) throw ConfigError("bdmm multiplier learning rate must be >= 0");
}

void TrainConfig::validate() const {
  if (stages.empty()) throw ConfigError("training needs at least one stage");
  for (size_t s = 0; s < stages.size(); ++s) {
    const auto& st = stages[s];
    const std::string where = "stage " + std::to_string(s + 1) + ": ";
    if (st.max_epochs < 1) throw ConfigError(where + "max_epochs must be >= 1");
    if (st.early_stopping && (st.patience < 1 || st.patience >= st.max_epochs)) {
      throw ConfigError(where + "patience must lie in [1, max_epochs)");
    }
    if (st.batch_size < 1) throw ConfigError(where + "batch_size must be >= 1");
    if (!(st.learning_rate > 0.0)) throw ConfigError(where + "learning_rate must be > 0");
    if (!(st.weight_decay >= 0.0)) throw ConfigError(where + "weight_decay must be >= 0");
  }
  if (!(split_fraction > 0.0 && split_fraction < 1.0)) throw ConfigError("split_fraction must lie in (0, 1)");
  if (!(outcome_bias_learning_rate > 0.0)) throw ConfigError("outcome_bias_learning_rate must be > 0");
  madnet.validate();
  bdmm.validate();
}

TrainConfig TrainConfig::binary_schedule() {
  TrainConfig c;
  c.stages = {{100, 1e-4, 2, 64, 1e-3, true}, {600, 1e-5, 40, 64, 1e-3, true}};
  return c;
}

TrainConfig TrainConfig::continuous_schedule() {
  TrainConfig c;
  c.stages = {{100, 1e-3, 2, 64, 1e-3, true}, {300, 1e-4, 20, 64, 1e-3, true}};
  return c;
}

nlohmann::json TrainConfig::to_json() const {
  nlohmann::json st = nlohmann::json::array();
  for (const auto& s : stages) {
    st.push_back({{"max_epochs", s.max_epochs},
                  {"learning_rate", s.learning_rate},
                  {"patience", s.patience},
                  {"batch_size", s.batch_size},
                  {"weight_decay", s.weight_decay},
                  {"early_stopping", s.early_stopping}});
  }
  return {{"stages", st},
          {"split_fraction", split_fraction},
          {"seed", seed},
          {"loss", to_string(loss)},
          {"lambda_tilde", madnet.lambda_tilde},
          {"rho", madnet.rho},
          {"bdmm", {{"lambda", bdmm.lambda}, {"delta", bdmm.delta}, {"multiplier_lr", bdmm.multiplier_lr}}},
          {"outcome_bias_learning_rate", outcome_bias_learning_rate}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j, const TrainConfig& base) {
  TrainConfig c = base;
  try {
    if (j.contains("stages")) {
      c.stages.clear();
      const StageConfig d;
      for (const auto& s : j.at("stages")) {
        StageConfig st;
        st.max_epochs = s.value("max_epochs", d.max_epochs);
        st.learning_rate = s.value("learning_rate", d.learning_rate);
        st.patience = s.value("patience", d.patience);
        st.batch_size = s.value("batch_size", d.batch_size);
        st.weight_decay = s.value("weight_decay", d.weight_decay);
        st.early_stopping = s.value("early_stopping", d.early_stopping);
        c.stages.push_back(st);
      }
    }
    c.split_fraction = j.value("split_fraction", c.split_fraction);
    c.seed = j.value("seed", c.seed);
    if (j.contains("loss")) c.loss = loss_from_string(j.at("loss").get<std::string>());
    c.madnet.lambda_tilde = j.value("lambda_tilde", c.madnet.lambda_tilde);
    c.madnet.rho = j.value("rho", c.madnet.rho);
    if (j.contains("bdmm")) {
      const auto& b = j.at("bdmm");
      c.bdmm.lambda = b.value("lambda", c.bdmm.lambda);
      c.bdmm.delta = b.value("delta", c.bdmm.delta);
      c.bdmm.multiplier_lr = b.value("multiplier_lr", c.bdmm.multiplier_lr);
    }
    c.outcome_bias_learning_rate = j.value("outcome_bias_learning_rate", c.outcome_bias_learning_rate);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("training config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Losses

LossValue evaluate_loss(const LossParams& params, const LossInputs& in) {
  const Index n = in.f1.size();
  if (in.weight.size() != n || in.f2.size() != n || in.f3.size() != n || in.y.size() != n ||
      in.a_tilde.size() != n || (params.kind != LossKind::AD && in.beta.size() != n)) {
    throw DimensionError("loss inputs have unequal lengths");
  }
  if (n == 0) throw DomainError("loss of an empty batch");
  LossValue v;
  v.h = in.h;
  if (params.kind == LossKind::AD) {
    v.fit = in.weight.dot(in.f1.cwiseAbs2()) - 2.0 * in.h;
    v.d_f1 = 2.0 * in.weight.cwiseProduct(in.f1);
    v.d_h = -2.0;
  } else {
    const Eigen::VectorXd gap = in.beta - in.f1;
    v.fit = in.weight.dot(gap.cwiseAbs2());
    v.d_f1 = -2.0 * in.weight.cwiseProduct(gap);
    if (params.kind == LossKind::MADNET) {
      const double lt = params.madnet.lambda_tilde;
      v.constraint = lt * std::abs(in.h);
      v.d_h = in.h > 0.0 ? lt : in.h < 0.0 ? -lt : 0.0;
    } else {
      const auto& b = params.bdmm;
      v.constraint = b.lambda * in.h + b.delta * in.h * in.h;
      v.d_h = b.lambda + 2.0 * b.delta * in.h;
    }
  }
  const double rho = params.madnet.rho;
  const Eigen::ArrayXd t = in.a_tilde.array();
  const Eigen::ArrayXd r = in.y.array() - (t * in.f2.array() + (1.0 - t) * in.f3.array());
  v.regression = in.weight.dot(r.square().matrix());
  const Eigen::ArrayXd g = -2.0 * rho * in.weight.array() * r;
  v.d_f2 = (g * t).matrix();
  v.d_f3 = (g * (1.0 - t)).matrix();
  v.total = v.fit + v.constraint + rho * v.regression;
  return v;
}

TreatmentScale TreatmentScale::from(const Eigen::VectorXd& a) {
  if (a.size() == 0) throw DomainError("treatment scale of an empty sample");
  TreatmentScale s{a.minCoeff(), a.maxCoeff()};
  if (!(s.max > s.min)) throw DegenerateError("treatment is constant (min = max = " + std::to_string(s.min) + ")");
  return s;
}

Eigen::VectorXd TreatmentScale::operator()(const Eigen::VectorXd& a) const {
  return ((a.array() - min) / (max - min)).matrix();
}

namespace {

/// Network inputs for a batch. Binary estimands evaluate every row at a = 1
/// and a = 0 (columns [0, n) and [n, 2n)); the observed treatment is one of
/// them. Other estimands evaluate the observed treatment only.
struct Layout {
  Index n = 0;
  bool binary = false;
  bool tangent = false;
  Eigen::MatrixXd z;
  std::vector<Index> observed;
  std::vector<MomentTerm> terms;

  Index column(const MomentTerm& t, Index i) const {
    switch (t.point) {
      case EvalPoint::Treated: return i;
      case EvalPoint::Control: return n + i;
      case EvalPoint::Observed: break;
    }
    return observed[static_cast<size_t>(i)];
  }
};

Layout make_layout(const MomentFunctional& m, const Dataset& batch) {
  Layout l;
  l.n = batch.size();
  l.binary = m.binary_treatment();
  l.terms = moment_terms(m, batch.a, batch.x);
  l.observed.resize(static_cast<size_t>(l.n));
  const Index d = batch.dim();
  if (l.binary) {
    l.z.resize(1 + d, 2 * l.n);
    l.z.block(0, 0, 1, l.n).setOnes();
    l.z.block(0, l.n, 1, l.n).setZero();
    l.z.block(1, 0, d, l.n) = batch.x.transpose();
    l.z.block(1, l.n, d, l.n) = batch.x.transpose();
    for (Index i = 0; i < l.n; ++i) l.observed[static_cast<size_t>(i)] = batch.a[i] == 1.0 ? i : l.n + i;
  } else {
    l.z = batch.inputs();
    std::iota(l.observed.begin(), l.observed.end(), Index{0});
    for (const auto& t : l.terms) l.tangent = l.tangent || t.derivative;
  }
  return l;
}

/// One network pass over a layout. With `outcome_everywhere` false the
/// outcome heads only see the observed columns, which is all the loss needs.
struct Evaluation {
  Layout l;
  nn::MultiHeadNet::Pass pass;
  bool outcome_everywhere = true;

  /// Output column of head `h` holding the observed treatment of row i.
  Index observed_output(int h, Index i) const {
    return h > 0 && !outcome_everywhere ? i : l.observed[static_cast<size_t>(i)];
  }
};

void evaluate_network(const nn::MultiHeadNet& net, const MomentFunctional& m, const Dataset& data,
                      bool outcome_everywhere, Evaluation& ev) {
  ev.l = make_layout(m, data);
  ev.outcome_everywhere = outcome_everywhere || !ev.l.binary;
  if (ev.outcome_everywhere) {
    net.forward(ev.l.z, nn::kAllHeads, ev.l.tangent, ev.pass);
  } else {
    net.forward(ev.l.z, nn::kAllHeads, ev.l.tangent, ev.l.observed, ev.pass);
  }
}

/// Weighted moment sum_i w_i m(f1, W_i) from a pass.
double f1_moment(const Evaluation& ev, const Eigen::VectorXd& weight) {
  double h = 0.0;
  for (const auto& t : ev.l.terms) {
    const Eigen::MatrixXd& src = t.derivative ? ev.pass.tangent_of(0) : ev.pass.value(0);
    for (Index i = 0; i < ev.l.n; ++i) h += weight[i] * t.weight[i] * src(0, ev.l.column(t, i));
  }
  return h;
}

LossInputs loss_inputs(const Evaluation& ev, const KnownBeta& beta, const TreatmentScale& scale,
                       const Dataset& batch, bool need_beta) {
  const Index n = ev.l.n;
  LossInputs in;
  in.weight = Eigen::VectorXd::Constant(n, 1.0 / static_cast<double>(n));
  if (need_beta) in.beta = beta.beta.values(batch.a, batch.x);
  in.y = batch.y;
  in.a_tilde = scale(batch.a);
  in.f1.resize(n);
  in.f2.resize(n);
  in.f3.resize(n);
  for (Index i = 0; i < n; ++i) {
    in.f1[i] = ev.pass.value(0)(0, ev.observed_output(0, i));
    in.f2[i] = ev.pass.value(1)(0, ev.observed_output(1, i));
    in.f3[i] = ev.pass.value(2)(0, ev.observed_output(2, i));
  }
  in.h = f1_moment(ev, in.weight);
  return in;
}

/// Nuisance table rows from a pass with outcome heads on every column.
NuisanceTable table_from_pass(const Evaluation& ev, const Dataset& data, const MomentFunctional& m,
                              const KnownBeta& beta, double y_scale, const TreatmentScale& ts) {
  const Index n = ev.l.n;
  const Index cols = ev.l.z.cols();
  const auto& p = ev.pass;
  Eigen::VectorXd mu(cols), dmu, f1 = p.value(0).row(0).transpose(), df1, treat = ev.l.z.row(0).transpose();
  for (Index c = 0; c < cols; ++c) {
    const double t = ts(ev.l.z(0, c));
    mu[c] = y_scale * (t * p.value(1)(0, c) + (1.0 - t) * p.value(2)(0, c));
  }
  if (ev.l.tangent) {
    dmu.resize(cols);
    for (Index c = 0; c < cols; ++c) {
      const double t = ts(ev.l.z(0, c));
      dmu[c] = y_scale * ((p.value(1)(0, c) - p.value(2)(0, c)) / (ts.max - ts.min) + t * p.tangent_of(1)(0, c) +
                          (1.0 - t) * p.tangent_of(2)(0, c));
    }
    df1 = p.tangent_of(0).row(0).transpose();
  }
  const Eigen::VectorXd ones = Eigen::VectorXd::Ones(cols);
  auto moment = [&](const Eigen::VectorXd& value, const Eigen::VectorXd& deriv) {
    Eigen::VectorXd out = Eigen::VectorXd::Zero(n);
    for (const auto& t : ev.l.terms) {
      const Eigen::VectorXd& src = t.derivative ? deriv : value;
      for (Index i = 0; i < n; ++i) out[i] += t.weight[i] * src[ev.l.column(t, i)];
    }
    return out;
  };
  auto observed = [&](const Eigen::VectorXd& v) {
    Eigen::VectorXd out(n);
    for (Index i = 0; i < n; ++i) out[i] = v[ev.l.observed[static_cast<size_t>(i)]];
    return out;
  };
  NuisanceTable t;
  t.y = data.y;
  t.a = data.a;
  t.mu = observed(mu);
  t.m_mu = moment(mu, dmu);
  t.beta = beta.beta.values(data.a, data.x);
  t.m_beta = moment_values(m, beta.beta, data);
  t.beta_perp = observed(f1);
  t.m_beta_perp = moment(f1, df1);
  t.m_treatment = moment(treat, ones);
  return t;
}

constexpr Index kChunk = 2048;

/// Evaluates `fn(chunk_a, chunk_x)` over row blocks to bound memory.
template <class Fn>
Eigen::VectorXd chunked(const Eigen::VectorXd& a, const Eigen::MatrixXd& x, Fn&& fn) {
  Eigen::VectorXd out(a.size());
  for (Index s = 0; s < a.size(); s += kChunk) {
    const Index len = std::min(kChunk, a.size() - s);
    out.segment(s, len) = fn(a.segment(s, len), x.middleRows(s, len));
  }
  return out;
}

Eigen::MatrixXd net_inputs(const Eigen::VectorXd& a, const Eigen::MatrixXd& x) {
  Eigen::MatrixXd z(1 + x.cols(), a.size());
  z.row(0) = a.transpose();
  z.bottomRows(x.cols()) = x.transpose();
  return z;
}

DifferentiableFunction outcome_function(std::shared_ptr<const nn::MultiHeadNet> net, double y_scale,
                                        TreatmentScale ts) {
  auto value = [net, y_scale, ts](const Eigen::VectorXd& a, const Eigen::MatrixXd& x) {
    return chunked(a, x, [&](const Eigen::VectorXd& ca, const Eigen::MatrixXd& cx) {
      nn::MultiHeadNet::Pass pass;
      net->forward(net_inputs(ca, cx), nn::kTreated | nn::kControl, false, pass);
      const Eigen::ArrayXd t = ts(ca).array();
      return Eigen::VectorXd(y_scale * (t * pass.value(1).row(0).transpose().array() +
                                        (1.0 - t) * pass.value(2).row(0).transpose().array()));
    });
  };
  auto derivative = [net, y_scale, ts](const Eigen::VectorXd& a, const Eigen::MatrixXd& x) {
    return chunked(a, x, [&](const Eigen::VectorXd& ca, const Eigen::MatrixXd& cx) {
      nn::MultiHeadNet::Pass pass;
      net->forward(net_inputs(ca, cx), nn::kTreated | nn::kControl, true, pass);
      const Eigen::ArrayXd t = ts(ca).array();
      const Eigen::ArrayXd f2 = pass.value(1).row(0).transpose().array();
      const Eigen::ArrayXd f3 = pass.value(2).row(0).transpose().array();
      const Eigen::ArrayXd d2 = pass.tangent_of(1).row(0).transpose().array();
      const Eigen::ArrayXd d3 = pass.tangent_of(2).row(0).transpose().array();
      return Eigen::VectorXd(y_scale * ((f2 - f3) / (ts.max - ts.min) + t * d2 + (1.0 - t) * d3));
    });
  };
  return DifferentiableFunction(value, derivative);
}

DifferentiableFunction f1_function(std::shared_ptr<const nn::MultiHeadNet> net) {
  auto eval = [net](bool tangent) {
    return [net, tangent](const Eigen::VectorXd& a, const Eigen::MatrixXd& x) {
      return chunked(a, x, [&](const Eigen::VectorXd& ca, const Eigen::MatrixXd& cx) {
        nn::MultiHeadNet::Pass pass;
        net->forward(net_inputs(ca, cx), nn::kRiesz, tangent, pass);
        return Eigen::VectorXd((tangent ? pass.tangent_of(0) : pass.value(0)).row(0).transpose());
      });
    };
  };
  return DifferentiableFunction(eval(false), eval(true));
}

}  // namespace

LossValue network_loss(const nn::MultiHeadNet& net, const LossParams& params, const MomentFunctional& m,
                       const KnownBeta& beta, const TreatmentScale& scale, const Dataset& batch,
                       Eigen::VectorXd* grad) {
  thread_local Evaluation ev;  // buffers reused across batches
  evaluate_network(net, m, batch, false, ev);
  const LossInputs in = loss_inputs(ev, beta, scale, batch, params.kind != LossKind::AD);
  LossValue v = evaluate_loss(params, in);
  if (!std::isfinite(v.total)) throw NumericalError("non-finite training loss");
  if (!grad) return v;

  const Layout& l = ev.l;
  nn::MultiHeadNet::Adjoint adj;
  for (int h = 0; h < 3; ++h) adj.value[h] = Eigen::MatrixXd::Zero(1, ev.pass.value(h).cols());
  if (l.tangent) adj.tangent[0] = Eigen::MatrixXd::Zero(1, l.z.cols());
  for (Index i = 0; i < l.n; ++i) {
    adj.value[0](0, ev.observed_output(0, i)) += v.d_f1[i];
    adj.value[1](0, ev.observed_output(1, i)) += v.d_f2[i];
    adj.value[2](0, ev.observed_output(2, i)) += v.d_f3[i];
  }
  if (v.d_h != 0.0) {
    for (const auto& t : l.terms) {
      Eigen::MatrixXd& dst = t.derivative ? adj.tangent[0] : adj.value[0];
      for (Index i = 0; i < l.n; ++i) dst(0, l.column(t, i)) += v.d_h * in.weight[i] * t.weight[i];
    }
  }
  grad->setZero(net.parameter_count());
  net.backward(ev.pass, adj, *grad);
  return v;
}

// ---------------------------------------------------------------------------
// Tabular learner

TabularTrajectory tabular_descent(const oracle::FiniteDistribution& dist, const oracle::LinearFunctionalVector& ell,
                                  const Eigen::VectorXd& beta, LossParams params, const Eigen::VectorXd& f0,
                                  int steps, double learning_rate) {
  const Index k = dist.size();
  if (ell.coeffs.size() != k || beta.size() != k || f0.size() != k) {
    throw DimensionError("tabular descent: functional, beta and start must match the support size");
  }
  if (steps < 0 || !(learning_rate > 0.0)) throw DomainError("tabular descent: need steps >= 0 and lr > 0");
  // outcome terms vanish with rho = 0 and y = f2 = f3 = 0
  params.madnet.rho = 0.0;
  LossInputs in;
  in.weight = dist.probs;
  in.beta = beta;
  in.y = in.a_tilde = in.f2 = in.f3 = Eigen::VectorXd::Zero(k);
  in.f1 = f0;

  TabularTrajectory tr;
  for (int s = 0; s < steps; ++s) {
    in.h = ell.apply(in.f1);
    tr.h.push_back(in.h);
    const LossValue v = evaluate_loss(params, in);
    in.f1 -= learning_rate * (v.d_f1 + v.d_h * ell.coeffs);
    if (params.kind == LossKind::BDMM) params.bdmm.lambda += params.bdmm.multiplier_lr * in.h;
    tr.lambda.push_back(params.bdmm.lambda);
  }
  tr.f = in.f1;
  return tr;
}

ToyProblem toy_problem() {
  ToyProblem t;
  const double px[3] = {0.3, 0.5, 0.2};
  const double p[3] = {0.2, 0.5, 0.7};
  t.dist.probs.resize(6);
  t.ell.coeffs.resize(6);
  t.beta.resize(6);
  for (int s = 0; s < 3; ++s) {
    for (int a = 0; a < 2; ++a) {
      const Index i = 2 * s + a;
      t.dist.support.push_back({static_cast<double>(a), Eigen::VectorXd::Constant(1, static_cast<double>(s))});
      t.dist.probs[i] = px[s] * (a ? p[s] : 1.0 - p[s]);
      t.ell.coeffs[i] = a ? px[s] : -px[s];  // h(f) = E[f(1, X) - f(0, X)]
      t.beta[i] = a;
    }
  }
  return t;
}

TabularTrajectory run_toy_problem(const ToyProblem& toy, LossParams params) {
  params.bdmm.multiplier_lr = toy.multiplier_lr;
  return tabular_descent(toy.dist, toy.ell, toy.beta, params, toy.beta, toy.steps, toy.learning_rate);
}

// ---------------------------------------------------------------------------
// Early stopping

bool EarlyStopping::update(double val_loss) {
  ++epoch_;
  if (epoch_ == 1 || val_loss < best_) {
    best_ = val_loss;
    best_epoch_ = epoch_;
    wait_ = 0;
    return true;
  }
  ++wait_;
  return false;
}

// ---------------------------------------------------------------------------
// Trained model

DifferentiableFunction TrainedModel::outcome() const {
  return outcome_function(std::make_shared<const nn::MultiHeadNet>(net), y_scale, treatment);
}

DifferentiableFunction TrainedModel::head_f1() const {
  return f1_function(std::make_shared<const nn::MultiHeadNet>(net));
}

nlohmann::json TrainedModel::to_json() const {
  return {{"network", nn::checkpoint_json(net)},
          {"loss", to_string(loss)},
          {"y_scale", y_scale},
          {"treatment_min", treatment.min},
          {"treatment_max", treatment.max}};
}

TrainedModel TrainedModel::from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("network")) throw ParseError("model checkpoint: missing 'network'");
  TrainedModel m(nn::net_from_checkpoint(j.at("network")));
  try {
    m.loss = loss_from_string(j.at("loss").get<std::string>());
    m.y_scale = j.at("y_scale").get<double>();
    m.treatment = {j.at("treatment_min").get<double>(), j.at("treatment_max").get<double>()};
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("model checkpoint: ") + e.what());
  }
  return m;
}

ModelTable tabulate(const TrainedModel& model, const Dataset& data, const MomentFunctional& m,
                    const KnownBeta& beta) {
  data.validate();
  ModelTable out;
  auto& t = out.table;
  const Index n = data.size();
  for (auto* v : {&t.y, &t.a, &t.mu, &t.m_mu, &t.beta, &t.m_beta, &t.beta_perp, &t.m_beta_perp, &t.m_treatment}) {
    v->resize(n);
  }
  Evaluation ev;
  for (Index s = 0; s < n; s += kChunk) {
    const Index len = std::min(kChunk, n - s);
    std::vector<Index> rows(static_cast<size_t>(len));
    std::iota(rows.begin(), rows.end(), s);
    const Dataset part = data.subset(rows);
    evaluate_network(model.net, m, part, true, ev);
    const NuisanceTable p = table_from_pass(ev, part, m, beta, model.y_scale, model.treatment);
    t.y.segment(s, len) = p.y;
    t.a.segment(s, len) = p.a;
    t.mu.segment(s, len) = p.mu;
    t.m_mu.segment(s, len) = p.m_mu;
    t.beta.segment(s, len) = p.beta;
    t.m_beta.segment(s, len) = p.m_beta;
    t.beta_perp.segment(s, len) = p.beta_perp;
    t.m_beta_perp.segment(s, len) = p.m_beta_perp;
    t.m_treatment.segment(s, len) = p.m_treatment;
  }
  if (model.loss == LossKind::AD) out.alpha = AlphaTable{t.beta_perp, t.m_beta_perp};
  return out;
}

EpochMetrics epoch_diagnostics(const TrainedModel& model, const Dataset& validation, const MomentFunctional& m,
                               const KnownBeta& beta, const LossParams& params) {
  validation.validate();
  EpochMetrics e;
  thread_local Evaluation ev;
  evaluate_network(model.net, m, validation, true, ev);
  Dataset scaled = validation;
  scaled.y /= model.y_scale;
  e.val_loss = evaluate_loss(params, loss_inputs(ev, beta, model.treatment, scaled, params.kind != LossKind::AD)).total;

  const NuisanceTable t = table_from_pass(ev, validation, m, beta, model.y_scale, model.treatment);
  e.h = t.average(t.m_beta_perp);
  std::optional<AlphaTable> alpha;
  if (model.loss == LossKind::AD) {
    alpha = AlphaTable{t.beta_perp, t.m_beta_perp};
  } else {
    try {
      alpha = rr_from_beta_perp(t).table;
    } catch (const DegenerateError&) {
      // beta_perp_hat == beta on the validation rows
    }
  }
  if (alpha) {
    e.moment_identity_error = moment_identity_diag(t, *alpha);
    e.ipw_drift = t.average(t.y.cwiseProduct(alpha->alpha)) - t.average(t.m_mu);
  } else {
    e.moment_identity_error = e.ipw_drift = std::numeric_limits<double>::quiet_NaN();
  }
  return e;
}

// ---------------------------------------------------------------------------
// Training

TrainedModel train(const Dataset& data, const nn::MultiHeadSpec& net_spec, const TrainConfig& config,
                   const MomentFunctional& m, const KnownBeta& beta, const EpochCallback& on_epoch) {
  config.validate();
  data.validate();
  if (data.size() < 10) throw DomainError("training needs at least 10 rows, got " + std::to_string(data.size()));
  moment_terms(m, data.a, data.x);  // rejects treatments or policies the moment cannot handle

  nn::MultiHeadSpec spec = net_spec;
  spec.input_dim = 1 + data.dim();
  TrainedModel model(nn::MultiHeadNet{spec});
  model.loss = config.loss;
  model.treatment = TreatmentScale::from(data.a);

  const Split parts = split(data, config.split_fraction, derive_seed(config.seed, 1));
  model.train_index = parts.train_index;
  model.validation_index = parts.validation_index;
  model.y_scale = sample_sd(parts.train.y);
  if (!(model.y_scale > 0.0)) throw DegenerateError("training outcomes are constant");
  Dataset train_set = parts.train;
  train_set.y /= model.y_scale;

  model.net.initialize(derive_seed(config.seed, 2));
  std::mt19937_64 shuffle_rng(derive_seed(config.seed, 3));

  LossParams params{config.loss, config.madnet, config.bdmm};
  const Index n = train_set.size();
  std::vector<Index> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  Eigen::VectorXd grad;
  int epoch = 0;

  for (size_t s = 0; s < config.stages.size(); ++s) {
    const StageConfig& stage = config.stages[s];
    nn::AdamW opt(model.net.groups(), stage.learning_rate, stage.weight_decay);
    opt.set_group_learning_rate("outcome_bias_1", config.outcome_bias_learning_rate);
    opt.set_group_learning_rate("outcome_bias_0", config.outcome_bias_learning_rate);
    EarlyStopping stopper(stage.patience);
    Eigen::VectorXd best = model.net.parameters();

    for (int e = 0; e < stage.max_epochs; ++e) {
      std::shuffle(order.begin(), order.end(), shuffle_rng);
      double train_loss = 0.0;
      for (Index start = 0; start < n; start += stage.batch_size) {
        const Index len = std::min<Index>(stage.batch_size, n - start);
        const Dataset batch =
            train_set.subset(std::vector<Index>(order.begin() + start, order.begin() + start + len));
        const LossValue v = network_loss(model.net, params, m, beta, model.treatment, batch, &grad);
        opt.step(model.net.parameters(), grad);
        // ascent on the multiplier
        if (params.kind == LossKind::BDMM) params.bdmm.lambda += params.bdmm.multiplier_lr * v.h;
        train_loss += v.total * static_cast<double>(len);
      }
      ++epoch;
      const EpochMetrics met = epoch_diagnostics(model, parts.validation, m, beta, params);
      EpochRecord rec{epoch,
                      static_cast<int>(s + 1),
                      train_loss / static_cast<double>(n),
                      met.val_loss,
                      met.h,
                      met.moment_identity_error,
                      met.ipw_drift,
                      params.bdmm.lambda};
      model.log.push_back(rec);
      if (on_epoch) on_epoch(rec);
      if (!stage.early_stopping) continue;
      if (stopper.update(met.val_loss)) best = model.net.parameters();
      if (stopper.should_stop()) break;
    }
    if (stage.early_stopping) model.net.parameters() = best;
  }
  return model;
}

// ---------------------------------------------------------------------------
// Diagnostics CSV

void write_diagnostics_csv(std::ostream& out, const std::vector<EpochRecord>& log) {
  out << "epoch,stage,train_loss,val_loss,constraint_violation,moment_identity_error,ipw_drift,lambda\n";
  const auto old = out.precision(17);
  for (const auto& r : log) {
    out << r.epoch << ',' << r.stage << ',' << r.train_loss << ',' << r.val_loss << ',' << r.constraint_violation
        << ',' << r.moment_identity_error << ',' << r.ipw_drift << ',' << r.lambda << '\n';
  }
  out.precision(old);
}

std::vector<EpochRecord> read_diagnostics_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError("diagnostics csv: missing header");
  std::vector<EpochRecord> log;
  int row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> v;
    while (std::getline(ss, cell, ',')) {
      try {
        v.push_back(std::stod(cell));
      } catch (const std::exception&) {
        v.push_back(std::numeric_limits<double>::quiet_NaN());
        if (cell != "nan" && cell != "-nan") throw ParseError("diagnostics csv: bad cell at row " + std::to_string(row));
      }
    }
    if (v.size() != 8) throw ParseError("diagnostics csv: row " + std::to_string(row) + " has " +
                                        std::to_string(v.size()) + " cells, expected 8");
    log.push_back({static_cast<int>(v[0]), static_cast<int>(v[1]), v[2], v[3], v[4], v[5], v[6], v[7]});
  }
  return log;
}

}  // namespace madnet
