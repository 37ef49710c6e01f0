#include "madnet/neural.hpp"

#include "madnet/errors.hpp"

#include <cmath>

namespace madnet::nn {

namespace {

using ConstMatMap = Eigen::Map<const Eigen::MatrixXd>;
using MatMap = Eigen::Map<Eigen::MatrixXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;
using VecMap = Eigen::Map<Eigen::VectorXd>;

void activate(Activation act, const Eigen::MatrixXd& pre, Eigen::MatrixXd& out, Eigen::MatrixXd& slope) {
  out.resize(pre.rows(), pre.cols());
  slope.resize(pre.rows(), pre.cols());
  const Index size = pre.size();
  const double* z = pre.data();
  double* o = out.data();
  double* s = slope.data();
  if (act == Activation::ELU) {
    for (Index i = 0; i < size; ++i) {
      if (z[i] > 0.0) {
        o[i] = z[i];
        s[i] = 1.0;
      } else {
        const double e = std::exp(z[i]);
        o[i] = e - 1.0;
        s[i] = e;
      }
    }
  } else {
    // derivative at 0 taken as 0
    for (Index i = 0; i < size; ++i) {
      const bool on = z[i] > 0.0;
      o[i] = on ? z[i] : 0.0;
      s[i] = on ? 1.0 : 0.0;
    }
  }
}

/// sigma''(pre); ELU's second derivative equals its slope on the negative side.
Eigen::MatrixXd curvature(Activation act, const Eigen::MatrixXd& pre, const Eigen::MatrixXd& slope) {
  if (act == Activation::ReLU) return Eigen::MatrixXd::Zero(pre.rows(), pre.cols());
  return (pre.array() > 0.0).select(0.0, slope);
}

}  // namespace

std::string to_string(Activation act) { return act == Activation::ELU ? "elu" : "relu"; }

Activation activation_from_string(const std::string& name) {
  if (name == "elu" || name == "ELU") return Activation::ELU;
  if (name == "relu" || name == "ReLU" || name == "RELU") return Activation::ReLU;
  throw ConfigError("unknown activation '" + name + "'");
}

// ---------------------------------------------------------------------------
// DenseStack

DenseStack::DenseStack(Index input_dim, const std::vector<Index>& widths, bool activate_last,
                       Index offset, Activation act)
    : input_dim_(input_dim), act_(act) {
  if (input_dim < 1) throw ConfigError("dense stack: input dimension must be >= 1");
  Index in = input_dim;
  for (size_t l = 0; l < widths.size(); ++l) {
    if (widths[l] < 1) throw ConfigError("dense stack: layer widths must be >= 1");
    DenseLayer layer{in, widths[l], l + 1 < widths.size() || activate_last, offset};
    offset += layer.parameter_count();
    in = widths[l];
    layers_.push_back(layer);
  }
}

Index DenseStack::parameter_count() const {
  Index total = 0;
  for (const auto& l : layers_) total += l.parameter_count();
  return total;
}

void DenseStack::forward(const double* params, const Eigen::MatrixXd& in, const Eigen::MatrixXd* d_in,
                         Trace& trace) const {
  if (in.rows() != input_dim_) {
    throw DimensionError("dense stack: input has " + std::to_string(in.rows()) + " rows, expected " +
                         std::to_string(input_dim_));
  }
  const size_t depth = layers_.size();
  trace.tangent = d_in != nullptr;
  trace.input.resize(depth);
  trace.pre.resize(depth);
  trace.slope.resize(depth);
  trace.d_input.resize(trace.tangent ? depth : 0);
  trace.d_pre.resize(trace.tangent ? depth : 0);
  if (depth == 0) {
    trace.out = in;
    if (trace.tangent) trace.d_out = *d_in;
    return;
  }
  for (size_t l = 0; l < depth; ++l) {
    const auto& layer = layers_[l];
    const ConstMatMap w(params + layer.offset, layer.out, layer.in);
    const ConstVecMap b(params + layer.offset + layer.out * layer.in, layer.out);
    const Eigen::MatrixXd& h = l == 0 ? in : trace.input[l];
    if (l == 0) trace.input[0] = in;
    auto& pre = trace.pre[l];
    pre.noalias() = w * h;
    pre.colwise() += b;
    Eigen::MatrixXd& out = l + 1 < depth ? trace.input[l + 1] : trace.out;
    if (layer.activated) {
      activate(act_, pre, out, trace.slope[l]);
    } else {
      out = pre;
      trace.slope[l].resize(0, 0);
    }
    if (trace.tangent) {
      const Eigen::MatrixXd& dh = l == 0 ? *d_in : trace.d_input[l];
      if (l == 0) trace.d_input[0] = *d_in;
      auto& dpre = trace.d_pre[l];
      dpre.noalias() = w * dh;
      Eigen::MatrixXd& dout = l + 1 < depth ? trace.d_input[l + 1] : trace.d_out;
      if (layer.activated) {
        dout = trace.slope[l].cwiseProduct(dpre);
      } else {
        dout = dpre;
      }
    }
  }
}

void DenseStack::backward(const double* params, const Trace& trace, const Eigen::MatrixXd* g_out,
                          const Eigen::MatrixXd* g_dout, double* grad, Eigen::MatrixXd* g_in,
                          Eigen::MatrixXd* g_din) const {
  const Index n = trace.out.cols();
  const bool tangent = trace.tangent && g_dout != nullptr;
  Eigen::MatrixXd g = g_out ? *g_out : Eigen::MatrixXd::Zero(output_dim(), n);
  Eigen::MatrixXd gt;
  if (tangent) gt = *g_dout;
  Eigen::MatrixXd gz, gdz;
  for (size_t k = layers_.size(); k-- > 0;) {
    const auto& layer = layers_[k];
    const ConstMatMap w(params + layer.offset, layer.out, layer.in);
    MatMap gw(grad + layer.offset, layer.out, layer.in);
    VecMap gb(grad + layer.offset + layer.out * layer.in, layer.out);
    if (layer.activated) {
      gz = g.cwiseProduct(trace.slope[k]);
      if (tangent) {
        gz += gt.cwiseProduct(curvature(act_, trace.pre[k], trace.slope[k])).cwiseProduct(trace.d_pre[k]);
        gdz = gt.cwiseProduct(trace.slope[k]);
      }
    } else {
      gz = g;
      if (tangent) gdz = gt;
    }
    gw.noalias() += gz * trace.input[k].transpose();
    gb += gz.rowwise().sum();
    if (tangent) gw.noalias() += gdz * trace.d_input[k].transpose();
    if (k > 0 || g_in || g_din) {
      g.noalias() = w.transpose() * gz;
      if (tangent) gt.noalias() = w.transpose() * gdz;
    }
  }
  if (g_in) *g_in = g;
  if (g_din) *g_din = tangent ? gt : Eigen::MatrixXd::Zero(input_dim_, n);
}

void DenseStack::initialize(double* params, std::mt19937_64& rng) const {
  for (const auto& layer : layers_) {
    const double limit = std::sqrt(6.0 / static_cast<double>(layer.in + layer.out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    for (Index i = 0; i < layer.out * layer.in; ++i) params[layer.offset + i] = dist(rng);
    for (Index i = 0; i < layer.out; ++i) params[layer.offset + layer.out * layer.in + i] = 0.0;
  }
}

// ---------------------------------------------------------------------------
// Mlp

namespace {

Eigen::MatrixXd treatment_seed(Index rows, Index cols) {
  Eigen::MatrixXd seed = Eigen::MatrixXd::Zero(rows, cols);
  seed.row(0).setOnes();
  return seed;
}

}  // namespace

Mlp::Mlp(MlpSpec spec) : spec_(std::move(spec)) {
  std::vector<Index> widths = spec_.hidden_widths;
  widths.push_back(spec_.output_dim);
  stack_ = DenseStack(spec_.input_dim, widths, false, 0, spec_.activation);
  params_ = Eigen::VectorXd::Zero(stack_.parameter_count());
}

void Mlp::initialize(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  stack_.initialize(params_.data(), rng);
}

void Mlp::forward(const Eigen::MatrixXd& in, bool tangent, DenseStack::Trace& trace) const {
  if (tangent) {
    const Eigen::MatrixXd seed = treatment_seed(in.rows(), in.cols());
    stack_.forward(params_.data(), in, &seed, trace);
  } else {
    stack_.forward(params_.data(), in, nullptr, trace);
  }
}

Eigen::MatrixXd Mlp::forward(const Eigen::MatrixXd& in) const {
  DenseStack::Trace trace;
  forward(in, false, trace);
  return trace.out;
}

Eigen::MatrixXd Mlp::dforward_da(const Eigen::MatrixXd& in) const {
  DenseStack::Trace trace;
  forward(in, true, trace);
  return trace.d_out;
}

Eigen::VectorXd Mlp::backward(const DenseStack::Trace& trace, const Eigen::MatrixXd* g_out,
                              const Eigen::MatrixXd* g_dout, Eigen::MatrixXd* g_in) const {
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(params_.size());
  stack_.backward(params_.data(), trace, g_out, g_dout, grad.data(), g_in, nullptr);
  return grad;
}

// ---------------------------------------------------------------------------
// MultiHeadNet

nlohmann::json MultiHeadSpec::to_json() const {
  return {{"input_dim", input_dim},   {"trunk_width", trunk_width}, {"trunk_depth", trunk_depth},
          {"head_width", head_width}, {"head_depth", head_depth},   {"activation", nn::to_string(activation)}};
}

MultiHeadSpec MultiHeadSpec::from_json(const nlohmann::json& j) {
  MultiHeadSpec s;
  try {
    s.input_dim = j.at("input_dim").get<Index>();
    s.trunk_width = j.value("trunk_width", s.trunk_width);
    s.trunk_depth = j.value("trunk_depth", s.trunk_depth);
    s.head_width = j.value("head_width", s.head_width);
    s.head_depth = j.value("head_depth", s.head_depth);
    s.activation = activation_from_string(j.value("activation", std::string("elu")));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("network spec: ") + e.what());
  }
  return s;
}

MultiHeadNet::MultiHeadNet(MultiHeadSpec spec) : spec_(spec) {
  if (spec_.trunk_depth < 0 || spec_.head_depth < 0) throw ConfigError("network depths must be >= 0");
  trunk_ = DenseStack(spec_.input_dim, std::vector<Index>(static_cast<size_t>(spec_.trunk_depth), spec_.trunk_width),
                      true, 0, spec_.activation);
  Index offset = trunk_.parameter_count();
  const Index rep = trunk_.output_dim();
  heads_[0] = DenseStack(rep, {1}, false, offset, spec_.activation);
  offset += heads_[0].parameter_count();
  std::vector<Index> outcome(static_cast<size_t>(spec_.head_depth), spec_.head_width);
  outcome.push_back(1);
  for (int h = 1; h < 3; ++h) {
    heads_[h] = DenseStack(rep, outcome, false, offset, spec_.activation);
    offset += heads_[h].parameter_count();
  }
  params_ = Eigen::VectorXd::Zero(offset);
}

Index MultiHeadNet::analytic_parameter_count(const MultiHeadSpec& s) {
  const Index tw = s.trunk_width, hw = s.head_width;
  const Index trunk = s.trunk_depth == 0 ? 0 : (s.input_dim + 1) * tw + (s.trunk_depth - 1) * (tw * tw + tw);
  const Index rep = s.trunk_depth == 0 ? s.input_dim : tw;
  const Index rr = rep + 1;
  const Index outcome = s.head_depth == 0 ? rep + 1 : (rep + 1) * hw + (s.head_depth - 1) * (hw * hw + hw) + hw + 1;
  return trunk + rr + 2 * outcome;
}

std::vector<ParamGroup> MultiHeadNet::groups() const {
  const Index t = trunk_.parameter_count();
  const Index r = t + heads_[0].parameter_count();
  const Index e1 = r + heads_[1].parameter_count();
  const Index e0 = e1 + heads_[2].parameter_count();
  return {{"trunk", 0, t},
          {"rr_head", t, r},
          {"outcome_head_1", r, e1 - 1},
          {"outcome_bias_1", e1 - 1, e1},
          {"outcome_head_0", e1, e0 - 1},
          {"outcome_bias_0", e0 - 1, e0}};
}

void MultiHeadNet::initialize(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  trunk_.initialize(params_.data(), rng);
  for (const auto& h : heads_) h.initialize(params_.data(), rng);
}

void MultiHeadNet::forward(const Eigen::MatrixXd& z, unsigned heads, bool tangent, Pass& pass) const {
  forward(z, heads, tangent, {}, pass);
}

void MultiHeadNet::forward(const Eigen::MatrixXd& z, unsigned heads, bool tangent,
                           const std::vector<Index>& outcome_columns, Pass& pass) const {
  pass.heads = heads;
  pass.tangent = tangent;
  pass.outcome_columns = outcome_columns;
  for (Index c : outcome_columns) {
    if (c < 0 || c >= z.cols()) throw DimensionError("outcome column out of range");
  }
  if (tangent) {
    const Eigen::MatrixXd seed = treatment_seed(z.rows(), z.cols());
    trunk_.forward(params_.data(), z, &seed, pass.trunk);
  } else {
    trunk_.forward(params_.data(), z, nullptr, pass.trunk);
  }
  const bool subset = !outcome_columns.empty();
  Eigen::MatrixXd rep, drep;
  if (subset && (heads & (kTreated | kControl))) {
    rep = pass.trunk.out(Eigen::all, outcome_columns);
    if (tangent) drep = pass.trunk.d_out(Eigen::all, outcome_columns);
  }
  for (int h = 0; h < 3; ++h) {
    if (!(heads & (1u << h))) continue;
    const bool sub = subset && h > 0;
    const Eigen::MatrixXd& in = sub ? rep : pass.trunk.out;
    const Eigen::MatrixXd* d_in = tangent ? (sub ? &drep : &pass.trunk.d_out) : nullptr;
    heads_[h].forward(params_.data(), in, d_in, pass.head[h]);
  }
}

void MultiHeadNet::backward(const Pass& pass, const Adjoint& adj, Eigen::VectorXd& grad,
                            Eigen::MatrixXd* g_input) const {
  if (grad.size() != params_.size()) grad = Eigen::VectorXd::Zero(params_.size());
  const Index n = pass.trunk.out.cols();
  Eigen::MatrixXd g_rep = Eigen::MatrixXd::Zero(trunk_.output_dim(), n);
  Eigen::MatrixXd g_drep;
  if (pass.tangent) g_drep = Eigen::MatrixXd::Zero(trunk_.output_dim(), n);
  bool any_tangent = false;
  Eigen::MatrixXd gi, gdi;
  for (int h = 0; h < 3; ++h) {
    if (!(pass.heads & (1u << h))) continue;
    const Eigen::MatrixXd* gv = adj.value[h].size() ? &adj.value[h] : nullptr;
    const Eigen::MatrixXd* gt = pass.tangent && adj.tangent[h].size() ? &adj.tangent[h] : nullptr;
    if (!gv && !gt) continue;
    heads_[h].backward(params_.data(), pass.head[h], gv, gt, grad.data(), &gi, gt ? &gdi : nullptr);
    const bool sub = h > 0 && !pass.outcome_columns.empty();
    if (sub) {
      for (size_t j = 0; j < pass.outcome_columns.size(); ++j) {
        g_rep.col(pass.outcome_columns[j]) += gi.col(Index(j));
      }
    } else {
      g_rep += gi;
    }
    if (gt) {
      if (sub) {
        for (size_t j = 0; j < pass.outcome_columns.size(); ++j) {
          g_drep.col(pass.outcome_columns[j]) += gdi.col(Index(j));
        }
      } else {
        g_drep += gdi;
      }
      any_tangent = true;
    }
  }
  trunk_.backward(params_.data(), pass.trunk, &g_rep, any_tangent ? &g_drep : nullptr, grad.data(),
                  g_input, nullptr);
}

Eigen::MatrixXd MultiHeadNet::predict(const Eigen::MatrixXd& z) const {
  Pass pass;
  forward(z, kAllHeads, false, pass);
  Eigen::MatrixXd out(3, z.cols());
  for (int h = 0; h < 3; ++h) out.row(h) = pass.value(h);
  return out;
}

Eigen::MatrixXd MultiHeadNet::dforward_da(const Eigen::MatrixXd& z) const {
  Pass pass;
  forward(z, kAllHeads, true, pass);
  Eigen::MatrixXd out(3, z.cols());
  for (int h = 0; h < 3; ++h) out.row(h) = pass.tangent_of(h);
  return out;
}

// ---------------------------------------------------------------------------
// AdamW

AdamW::AdamW(std::vector<ParamGroup> groups, double learning_rate, double weight_decay, double beta1,
             double beta2, double eps)
    : groups_(std::move(groups)), wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {
  Index total = 0;
  for (const auto& g : groups_) {
    if (g.begin != total || g.end < g.begin) throw ConfigError("adamw: parameter groups must tile the array");
    total = g.end;
  }
  lr_.assign(groups_.size(), learning_rate);
  m_ = Eigen::VectorXd::Zero(total);
  v_ = Eigen::VectorXd::Zero(total);
}

void AdamW::set_group_learning_rate(const std::string& group, double lr) {
  for (size_t g = 0; g < groups_.size(); ++g) {
    if (groups_[g].name == group) {
      lr_[g] = lr;
      return;
    }
  }
  throw ConfigError("adamw: unknown parameter group '" + group + "'");
}

double AdamW::group_learning_rate(const std::string& group) const {
  for (size_t g = 0; g < groups_.size(); ++g) {
    if (groups_[g].name == group) return lr_[g];
  }
  throw ConfigError("adamw: unknown parameter group '" + group + "'");
}

void AdamW::step(Eigen::VectorXd& params, const Eigen::VectorXd& grads) {
  if (params.size() != m_.size() || grads.size() != m_.size()) {
    throw DimensionError("adamw: parameter/gradient size mismatch");
  }
  for (const auto& g : groups_) {
    if (!grads.segment(g.begin, g.end - g.begin).allFinite()) {
      throw NumericalError("adamw: non-finite gradient in parameter group '" + g.name + "'");
    }
  }
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  m_ = beta1_ * m_ + (1.0 - beta1_) * grads;
  v_ = beta2_ * v_ + (1.0 - beta2_) * grads.cwiseAbs2();
  for (size_t k = 0; k < groups_.size(); ++k) {
    const auto& g = groups_[k];
    const Index len = g.end - g.begin;
    auto p = params.segment(g.begin, len);
    const auto mhat = m_.segment(g.begin, len).array() / c1;
    const auto vhat = v_.segment(g.begin, len).array() / c2;
    const Eigen::ArrayXd decay = lr_[k] * wd_ * p.array();
    p.array() -= lr_[k] * mhat / (vhat.sqrt() + eps_);
    p.array() -= decay;
  }
}

// ---------------------------------------------------------------------------
// Checkpoints

nlohmann::json checkpoint_json(const MultiHeadNet& net) {
  nlohmann::json groups = nlohmann::json::object();
  for (const auto& g : net.groups()) {
    const double* p = net.parameters().data() + g.begin;
    groups[g.name] = std::vector<double>(p, p + (g.end - g.begin));
  }
  return {{"architecture", net.spec().to_json()}, {"parameters", groups}};
}

MultiHeadNet net_from_checkpoint(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("architecture") || !j.contains("parameters")) {
    throw ParseError("checkpoint: expected keys 'architecture' and 'parameters'");
  }
  MultiHeadNet net(MultiHeadSpec::from_json(j.at("architecture")));
  const auto& groups = j.at("parameters");
  for (const auto& g : net.groups()) {
    if (!groups.contains(g.name)) throw ParseError("checkpoint: missing parameter group '" + g.name + "'");
    std::vector<double> values;
    try {
      values = groups.at(g.name).get<std::vector<double>>();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("checkpoint: parameter group '" + g.name + "': " + e.what());
    }
    if (static_cast<Index>(values.size()) != g.end - g.begin) {
      throw DimensionError("checkpoint: parameter group '" + g.name + "' has " + std::to_string(values.size()) +
                           " values, architecture expects " + std::to_string(g.end - g.begin));
    }
    for (Index i = 0; i < g.end - g.begin; ++i) net.parameters()[g.begin + i] = values[static_cast<size_t>(i)];
  }
  return net;
}

}  // namespace madnet::nn
