#pragma once

// Small dense-network engine for the multi-headed learners.
//
// Every layer propagates a value and, optionally, the exact derivative of
// that value with respect to input coordinate 0 (the treatment). The backward
// pass differentiates both, so losses may depend on df/da as well as f.

#include <Eigen/Dense>
#include <json.hpp>

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace madnet::nn {

using Eigen::Index;

enum class Activation { ELU, ReLU };

std::string to_string(Activation act);
Activation activation_from_string(const std::string& name);

struct DenseLayer {
  Index in = 0;
  Index out = 0;
  bool activated = true;
  Index offset = 0;  ///< weights (out x in, column-major) then biases (out)

  Index parameter_count() const { return out * in + out; }
};

/// A chain of dense layers reading from a flat parameter array.
class DenseStack {
 public:
  struct Trace {
    std::vector<Eigen::MatrixXd> input;      ///< layer inputs
    std::vector<Eigen::MatrixXd> d_input;    ///< their treatment tangents
    std::vector<Eigen::MatrixXd> pre;        ///< pre-activations
    std::vector<Eigen::MatrixXd> slope;      ///< activation derivative at pre
    std::vector<Eigen::MatrixXd> d_pre;      ///< tangent of pre-activations
    Eigen::MatrixXd out;
    Eigen::MatrixXd d_out;
    bool tangent = false;
  };

  DenseStack() = default;
  /// `widths` lists output widths; `activate_last` controls the final layer.
  DenseStack(Index input_dim, const std::vector<Index>& widths, bool activate_last, Index offset,
             Activation act);

  Index input_dim() const { return input_dim_; }
  Index output_dim() const { return layers_.empty() ? input_dim_ : layers_.back().out; }
  Index parameter_count() const;
  const std::vector<DenseLayer>& layers() const { return layers_; }

  void forward(const double* params, const Eigen::MatrixXd& in, const Eigen::MatrixXd* d_in,
               Trace& trace) const;

  /// Accumulates parameter gradients into `grad` (same indexing as `params`).
  /// `g_out` / `g_dout` are adjoints of the output value and tangent; either may
  /// be null (treated as zero). Input adjoints are written when requested.
  void backward(const double* params, const Trace& trace, const Eigen::MatrixXd* g_out,
                const Eigen::MatrixXd* g_dout, double* grad, Eigen::MatrixXd* g_in,
                Eigen::MatrixXd* g_din) const;

  /// Glorot-uniform weights, zero biases.
  void initialize(double* params, std::mt19937_64& rng) const;

 private:
  Index input_dim_ = 0;
  Activation act_ = Activation::ELU;
  std::vector<DenseLayer> layers_;
};

// ---------------------------------------------------------------------------

struct MlpSpec {
  Index input_dim = 1;
  std::vector<Index> hidden_widths;
  Activation activation = Activation::ELU;
  Index output_dim = 1;
};

/// Plain MLP: hidden layers activated, affine output. Depth 0 is one affine map.
class Mlp {
 public:
  explicit Mlp(MlpSpec spec);

  const MlpSpec& spec() const { return spec_; }
  Eigen::VectorXd& parameters() { return params_; }
  const Eigen::VectorXd& parameters() const { return params_; }
  void initialize(std::uint64_t seed);

  Eigen::MatrixXd forward(const Eigen::MatrixXd& in) const;
  /// d output / d input[0], exact forward mode.
  Eigen::MatrixXd dforward_da(const Eigen::MatrixXd& in) const;
  void forward(const Eigen::MatrixXd& in, bool tangent, DenseStack::Trace& trace) const;
  /// Returns the parameter gradient; input adjoint written when requested.
  Eigen::VectorXd backward(const DenseStack::Trace& trace, const Eigen::MatrixXd* g_out,
                           const Eigen::MatrixXd* g_dout, Eigen::MatrixXd* g_in = nullptr) const;

 private:
  MlpSpec spec_;
  DenseStack stack_;
  Eigen::VectorXd params_;
};

// ---------------------------------------------------------------------------

/// Shared trunk followed by three branches: a zero-depth linear head f1 (the
/// beta_perp or RR output) and two outcome heads f2 (treated) and f3 (control).
struct MultiHeadSpec {
  Index input_dim = 2;  ///< 1 + number of covariates
  Index trunk_width = 200;
  Index trunk_depth = 3;
  Index head_width = 100;
  Index head_depth = 2;
  Activation activation = Activation::ELU;

  nlohmann::json to_json() const;
  static MultiHeadSpec from_json(const nlohmann::json& j);
  bool operator==(const MultiHeadSpec&) const = default;
};

struct ParamGroup {
  std::string name;
  Index begin = 0;
  Index end = 0;
};

enum Head : unsigned { kRiesz = 1u, kTreated = 2u, kControl = 4u, kAllHeads = 7u };

class MultiHeadNet {
 public:
  struct Pass {
    DenseStack::Trace trunk;
    DenseStack::Trace head[3];
    unsigned heads = 0;
    bool tangent = false;
    std::vector<Index> outcome_columns;  ///< trunk columns fed to f2 and f3; empty means all

    /// 1 x n outputs of head h (0 = f1, 1 = f2, 2 = f3).
    const Eigen::MatrixXd& value(int h) const { return head[h].out; }
    const Eigen::MatrixXd& tangent_of(int h) const { return head[h].d_out; }
  };

  /// Adjoints of the three outputs and their treatment derivatives; empty
  /// matrices are treated as zero.
  struct Adjoint {
    Eigen::MatrixXd value[3];
    Eigen::MatrixXd tangent[3];
  };

  explicit MultiHeadNet(MultiHeadSpec spec);

  const MultiHeadSpec& spec() const { return spec_; }
  Eigen::VectorXd& parameters() { return params_; }
  const Eigen::VectorXd& parameters() const { return params_; }
  Index parameter_count() const { return params_.size(); }
  static Index analytic_parameter_count(const MultiHeadSpec& spec);

  /// trunk, rr_head, outcome_head_1, outcome_bias_1, outcome_head_0, outcome_bias_0.
  std::vector<ParamGroup> groups() const;

  void initialize(std::uint64_t seed);

  /// `z` is (1 + d) x n with the treatment in row 0.
  void forward(const Eigen::MatrixXd& z, unsigned heads, bool tangent, Pass& pass) const;
  /// As above, but the outcome heads only see the listed columns of `z`;
  /// their outputs then have one column per listed index.
  void forward(const Eigen::MatrixXd& z, unsigned heads, bool tangent, const std::vector<Index>& outcome_columns,
               Pass& pass) const;
  /// Accumulates the parameter gradient into `grad`.
  void backward(const Pass& pass, const Adjoint& adj, Eigen::VectorXd& grad,
                Eigen::MatrixXd* g_input = nullptr) const;

  /// 3 x n matrix of (f1, f2, f3).
  Eigen::MatrixXd predict(const Eigen::MatrixXd& z) const;
  /// 3 x n matrix of d(f1, f2, f3)/da.
  Eigen::MatrixXd dforward_da(const Eigen::MatrixXd& z) const;

 private:
  MultiHeadSpec spec_;
  DenseStack trunk_;
  DenseStack heads_[3];
  Eigen::VectorXd params_;
};

// ---------------------------------------------------------------------------

/// Adam with decoupled weight decay and per-group learning rates.
class AdamW {
 public:
  AdamW(std::vector<ParamGroup> groups, double learning_rate, double weight_decay,
        double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  void set_group_learning_rate(const std::string& group, double lr);
  double group_learning_rate(const std::string& group) const;

  /// One update; NumericalError naming the group on a non-finite gradient.
  void step(Eigen::VectorXd& params, const Eigen::VectorXd& grads);

  long steps() const { return t_; }
  const Eigen::VectorXd& first_moment() const { return m_; }
  const Eigen::VectorXd& second_moment() const { return v_; }

 private:
  std::vector<ParamGroup> groups_;
  std::vector<double> lr_;
  double wd_, beta1_, beta2_, eps_;
  Eigen::VectorXd m_, v_;
  long t_ = 0;
};

/// Parameters keyed by group name, plus the architecture.
nlohmann::json checkpoint_json(const MultiHeadNet& net);
MultiHeadNet net_from_checkpoint(const nlohmann::json& j);

}  // namespace madnet::nn
