// SPDX-License-Identifier: Apache-2.0
// Copyright (C) 2026 mmfer contributors

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mmfer/tensor.hpp"

namespace mmfer {

/// A named learnable tensor. `group` is the freeze granularity.
template <typename T>
struct Parameter {
  std::string name;
  std::string group;
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;

  void zero_grad() {
    if (grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
    else grad.fill(T{0});
  }
};

template <typename T>
class Tape;

/// Handle to a node recorded on a tape.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  std::size_t id() const noexcept { return id_; }
  Tape<T>* tape() const noexcept { return tape_; }
  bool requires_grad() const { return tape_->requires_grad(id_); }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Define-by-run reverse-mode tape. Nodes are appended in execution order,
/// so the node vector is already a topological order of the graph.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor<T>& grad_out, const Tensor<T>& out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Input without gradient.
  Var<T> constant(Tensor<T> value);
  /// Owned leaf whose gradient can be read back with grad().
  Var<T> leaf(Tensor<T> value, bool requires_grad = true);
  /// Leaf aliasing a parameter; gradients accumulate into `p.grad`.
  /// The parameter must outlive the tape's use of it.
  Var<T> param(Parameter<T>& p);

  /// Appends an op node. The node requires grad iff any input does.
  Var<T> record(const char* op, Tensor<T> value, std::vector<std::size_t> inputs, BackwardFn fn);

  const Tensor<T>& value(std::size_t id) const;
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  const char* op_name(std::size_t id) const { return nodes_.at(id).op; }

  /// Gradient buffer for accumulation, zero-allocated on first touch.
  Tensor<T>& grad_accum(std::size_t id);
  /// Gradient of a node after backward(); zeros if nothing flowed into it.
  Tensor<T> grad(const Var<T>& v) const;

  /// Seeds d(loss)/d(loss) = 1 and runs every recorded backward rule once,
  /// in reverse recording order. Allowed once per tape.
  void backward(const Var<T>& loss);

  std::size_t size() const noexcept { return nodes_.size(); }
  /// Number of backward rules executed by the last backward().
  std::size_t backward_visits() const noexcept { return backward_visits_; }

 private:
  struct Node {
    const char* op = "leaf";
    Tensor<T> value;
    Parameter<T>* param = nullptr;
    Tensor<T> grad;
    bool requires_grad = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
  bool backward_done_ = false;
  std::size_t backward_visits_ = 0;
};

extern template class Tape<float>;
extern template class Tape<double>;

/// Running statistics for 1-D batch normalization.
template <typename T>
struct BatchNormState {
  Tensor<T> running_mean;
  Tensor<T> running_var;

  explicit BatchNormState(std::size_t features = 1)
      : running_mean(Shape{features}, T{0}), running_var(Shape{features}, T{1}) {}
};

/// Identifies one dropout site for the counter-based mask generator. The
/// mask is a pure function of these fields and the element index.
struct DropoutKey {
  std::uint64_t seed = 0;
  std::uint64_t epoch = 0;
  std::uint64_t batch = 0;
  std::uint64_t layer = 0;
  std::uint64_t site = 0;

  std::uint64_t stream() const;
};

/// Uniform [0, 1) draw for element `index` of a keyed stream.
double counter_uniform(std::uint64_t stream, std::uint64_t index);

namespace debug {
// Scales the incoming gradient of every node recorded under `op` by `factor`
// during backward. Verification fixture for the gradient checker.
void set_backward_fault(std::string op, double factor);
void clear_backward_fault();

// While tracking is on, relu folds the sign pattern of its inputs into a
// running hash. Two forward passes with equal hashes took the same linear
// piece of every relu.
void track_relu_pattern(bool on);
bool relu_pattern_tracked();
void fold_relu_pattern(std::uint64_t bits);
/// Returns the hash and resets it.
std::uint64_t take_relu_pattern();
}  // namespace debug

namespace ops {

constexpr double kLayerNormEps = 1e-5;
constexpr double kBatchNormEps = 1e-5;
constexpr double kBatchNormMomentum = 0.1;

template <typename T> Var<T> matmul(const Var<T>& a, const Var<T>& b);
/// Batched product over the leading axis: [n,m,k] x [n,k,p] (or [n,p,k] with
/// transpose_b), scaled by alpha.
template <typename T> Var<T> bmm(const Var<T>& a, const Var<T>& b, bool transpose_b = false, T alpha = T{1});
/// x[..., in] * weight[in, out] + bias[out].
template <typename T> Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias);

template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
/// a + b where b's shape equals the trailing extents of a.
template <typename T> Var<T> add_bcast(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& x, T s);
template <typename T> Var<T> relu(const Var<T>& x);
/// Inverted dropout. Identity when p == 0 or !training.
template <typename T> Var<T> dropout(const Var<T>& x, double p, bool training, const DropoutKey& key);

template <typename T> Var<T> reshape(const Var<T>& x, Shape shape);
template <typename T> Var<T> flatten(const Var<T>& x);
template <typename T> Var<T> permute(const Var<T>& x, const std::vector<std::size_t>& perm);
template <typename T> Var<T> transpose(const Var<T>& x);
template <typename T> Var<T> concat(const std::vector<Var<T>>& xs, std::size_t axis);
template <typename T> Var<T> slice(const Var<T>& x, std::size_t axis, std::size_t start, std::size_t length);

template <typename T> Var<T> sum(const Var<T>& x);
template <typename T> Var<T> mean(const Var<T>& x);

template <typename T> Var<T> softmax(const Var<T>& x, std::size_t axis);
template <typename T> Var<T> log_softmax(const Var<T>& x, std::size_t axis);

/// Normalizes over the last axis with biased variance, then gain/bias.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, double eps = kLayerNormEps);

/// x[B, d]. Training normalizes by batch statistics (B >= 2 required) and
/// updates `state`; eval normalizes by the running statistics.
template <typename T>
Var<T> batch_norm_1d(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, BatchNormState<T>& state,
                     bool training, double momentum = kBatchNormMomentum, double eps = kBatchNormEps);

}  // namespace ops
}  // namespace mmfer
