// SPDX-License-Identifier: Apache-2.0
// Copyright (C) 2026 mmfer contributors

#include "mmfer/autograd.hpp"

#include <utility>


namespace mmfer {

namespace {

struct FaultState {
  std::string op;
  double factor = 1.0;
};

FaultState& fault_state() {
  static FaultState state;
  return state;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

}  // namespace

namespace debug {
void set_backward_fault(std::string op, double factor) {
  fault_state() = FaultState{std::move(op), factor};
}
void clear_backward_fault() { fault_state() = FaultState{}; }

namespace {
bool g_track_relu = false;
std::uint64_t g_relu_hash = 0;
}  // namespace

void track_relu_pattern(bool on) {
  g_track_relu = on;
  g_relu_hash = 0;
}
bool relu_pattern_tracked() { return g_track_relu; }
void fold_relu_pattern(std::uint64_t bits) { g_relu_hash = splitmix64(g_relu_hash ^ bits); }
std::uint64_t take_relu_pattern() { return std::exchange(g_relu_hash, 0); }
}  // namespace debug

std::uint64_t DropoutKey::stream() const {
  std::uint64_t h = splitmix64(seed);
  h = splitmix64(h ^ epoch);
  h = splitmix64(h ^ batch);
  h = splitmix64(h ^ layer);
  return splitmix64(h ^ site);
}

double counter_uniform(std::uint64_t stream, std::uint64_t index) {
  const std::uint64_t bits = splitmix64(stream ^ splitmix64(index));
  return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  Node n;
  n.op = "constant";
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::leaf(Tensor<T> value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::param(Parameter<T>& p) {
  Node n;
  n.op = "param";
  n.param = &p;
  n.requires_grad = p.trainable;
  nodes_.push_back(std::move(n));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::record(const char* op, Tensor<T> value, std::vector<std::size_t> inputs, BackwardFn fn) {
  Node n;
  n.op = op;
  for (auto id : inputs) {
    if (id >= nodes_.size()) throw Error(std::string(op) + ": input node from another tape");
    n.requires_grad = n.requires_grad || nodes_[id].requires_grad;
  }
#ifndef NDEBUG
  bool inputs_finite = true;
  for (auto id : inputs) inputs_finite = inputs_finite && this->value(id).all_finite();
  if (inputs_finite && !value.all_finite()) {
    throw NumericalError(std::string(op) + " produced non-finite output from finite inputs");
  }
#endif
  n.value = std::move(value);
  n.inputs = std::move(inputs);
  if (n.requires_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
const Tensor<T>& Tape<T>::value(std::size_t id) const {
  const Node& n = nodes_.at(id);
  return n.param ? n.param->value : n.value;
}

template <typename T>
Tensor<T>& Tape<T>::grad_accum(std::size_t id) {
  Node& n = nodes_.at(id);
  Tensor<T>& g = n.param ? n.param->grad : n.grad;
  const Shape& s = n.param ? n.param->value.shape() : n.value.shape();
  if (g.shape() != s) g = Tensor<T>(s);
  return g;
}

template <typename T>
Tensor<T> Tape<T>::grad(const Var<T>& v) const {
  const Node& n = nodes_.at(v.id());
  const Tensor<T>& g = n.param ? n.param->grad : n.grad;
  if (g.empty()) return Tensor<T>(value(v.id()).shape());
  return g;
}

template <typename T>
void Tape<T>::backward(const Var<T>& loss) {
  if (loss.tape() != this) throw Error("backward: loss was not recorded on this tape");
  if (value(loss.id()).size() != 1) {
    throw ShapeError("backward: loss must be a scalar, got " + shape_str(value(loss.id()).shape()));
  }
  if (backward_done_) throw Error("backward: tape already consumed");
  backward_done_ = true;
  backward_visits_ = 0;
  if (!nodes_[loss.id()].requires_grad) return;

  grad_accum(loss.id())[0] = T{1};
  const FaultState fault = fault_state();
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
    ++backward_visits_;
    if (!fault.op.empty() && fault.op == n.op) {
      Tensor<T> scaled = n.grad;
      for (auto& g : scaled.data()) g = static_cast<T>(g * fault.factor);
      n.backward(*this, scaled, n.value);
    } else {
      n.backward(*this, n.grad, n.value);
    }
    // Intermediate gradients are no longer needed once propagated.
    n.grad = Tensor<T>();
  }
}

template class Tape<float>;
template class Tape<double>;

}  // namespace mmfer
