// SPDX-License-Identifier: Apache-2.0
// Copyright (C) 2026 mmfer contributors

#include "mmfer/losses.hpp"

#include <cmath>

#include "mmfer/error.hpp"

namespace mmfer {

std::string_view loss_name(LossKind kind) {
  switch (kind) {
    case LossKind::Kl: return "kl";
    case LossKind::Mse: return "mse";
    case LossKind::WeightedCe: return "wce";
  }
  return "?";
}

LossKind parse_loss(std::string_view name) {
  for (LossKind k : {LossKind::Kl, LossKind::Mse, LossKind::WeightedCe}) {
    if (name == loss_name(k)) return k;
  }
  throw ConfigError("unknown loss '" + std::string(name) + "' (expected one of kl, mse, wce)");
}

TargetDistribution normalize_label(const SoftLabel& label, double eps_floor) {
  double total = 0;
  for (float s : label.scores) {
    if (s < 0 || !std::isfinite(s)) throw ConfigError("normalize_label: scores must be finite and non-negative");
    total += s;
  }
  if (!(total > 0)) throw ConfigError("normalize_label: all scores are zero");
  TargetDistribution t;
  double floored = 0;
  for (std::size_t k = 0; k < kNumClasses; ++k) {
    t.probs[k] = std::max(label.scores[k] / total, eps_floor);
    floored += t.probs[k];
  }
  for (double& p : t.probs) p /= floored;
  return t;
}

template <typename T>
Tensor<T> make_targets(std::span<const ClipFeatures* const> clips, double eps_floor) {
  Tensor<T> out(Shape{clips.size(), kNumClasses});
  for (std::size_t b = 0; b < clips.size(); ++b) {
    const auto t = normalize_label(clips[b]->label, eps_floor);
    for (std::size_t k = 0; k < kNumClasses; ++k) out[b * kNumClasses + k] = static_cast<T>(t.probs[k]);
  }
  return out;
}

namespace {

struct Dims {
  std::size_t batch, classes;
};

template <typename T>
Dims loss_dims(const Var<T>& log_probs, const char* op) {
  const Shape& s = log_probs.shape();
  if (s.size() == 1) return {1, s[0]};
  if (s.size() == 2) return {s[0], s[1]};
  throw ShapeError(std::string(op) + ": expected log_probs [B x K] or [K], got " + shape_str(s));
}

template <typename T>
Dims loss_dims(const Var<T>& log_probs, const Tensor<T>& targets, const char* op) {
  const Dims d = loss_dims(log_probs, op);
  if (targets.size() != d.batch * d.classes) {
    throw ShapeError(std::string(op) + ": targets " + shape_str(targets.shape()) + " do not match log_probs " +
                     shape_str(log_probs.shape()));
  }
  return d;
}

}  // namespace

template <typename T>
Var<T> kl_loss(const Var<T>& log_probs, const Tensor<T>& targets) {
  const Dims d = loss_dims(log_probs, targets, "kl_loss");
  const T* lp = log_probs.value().ptr();
  const T* t = targets.ptr();
  const std::size_t n = d.batch * d.classes;
  double acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (t[i] > 0) acc += static_cast<double>(t[i]) * (std::log(static_cast<double>(t[i])) - lp[i]);
  }
  const T inv_b = T{1} / static_cast<T>(d.batch);
  const auto il = log_probs.id();
  return log_probs.tape()->record(
      "kl_loss", Tensor<T>::scalar(static_cast<T>(acc / d.batch)), {il},
      [il, targets, n, inv_b](Tape<T>& tape, const Tensor<T>& g, const Tensor<T>&) {
        T* dl = tape.grad_accum(il).ptr();
        const T s = g[0] * inv_b;
        for (std::size_t i = 0; i < n; ++i) dl[i] -= s * targets[i];
      });
}

template <typename T>
Var<T> mse_loss(const Var<T>& log_probs, const Tensor<T>& targets) {
  const Dims d = loss_dims(log_probs, targets, "mse_loss");
  const T* lp = log_probs.value().ptr();
  const std::size_t n = d.batch * d.classes;
  std::vector<T> prob(n);
  double acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    prob[i] = std::exp(lp[i]);
    const double diff = static_cast<double>(prob[i]) - targets[i];
    acc += diff * diff;
  }
  const double denom = static_cast<double>(n);
  const auto il = log_probs.id();
  return log_probs.tape()->record(
      "mse_loss", Tensor<T>::scalar(static_cast<T>(acc / denom)), {il},
      [il, targets, prob = std::move(prob), n, denom](Tape<T>& tape, const Tensor<T>& g, const Tensor<T>&) {
        T* dl = tape.grad_accum(il).ptr();
        const T s = static_cast<T>(2.0 / denom) * g[0];
        for (std::size_t i = 0; i < n; ++i) dl[i] += s * (prob[i] - targets[i]) * prob[i];
      });
}

template <typename T>
Var<T> weighted_ce_loss(const Var<T>& log_probs, std::span<const std::size_t> labels, std::span<const double> weights) {
  const Dims d = loss_dims(log_probs, "weighted_ce_loss");
  if (labels.size() != d.batch) throw ShapeError("weighted_ce_loss: label count does not match batch size");
  if (weights.size() != d.classes) throw ShapeError("weighted_ce_loss: need one weight per class");
  const T* lp = log_probs.value().ptr();
  double num = 0, wsum = 0;
  for (std::size_t b = 0; b < d.batch; ++b) {
    if (labels[b] >= d.classes) {
      throw ConfigError("weighted_ce_loss: label " + std::to_string(labels[b]) + " out of range [0, " +
                        std::to_string(d.classes) + ")");
    }
    num += weights[labels[b]] * -static_cast<double>(lp[b * d.classes + labels[b]]);
    wsum += weights[labels[b]];
  }
  // A lone [K] sample keeps its weight; batches use the weighted mean.
  if (log_probs.shape().size() == 1) {
    wsum = 1.0;
  } else if (!(wsum > 0)) {
    throw NumericalError("weighted_ce_loss: batch has zero total class weight");
  }
  std::vector<std::size_t> y(labels.begin(), labels.end());
  std::vector<double> w(weights.begin(), weights.end());
  const auto il = log_probs.id();
  const std::size_t K = d.classes;
  return log_probs.tape()->record(
      "weighted_ce_loss", Tensor<T>::scalar(static_cast<T>(num / wsum)), {il},
      [il, y = std::move(y), w = std::move(w), wsum, K](Tape<T>& tape, const Tensor<T>& g, const Tensor<T>&) {
        T* dl = tape.grad_accum(il).ptr();
        for (std::size_t b = 0; b < y.size(); ++b) dl[b * K + y[b]] -= g[0] * static_cast<T>(w[y[b]] / wsum);
      });
}

template <typename T>
Var<T> batch_loss(LossKind kind, const Var<T>& log_probs, std::span<const ClipFeatures* const> clips,
                  std::span<const double> class_weights) {
  switch (kind) {
    case LossKind::Kl: return kl_loss(log_probs, make_targets<T>(clips));
    case LossKind::Mse: return mse_loss(log_probs, make_targets<T>(clips));
    case LossKind::WeightedCe: {
      std::vector<std::size_t> labels;
      for (const auto* c : clips) labels.push_back(c->label.hard_label());
      return weighted_ce_loss(log_probs, labels, class_weights);
    }
  }
  throw ConfigError("batch_loss: unknown loss kind");
}

#define MMFER_INSTANTIATE_LOSSES(T)                                                                              \
  template Tensor<T> make_targets<T>(std::span<const ClipFeatures* const>, double);                              \
  template Var<T> kl_loss<T>(const Var<T>&, const Tensor<T>&);                                                   \
  template Var<T> mse_loss<T>(const Var<T>&, const Tensor<T>&);                                                  \
  template Var<T> weighted_ce_loss<T>(const Var<T>&, std::span<const std::size_t>, std::span<const double>);     \
  template Var<T> batch_loss<T>(LossKind, const Var<T>&, std::span<const ClipFeatures* const>, std::span<const double>);

MMFER_INSTANTIATE_LOSSES(float)
MMFER_INSTANTIATE_LOSSES(double)

}  // namespace mmfer
