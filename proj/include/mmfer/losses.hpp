// SPDX-License-Identifier: Apache-2.0
// Copyright (C) 2026 mmfer contributors

#pragma once

#include <array>
#include <span>
#include <string_view>

#include "mmfer/autograd.hpp"
#include "mmfer/data.hpp"

namespace mmfer {

enum class LossKind { Kl, Mse, WeightedCe };

std::string_view loss_name(LossKind kind);
/// kl, mse or wce.
LossKind parse_loss(std::string_view name);

inline constexpr double kLabelEpsFloor = 1e-6;

struct TargetDistribution {
  std::array<double, kNumClasses> probs{};
};

/// scores / sum, floored at eps_floor and renormalized.
TargetDistribution normalize_label(const SoftLabel& label, double eps_floor = kLabelEpsFloor);

/// Stacks normalized labels into [B, 7].
template <typename T>
Tensor<T> make_targets(std::span<const ClipFeatures* const> clips, double eps_floor = kLabelEpsFloor);

// Losses take log_probs of shape [B, K] (or [K] for a single sample) and
// reduce over the batch to a scalar.

/// mean_b sum_k t_k (ln t_k - log_probs_k)
template <typename T>
Var<T> kl_loss(const Var<T>& log_probs, const Tensor<T>& targets);

/// mean_b mean_k (exp(log_probs_k) - t_k)^2
template <typename T>
Var<T> mse_loss(const Var<T>& log_probs, const Tensor<T>& targets);

/// sum_b w[y_b] * -log_probs[b, y_b] / sum_b w[y_b] for [B, K]; a single
/// [K] sample gives the unreduced -w[y] * log_probs[y].
template <typename T>
Var<T> weighted_ce_loss(const Var<T>& log_probs, std::span<const std::size_t> labels, std::span<const double> weights);

/// Dispatches on kind; class_weights is only read for WeightedCe.
template <typename T>
Var<T> batch_loss(LossKind kind, const Var<T>& log_probs, std::span<const ClipFeatures* const> clips,
                  std::span<const double> class_weights);

}  // namespace mmfer
