// SPDX-License-Identifier: Apache-2.0
// Copyright (C) 2026 mmfer contributors

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mmfer/model.hpp"

namespace mmfer {

inline constexpr double kGradcheckTolerance = 1e-4;
inline constexpr double kGradcheckStep = 1e-5;
/// Denominator floor of the relative error, so entries whose true gradient is
/// ~0 are judged on absolute error.
inline constexpr double kGradcheckFloor = 1e-6;
inline constexpr int kMaxStepHalvings = 3;

/// |a - n| / max(|a|, |n|, floor)
double gradcheck_rel_error(double analytic, double numeric, double floor = kGradcheckFloor);

struct GradcheckProbe {
  std::string where;  // op or parameter name
  std::size_t index = 0;
  double analytic = 0, numeric = 0, rel_error = 0;
  double step = 0;
};

struct GradcheckResult {
  std::string name;
  std::size_t checked = 0;
  GradcheckProbe worst;
  std::vector<GradcheckProbe> failures;
  /// Probes whose step was halved, or which were redrawn, because a relu
  /// changed sides between the +h and -h passes.
  std::size_t narrowed = 0, redrawn = 0;
  bool passed() const { return failures.empty(); }
};

/// Finite-difference check of every differentiable op on small random inputs.
std::vector<GradcheckResult> gradcheck_ops(std::uint64_t seed, double step = kGradcheckStep,
                                           double tolerance = kGradcheckTolerance);

/// Full-model check in 64-bit: a 2-clip batch in training mode with a fixed
/// dropout key, KL loss, `samples` parameters drawn at random with at least
/// one from every tensor. Central differences are only taken over intervals
/// free of relu kinks: the step is halved up to kMaxStepHalvings times, after
/// which the probe is replaced by a fresh random one.
GradcheckResult gradcheck_model(const ModelConfig& config, std::uint64_t seed, std::size_t samples = 200,
                                double step = kGradcheckStep, double tolerance = kGradcheckTolerance);

}  // namespace mmfer
