// SPDX-License-Identifier: Apache-2.0
// Copyright (C) 2026 mmfer contributors

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mmfer/tensor.hpp"

namespace mmfer {

inline constexpr std::size_t kNumClasses = 7;
inline constexpr std::size_t kVideoFrames = 16;
inline constexpr std::size_t kVideoDim = 512;
inline constexpr std::size_t kPoseFrames = 3;
inline constexpr std::size_t kPoseJoints = 17;
inline constexpr std::size_t kPoseChannels = 3;  // x, y, confidence
inline constexpr std::size_t kAudioDim = 1024;

/// Canonical class order used by labels, confusion matrices and reports.
inline constexpr std::array<std::string_view, kNumClasses> kEmotionNames = {
    "happiness", "sadness", "neutral", "anger", "surprise", "disgust", "fear"};

/// Per-class annotator scores for one clip.
struct SoftLabel {
  std::array<float, kNumClasses> scores{};

  /// Argmax, lowest index on ties.
  std::size_t hard_label() const;
  float max_score() const;
  /// Throws FormatError on negative/non-finite scores or an all-zero vector.
  void validate(std::string_view clip_id) const;
};

struct ClipFeatures {
  std::string clip_id;
  Tensor<float> video{Shape{kVideoFrames, kVideoDim}};
  Tensor<float> pose{Shape{kPoseFrames, kPoseJoints, kPoseChannels}};
  Tensor<float> audio{Shape{kAudioDim}};
  SoftLabel label;

  void validate() const;
};

// ---- clip files and manifests ------------------------------------------------

inline constexpr std::array<char, 4> kClipMagic = {'M', 'M', 'F', 'C'};
inline constexpr std::uint32_t kClipVersion = 1;
inline constexpr std::size_t kClipFloats =
    kVideoFrames * kVideoDim + kPoseFrames * kPoseJoints * kPoseChannels + kAudioDim + kNumClasses;
inline constexpr std::size_t kClipFileBytes = 8 + 4 * kClipFloats;

void write_clip(const std::filesystem::path& path, const ClipFeatures& clip);
ClipFeatures read_clip(const std::filesystem::path& path, const std::string& clip_id);

/// Reads `clip_id<TAB>relative_path` records; paths resolve against the
/// manifest's directory. Every clip is validated.
std::vector<ClipFeatures> load_dataset(const std::filesystem::path& manifest_path);

/// Writes `dir/manifest.tsv` and one `dir/clips/<clip_id>.mmfc` per clip.
/// Returns the manifest path.
std::filesystem::path write_dataset(const std::filesystem::path& dir, std::span<const ClipFeatures> clips);

// ---- preprocessing -----------------------------------------------------------

/// Per-embedding standardization: zero mean, unit (biased) variance. A
/// constant embedding maps to all zeros.
template <typename T>
std::vector<T> normalize_audio(std::span<const T> embed) {
  const std::size_t n = embed.size();
  std::vector<T> out(n, T{0});
  if (n == 0) return out;
  double mu = 0;
  for (T v : embed) mu += v;
  mu /= static_cast<double>(n);
  double var = 0;
  for (T v : embed) var += (v - mu) * (v - mu);
  var /= static_cast<double>(n);
  if (!(var > 1e-24)) return out;
  const double inv = 1.0 / std::sqrt(var);
  for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<T>((embed[i] - mu) * inv);
  return out;
}

struct SplitRatios {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
};

struct DatasetSplit {
  std::vector<ClipFeatures> train, val, test;
  std::uint64_t seed = 0;
  /// counts[part][class], part order train/val/test.
  std::array<std::array<std::size_t, kNumClasses>, 3> counts{};
  std::vector<std::string> warnings;
};

/// Per-class shuffle and cut. Result does not depend on input order.
DatasetSplit stratified_split(std::span<const ClipFeatures> clips, SplitRatios ratios, std::uint64_t seed);

inline constexpr double kAmbiguityThreshold = 6.0;

/// A clip is kept iff its maximum score is strictly greater than threshold.
bool passes_threshold(const SoftLabel& label, double threshold);

struct FilterResult {
  std::vector<ClipFeatures> kept;
  std::size_t dropped = 0;
};

FilterResult filter_ambiguous(std::span<const ClipFeatures> clips, double threshold = kAmbiguityThreshold);

/// weight_k = N / (n * count_k); absent classes get 0 and a warning.
std::vector<double> class_weights(std::span<const std::size_t> counts, std::vector<std::string>* warnings = nullptr);
std::vector<double> class_weights(std::span<const ClipFeatures> clips, std::vector<std::string>* warnings = nullptr);

// ---- synthetic data ----------------------------------------------------------

struct SynthSpec {
  std::size_t n_clips = 0;
  std::array<double, kNumClasses> mix{1. / 7, 1. / 7, 1. / 7, 1. / 7, 1. / 7, 1. / 7, 1. / 7};
  double misalignment = 0.0;
  double noise_sigma = 0.1;
  std::uint64_t seed = 0;
};

/// Class-conditioned Gaussian features around per-class anchors. Pose and
/// audio anchors share the video anchors' class geometry at misalignment 0
/// and follow an independent class permutation at misalignment 1.
std::vector<ClipFeatures> synthesize_dataset(const SynthSpec& spec);

}  // namespace mmfer
