// SPDX-License-Identifier: Apache-2.0
// Copyright (C) 2026 mmfer contributors

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mmfer/autograd.hpp"
#include "mmfer/data.hpp"

namespace mmfer {

enum class FusionMode { VideoOnly, TransformerFusion, FcFusion };

inline constexpr std::array<FusionMode, 3> kFusionModes = {FusionMode::VideoOnly, FusionMode::TransformerFusion,
                                                           FusionMode::FcFusion};

/// video_only, transformer_fusion, fc_fusion
std::string_view fusion_name(FusionMode mode);
/// Human-readable label used in comparison reports.
std::string_view fusion_label(FusionMode mode);
FusionMode parse_fusion(std::string_view name);

inline constexpr std::size_t kPoseTokenInput = kPoseJoints * 2;  // x, y per joint
inline constexpr std::size_t kAudioHidden = 512;
inline constexpr std::size_t kAudioOut = 128;

struct ModelConfig {
  std::size_t d_model = 512;
  std::size_t n_layers = 6;
  std::size_t n_heads = 8;
  std::size_t d_ff = 2048;
  double dropout = 0.1;
  FusionMode fusion = FusionMode::FcFusion;
  std::size_t decision_hidden = 512;
  std::size_t n_classes = kNumClasses;

  /// Throws ConfigError.
  void validate() const;
  /// Encoder sequence length: 20 for TransformerFusion, 16 otherwise.
  std::size_t seq_len() const;
  /// Width of the features bypassing the encoder (FcFusion only).
  std::size_t sidecar_dim() const;
  std::size_t flatten_dim() const { return seq_len() * d_model + sidecar_dim(); }

  bool operator==(const ModelConfig&) const = default;
};

/// Closed-form count of learnable scalars (batch-norm running statistics excluded).
std::size_t parameter_count(const ModelConfig& config);

/// Clips stacked along a leading batch axis. Audio is already standardized.
template <typename T>
struct Batch {
  Tensor<T> video;  // [B, 16, 512]
  Tensor<T> pose;   // [B, 3, 17, 3]
  Tensor<T> audio;  // [B, 1024]
  std::size_t size() const { return video.dim(0); }
};

template <typename T>
Batch<T> make_batch(std::span<const ClipFeatures* const> clips);
template <typename T>
Batch<T> make_batch(std::span<const ClipFeatures> clips);

template <typename T>
struct ForwardOptions {
  bool training = false;
  /// layer and site are filled in per dropout site.
  DropoutKey dropout_key{};
  /// When set, receives each layer's attention weights [B*heads, L, L].
  std::vector<Tensor<T>>* attention = nullptr;
};

template <typename T>
struct Assembled {
  Var<T> seq;      // [B, L, d_model]
  Var<T> sidecar;  // [B, S]; invalid when S == 0
};

template <typename T>
class Model {
 public:
  explicit Model(ModelConfig config, std::uint64_t seed = 0);

  const ModelConfig& config() const noexcept { return config_; }

  std::vector<Parameter<T>>& parameters() noexcept { return params_; }
  const std::vector<Parameter<T>>& parameters() const noexcept { return params_; }
  Parameter<T>& parameter(std::string_view name);
  const Parameter<T>* find(std::string_view name) const;

  /// Non-learnable state saved with checkpoints (batch-norm running statistics).
  std::vector<std::pair<std::string, Tensor<T>*>> buffers();
  std::vector<std::pair<std::string, const Tensor<T>*>> buffers() const;

  /// Freeze groups present in this model; "encoder" is accepted as an alias
  /// for every encoder layer.
  std::vector<std::string> groups() const;
  /// Makes exactly the named groups non-trainable. Unknown names throw
  /// ConfigError listing the valid ones.
  void apply_freeze(const std::vector<std::string>& frozen_groups);
  std::size_t parameter_count() const;
  std::size_t trainable_parameter_count() const;

  // Stages, all batched over the leading axis.
  Var<T> project_pose(Tape<T>& tape, const Var<T>& pose) const;                  // [B,3,17,3] -> [B,3,d]
  Var<T> reduce_audio(Tape<T>& tape, const Var<T>& audio, bool training);        // [B,1024] -> [B,128]
  Assembled<T> assemble_sequence(Tape<T>& tape, const Var<T>& video, const Var<T>& pose_tokens,
                                 const Var<T>& audio_vec) const;
  Var<T> encoder_forward(Tape<T>& tape, const Var<T>& seq, const ForwardOptions<T>& opts) const;
  Var<T> decision_forward(Tape<T>& tape, const Var<T>& encoded, const Var<T>& sidecar) const;

  /// Full graph; returns log-probabilities [B, n_classes].
  Var<T> forward(Tape<T>& tape, const Batch<T>& batch, const ForwardOptions<T>& opts);

  /// Eval-mode log-probabilities for one clip, [n_classes].
  Tensor<T> forward(const ClipFeatures& clip);
  /// Eval-mode log-probabilities for many clips, [N, n_classes].
  Tensor<T> predict(std::span<const ClipFeatures> clips, std::size_t chunk = 32);

 private:
  struct Affine {
    std::size_t weight = 0, bias = 0;
  };
  struct Layer {
    Affine in_proj, out_proj, norm1, ff1, ff2, norm2;
  };

  std::size_t add_param(std::string name, std::string group, Shape shape);
  Affine add_affine(const std::string& name, const std::string& group, std::size_t in, std::size_t out);
  Affine add_norm(const std::string& name, const std::string& group, std::size_t d);
  void init(std::uint64_t seed);
  Var<T> p(Tape<T>& tape, std::size_t index) const;
  Var<T> apply(Tape<T>& tape, const Var<T>& x, const Affine& a) const;

  ModelConfig config_;
  mutable std::vector<Parameter<T>> params_;
  std::optional<Affine> pose_proj_, audio_fc1_, audio_bn1_, audio_fc2_, audio_bn2_, audio_to_token_;
  std::size_t pos_embed_ = 0;
  std::vector<Layer> layers_;
  Affine decision_fc1_, decision_fc2_;
  BatchNormState<T> bn1_{kAudioHidden}, bn2_{kAudioOut};
};

extern template class Model<float>;
extern template class Model<double>;

}  // namespace mmfer
