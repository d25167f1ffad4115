// SPDX-License-Identifier: Apache-2.0
// Copyright (C) 2026 mmfer contributors

#include "mmfer/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "mmfer/error.hpp"

namespace mmfer {

std::string_view fusion_name(FusionMode mode) {
  switch (mode) {
    case FusionMode::VideoOnly: return "video_only";
    case FusionMode::TransformerFusion: return "transformer_fusion";
    case FusionMode::FcFusion: return "fc_fusion";
  }
  return "?";
}

std::string_view fusion_label(FusionMode mode) {
  switch (mode) {
    case FusionMode::VideoOnly: return "VideoOnly";
    case FusionMode::TransformerFusion: return "TransformerFusion";
    case FusionMode::FcFusion: return "FcFusion";
  }
  return "?";
}

FusionMode parse_fusion(std::string_view name) {
  for (FusionMode m : kFusionModes) {
    if (name == fusion_name(m)) return m;
  }
  throw ConfigError("unknown fusion mode '" + std::string(name) +
                    "' (expected one of video_only, transformer_fusion, fc_fusion)");
}

void ModelConfig::validate() const {
  if (d_model != kVideoDim) {
    throw ConfigError("d_model must be " + std::to_string(kVideoDim) + " (video embeddings feed the encoder directly)");
  }
  if (n_layers == 0) throw ConfigError("n_layers must be at least 1");
  if (n_heads == 0 || d_model % n_heads != 0) {
    throw ConfigError("n_heads (" + std::to_string(n_heads) + ") must divide d_model (" + std::to_string(d_model) + ")");
  }
  if (d_ff == 0) throw ConfigError("d_ff must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must be in [0, 1)");
  if (decision_hidden == 0) throw ConfigError("decision_hidden must be positive");
  if (n_classes != kNumClasses) throw ConfigError("n_classes must be " + std::to_string(kNumClasses));
}

std::size_t ModelConfig::seq_len() const {
  return fusion == FusionMode::TransformerFusion ? kVideoFrames + kPoseFrames + 1 : kVideoFrames;
}

std::size_t ModelConfig::sidecar_dim() const {
  return fusion == FusionMode::FcFusion ? kPoseFrames * d_model + kAudioOut : 0;
}

std::size_t parameter_count(const ModelConfig& c) {
  const std::size_t d = c.d_model;
  auto affine = [](std::size_t in, std::size_t out) { return in * out + out; };
  std::size_t n = 0;
  if (c.fusion != FusionMode::VideoOnly) {
    n += affine(kPoseTokenInput, d);
    n += affine(kAudioDim, kAudioHidden) + 2 * kAudioHidden + affine(kAudioHidden, kAudioOut) + 2 * kAudioOut;
  }
  if (c.fusion == FusionMode::TransformerFusion) n += affine(kAudioOut, d);
  n += c.seq_len() * d;
  const std::size_t layer = affine(d, 3 * d) + affine(d, d) + affine(d, c.d_ff) + affine(c.d_ff, d) + 4 * d;
  n += c.n_layers * layer;
  n += affine(c.flatten_dim(), c.decision_hidden) + affine(c.decision_hidden, c.n_classes);
  return n;
}

template <typename T>
Batch<T> make_batch(std::span<const ClipFeatures* const> clips) {
  if (clips.empty()) throw ShapeError("make_batch: empty batch");
  const std::size_t B = clips.size();
  Batch<T> b{Tensor<T>(Shape{B, kVideoFrames, kVideoDim}), Tensor<T>(Shape{B, kPoseFrames, kPoseJoints, kPoseChannels}),
             Tensor<T>(Shape{B, kAudioDim})};
  for (std::size_t i = 0; i < B; ++i) {
    const ClipFeatures& c = *clips[i];
    std::copy(c.video.ptr(), c.video.ptr() + c.video.size(), b.video.ptr() + i * c.video.size());
    std::copy(c.pose.ptr(), c.pose.ptr() + c.pose.size(), b.pose.ptr() + i * c.pose.size());
    const auto audio = normalize_audio<float>(c.audio.data());
    std::copy(audio.begin(), audio.end(), b.audio.ptr() + i * kAudioDim);
  }
  return b;
}

template <typename T>
Batch<T> make_batch(std::span<const ClipFeatures> clips) {
  std::vector<const ClipFeatures*> ptrs;
  ptrs.reserve(clips.size());
  for (const auto& c : clips) ptrs.push_back(&c);
  return make_batch<T>(std::span<const ClipFeatures* const>(ptrs));
}

namespace {

// FNV-1a, so each tensor's initial values depend only on (seed, name).
std::uint64_t name_hash(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

}  // namespace

template <typename T>
Model<T>::Model(ModelConfig config, std::uint64_t seed) : config_(config) {
  config_.validate();
  const std::size_t d = config_.d_model;
  if (config_.fusion != FusionMode::VideoOnly) {
    pose_proj_ = add_affine("pose_proj", "pose_proj", kPoseTokenInput, d);
    audio_fc1_ = add_affine("audio_reduce.fc1", "audio_reduce", kAudioDim, kAudioHidden);
    audio_bn1_ = add_norm("audio_reduce.bn1", "audio_reduce", kAudioHidden);
    audio_fc2_ = add_affine("audio_reduce.fc2", "audio_reduce", kAudioHidden, kAudioOut);
    audio_bn2_ = add_norm("audio_reduce.bn2", "audio_reduce", kAudioOut);
  }
  if (config_.fusion == FusionMode::TransformerFusion) {
    audio_to_token_ = add_affine("audio_to_token", "audio_to_token", kAudioOut, d);
  }
  pos_embed_ = add_param("pos_embed", "pos_embed", Shape{config_.seq_len(), d});
  for (std::size_t i = 0; i < config_.n_layers; ++i) {
    const std::string prefix = "encoder.layer" + std::to_string(i);
    Layer l;
    l.in_proj = add_affine(prefix + ".attn.in_proj", prefix, d, 3 * d);
    l.out_proj = add_affine(prefix + ".attn.out_proj", prefix, d, d);
    l.norm1 = add_norm(prefix + ".norm1", prefix, d);
    l.ff1 = add_affine(prefix + ".ff1", prefix, d, config_.d_ff);
    l.ff2 = add_affine(prefix + ".ff2", prefix, config_.d_ff, d);
    l.norm2 = add_norm(prefix + ".norm2", prefix, d);
    layers_.push_back(l);
  }
  decision_fc1_ = add_affine("decision.fc1", "decision", config_.flatten_dim(), config_.decision_hidden);
  decision_fc2_ = add_affine("decision.fc2", "decision", config_.decision_hidden, config_.n_classes);
  init(seed);
}

template <typename T>
std::size_t Model<T>::add_param(std::string name, std::string group, Shape shape) {
  Parameter<T> param;
  param.name = std::move(name);
  param.group = std::move(group);
  param.value = Tensor<T>(shape);
  param.grad = Tensor<T>(shape);
  params_.push_back(std::move(param));
  return params_.size() - 1;
}

template <typename T>
typename Model<T>::Affine Model<T>::add_affine(const std::string& name, const std::string& group, std::size_t in,
                                               std::size_t out) {
  const std::size_t w = add_param(name + ".weight", group, Shape{in, out});
  const std::size_t b = add_param(name + ".bias", group, Shape{out});
  return {w, b};
}

template <typename T>
typename Model<T>::Affine Model<T>::add_norm(const std::string& name, const std::string& group, std::size_t d) {
  const std::size_t g = add_param(name + ".gain", group, Shape{d});
  const std::size_t b = add_param(name + ".bias", group, Shape{d});
  return {g, b};
}

template <typename T>
void Model<T>::init(std::uint64_t seed) {
  for (auto& param : params_) {
    std::mt19937_64 rng(seed ^ name_hash(param.name));
    auto& v = param.value;
    if (param.name == "pos_embed") {
      std::normal_distribution<double> nd(0.0, 0.02);
      for (auto& x : v.data()) x = static_cast<T>(nd(rng));
    } else if (ends_with(param.name, ".weight")) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(v.dim(0)));
      std::uniform_real_distribution<double> ud(-bound, bound);
      for (auto& x : v.data()) x = static_cast<T>(ud(rng));
    } else if (ends_with(param.name, ".gain")) {
      v.fill(T{1});
    } else {
      v.fill(T{0});
    }
  }
}

template <typename T>
Parameter<T>& Model<T>::parameter(std::string_view name) {
  for (auto& param : params_) {
    if (param.name == name) return param;
  }
  throw ConfigError("no parameter named '" + std::string(name) + "'");
}

template <typename T>
const Parameter<T>* Model<T>::find(std::string_view name) const {
  for (const auto& param : params_) {
    if (param.name == name) return &param;
  }
  return nullptr;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> Model<T>::buffers() {
  if (config_.fusion == FusionMode::VideoOnly) return {};
  return {{"audio_reduce.bn1.running_mean", &bn1_.running_mean},
          {"audio_reduce.bn1.running_var", &bn1_.running_var},
          {"audio_reduce.bn2.running_mean", &bn2_.running_mean},
          {"audio_reduce.bn2.running_var", &bn2_.running_var}};
}

template <typename T>
std::vector<std::pair<std::string, const Tensor<T>*>> Model<T>::buffers() const {
  std::vector<std::pair<std::string, const Tensor<T>*>> out;
  for (auto& [name, t] : const_cast<Model*>(this)->buffers()) out.emplace_back(name, t);
  return out;
}

template <typename T>
std::vector<std::string> Model<T>::groups() const {
  std::vector<std::string> out;
  for (const auto& param : params_) {
    if (std::find(out.begin(), out.end(), param.group) == out.end()) out.push_back(param.group);
  }
  return out;
}

template <typename T>
void Model<T>::apply_freeze(const std::vector<std::string>& frozen_groups) {
  const auto valid = groups();
  std::set<std::string> frozen;
  for (const auto& g : frozen_groups) {
    if (g == "encoder") {
      for (const auto& v : valid) {
        if (v.starts_with("encoder.")) frozen.insert(v);
      }
      continue;
    }
    if (std::find(valid.begin(), valid.end(), g) == valid.end()) {
      std::string list = "encoder";
      for (const auto& v : valid) list += ", " + v;
      throw ConfigError("unknown freeze group '" + g + "' (valid: " + list + ")");
    }
    frozen.insert(g);
  }
  for (auto& param : params_) param.trainable = !frozen.contains(param.group);
}

template <typename T>
std::size_t Model<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& param : params_) n += param.value.size();
  return n;
}

template <typename T>
std::size_t Model<T>::trainable_parameter_count() const {
  std::size_t n = 0;
  for (const auto& param : params_) n += param.trainable ? param.value.size() : 0;
  return n;
}

template <typename T>
Var<T> Model<T>::p(Tape<T>& tape, std::size_t index) const {
  return tape.param(params_[index]);
}

template <typename T>
Var<T> Model<T>::apply(Tape<T>& tape, const Var<T>& x, const Affine& a) const {
  return ops::linear(x, p(tape, a.weight), p(tape, a.bias));
}

template <typename T>
Var<T> Model<T>::project_pose(Tape<T>& tape, const Var<T>& pose) const {
  if (!pose_proj_) throw ConfigError("project_pose: model has no pose branch in this fusion mode");
  const Shape s = pose.shape();
  if (s.size() != 4 || s[1] != kPoseFrames || s[2] != kPoseJoints || s[3] != kPoseChannels) {
    throw ShapeError("project_pose: expected [B x 3 x 17 x 3], got " + shape_str(s));
  }
  auto xy = ops::slice(pose, 3, 0, 2);
  auto tokens = ops::reshape(xy, Shape{s[0], kPoseFrames, kPoseTokenInput});
  return apply(tape, tokens, *pose_proj_);
}

template <typename T>
Var<T> Model<T>::reduce_audio(Tape<T>& tape, const Var<T>& audio, bool training) {
  if (!audio_fc1_) throw ConfigError("reduce_audio: model has no audio branch in this fusion mode");
  const Shape s = audio.shape();
  if (s.size() != 2 || s[1] != kAudioDim) throw ShapeError("reduce_audio: expected [B x 1024], got " + shape_str(s));
  // A frozen branch keeps its running statistics fixed as well.
  const bool batch_stats = training && params_[audio_bn1_->weight].trainable;
  auto h = apply(tape, audio, *audio_fc1_);
  h = ops::batch_norm_1d(h, p(tape, audio_bn1_->weight), p(tape, audio_bn1_->bias), bn1_, batch_stats);
  h = apply(tape, h, *audio_fc2_);
  return ops::batch_norm_1d(h, p(tape, audio_bn2_->weight), p(tape, audio_bn2_->bias), bn2_, batch_stats);
}

template <typename T>
Assembled<T> Model<T>::assemble_sequence(Tape<T>& tape, const Var<T>& video, const Var<T>& pose_tokens,
                                         const Var<T>& audio_vec) const {
  const std::size_t d = config_.d_model;
  const Shape vs = video.shape();
  if (vs.size() != 3 || vs[1] != kVideoFrames || vs[2] != d) {
    throw ShapeError("assemble_sequence: expected video [B x 16 x " + std::to_string(d) + "], got " + shape_str(vs));
  }
  const std::size_t B = vs[0];
  auto check_aux = [&] {
    if (!pose_tokens.valid() || !audio_vec.valid()) {
      throw ShapeError("assemble_sequence: " + std::string(fusion_name(config_.fusion)) + " needs pose and audio");
    }
    if (pose_tokens.shape() != Shape{B, kPoseFrames, d}) {
      throw ShapeError("assemble_sequence: pose tokens " + shape_str(pose_tokens.shape()));
    }
    if (audio_vec.shape() != Shape{B, kAudioOut}) {
      throw ShapeError("assemble_sequence: audio vector " + shape_str(audio_vec.shape()));
    }
  };
  Assembled<T> out;
  switch (config_.fusion) {
    case FusionMode::VideoOnly:
      out.seq = video;
      break;
    case FusionMode::TransformerFusion: {
      check_aux();
      auto token = ops::reshape(apply(tape, audio_vec, *audio_to_token_), Shape{B, 1, d});
      out.seq = ops::concat<T>({video, pose_tokens, token}, 1);
      break;
    }
    case FusionMode::FcFusion:
      check_aux();
      out.seq = video;
      out.sidecar = ops::concat<T>({ops::reshape(pose_tokens, Shape{B, kPoseFrames * d}), audio_vec}, 1);
      break;
  }
  out.seq = ops::add_bcast(out.seq, p(tape, pos_embed_));
  return out;
}

template <typename T>
Var<T> Model<T>::encoder_forward(Tape<T>& tape, const Var<T>& seq, const ForwardOptions<T>& opts) const {
  const Shape s = seq.shape();
  const std::size_t d = config_.d_model, H = config_.n_heads, dh = d / H;
  if (s.size() != 3 || s[2] != d) throw ShapeError("encoder_forward: expected [B x L x d], got " + shape_str(s));
  const std::size_t B = s[0], L = s[1];
  const double p_drop = config_.dropout;
  const T alpha = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  Var<T> x = seq;
  for (std::size_t li = 0; li < layers_.size(); ++li) {
    const Layer& l = layers_[li];
    DropoutKey key = opts.dropout_key;
    key.layer = li;

    auto qkv = ops::reshape(apply(tape, x, l.in_proj), Shape{B, L, 3, H, dh});
    qkv = ops::permute(qkv, {2, 0, 3, 1, 4});  // [3, B, H, L, dh]
    auto head = [&](std::size_t k) { return ops::reshape(ops::slice(qkv, 0, k, 1), Shape{B * H, L, dh}); };
    auto attn = ops::softmax(ops::bmm(head(0), head(1), true, alpha), 2);
    if (opts.attention) opts.attention->push_back(attn.value());
    key.site = 0;
    attn = ops::dropout(attn, p_drop, opts.training, key);
    auto ctx = ops::reshape(ops::bmm(attn, head(2)), Shape{B, H, L, dh});
    ctx = ops::reshape(ops::permute(ctx, {0, 2, 1, 3}), Shape{B, L, d});
    x = ops::layer_norm(ops::add(x, apply(tape, ctx, l.out_proj)), p(tape, l.norm1.weight), p(tape, l.norm1.bias));

    auto ff = apply(tape, ops::relu(apply(tape, x, l.ff1)), l.ff2);
    key.site = 1;
    ff = ops::dropout(ff, p_drop, opts.training, key);
    x = ops::layer_norm(ops::add(x, ff), p(tape, l.norm2.weight), p(tape, l.norm2.bias));
  }
  return x;
}

template <typename T>
Var<T> Model<T>::decision_forward(Tape<T>& tape, const Var<T>& encoded, const Var<T>& sidecar) const {
  const Shape s = encoded.shape();
  if (s.size() != 3) throw ShapeError("decision_forward: expected [B x L x d], got " + shape_str(s));
  const std::size_t B = s[0];
  auto flat = ops::reshape(encoded, Shape{B, s[1] * s[2]});
  if (sidecar.valid()) flat = ops::concat<T>({flat, sidecar}, 1);
  if (flat.shape()[1] != config_.flatten_dim()) {
    throw ShapeError("decision_forward: flattened width " + std::to_string(flat.shape()[1]) + " but the head expects " +
                     std::to_string(config_.flatten_dim()));
  }
  auto h = ops::relu(apply(tape, flat, decision_fc1_));
  return ops::log_softmax(apply(tape, h, decision_fc2_), 1);
}

template <typename T>
Var<T> Model<T>::forward(Tape<T>& tape, const Batch<T>& batch, const ForwardOptions<T>& opts) {
  auto video = tape.constant(batch.video);
  Assembled<T> seq;
  if (config_.fusion == FusionMode::VideoOnly) {
    seq = assemble_sequence(tape, video, {}, {});
  } else {
    auto pose_tokens = project_pose(tape, tape.constant(batch.pose));
    auto audio_vec = reduce_audio(tape, tape.constant(batch.audio), opts.training);
    seq = assemble_sequence(tape, video, pose_tokens, audio_vec);
  }
  return decision_forward(tape, encoder_forward(tape, seq.seq, opts), seq.sidecar);
}

template <typename T>
Tensor<T> Model<T>::forward(const ClipFeatures& clip) {
  Tape<T> tape;
  const auto out = forward(tape, make_batch<T>(std::span<const ClipFeatures>(&clip, 1)), {});
  return out.value().reshaped(Shape{config_.n_classes});
}

template <typename T>
Tensor<T> Model<T>::predict(std::span<const ClipFeatures> clips, std::size_t chunk) {
  if (clips.empty()) throw ShapeError("predict: no clips");
  const std::size_t K = config_.n_classes;
  Tensor<T> out(Shape{clips.size(), K});
  for (std::size_t start = 0; start < clips.size(); start += chunk) {
    const std::size_t n = std::min(chunk, clips.size() - start);
    Tape<T> tape;
    const auto lp = forward(tape, make_batch<T>(clips.subspan(start, n)), {});
    std::copy(lp.value().ptr(), lp.value().ptr() + n * K, out.ptr() + start * K);
  }
  return out;
}

template Batch<float> make_batch<float>(std::span<const ClipFeatures* const>);
template Batch<double> make_batch<double>(std::span<const ClipFeatures* const>);
template Batch<float> make_batch<float>(std::span<const ClipFeatures>);
template Batch<double> make_batch<double>(std::span<const ClipFeatures>);
template class Model<float>;
template class Model<double>;

}  // namespace mmfer
