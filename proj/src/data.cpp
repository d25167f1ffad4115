// SPDX-License-Identifier: Apache-2.0
// Copyright (C) 2026 mmfer contributors

#include "mmfer/data.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

namespace mmfer {

static_assert(std::endian::native == std::endian::little, "clip files are little-endian");

namespace fs = std::filesystem;

std::size_t SoftLabel::hard_label() const {
  return static_cast<std::size_t>(std::max_element(scores.begin(), scores.end()) - scores.begin());
}

float SoftLabel::max_score() const { return *std::max_element(scores.begin(), scores.end()); }

void SoftLabel::validate(std::string_view clip_id) const {
  bool any_positive = false;
  for (std::size_t k = 0; k < kNumClasses; ++k) {
    const float s = scores[k];
    if (!std::isfinite(s)) {
      throw FormatError("clip '" + std::string(clip_id) + "': non-finite score for class " + std::to_string(k));
    }
    if (s < 0) {
      throw FormatError("clip '" + std::string(clip_id) + "': negative score " + std::to_string(s) + " for class " +
                        std::string(kEmotionNames[k]));
    }
    any_positive = any_positive || s > 0;
  }
  if (!any_positive) throw FormatError("clip '" + std::string(clip_id) + "': all label scores are zero");
}

void ClipFeatures::validate() const {
  auto expect = [&](const Tensor<float>& t, const Shape& s, const char* what) {
    if (t.shape() != s) {
      throw FormatError("clip '" + clip_id + "': " + what + " has shape " + shape_str(t.shape()) + ", expected " +
                        shape_str(s));
    }
  };
  expect(video, {kVideoFrames, kVideoDim}, "video");
  expect(pose, {kPoseFrames, kPoseJoints, kPoseChannels}, "pose");
  expect(audio, {kAudioDim}, "audio");
  label.validate(clip_id);
}

// ---- binary I/O ----------------------------------------------------------------

void write_clip(const fs::path& path, const ClipFeatures& clip) {
  clip.validate();
  std::vector<char> buf(kClipFileBytes);
  char* p = buf.data();
  std::memcpy(p, kClipMagic.data(), 4);
  std::memcpy(p + 4, &kClipVersion, 4);
  p += 8;
  auto put = [&p](std::span<const float> v) {
    std::memcpy(p, v.data(), v.size_bytes());
    p += v.size_bytes();
  };
  put(clip.video.data());
  put(clip.pose.data());
  put(clip.audio.data());
  put(clip.label.scores);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open '" + path.string() + "' for writing");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw FormatError("failed writing '" + path.string() + "'");
}

ClipFeatures read_clip(const fs::path& path, const std::string& clip_id) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("clip '" + clip_id + "': missing file '" + path.string() + "'");
  std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < 8 || std::memcmp(buf.data(), kClipMagic.data(), 4) != 0) {
    throw FormatError("clip '" + clip_id + "': bad magic in '" + path.string() + "' (expected MMFC)");
  }
  std::uint32_t version = 0;
  std::memcpy(&version, buf.data() + 4, 4);
  if (version != kClipVersion) {
    throw FormatError("clip '" + clip_id + "': unsupported version " + std::to_string(version) + " (expected " +
                      std::to_string(kClipVersion) + ")");
  }
  if (buf.size() != kClipFileBytes) {
    throw FormatError("clip '" + clip_id + "': file '" + path.string() + "' has " + std::to_string(buf.size()) +
                      " bytes, expected " + std::to_string(kClipFileBytes));
  }
  ClipFeatures clip;
  clip.clip_id = clip_id;
  const char* p = buf.data() + 8;
  auto get = [&p](std::span<float> v) {
    std::memcpy(v.data(), p, v.size_bytes());
    p += v.size_bytes();
  };
  get(clip.video.data());
  get(clip.pose.data());
  get(clip.audio.data());
  get(clip.label.scores);
  clip.validate();
  return clip;
}

std::vector<ClipFeatures> load_dataset(const fs::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw FormatError("cannot open manifest '" + manifest_path.string() + "'");
  const fs::path base = manifest_path.parent_path();
  std::vector<ClipFeatures> clips;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || tab == 0 || tab + 1 == line.size()) {
      throw FormatError(manifest_path.string() + ":" + std::to_string(lineno) +
                        ": expected 'clip_id<TAB>relative_path'");
    }
    const std::string id = line.substr(0, tab);
    const fs::path rel = line.substr(tab + 1);
    clips.push_back(read_clip(base / rel, id));
  }
  return clips;
}

fs::path write_dataset(const fs::path& dir, std::span<const ClipFeatures> clips) {
  fs::create_directories(dir / "clips");
  const fs::path manifest = dir / "manifest.tsv";
  std::ofstream out(manifest, std::ios::trunc);
  if (!out) throw FormatError("cannot write manifest '" + manifest.string() + "'");
  out << "# clip_id\trelative_path\n";
  for (const auto& c : clips) {
    const std::string rel = "clips/" + c.clip_id + ".mmfc";
    write_clip(dir / rel, c);
    out << c.clip_id << '\t' << rel << '\n';
  }
  if (!out) throw FormatError("failed writing manifest '" + manifest.string() + "'");
  return manifest;
}

// ---- splitting, filtering, weighting ------------------------------------------

DatasetSplit stratified_split(std::span<const ClipFeatures> clips, SplitRatios ratios, std::uint64_t seed) {
  const std::array<double, 3> r = {ratios.train, ratios.val, ratios.test};
  for (double v : r) {
    if (!(v >= 0.0)) throw ConfigError("split ratios must be non-negative");
  }
  if (std::abs(r[0] + r[1] + r[2] - 1.0) > 1e-9) throw ConfigError("split ratios must sum to 1");
  if (!(r[0] > 0.0)) throw ConfigError("train ratio must be positive");
  const std::size_t parts = static_cast<std::size_t>(std::count_if(r.begin(), r.end(), [](double v) { return v > 0; }));

  std::array<std::vector<std::size_t>, kNumClasses> members;
  for (std::size_t i = 0; i < clips.size(); ++i) members[clips[i].label.hard_label()].push_back(i);

  DatasetSplit out;
  out.seed = seed;
  std::mt19937_64 rng(seed);
  std::array<std::vector<ClipFeatures>*, 3> dst = {&out.train, &out.val, &out.test};
  for (std::size_t k = 0; k < kNumClasses; ++k) {
    auto& idx = members[k];
    if (idx.empty()) continue;
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return clips[a].clip_id < clips[b].clip_id; });
    std::shuffle(idx.begin(), idx.end(), rng);
    const std::size_t n = idx.size();
    std::array<std::size_t, 3> take{n, 0, 0};
    if (n < parts) {
      out.warnings.push_back("class " + std::string(kEmotionNames[k]) + " has " + std::to_string(n) +
                             " clip(s), fewer than " + std::to_string(parts) + " split parts; all go to train");
    } else {
      take[1] = static_cast<std::size_t>(std::llround(r[1] * static_cast<double>(n)));
      take[2] = static_cast<std::size_t>(std::llround(r[2] * static_cast<double>(n)));
      if (take[1] + take[2] > n) take[2] = n - take[1];
      take[0] = n - take[1] - take[2];
    }
    std::size_t pos = 0;
    for (std::size_t part = 0; part < 3; ++part) {
      for (std::size_t j = 0; j < take[part]; ++j) dst[part]->push_back(clips[idx[pos++]]);
      out.counts[part][k] = take[part];
    }
  }
  auto by_id = [](const ClipFeatures& a, const ClipFeatures& b) { return a.clip_id < b.clip_id; };
  for (auto* part : dst) std::sort(part->begin(), part->end(), by_id);
  return out;
}

bool passes_threshold(const SoftLabel& label, double threshold) {
  return static_cast<double>(label.max_score()) > threshold;
}

FilterResult filter_ambiguous(std::span<const ClipFeatures> clips, double threshold) {
  if (!(threshold >= 0.0)) throw ConfigError("ambiguity threshold must be >= 0");
  FilterResult r;
  for (const auto& c : clips) {
    if (passes_threshold(c.label, threshold)) r.kept.push_back(c);
    else ++r.dropped;
  }
  return r;
}

std::vector<double> class_weights(std::span<const std::size_t> counts, std::vector<std::string>* warnings) {
  const double total = static_cast<double>(std::accumulate(counts.begin(), counts.end(), std::size_t{0}));
  const double n = static_cast<double>(counts.size());
  std::vector<double> w(counts.size(), 0.0);
  for (std::size_t k = 0; k < counts.size(); ++k) {
    if (counts[k] == 0) {
      if (warnings) warnings->push_back("class " + std::to_string(k) + " has no samples; weight set to 0");
      continue;
    }
    w[k] = total / (n * static_cast<double>(counts[k]));
  }
  return w;
}

std::vector<double> class_weights(std::span<const ClipFeatures> clips, std::vector<std::string>* warnings) {
  std::array<std::size_t, kNumClasses> counts{};
  for (const auto& c : clips) ++counts[c.label.hard_label()];
  return class_weights(std::span<const std::size_t>(counts), warnings);
}

// ---- synthesis -------------------------------------------------------------------

namespace {

constexpr std::size_t kPoseDims = kPoseFrames * kPoseJoints * 2;

// dim x kNumClasses matrix with orthonormal columns, column-major.
std::vector<double> orthonormal_basis(std::size_t dim, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> q(dim * kNumClasses);
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    double* col = q.data() + c * dim;
    for (std::size_t i = 0; i < dim; ++i) col[i] = normal(rng);
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t p = 0; p < c; ++p) {
        const double* prev = q.data() + p * dim;
        double dot = 0;
        for (std::size_t i = 0; i < dim; ++i) dot += col[i] * prev[i];
        for (std::size_t i = 0; i < dim; ++i) col[i] -= dot * prev[i];
      }
    }
    double norm = 0;
    for (std::size_t i = 0; i < dim; ++i) norm += col[i] * col[i];
    norm = std::sqrt(norm);
    for (std::size_t i = 0; i < dim; ++i) col[i] /= norm;
  }
  return q;
}

// Class anchors with per-coordinate RMS 1. Anchor k is the basis image of
// (1 - m) e_k + m e_perm[k], renormalized.
std::vector<std::vector<double>> class_anchors(std::size_t dim, std::mt19937_64& rng, double misalignment,
                                               const std::array<std::size_t, kNumClasses>& perm) {
  const auto basis = orthonormal_basis(dim, rng);
  const double scale = std::sqrt(static_cast<double>(dim));
  std::vector<std::vector<double>> anchors(kNumClasses, std::vector<double>(dim, 0.0));
  for (std::size_t k = 0; k < kNumClasses; ++k) {
    std::array<double, kNumClasses> coef{};
    coef[k] += 1.0 - misalignment;
    coef[perm[k]] += misalignment;
    double norm = 0;
    for (double c : coef) norm += c * c;
    norm = std::sqrt(norm);
    for (std::size_t c = 0; c < kNumClasses; ++c) {
      if (coef[c] == 0) continue;
      const double* col = basis.data() + c * dim;
      for (std::size_t i = 0; i < dim; ++i) anchors[k][i] += scale * coef[c] / norm * col[i];
    }
  }
  return anchors;
}

std::uint64_t mix64(std::uint64_t a, std::uint64_t b) {
  std::uint64_t x = a ^ (b + 0x9E3779B97F4A7C15ULL + (a << 6) + (a >> 2));
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

}  // namespace

std::vector<ClipFeatures> synthesize_dataset(const SynthSpec& spec) {
  double mix_sum = 0;
  for (double m : spec.mix) {
    if (!(m >= 0.0)) throw ConfigError("class mix entries must be non-negative");
    mix_sum += m;
  }
  if (std::abs(mix_sum - 1.0) > 1e-6) throw ConfigError("class mix must sum to 1");
  if (!(spec.misalignment >= 0.0 && spec.misalignment <= 1.0)) throw ConfigError("misalignment must be in [0, 1]");
  if (!(spec.noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be >= 0");

  std::mt19937_64 rng(spec.seed);
  std::array<std::size_t, kNumClasses> identity{};
  std::iota(identity.begin(), identity.end(), std::size_t{0});
  auto pose_perm = identity, audio_perm = identity;
  std::shuffle(pose_perm.begin(), pose_perm.end(), rng);
  std::shuffle(audio_perm.begin(), audio_perm.end(), rng);
  const auto video_anchor = class_anchors(kVideoDim, rng, 0.0, identity);
  const auto pose_anchor = class_anchors(kPoseDims, rng, spec.misalignment, pose_perm);
  const auto audio_anchor = class_anchors(kAudioDim, rng, spec.misalignment, audio_perm);

  // Largest-remainder allocation of clips to classes.
  std::array<std::size_t, kNumClasses> count{};
  std::array<double, kNumClasses> rem{};
  std::size_t assigned = 0;
  for (std::size_t k = 0; k < kNumClasses; ++k) {
    const double exact = spec.mix[k] * static_cast<double>(spec.n_clips);
    count[k] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    rem[k] = exact - static_cast<double>(count[k]);
    assigned += count[k];
  }
  std::array<std::size_t, kNumClasses> order = identity;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return rem[a] > rem[b]; });
  for (std::size_t i = 0; assigned < spec.n_clips; ++i, ++assigned) ++count[order[i % kNumClasses]];

  std::vector<std::size_t> classes;
  for (std::size_t k = 0; k < kNumClasses; ++k) classes.insert(classes.end(), count[k], k);
  std::shuffle(classes.begin(), classes.end(), rng);

  std::vector<ClipFeatures> clips(spec.n_clips);
  const float sigma = static_cast<float>(spec.noise_sigma);
  for (std::size_t i = 0; i < spec.n_clips; ++i) {
    std::mt19937_64 crng(mix64(spec.seed, i));
    std::normal_distribution<float> noise(0.0f, 1.0f);
    const std::size_t k = classes[i];
    ClipFeatures& c = clips[i];
    char id[32];
    std::snprintf(id, sizeof id, "clip_%05zu", i);
    c.clip_id = id;
    for (std::size_t f = 0; f < kVideoFrames; ++f) {
      for (std::size_t d = 0; d < kVideoDim; ++d) {
        c.video.at(f, d) = static_cast<float>(video_anchor[k][d]) + sigma * noise(crng);
      }
    }
    std::size_t p = 0;
    for (std::size_t f = 0; f < kPoseFrames; ++f) {
      for (std::size_t j = 0; j < kPoseJoints; ++j) {
        float* kp = c.pose.ptr() + (f * kPoseJoints + j) * kPoseChannels;
        kp[0] = static_cast<float>(pose_anchor[k][p++]) + sigma * noise(crng);
        kp[1] = static_cast<float>(pose_anchor[k][p++]) + sigma * noise(crng);
        kp[2] = 1.0f;
      }
    }
    for (std::size_t d = 0; d < kAudioDim; ++d) {
      c.audio[d] = static_cast<float>(audio_anchor[k][d]) + sigma * noise(crng);
    }
    // Ten annotator votes: seven on the true class, three spread over the rest.
    c.label.scores.fill(0.0f);
    c.label.scores[k] = 7.0f;
    std::uniform_int_distribution<std::size_t> other(0, kNumClasses - 2);
    for (int v = 0; v < 3; ++v) {
      std::size_t o = other(crng);
      if (o >= k) ++o;
      c.label.scores[o] += 1.0f;
    }
  }
  return clips;
}

}  // namespace mmfer
