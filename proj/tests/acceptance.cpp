// SPDX-License-Identifier: Apache-2.0
// Copyright (C) 2026 mmfer contributors

// End-to-end acceptance gate: one PASS/FAIL line per criterion.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>

#include "mmfer/checkpoint.hpp"
#include "mmfer/cli.hpp"
#include "mmfer/eval.hpp"
#include "mmfer/gradcheck.hpp"
#include "mmfer/losses.hpp"
#include "mmfer/training.hpp"
#include "support/temp_dir.hpp"

using namespace mmfer;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, ...) __attribute__((format(printf, 1, 2)));
std::string fmt(const char* f, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ClipFeatures labeled(std::string id, std::array<float, kNumClasses> scores) {
  ClipFeatures c;
  c.clip_id = std::move(id);
  c.label.scores = scores;
  return c;
}

// 10 votes spread at random.
std::vector<ClipFeatures> random_labels(std::mt19937_64& rng, std::size_t n) {
  std::discrete_distribution<std::size_t> skew({5, 1, 3, 2, 4, 1, 2});
  std::vector<ClipFeatures> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::array<float, kNumClasses> s{};
    for (int v = 0; v < 10; ++v) s[skew(rng)] += 1;
    out.push_back(labeled(fmt("clip%05zu", i), s));
  }
  return out;
}

// ---- 1 ----
Outcome gradients() {
  const auto t0 = Clock::now();
  double worst = 0;
  std::size_t min_checked = SIZE_MAX, failures = 0;
  std::string where;
  for (FusionMode mode : kFusionModes) {
    ModelConfig cfg;
    cfg.fusion = mode;
    const auto r = gradcheck_model(cfg, 2026, 200);
    min_checked = std::min(min_checked, r.checked);
    failures += r.failures.size();
    if (r.worst.rel_error >= worst) {
      worst = r.worst.rel_error;
      where = std::string(fusion_name(mode)) + ":" + r.worst.where;
    }
  }
  const double secs = seconds_since(t0);
  return {failures == 0 && min_checked >= 200 && worst < 1e-4 && secs < 300,
          fmt("%zu+ probes per mode, worst rel error %.2e (%s), %zu failures, %.0f s", min_checked, worst,
              where.c_str(), failures, secs)};
}

// ---- 2 ----
Outcome metrics() {
  std::mt19937_64 rng(7);
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng() % 200;
    std::uniform_int_distribution<std::size_t> cls(0, kNumClasses - 1);
    std::vector<std::size_t> p(n), t(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = cls(rng), t[i] = rng() % 3 ? p[i] : cls(rng);
    // naive per-sample counting
    double hits = 0, eq1 = 0, recall = 0;
    std::size_t present = 0;
    for (std::size_t i = 0; i < n; ++i) hits += p[i] == t[i];
    for (std::size_t k = 0; k < kNumClasses; ++k) {
      double agree = 0, support = 0, found = 0;
      for (std::size_t i = 0; i < n; ++i) {
        agree += (p[i] == k) == (t[i] == k);
        if (t[i] == k) ++support, found += p[i] == k;
      }
      eq1 += agree / static_cast<double>(n);
      if (support > 0) recall += found / support, ++present;
    }
    const auto cm = confusion(p, t);
    mismatches += war(cm) != hits / static_cast<double>(n);
    mismatches += uar_eq1(cm) != eq1 / static_cast<double>(kNumClasses);
    mismatches += uar_mean_recall(cm) != recall / static_cast<double>(present);
  }
  ConfusionMatrix w(3);
  const std::size_t rows[3][3] = {{2, 0, 0}, {1, 1, 0}, {0, 0, 2}};
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) w.at(i, j) = rows[i][j];
  const double a = war(w), b = uar_eq1(w);
  return {mismatches == 0 && std::abs(a - 0.8333) < 1e-4 && std::abs(b - 0.8889) < 1e-4,
          fmt("1000 sets, %zu mismatches; witness war %.4f uar_eq1 %.4f", mismatches, a, b)};
}

// ---- 3 ----
Outcome threshold() {
  const std::vector<ClipFeatures> clips = {labeled("max5", {5, 2, 2, 1, 0, 0, 0}), labeled("max6", {6, 2, 1, 1, 0, 0, 0}),
                                           labeled("max7", {7, 1, 1, 1, 0, 0, 0})};
  const auto r = filter_ambiguous(clips, 6.0);
  const bool ok = r.kept.size() == 1 && r.kept[0].clip_id == "max7" && r.dropped == 2;
  return {ok, fmt("kept %zu (%s), dropped %zu", r.kept.size(), r.kept.empty() ? "-" : r.kept[0].clip_id.c_str(),
                  r.dropped)};
}

// ---- 4 ----
Outcome losses() {
  std::mt19937_64 rng(3);
  std::gamma_distribution<double> g(1.0, 1.0);
  double worst_kl = 0, worst_mse = 0;
  for (int trial = 0; trial < 100; ++trial) {
    Tensor<double> lp(Shape{1, kNumClasses});
    double s = 0;
    for (std::size_t k = 0; k < kNumClasses; ++k) s += (lp[k] = g(rng) + 1e-3);
    for (std::size_t k = 0; k < kNumClasses; ++k) lp[k] = std::log(lp[k] / s);
    Tensor<double> p(lp.shape());
    for (std::size_t k = 0; k < kNumClasses; ++k) p[k] = std::exp(lp[k]);
    Tape<double> tape;
    worst_kl = std::max(worst_kl, std::abs(kl_loss(tape.constant(lp), p).value()[0]));
    worst_mse = std::max(worst_mse, std::abs(mse_loss(tape.constant(lp), p).value()[0]));
  }
  Tape<double> tape;
  const double kl2 = kl_loss(tape.constant(Tensor<double>(Shape{1, 2}, {std::log(0.25), std::log(0.75)})),
                             Tensor<double>(Shape{1, 2}, {0.5, 0.5}))
                         .value()[0];
  const std::vector<double> ones(kNumClasses, 1.0);
  const std::vector<std::size_t> label = {3};
  const double ce =
      weighted_ce_loss(tape.constant(Tensor<double>(Shape{1, kNumClasses}, -std::log(7.0))), label, ones).value()[0];
  const bool ok = worst_kl <= 1e-9 && worst_mse == 0.0 && std::abs(kl2 - 0.1438) < 1e-4 &&
                  std::abs(ce - std::log(7.0)) < 1e-6;
  return {ok, fmt("max kl(p||p) %.1e, max mse(p,p) %.1e, kl example %.5f, uniform ce %.7f", worst_kl, worst_mse, kl2,
                  ce)};
}

// ---- 5 ----
Outcome overfit() {
  SynthSpec spec;
  spec.n_clips = 64;
  spec.misalignment = 0.0;
  spec.noise_sigma = 0.1;
  spec.seed = 5;
  const auto clips = synthesize_dataset(spec);
  ModelConfig mc;
  mc.fusion = FusionMode::VideoOnly;
  Model<float> model(mc, 5);
  TrainConfig tc;
  tc.loss = LossKind::Kl;
  tc.lr = 1e-4;
  tc.max_epochs = 200;
  tc.seed = 5;
  double best_war = 0;
  std::size_t epochs = 0;
  FitOptions<float> fo;
  // Validation set = the training clips, so val_war is eval-mode train accuracy.
  fo.on_epoch = [&](const EpochLog& log, Model<float>&) {
    ++epochs;
    best_war = std::max(best_war, log.val_war);
    return log.val_war < 0.95;
  };
  const auto t0 = Clock::now();
  fit(model, tc, clips, clips, fo);
  const double secs = seconds_since(t0);
  return {best_war >= 0.95 && secs < 600, fmt("train WAR %.3f after %zu epochs, %.0f s", best_war, epochs, secs)};
}

// ---- 6 ----
Outcome fusion_harness(const fs::path& tmp) {
  std::ostringstream out, err;
  const auto data = tmp / "fusion_data";
  const auto run = tmp / "fusion_run";
  int code = run_cli({"synth", "--n", "500", "--misalignment", "1.0", "--seed", "11", "--out", data.string()}, out, err);
  if (code != 0) return {false, "synth failed: " + err.str()};
  const auto t0 = Clock::now();
  code = run_cli({"compare-fusion", "--data", (data / "manifest.tsv").string(), "--out", run.string(), "--seed", "11",
                  "--set", "max_epochs=2"},
                 out, err);
  if (code != 0) return {false, fmt("compare-fusion exit %d: ", code) + err.str()};
  std::istringstream csv(slurp(run / "fusion.csv"));
  std::string line;
  std::getline(csv, line);
  bool ok = line == "model,war,uar_eq1,uar_mean_recall";
  std::vector<std::pair<std::string, double>> rows;
  while (std::getline(csv, line)) {
    const auto comma = line.find(',');
    rows.emplace_back(line.substr(0, comma), std::stod(line.substr(comma + 1)));
  }
  ok = ok && rows.size() == 3 && rows[0].first == "VideoOnly" && rows[1].first == "TransformerFusion" &&
       rows[2].first == "FcFusion";
  if (!ok) return {false, "malformed fusion.csv"};
  ok = rows[0].second >= 0.286 && rows[2].second >= 0.286;
  return {ok, fmt("held-out WAR VideoOnly %.3f, TransformerFusion %.3f, FcFusion %.3f, %.0f s", rows[0].second,
                  rows[1].second, rows[2].second, seconds_since(t0))};
}

// ---- 7 ----
Outcome split() {
  std::mt19937_64 rng(17);
  std::size_t worst_dev_violations = 0, nondeterministic = 0;
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto clips = random_labels(rng, 20 + rng() % 400);
    const SplitRatios r{0.8, 0.1, 0.1};
    const auto s = stratified_split(clips, r, trial);
    std::array<std::size_t, kNumClasses> total{};
    for (const auto& c : clips) ++total[c.label.hard_label()];
    const double ratio[3] = {r.train, r.val, r.test};
    for (std::size_t k = 0; k < kNumClasses; ++k) {
      if (total[k] < 3) continue;  // too small to split: all to train, with a warning
      for (std::size_t p = 0; p < 3; ++p) {
        const double dev = std::abs(static_cast<double>(s.counts[p][k]) - ratio[p] * static_cast<double>(total[k]));
        worst = std::max(worst, dev);
        worst_dev_violations += dev > 1.0;
      }
    }
    const auto again = stratified_split(clips, r, trial);
    auto ids = [](const std::vector<ClipFeatures>& v) {
      std::vector<std::string> out;
      for (const auto& c : v) out.push_back(c.clip_id);
      return out;
    };
    nondeterministic += ids(s.train) != ids(again.train) || ids(s.val) != ids(again.val) ||
                        ids(s.test) != ids(again.test);
  }
  return {worst_dev_violations == 0 && nondeterministic == 0,
          fmt("100 datasets, worst deviation %.2f samples, %zu nondeterministic", worst, nondeterministic)};
}

// ---- 8 ----
Outcome determinism(const fs::path& tmp) {
  std::ostringstream out, err;
  const auto data = tmp / "det_data";
  if (run_cli({"synth", "--n", "40", "--seed", "8", "--noise", "0.5", "--out", data.string()}, out, err) != 0) {
    return {false, "synth failed"};
  }
  for (const char* name : {"det_a", "det_b"}) {
    const int code = run_cli({"train", "--data", (data / "manifest.tsv").string(), "--out", (tmp / name).string(),
                              "--seed", "8", "--determinism", "on", "--set", "max_epochs=2", "--set", "fusion=fc_fusion"},
                             out, err);
    if (code != 0) return {false, "train failed: " + err.str()};
  }
  std::size_t differing = 0;
  for (const char* f : {"epochs.csv", "best.mmck", "last.mmck"}) {
    differing += testing::read_bytes(tmp / "det_a" / f) != testing::read_bytes(tmp / "det_b" / f);
  }
  return {differing == 0, fmt("epochs.csv, best.mmck, last.mmck: %zu differ", differing)};
}

// ---- 9 ----
Outcome plateau() {
  PlateauState s;
  s.lr = 1.0;
  const PlateauConfig cfg{0.1, 2, 1e-4};
  std::vector<double> lrs;
  std::string trace;
  for (double loss : {1.0, 1.0, 1.0, 1.0}) {
    lrs.push_back(plateau_step(s, cfg, loss));
    trace += fmt("%s%g", trace.empty() ? "" : " ", lrs.back());
  }
  const bool ok = lrs == std::vector<double>{1.0, 1.0, 0.1, 0.1};
  return {ok, "lr after each epoch: " + trace};
}

// ---- 10 ----
Outcome round_trips(const fs::path& tmp) {
  SynthSpec spec;
  spec.n_clips = 12;
  spec.seed = 10;
  spec.misalignment = 0.4;
  const auto clips = synthesize_dataset(spec);
  const auto loaded = load_dataset(write_dataset(tmp / "rt", clips));
  bool data_ok = loaded.size() == clips.size();
  for (std::size_t i = 0; data_ok && i < clips.size(); ++i) {
    const auto& a = clips[i];
    const auto& b = loaded[i];
    data_ok = a.clip_id == b.clip_id && a.video.storage() == b.video.storage() && a.pose.storage() == b.pose.storage() &&
              a.audio.storage() == b.audio.storage() && a.label.scores == b.label.scores;
  }

  ModelConfig mc;  // full size, FcFusion
  Model<float> model(mc, 10);
  // Move the batch-norm statistics off their initial values first.
  TrainConfig tc;
  tc.max_epochs = 1;
  tc.batch_size = 6;
  fit(model, tc, clips, clips);
  const auto before = model.predict(clips);
  save_checkpoint(model, tmp / "a.mmck");
  auto restored = load_checkpoint<float>(tmp / "a.mmck");
  save_checkpoint(restored, tmp / "b.mmck");
  const bool bytes_ok = testing::read_bytes(tmp / "a.mmck") == testing::read_bytes(tmp / "b.mmck");
  const auto after = restored.predict(clips);
  const bool forward_ok = before.storage() == after.storage();
  return {data_ok && bytes_ok && forward_ok,
          fmt("dataset %s, checkpoint bytes %s, forward outputs %s", data_ok ? "identical" : "DIFFER",
              bytes_ok ? "identical" : "DIFFER", forward_ok ? "identical" : "DIFFER")};
}

}  // namespace

int main() {
  testing::TempDir tmp;
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"gradient check, full model, 3 fusion modes", gradients},
      {"metrics match per-sample oracle", metrics},
      {"threshold keeps only max score > 6", threshold},
      {"loss identities", losses},
      {"overfit smoke", overfit},
      {"fusion comparison harness", [&] { return fusion_harness(tmp.path()); }},
      {"stratified split", split},
      {"determinism of train runs", [&] { return determinism(tmp.path()); }},
      {"plateau trace", plateau},
      {"dataset and checkpoint round trips", [&] { return round_trips(tmp.path()); }},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s %2zu %s: %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first, o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d of %zu criteria failed\n", failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
