// SPDX-License-Identifier: Apache-2.0
// Copyright (C) 2026 mmfer contributors

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "mmfer/error.hpp"
#include "mmfer/eval.hpp"
#include "support/temp_dir.hpp"

using namespace mmfer;

namespace {

struct Naive {
  double war, uar_eq1, mean_recall;
};

// Per-sample counting, no confusion matrix involved.
Naive naive_metrics(const std::vector<std::size_t>& p, const std::vector<std::size_t>& t, std::size_t k) {
  const double n = static_cast<double>(p.size());
  double hits = 0;
  for (std::size_t i = 0; i < p.size(); ++i) hits += p[i] == t[i];
  double eq1 = 0, recall = 0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < k; ++c) {
    double agree = 0, support = 0, found = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      agree += (p[i] == c) == (t[i] == c);
      if (t[i] == c) {
        ++support;
        found += p[i] == c;
      }
    }
    eq1 += agree / n;
    if (support > 0) {
      recall += found / support;
      ++present;
    }
  }
  return {hits / n, eq1 / static_cast<double>(k), recall / static_cast<double>(present)};
}

ConfusionMatrix from_rows(const std::vector<std::vector<std::size_t>>& rows) {
  ConfusionMatrix cm(rows.size());
  for (std::size_t t = 0; t < rows.size(); ++t)
    for (std::size_t p = 0; p < rows.size(); ++p) cm.at(t, p) = rows[t][p];
  return cm;
}

Tensor<double> random_log_probs(std::size_t n, std::size_t k, std::mt19937_64& rng, int levels = 0) {
  std::uniform_real_distribution<double> u(0.01, 1.0);
  std::uniform_int_distribution<int> q(1, std::max(levels, 1));
  Tensor<double> out(Shape{n, k});
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    std::vector<double> row(k);
    // Coarse levels force tied scores.
    for (auto& x : row) s += (x = levels ? q(rng) : u(rng));
    for (std::size_t c = 0; c < k; ++c) out[i * k + c] = std::log(row[c] / s);
  }
  return out;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("witness matrix") {
  const auto cm = from_rows({{2, 0, 0}, {1, 1, 0}, {0, 0, 2}});
  CHECK(war(cm) == doctest::Approx(5.0 / 6.0));
  CHECK(uar_eq1(cm) == doctest::Approx(8.0 / 9.0));
  CHECK(uar_mean_recall(cm) == doctest::Approx(5.0 / 6.0));
  CHECK(std::abs(war(cm) - 0.8333) < 1e-4);
  CHECK(std::abs(uar_eq1(cm) - 0.8889) < 1e-4);
}

TEST_CASE("two classes: eq1 collapses to accuracy") {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<std::size_t> cls(0, 1);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::size_t> p(1 + trial % 40), t(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = cls(rng), t[i] = cls(rng);
    const auto cm = confusion(p, t, 2);
    CHECK(uar_eq1(cm) == doctest::Approx(war(cm)).epsilon(1e-12));
  }
}

TEST_CASE("metrics against per-sample oracle") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t k = 2 + trial % 6;
    const std::size_t n = 1 + rng() % 60;
    std::uniform_int_distribution<std::size_t> cls(0, k - 1);
    std::vector<std::size_t> p(n), t(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = cls(rng), t[i] = cls(rng);
    const auto cm = confusion(p, t, k);
    const auto ref = naive_metrics(p, t, k);
    std::vector<std::size_t> excluded;
    REQUIRE(cm.total() == n);
    CHECK(std::abs(war(cm) - ref.war) < 1e-12);
    CHECK(std::abs(uar_eq1(cm) - ref.uar_eq1) < 1e-12);
    CHECK(std::abs(uar_mean_recall(cm, &excluded) - ref.mean_recall) < 1e-12);
    for (double m : {war(cm), uar_eq1(cm), uar_mean_recall(cm)}) CHECK((m >= 0 && m <= 1));
    for (std::size_t c : excluded) CHECK(std::count(t.begin(), t.end(), c) == 0);
  }
}

TEST_CASE("metric edge cases") {
  const auto perfect = confusion(std::vector<std::size_t>{0, 1, 2, 3}, std::vector<std::size_t>{0, 1, 2, 3}, 4);
  CHECK(war(perfect) == 1.0);
  CHECK(uar_eq1(perfect) == 1.0);
  CHECK(uar_mean_recall(perfect) == 1.0);

  std::vector<std::size_t> excluded;
  const auto partial = confusion(std::vector<std::size_t>{0, 0, 1}, std::vector<std::size_t>{0, 1, 1}, 7);
  CHECK(uar_mean_recall(partial, &excluded) == doctest::Approx(0.75));
  CHECK(excluded == std::vector<std::size_t>{2, 3, 4, 5, 6});

  CHECK_THROWS_AS(confusion(std::vector<std::size_t>{0, 1}, std::vector<std::size_t>{0}, 7), ShapeError);
  CHECK_THROWS_AS(war(ConfusionMatrix(7)), ConfigError);
}

TEST_CASE("pr curves against brute force") {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t n = 2 + trial, k = 7;
    const auto lp = random_log_probs(n, k, rng, trial % 2 ? 3 : 0);
    std::vector<std::size_t> t(n);
    std::uniform_int_distribution<std::size_t> cls(0, k - 2);  // class 6 never occurs
    for (auto& x : t) x = cls(rng);
    const auto curves = pr_curves(lp, t);
    REQUIRE(curves.size() == k);
    CHECK_FALSE(curves[6].defined);
    CHECK(curves[6].points.empty());
    for (std::size_t c = 0; c < k; ++c) {
      const auto& cur = curves[c];
      const auto pos = static_cast<std::size_t>(std::count(t.begin(), t.end(), c));
      CHECK(cur.defined == (pos > 0));
      if (!cur.defined) continue;
      std::set<double, std::greater<>> thresholds;
      for (std::size_t i = 0; i < n; ++i) thresholds.insert(std::exp(lp[i * k + c]));
      REQUIRE(cur.points.size() == thresholds.size());
      std::size_t j = 0;
      for (double th : thresholds) {
        double tp = 0, fp = 0;
        for (std::size_t i = 0; i < n; ++i) {
          if (std::exp(lp[i * k + c]) >= th) (t[i] == c ? tp : fp) += 1;
        }
        const auto& pt = cur.points[j++];
        CHECK(pt.threshold == th);
        CHECK(std::abs(pt.precision - tp / (tp + fp)) < 1e-12);
        CHECK(std::abs(pt.recall - tp / static_cast<double>(pos)) < 1e-12);
      }
      CHECK(cur.points.back().recall == 1.0);
      for (std::size_t i = 1; i < cur.points.size(); ++i) CHECK(cur.points[i].recall >= cur.points[i - 1].recall);
    }
  }
}

TEST_CASE("pr curve of separated scores reaches (1, 1)") {
  // class 0 positives score 0.9, negatives 0.1
  Tensor<double> lp(Shape{4, 2}, {std::log(0.9), std::log(0.1), std::log(0.9), std::log(0.1), std::log(0.1),
                                  std::log(0.9), std::log(0.1), std::log(0.9)});
  const auto curves = pr_curves(lp, std::vector<std::size_t>{0, 0, 1, 1});
  REQUIRE(curves[0].points.size() == 2);
  CHECK(curves[0].points[0].precision == 1.0);
  CHECK(curves[0].points[0].recall == 1.0);
  CHECK(curves[0].points[1].precision == 0.5);
}

TEST_CASE("evaluate and report files") {
  SynthSpec spec;
  spec.n_clips = 140;
  spec.seed = 4;
  const auto clips = synthesize_dataset(spec);
  ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.d_ff = 32;
  cfg.decision_hidden = 16;
  Model<float> model(cfg, 8);

  SUBCASE("untrained model is near chance") {
    const auto r = evaluate(model, clips, 0.0);
    CHECK(r.n_total == clips.size());
    CHECK(r.n_filtered == 0);
    CHECK(r.war < 0.4);
    CHECK(r.confusion.total() == clips.size());
  }

  SUBCASE("threshold drops ambiguous clips") {
    const auto filtered = filter_ambiguous(clips, 6.0);
    const auto r = evaluate(model, clips);
    CHECK(r.n_filtered == filtered.dropped);
    CHECK(r.confusion.total() == filtered.kept.size());
  }

  SUBCASE("nothing left") {
    try {
      evaluate(model, clips, 11.0);
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("threshold") != std::string::npos);
    }
  }

  SUBCASE("files") {
    testing::TempDir dir;
    const auto r = evaluate(model, clips, 0.0);
    write_report(r, dir.path());
    const auto metrics = slurp(dir.path() / "metrics.txt");
    CHECK(metrics.find("war=") == 0);
    for (const char* key : {"uar_eq1=", "uar_mean_recall=", "n_total=140\n", "n_filtered=0\n"})
      CHECK(metrics.find(key) != std::string::npos);
    std::istringstream cm(slurp(dir.path() / "confusion.csv"));
    std::string line;
    std::size_t rows = 0, sum = 0;
    while (std::getline(cm, line)) {
      ++rows;
      std::istringstream cells(line);
      std::string cell;
      std::size_t cols = 0;
      while (std::getline(cells, cell, ',')) sum += std::stoul(cell), ++cols;
      CHECK(cols == 7);
    }
    CHECK(rows == 7);
    CHECK(sum == 140);
    for (auto name : kEmotionNames) {
      const auto pr = slurp(dir.path() / ("pr_" + std::string(name) + ".csv"));
      CHECK(pr.rfind("threshold,precision,recall\n", 0) == 0);
    }
  }
}
