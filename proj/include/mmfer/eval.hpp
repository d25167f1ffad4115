// SPDX-License-Identifier: Apache-2.0
// Copyright (C) 2026 mmfer contributors

#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "mmfer/data.hpp"
#include "mmfer/model.hpp"

namespace mmfer {

/// counts[true][predicted]
struct ConfusionMatrix {
  std::size_t n = kNumClasses;
  std::vector<std::size_t> counts = std::vector<std::size_t>(kNumClasses * kNumClasses, 0);

  ConfusionMatrix() = default;
  explicit ConfusionMatrix(std::size_t classes) : n(classes), counts(classes * classes, 0) {}

  std::size_t& at(std::size_t t, std::size_t p) { return counts[t * n + p]; }
  std::size_t at(std::size_t t, std::size_t p) const { return counts[t * n + p]; }
  std::size_t total() const;
  std::size_t row_sum(std::size_t k) const;
  std::size_t col_sum(std::size_t k) const;
};

ConfusionMatrix confusion(std::span<const std::size_t> preds, std::span<const std::size_t> trues,
                          std::size_t n_classes = kNumClasses);

/// trace / total
double war(const ConfusionMatrix& cm);
/// mean_k (tp_k + tn_k) / T, the accuracy-like form with tn_k = T - row_k - col_k + tp_k.
double uar_eq1(const ConfusionMatrix& cm);
/// Mean recall over classes with at least one true sample; the skipped
/// classes are appended to `excluded`.
double uar_mean_recall(const ConfusionMatrix& cm, std::vector<std::size_t>* excluded = nullptr);

struct PrPoint {
  double threshold = 0, precision = 0, recall = 0;
};

struct PrCurve {
  std::size_t cls = 0;
  bool defined = false;  // false when the class never occurs in trues
  std::vector<PrPoint> points;  // thresholds descending, so recall is non-decreasing
};

/// One-vs-rest curves on exp(log_probs) [N x K]; one point per unique score.
std::vector<PrCurve> pr_curves(const Tensor<double>& log_probs, std::span<const std::size_t> trues);

struct EvalReport {
  ConfusionMatrix confusion;
  double war = 0, uar_eq1 = 0, uar_mean_recall = 0;
  std::vector<std::size_t> recall_excluded;
  std::vector<double> precision, recall;  // per class; 0 when undefined
  std::vector<PrCurve> pr;
  std::size_t n_total = 0, n_filtered = 0;
};

EvalReport build_report(const Tensor<double>& log_probs, std::span<const std::size_t> trues, std::size_t n_total,
                        std::size_t n_filtered);

/// Drops clips whose max score is not above threshold, runs eval-mode
/// forward on the rest and assembles the report.
template <typename T>
EvalReport evaluate(Model<T>& model, std::span<const ClipFeatures> dataset, double threshold = kAmbiguityThreshold);

/// metrics.txt, confusion.csv and pr_<class>.csv for every defined curve.
void write_report(const EvalReport& report, const std::filesystem::path& dir);

}  // namespace mmfer
