// SPDX-License-Identifier: Apache-2.0
// Copyright (C) 2026 mmfer contributors

#include "mmfer/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "mmfer/error.hpp"

namespace mmfer {

std::size_t ConfusionMatrix::total() const {
  std::size_t t = 0;
  for (std::size_t c : counts) t += c;
  return t;
}

std::size_t ConfusionMatrix::row_sum(std::size_t k) const {
  std::size_t s = 0;
  for (std::size_t p = 0; p < n; ++p) s += at(k, p);
  return s;
}

std::size_t ConfusionMatrix::col_sum(std::size_t k) const {
  std::size_t s = 0;
  for (std::size_t t = 0; t < n; ++t) s += at(t, k);
  return s;
}

ConfusionMatrix confusion(std::span<const std::size_t> preds, std::span<const std::size_t> trues,
                          std::size_t n_classes) {
  if (preds.size() != trues.size()) {
    throw ShapeError("confusion: " + std::to_string(preds.size()) + " predictions but " + std::to_string(trues.size()) +
                     " labels");
  }
  ConfusionMatrix cm(n_classes);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] >= n_classes || trues[i] >= n_classes) throw ConfigError("confusion: class index out of range");
    ++cm.at(trues[i], preds[i]);
  }
  return cm;
}

namespace {

std::size_t require_total(const ConfusionMatrix& cm, const char* what) {
  const std::size_t t = cm.total();
  if (t == 0) throw ConfigError(std::string(what) + ": empty confusion matrix");
  return t;
}

}  // namespace

double war(const ConfusionMatrix& cm) {
  const double T = static_cast<double>(require_total(cm, "war"));
  std::size_t trace = 0;
  for (std::size_t k = 0; k < cm.n; ++k) trace += cm.at(k, k);
  return static_cast<double>(trace) / T;
}

double uar_eq1(const ConfusionMatrix& cm) {
  const std::size_t T = require_total(cm, "uar_eq1");
  double acc = 0;
  for (std::size_t k = 0; k < cm.n; ++k) {
    const std::size_t tp = cm.at(k, k);
    const std::size_t tn = T - cm.row_sum(k) - cm.col_sum(k) + tp;
    acc += static_cast<double>(tp + tn) / static_cast<double>(T);
  }
  return acc / static_cast<double>(cm.n);
}

double uar_mean_recall(const ConfusionMatrix& cm, std::vector<std::size_t>* excluded) {
  double acc = 0;
  std::size_t used = 0;
  for (std::size_t k = 0; k < cm.n; ++k) {
    const std::size_t row = cm.row_sum(k);
    if (row == 0) {
      if (excluded) excluded->push_back(k);
      continue;
    }
    acc += static_cast<double>(cm.at(k, k)) / static_cast<double>(row);
    ++used;
  }
  if (used == 0) throw ConfigError("uar_mean_recall: no class has any true samples");
  return acc / static_cast<double>(used);
}

std::vector<PrCurve> pr_curves(const Tensor<double>& log_probs, std::span<const std::size_t> trues) {
  if (log_probs.rank() != 2 || log_probs.dim(0) != trues.size()) {
    throw ShapeError("pr_curves: scores " + shape_str(log_probs.shape()) + " do not match " +
                     std::to_string(trues.size()) + " labels");
  }
  const std::size_t N = log_probs.dim(0), K = log_probs.dim(1);
  std::vector<PrCurve> curves;
  for (std::size_t k = 0; k < K; ++k) {
    PrCurve c;
    c.cls = k;
    const std::size_t positives = static_cast<std::size_t>(std::count(trues.begin(), trues.end(), k));
    c.defined = positives > 0;
    if (c.defined) {
      std::vector<std::pair<double, bool>> scored;
      for (std::size_t i = 0; i < N; ++i) scored.emplace_back(std::exp(log_probs[i * K + k]), trues[i] == k);
      std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
      std::size_t tp = 0, fp = 0;
      for (std::size_t i = 0; i < N;) {
        const double t = scored[i].first;
        // Samples with equal scores cross the threshold together.
        for (; i < N && scored[i].first == t; ++i) (scored[i].second ? tp : fp) += 1;
        c.points.push_back({t, static_cast<double>(tp) / static_cast<double>(tp + fp),
                            static_cast<double>(tp) / static_cast<double>(positives)});
      }
    }
    curves.push_back(std::move(c));
  }
  return curves;
}

EvalReport build_report(const Tensor<double>& log_probs, std::span<const std::size_t> trues, std::size_t n_total,
                        std::size_t n_filtered) {
  const std::size_t N = trues.size(), K = log_probs.dim(1);
  std::vector<std::size_t> preds(N);
  for (std::size_t i = 0; i < N; ++i) {
    const double* row = log_probs.ptr() + i * K;
    preds[i] = static_cast<std::size_t>(std::max_element(row, row + K) - row);
  }
  EvalReport r;
  r.confusion = confusion(preds, trues, K);
  r.war = war(r.confusion);
  r.uar_eq1 = uar_eq1(r.confusion);
  r.uar_mean_recall = uar_mean_recall(r.confusion, &r.recall_excluded);
  for (std::size_t k = 0; k < K; ++k) {
    const std::size_t col = r.confusion.col_sum(k), row = r.confusion.row_sum(k), tp = r.confusion.at(k, k);
    r.precision.push_back(col ? static_cast<double>(tp) / static_cast<double>(col) : 0.0);
    r.recall.push_back(row ? static_cast<double>(tp) / static_cast<double>(row) : 0.0);
  }
  r.pr = pr_curves(log_probs, trues);
  r.n_total = n_total;
  r.n_filtered = n_filtered;
  return r;
}

template <typename T>
EvalReport evaluate(Model<T>& model, std::span<const ClipFeatures> dataset, double threshold) {
  if (!(threshold >= 0)) throw ConfigError("threshold must be >= 0");
  const auto filtered = filter_ambiguous(dataset, threshold);
  if (filtered.kept.empty()) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%g", threshold);
    throw ConfigError("no clip has a class score above the threshold " + std::string(buf) + " (all " +
                      std::to_string(dataset.size()) + " filtered out); lower the threshold");
  }
  const auto lp = model.predict(filtered.kept).template cast<double>();
  std::vector<std::size_t> trues;
  for (const auto& c : filtered.kept) trues.push_back(c.label.hard_label());
  return build_report(lp, trues, dataset.size(), filtered.dropped);
}

void write_report(const EvalReport& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto open = [&](const std::string& name) {
    std::ofstream out(dir / name, std::ios::trunc);
    if (!out) throw FormatError("cannot write '" + (dir / name).string() + "'");
    return out;
  };
  {
    auto out = open("metrics.txt");
    char buf[256];
    std::snprintf(buf, sizeof buf, "war=%.6f\nuar_eq1=%.6f\nuar_mean_recall=%.6f\nn_total=%zu\nn_filtered=%zu\n", r.war,
                  r.uar_eq1, r.uar_mean_recall, r.n_total, r.n_filtered);
    out << buf;
  }
  {
    auto out = open("confusion.csv");
    for (std::size_t t = 0; t < r.confusion.n; ++t) {
      for (std::size_t p = 0; p < r.confusion.n; ++p) out << (p ? "," : "") << r.confusion.at(t, p);
      out << '\n';
    }
  }
  for (const auto& c : r.pr) {
    if (!c.defined) continue;
    auto out = open("pr_" + std::string(kEmotionNames[c.cls]) + ".csv");
    out << "threshold,precision,recall\n";
    char buf[128];
    for (const auto& p : c.points) {
      std::snprintf(buf, sizeof buf, "%.9g,%.6f,%.6f\n", p.threshold, p.precision, p.recall);
      out << buf;
    }
  }
}

template EvalReport evaluate<float>(Model<float>&, std::span<const ClipFeatures>, double);
template EvalReport evaluate<double>(Model<double>&, std::span<const ClipFeatures>, double);

}  // namespace mmfer
