// SPDX-License-Identifier: Apache-2.0
// Copyright (C) 2026 mmfer contributors

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "mmfer/losses.hpp"
#include "mmfer/model.hpp"

namespace mmfer {

struct PlateauConfig {
  double factor = 0.1;
  std::size_t patience = 2;
  /// Relative: an epoch improves when val_loss < best * (1 - min_delta).
  double min_delta = 1e-4;
};

struct TrainConfig {
  LossKind loss = LossKind::Kl;
  double lr = 1e-4;
  double weight_decay = 0.0;
  std::size_t batch_size = 16;
  /// Epochs to run in this call (a resumed run adds this many).
  std::size_t max_epochs = 30;
  PlateauConfig plateau;
  std::uint64_t seed = 0;
  std::vector<std::string> freeze;
  bool determinism = true;

  void validate() const;
};

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;

template <typename T>
struct AdamState {
  std::vector<Tensor<T>> m, v;  // indexed like the parameter list
  std::uint64_t step = 0;
};

/// One bias-corrected Adam update with L2 added to the gradient
/// (g <- g + wd * theta). Non-trainable parameters are skipped.
template <typename T>
void adam_step(std::vector<Parameter<T>>& params, AdamState<T>& state, double lr, double weight_decay);

struct PlateauState {
  double lr = 1e-4;
  double best = std::numeric_limits<double>::infinity();
  std::size_t bad_epochs = 0;
};

/// Feeds one epoch's validation loss; returns the lr for the next epoch. The
/// lr drops once `patience` consecutive epochs fail to improve, then the
/// counter restarts.
double plateau_step(PlateauState& state, const PlateauConfig& config, double val_loss);

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0, train_war = 0, val_loss = 0, val_war = 0;
  double lr = 0;  // lr used during this epoch
};

inline constexpr const char* kEpochCsvHeader = "epoch,train_loss,train_war,val_loss,val_war,lr";
std::string epoch_csv_row(const EpochLog& log);

/// Scheduler position carried across a resume.
struct ResumeState {
  std::size_t next_epoch = 0;
  PlateauState plateau;
  double best_val_loss = std::numeric_limits<double>::infinity();
};

void write_resume_state(const std::filesystem::path& path, const ResumeState& state);
ResumeState read_resume_state(const std::filesystem::path& path);

template <typename T>
struct FitOptions {
  /// When non-empty: epochs.csv, best.mmck, last.mmck and train_state.txt go here.
  std::filesystem::path out_dir;
  /// Set when continuing a run; the plateau lr is replaced by config.lr only
  /// if `reset_lr` is true.
  std::optional<ResumeState> resume;
  bool reset_lr = false;
  /// Called after every epoch; returning false stops training.
  std::function<bool(const EpochLog&, Model<T>&)> on_epoch;
};

template <typename T>
struct FitResult {
  Model<T> best;
  std::vector<EpochLog> log;
  ResumeState state;
};

/// Epoch loop: seeded shuffle, mini-batches, forward, loss, backward, Adam,
/// validation, plateau step. "Best" is the lowest validation loss. A
/// non-finite loss raises NumericalError naming epoch and batch.
template <typename T>
FitResult<T> fit(Model<T>& model, const TrainConfig& config, std::span<const ClipFeatures> train,
                 std::span<const ClipFeatures> val, const FitOptions<T>& options = {});

/// Mean loss and unfiltered accuracy of eval-mode predictions.
template <typename T>
std::pair<double, double> evaluate_loss(Model<T>& model, LossKind loss, std::span<const ClipFeatures> clips,
                                        std::span<const double> class_weights);

}  // namespace mmfer
