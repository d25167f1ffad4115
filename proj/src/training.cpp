// SPDX-License-Identifier: Apache-2.0
// Copyright (C) 2026 mmfer contributors

#include "mmfer/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>

#include "blas.hpp"
#include "mmfer/checkpoint.hpp"
#include "mmfer/error.hpp"

namespace mmfer {

void TrainConfig::validate() const {
  if (!(lr > 0)) throw ConfigError("lr must be > 0");
  if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be >= 0");
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (!(plateau.factor > 0 && plateau.factor < 1)) throw ConfigError("plateau_factor must be in (0, 1)");
  if (plateau.patience < 1) throw ConfigError("plateau_patience must be >= 1");
  if (!(plateau.min_delta >= 0)) throw ConfigError("plateau_min_delta must be >= 0");
}

template <typename T>
void adam_step(std::vector<Parameter<T>>& params, AdamState<T>& state, double lr, double weight_decay) {
  state.m.resize(params.size());
  state.v.resize(params.size());
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(kAdamBeta1, t);
  const double c2 = 1.0 - std::pow(kAdamBeta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!p.trainable) continue;
    if (p.grad.shape() != p.value.shape()) {
      throw ShapeError("adam_step: gradient of '" + p.name + "' has shape " + shape_str(p.grad.shape()) +
                       ", parameter has " + shape_str(p.value.shape()));
    }
    if (state.m[i].shape() != p.value.shape()) {
      state.m[i] = Tensor<T>(p.value.shape());
      state.v[i] = Tensor<T>(p.value.shape());
    }
    T* theta = p.value.ptr();
    const T* grad = p.grad.ptr();
    T* m = state.m[i].ptr();
    T* v = state.v[i].ptr();
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const double g = grad[j] + weight_decay * theta[j];
      m[j] = static_cast<T>(kAdamBeta1 * m[j] + (1 - kAdamBeta1) * g);
      v[j] = static_cast<T>(kAdamBeta2 * v[j] + (1 - kAdamBeta2) * g * g);
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      theta[j] = static_cast<T>(theta[j] - lr * mhat / (std::sqrt(vhat) + kAdamEps));
    }
  }
}

double plateau_step(PlateauState& state, const PlateauConfig& config, double val_loss) {
  if (val_loss < state.best * (1.0 - config.min_delta)) {
    state.best = val_loss;
    state.bad_epochs = 0;
  } else if (++state.bad_epochs >= config.patience) {
    state.lr *= config.factor;
    state.bad_epochs = 0;
  }
  return state.lr;
}

std::string epoch_csv_row(const EpochLog& l) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu,%.8f,%.6f,%.8f,%.6f,%.6g", l.epoch, l.train_loss, l.train_war, l.val_loss,
                l.val_war, l.lr);
  return buf;
}

void write_resume_state(const std::filesystem::path& path, const ResumeState& s) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot write '" + path.string() + "'");
  char buf[512];
  std::snprintf(buf, sizeof buf, "next_epoch=%zu\nlr=%.17g\nplateau_best=%.17g\nbad_epochs=%zu\nbest_val_loss=%.17g\n",
                s.next_epoch, s.plateau.lr, s.plateau.best, s.plateau.bad_epochs, s.best_val_loss);
  out << buf;
}

ResumeState read_resume_state(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("training state '" + path.string() + "' is missing");
  ResumeState s;
  std::string line;
  int found = 0;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
    try {
      if (key == "next_epoch") s.next_epoch = std::stoull(value);
      else if (key == "lr") s.plateau.lr = std::stod(value);
      else if (key == "plateau_best") s.plateau.best = std::stod(value);
      else if (key == "bad_epochs") s.plateau.bad_epochs = std::stoull(value);
      else if (key == "best_val_loss") s.best_val_loss = std::stod(value);
      else continue;
    } catch (const std::exception&) {
      throw FormatError("training state '" + path.string() + "': bad value for " + key);
    }
    ++found;
  }
  if (found != 5) throw FormatError("training state '" + path.string() + "' is incomplete");
  return s;
}

namespace {

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

template <typename T>
std::size_t argmax_row(const Tensor<T>& lp, std::size_t row, std::size_t k) {
  const T* r = lp.ptr() + row * k;
  return static_cast<std::size_t>(std::max_element(r, r + k) - r);
}

std::vector<const ClipFeatures*> sorted_by_id(std::span<const ClipFeatures> clips) {
  std::vector<const ClipFeatures*> out;
  for (const auto& c : clips) out.push_back(&c);
  std::sort(out.begin(), out.end(), [](const auto* a, const auto* b) { return a->clip_id < b->clip_id; });
  return out;
}

// Batches of batch_size; a trailing single clip joins the previous batch so
// batch-norm always sees at least two samples.
std::vector<std::pair<std::size_t, std::size_t>> batch_ranges(std::size_t n, std::size_t batch_size) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t s = 0; s < n; s += batch_size) out.emplace_back(s, std::min(batch_size, n - s));
  if (out.size() > 1 && out.back().second == 1) {
    out.pop_back();
    out.back().second += 1;
  }
  return out;
}

}  // namespace

template <typename T>
std::pair<double, double> evaluate_loss(Model<T>& model, LossKind loss, std::span<const ClipFeatures> clips,
                                        std::span<const double> class_weights) {
  const auto lp = model.predict(clips);
  std::vector<const ClipFeatures*> ptrs;
  for (const auto& c : clips) ptrs.push_back(&c);
  Tape<T> tape;
  const double value = batch_loss(loss, tape.constant(lp), ptrs, class_weights).value()[0];
  std::size_t correct = 0;
  for (std::size_t i = 0; i < clips.size(); ++i) {
    correct += argmax_row(lp, i, kNumClasses) == clips[i].label.hard_label();
  }
  return {value, static_cast<double>(correct) / static_cast<double>(clips.size())};
}

template <typename T>
FitResult<T> fit(Model<T>& model, const TrainConfig& config, std::span<const ClipFeatures> train,
                 std::span<const ClipFeatures> val, const FitOptions<T>& options) {
  config.validate();
  model.apply_freeze(config.freeze);
  if (config.determinism) blas::set_threads(1);

  FitResult<T> result{model, {}, options.resume.value_or(ResumeState{})};
  ResumeState& state = result.state;
  if (!options.resume || options.reset_lr) state.plateau.lr = config.lr;
  if (config.max_epochs == 0) return result;
  if (train.empty()) throw ConfigError("training set is empty");
  if (val.empty()) throw ConfigError("validation set is empty");

  const auto order = sorted_by_id(train);
  const auto weights = class_weights(train);
  const bool to_disk = !options.out_dir.empty();
  std::ofstream csv;
  if (to_disk) {
    std::filesystem::create_directories(options.out_dir);
    const auto csv_path = options.out_dir / "epochs.csv";
    const bool append = options.resume && std::filesystem::exists(csv_path);
    csv.open(csv_path, append ? std::ios::app : std::ios::trunc);
    if (!csv) throw FormatError("cannot write '" + csv_path.string() + "'");
    if (!append) csv << kEpochCsvHeader << '\n';
  }

  AdamState<T> adam;
  const std::size_t K = kNumClasses;
  for (std::size_t e = 0; e < config.max_epochs; ++e) {
    const std::size_t epoch = state.next_epoch;
    auto perm = order;
    std::mt19937_64 rng(mix(config.seed, epoch));
    std::shuffle(perm.begin(), perm.end(), rng);

    double loss_sum = 0;
    std::size_t correct = 0;
    const auto ranges = batch_ranges(perm.size(), config.batch_size);
    for (std::size_t b = 0; b < ranges.size(); ++b) {
      const std::span<const ClipFeatures* const> clips(perm.data() + ranges[b].first, ranges[b].second);
      for (auto& p : model.parameters()) {
        if (p.trainable) p.zero_grad();
      }
      ForwardOptions<T> fo;
      fo.training = true;
      fo.dropout_key = DropoutKey{config.seed, epoch, b, 0, 0};
      Tape<T> tape;
      auto lp = model.forward(tape, make_batch<T>(clips), fo);
      auto loss = batch_loss(config.loss, lp, clips, weights);
      const double value = loss.value()[0];
      if (!std::isfinite(value)) {
        throw NumericalError("non-finite training loss at epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(b));
      }
      tape.backward(loss);
      adam_step(model.parameters(), adam, state.plateau.lr, config.weight_decay);
      loss_sum += value * static_cast<double>(clips.size());
      for (std::size_t i = 0; i < clips.size(); ++i) correct += argmax_row(lp.value(), i, K) == clips[i]->label.hard_label();
    }

    EpochLog log;
    log.epoch = epoch;
    log.lr = state.plateau.lr;
    log.train_loss = loss_sum / static_cast<double>(perm.size());
    log.train_war = static_cast<double>(correct) / static_cast<double>(perm.size());
    std::tie(log.val_loss, log.val_war) = evaluate_loss(model, config.loss, val, weights);
    if (!std::isfinite(log.val_loss)) {
      throw NumericalError("non-finite validation loss at epoch " + std::to_string(epoch));
    }
    result.log.push_back(log);

    const bool improved = log.val_loss < state.best_val_loss;
    if (improved) {
      state.best_val_loss = log.val_loss;
      result.best = model;
    }
    plateau_step(state.plateau, config.plateau, log.val_loss);
    state.next_epoch = epoch + 1;

    if (to_disk) {
      csv << epoch_csv_row(log) << '\n';
      csv.flush();
      if (improved) save_checkpoint(model, options.out_dir / "best.mmck");
      save_checkpoint(model, options.out_dir / "last.mmck");
      write_resume_state(options.out_dir / "train_state.txt", state);
    }
    if (options.on_epoch && !options.on_epoch(log, model)) break;
  }
  return result;
}

#define MMFER_INSTANTIATE_TRAINING(T)                                                                               \
  template void adam_step<T>(std::vector<Parameter<T>>&, AdamState<T>&, double, double);                           \
  template std::pair<double, double> evaluate_loss<T>(Model<T>&, LossKind, std::span<const ClipFeatures>,          \
                                                      std::span<const double>);                                    \
  template FitResult<T> fit<T>(Model<T>&, const TrainConfig&, std::span<const ClipFeatures>,                       \
                               std::span<const ClipFeatures>, const FitOptions<T>&);

MMFER_INSTANTIATE_TRAINING(float)
MMFER_INSTANTIATE_TRAINING(double)

}  // namespace mmfer
