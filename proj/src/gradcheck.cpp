// SPDX-License-Identifier: Apache-2.0
// Copyright (C) 2026 mmfer contributors

#include "mmfer/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <random>

#include "mmfer/losses.hpp"

namespace mmfer {

double gradcheck_rel_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

namespace {

using D = double;
using Build = std::function<Var<D>(Tape<D>&, const std::vector<Var<D>>&)>;

void record_probe(GradcheckResult& r, GradcheckProbe probe, double tolerance) {
  ++r.checked;
  if (r.checked == 1 || probe.rel_error > r.worst.rel_error) r.worst = probe;
  if (!(probe.rel_error < tolerance)) r.failures.push_back(std::move(probe));
}

Tensor<D> random_tensor(const Shape& shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<D> mag(0.1, 1.0);
  std::bernoulli_distribution sign(0.5);
  Tensor<D> t(shape);
  for (auto& v : t.data()) v = sign(rng) ? mag(rng) : -mag(rng);
  return t;
}

// Reduces any output to a scalar through fixed random weights, so that ops
// with constant row sums (softmax) still see a non-trivial upstream gradient.
Var<D> weighted_sum(Tape<D>& tape, const Var<D>& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return ops::sum(ops::mul(y, tape.constant(random_tensor(y.shape(), rng))));
}

GradcheckResult check_op(const std::string& name, std::vector<Tensor<D>> inputs, const Build& build, double step,
                         double tolerance, std::uint64_t seed) {
  auto loss_of = [&](const std::vector<Tensor<D>>& xs, Tape<D>& tape, std::vector<Var<D>>* vars) {
    std::vector<Var<D>> vs;
    for (const auto& x : xs) vs.push_back(tape.leaf(x));
    auto loss = weighted_sum(tape, build(tape, vs), seed);
    if (vars) *vars = vs;
    return loss;
  };
  Tape<D> tape;
  std::vector<Var<D>> vars;
  auto loss = loss_of(inputs, tape, &vars);
  tape.backward(loss);

  GradcheckResult r;
  r.name = name;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto analytic = tape.grad(vars[i]);
    for (std::size_t j = 0; j < inputs[i].size(); ++j) {
      const D orig = inputs[i][j];
      inputs[i][j] = orig + step;
      Tape<D> tp;
      const D up = loss_of(inputs, tp, nullptr).value()[0];
      inputs[i][j] = orig - step;
      Tape<D> tm;
      const D down = loss_of(inputs, tm, nullptr).value()[0];
      inputs[i][j] = orig;
      const double numeric = (up - down) / (2 * step);
      record_probe(r,
                   {name + " input " + std::to_string(i), j, analytic[j], numeric,
                    gradcheck_rel_error(analytic[j], numeric), step},
                   tolerance);
    }
  }
  return r;
}

}  // namespace

std::vector<GradcheckResult> gradcheck_ops(std::uint64_t seed, double step, double tolerance) {
  std::mt19937_64 rng(seed);
  auto rt = [&](Shape s) { return random_tensor(s, rng); };
  std::vector<GradcheckResult> out;
  auto run = [&](const std::string& name, std::vector<Tensor<D>> inputs, const Build& build) {
    out.push_back(check_op(name, std::move(inputs), build, step, tolerance, rng()));
  };
  using V = const std::vector<Var<D>>&;

  run("matmul", {rt({2, 3}), rt({3, 2})}, [](Tape<D>&, V v) { return ops::matmul(v[0], v[1]); });
  run("bmm", {rt({2, 2, 3}), rt({2, 3, 2})}, [](Tape<D>&, V v) { return ops::bmm(v[0], v[1]); });
  run("bmm_transposed", {rt({2, 2, 3}), rt({2, 2, 3})},
      [](Tape<D>&, V v) { return ops::bmm(v[0], v[1], true, 0.5); });
  run("linear", {rt({2, 3}), rt({3, 2}), rt({2})}, [](Tape<D>&, V v) { return ops::linear(v[0], v[1], v[2]); });
  run("add", {rt({4}), rt({4})}, [](Tape<D>&, V v) { return ops::add(v[0], v[1]); });
  run("add_bcast", {rt({2, 2}), rt({2})}, [](Tape<D>&, V v) { return ops::add_bcast(v[0], v[1]); });
  run("mul", {rt({4}), rt({4})}, [](Tape<D>&, V v) { return ops::mul(v[0], v[1]); });
  run("scale", {rt({4})}, [](Tape<D>&, V v) { return ops::scale(v[0], 2.5); });
  run("relu", {rt({5})}, [](Tape<D>&, V v) { return ops::relu(v[0]); });
  run("dropout", {rt({5})}, [](Tape<D>&, V v) { return ops::dropout(v[0], 0.4, true, DropoutKey{3, 1, 2, 0, 0}); });
  run("reshape", {rt({2, 2})}, [](Tape<D>&, V v) { return ops::reshape(v[0], Shape{4}); });
  run("flatten", {rt({2, 2})}, [](Tape<D>&, V v) { return ops::flatten(v[0]); });
  run("permute", {rt({2, 1, 2})}, [](Tape<D>&, V v) { return ops::permute(v[0], {2, 0, 1}); });
  run("transpose", {rt({2, 2})}, [](Tape<D>&, V v) { return ops::transpose(v[0]); });
  run("concat", {rt({2, 1}), rt({2, 2})}, [](Tape<D>&, V v) { return ops::concat<D>({v[0], v[1]}, 1); });
  run("slice", {rt({2, 3})}, [](Tape<D>&, V v) { return ops::slice(v[0], 1, 1, 2); });
  run("sum", {rt({4})}, [](Tape<D>&, V v) { return ops::sum(v[0]); });
  run("mean", {rt({4})}, [](Tape<D>&, V v) { return ops::mean(v[0]); });
  run("softmax", {rt({2, 3})}, [](Tape<D>&, V v) { return ops::softmax(v[0], 1); });
  run("log_softmax", {rt({2, 3})}, [](Tape<D>&, V v) { return ops::log_softmax(v[0], 1); });
  run("layer_norm", {rt({2, 3}), rt({3}), rt({3})},
      [](Tape<D>&, V v) { return ops::layer_norm(v[0], v[1], v[2]); });
  run("batch_norm_1d", {rt({3, 2}), rt({2}), rt({2})}, [](Tape<D>&, V v) {
    BatchNormState<D> state(2);
    return ops::batch_norm_1d(v[0], v[1], v[2], state, true);
  });

  const Tensor<D> target({2, 3}, std::vector<D>{0.2, 0.3, 0.5, 0.6, 0.3, 0.1});
  run("kl_loss", {rt({2, 3})},
      [target](Tape<D>&, V v) { return kl_loss(ops::log_softmax(v[0], 1), target); });
  run("mse_loss", {rt({2, 3})},
      [target](Tape<D>&, V v) { return mse_loss(ops::log_softmax(v[0], 1), target); });
  run("weighted_ce_loss", {rt({2, 3})}, [](Tape<D>&, V v) {
    const std::vector<std::size_t> labels = {2, 0};
    const std::vector<double> weights = {1.0, 2.0, 3.0};
    return weighted_ce_loss(ops::log_softmax(v[0], 1), labels, weights);
  });
  return out;
}

GradcheckResult gradcheck_model(const ModelConfig& config, std::uint64_t seed, std::size_t samples, double step,
                                double tolerance) {
  Model<D> model(config, seed);
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  // Move biases and gains off their special initial values.
  std::uniform_real_distribution<D> jitter(-0.1, 0.1);
  for (auto& param : model.parameters()) {
    if (param.name.ends_with(".bias") || param.name.ends_with(".gain")) {
      for (auto& v : param.value.data()) v += jitter(rng);
    }
  }

  SynthSpec spec;
  spec.n_clips = 2;
  spec.seed = seed;
  spec.misalignment = 0.5;
  spec.noise_sigma = 0.5;
  const auto clips = synthesize_dataset(spec);
  const std::vector<const ClipFeatures*> ptrs = {&clips[0], &clips[1]};
  const auto batch = make_batch<D>(std::span<const ClipFeatures* const>(ptrs));
  const auto targets = make_targets<D>(ptrs);
  ForwardOptions<D> opts;
  opts.training = true;
  opts.dropout_key = DropoutKey{seed, 0, 0, 0, 0};

  struct TrackRelu {
    TrackRelu() { debug::track_relu_pattern(true); }
    ~TrackRelu() { debug::track_relu_pattern(false); }
  } tracking;
  auto loss_value = [&] {
    Tape<D> tape;
    const D v = kl_loss(model.forward(tape, batch, opts), targets).value()[0];
    return std::pair{v, debug::take_relu_pattern()};
  };

  for (auto& param : model.parameters()) param.zero_grad();
  std::uint64_t pattern = 0;
  {
    Tape<D> tape;
    auto loss = kl_loss(model.forward(tape, batch, opts), targets);
    pattern = debug::take_relu_pattern();
    tape.backward(loss);
  }

  auto& params = model.parameters();
  std::size_t total = 0;
  for (const auto& p : params) {
    if (p.trainable) total += p.value.size();
  }
  std::uniform_int_distribution<std::size_t> any(0, total == 0 ? 0 : total - 1);
  auto draw_any = [&] {
    std::size_t flat = any(rng), i = 0;
    for (; i < params.size(); ++i) {
      if (!params[i].trainable) continue;
      if (flat < params[i].value.size()) break;
      flat -= params[i].value.size();
    }
    return std::pair{i, flat};
  };

  // One probe per tensor first, then uniform over all trainable scalars.
  std::deque<std::pair<std::size_t, std::size_t>> queue;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].trainable) continue;
    queue.emplace_back(i, std::uniform_int_distribution<std::size_t>(0, params[i].value.size() - 1)(rng));
  }

  GradcheckResult r;
  r.name = std::string(fusion_name(config.fusion));
  while (total > 0 && (r.checked < samples || !queue.empty())) {
    if (queue.empty()) queue.push_back(draw_any());
    const auto [pi, idx] = queue.front();
    queue.pop_front();
    auto& v = params[pi].value[idx];
    const D orig = v;
    double h = step;
    bool smooth = false;
    D up = 0, down = 0;
    for (int halving = 0; halving <= kMaxStepHalvings; ++halving, h /= 2) {
      v = orig + h;
      const auto [u, pu] = loss_value();
      v = orig - h;
      const auto [d, pd] = loss_value();
      v = orig;
      up = u, down = d;
      if (pu == pattern && pd == pattern) {
        smooth = true;
        r.narrowed += halving > 0;
        break;
      }
    }
    if (!smooth) {
      ++r.redrawn;
      continue;
    }
    const double numeric = (up - down) / (2 * h);
    const double analytic = params[pi].grad[idx];
    record_probe(r, {params[pi].name, idx, analytic, numeric, gradcheck_rel_error(analytic, numeric), h}, tolerance);
  }
  return r;
}

}  // namespace mmfer
