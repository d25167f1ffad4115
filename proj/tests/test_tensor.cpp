// SPDX-License-Identifier: Apache-2.0
// Copyright (C) 2026 mmfer contributors

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "mmfer/autograd.hpp"
#include "support/fd_oracle.hpp"

using namespace mmfer;
using mmfer::testing::check_gradients;
using mmfer::testing::random_tensor;
using mmfer::testing::weighted_sum;

namespace {

Tensor<double> T2(std::size_t r, std::size_t c, std::vector<double> v) { return Tensor<double>(Shape{r, c}, std::move(v)); }

}  // namespace

TEST_CASE("tensor invariants") {
  CHECK_THROWS_AS(Tensor<double>(Shape{2, 0}), ShapeError);
  CHECK_THROWS_AS(Tensor<double>(Shape{2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  Tensor<double> t(Shape{2, 3}, 1.5);
  CHECK(t.size() == 6);
  CHECK(t.reshaped({3, 2}).shape() == Shape{3, 2});
  CHECK_THROWS_AS(t.reshaped({4, 2}), ShapeError);
}

TEST_CASE("matmul") {
  Tape<double> tape;
  auto a = tape.constant(T2(2, 2, {1, 2, 3, 4}));
  auto b = tape.constant(T2(2, 2, {5, 6, 7, 8}));
  CHECK(ops::matmul(a, b).value().storage() == std::vector<double>{19, 22, 43, 50});

  std::mt19937_64 rng(1);
  auto A = random_tensor({3, 4}, rng);
  Tensor<double> I(Shape{4, 4});
  for (std::size_t i = 0; i < 4; ++i) I.at(i, i) = 1;
  CHECK(ops::matmul(tape.constant(A), tape.constant(I)).value() == A);
  auto Z = ops::matmul(tape.constant(A), tape.constant(Tensor<double>(Shape{4, 2})));
  for (double v : Z.value().data()) CHECK(v == 0.0);

  try {
    ops::matmul(tape.constant(Tensor<double>(Shape{2, 3})), tape.constant(Tensor<double>(Shape{2, 3})));
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3] and [2x3]") != std::string::npos);
  }
}

TEST_CASE("softmax") {
  Tape<double> tape;
  auto u = ops::softmax(tape.constant(Tensor<double>(Shape{3}, 0.0)), 0).value();
  for (double v : u.data()) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-12));

  auto s = ops::softmax(tape.constant(Tensor<double>(Shape{3}, {1, 2, 3})), 0).value();
  CHECK(s[0] == doctest::Approx(0.0900).epsilon(1e-3));
  CHECK(std::abs(s[0] - 0.0900) < 1e-4);
  CHECK(std::abs(s[1] - 0.2447) < 1e-4);
  CHECK(std::abs(s[2] - 0.6652) < 1e-4);

  std::mt19937_64 rng(2);
  auto x = random_tensor({4, 5}, rng, 0.0, 3.0);
  auto shifted = x;
  for (auto& v : shifted.data()) v += 17.25;
  auto a = ops::softmax(tape.constant(x), 1).value();
  auto b = ops::softmax(tape.constant(shifted), 1).value();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a[i] - b[i]) < 1e-12);
  for (std::size_t r = 0; r < 4; ++r) {
    double row = 0;
    for (std::size_t c = 0; c < 5; ++c) row += a.at(r, c);
    CHECK(std::abs(row - 1.0) < 1e-6);
  }
  // Non-last axis.
  auto cols = ops::softmax(tape.constant(x), 0).value();
  for (std::size_t c = 0; c < 5; ++c) {
    double col = 0;
    for (std::size_t r = 0; r < 4; ++r) col += cols.at(r, c);
    CHECK(std::abs(col - 1.0) < 1e-6);
  }
}

TEST_CASE("log_softmax") {
  Tape<double> tape;
  auto y = ops::log_softmax(tape.constant(Tensor<double>(Shape{2}, 0.0)), 0).value();
  CHECK(std::abs(y[0] + std::log(2.0)) < 1e-12);
  CHECK(std::abs(y[1] + std::log(2.0)) < 1e-12);

  auto big = ops::log_softmax(tape.constant(Tensor<double>(Shape{2}, {1000, 0})), 0).value();
  CHECK(big.all_finite());
  CHECK(std::abs(big[0]) < 1e-12);

  auto x = tape.constant(Tensor<double>(Shape{3}, {1, 2, 3}));
  auto ls = ops::log_softmax(x, 0).value();
  auto sm = ops::softmax(x, 0).value();
  double z = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(std::abs(ls[i] - std::log(sm[i])) < 1e-9);
    z += std::exp(ls[i]);
  }
  CHECK(std::abs(z - 1.0) < 1e-6);
}

TEST_CASE("layer_norm") {
  Tape<double> tape;
  auto g = tape.constant(Tensor<double>(Shape{3}, 1.0));
  auto b = tape.constant(Tensor<double>(Shape{3}, 0.0));
  auto y = ops::layer_norm(tape.constant(Tensor<double>(Shape{1, 3}, {1, 2, 3})), g, b).value();
  CHECK(std::abs(y[0] + 1.2247) < 1e-3);
  CHECK(std::abs(y[1]) < 1e-12);
  CHECK(std::abs(y[2] - 1.2247) < 1e-3);

  auto bias = tape.constant(Tensor<double>(Shape{3}, {0.5, -1, 2}));
  auto c = ops::layer_norm(tape.constant(Tensor<double>(Shape{1, 3}, 4.0)), g, bias).value();
  CHECK(c.storage() == std::vector<double>{0.5, -1, 2});

  std::mt19937_64 rng(3);
  auto z = ops::layer_norm(tape.constant(random_tensor({2, 3}, rng)), tape.constant(Tensor<double>(Shape{3})), bias);
  for (std::size_t r = 0; r < 2; ++r) {
    for (std::size_t j = 0; j < 3; ++j) CHECK(z.value().at(r, j) == bias.value()[j]);
  }
}

TEST_CASE("batch_norm_1d") {
  Tape<double> tape;
  auto g = tape.constant(Tensor<double>(Shape{1}, 1.0));
  auto b = tape.constant(Tensor<double>(Shape{1}, 0.0));

  SUBCASE("eval with identity statistics is the identity") {
    BatchNormState<double> st(1);
    auto x = Tensor<double>(Shape{3, 1}, {0.3, -2, 5});
    auto y = ops::batch_norm_1d(tape.constant(x), g, b, st, false, 0.1, 1e-12).value();
    for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(y[i] - x[i]) < 1e-9);
  }
  SUBCASE("training normalizes by batch statistics") {
    BatchNormState<double> st(1);
    auto y = ops::batch_norm_1d(tape.constant(T2(2, 1, {1, 3})), g, b, st, true).value();
    CHECK(std::abs(y[0] + 1) < 1e-3);
    CHECK(std::abs(y[1] - 1) < 1e-3);
  }
  SUBCASE("running statistics converge on a constant batch") {
    BatchNormState<double> st(1);
    auto beta = tape.constant(Tensor<double>(Shape{1}, 0.75));
    const double c = 2.5;
    const int steps = 300;
    for (int i = 0; i < steps; ++i) ops::batch_norm_1d(tape.constant(T2(2, 1, {c, c})), g, beta, st, true);
    // Momentum 0.1 recurrence from mean 0 / var 1 with zero batch variance.
    double rm = 0, rv = 1;
    for (int i = 0; i < steps; ++i) {
      rm = 0.9 * rm + 0.1 * c;
      rv = 0.9 * rv;
    }
    CHECK(std::abs(st.running_mean[0] - rm) < 1e-12);
    CHECK(std::abs(st.running_var[0] - rv) < 1e-12);
    auto y = ops::batch_norm_1d(tape.constant(T2(1, 1, {c})), g, beta, st, false).value();
    CHECK(std::abs(y[0] - ((c - rm) / std::sqrt(rv + 1e-5) + 0.75)) < 1e-12);
    CHECK(std::abs(y[0] - 0.75) < 1e-3);
  }
  SUBCASE("batch of one in training mode is rejected") {
    BatchNormState<double> st(1);
    CHECK_THROWS_AS(ops::batch_norm_1d(tape.constant(T2(1, 1, {1})), g, b, st, true), ShapeError);
  }
}

TEST_CASE("backward basics") {
  SUBCASE("relu gate") {
    Tape<double> tape;
    auto x = tape.leaf(Tensor<double>(Shape{2}, {1, -1}));
    tape.backward(ops::sum(ops::relu(x)));
    CHECK(tape.grad(x).storage() == std::vector<double>{1, 0});
  }
  SUBCASE("relu keeps NaN") {
    Tape<double> tape;
    auto y = ops::relu(tape.constant(Tensor<double>(Shape{2}, {std::nan(""), -1})));
    CHECK(std::isnan(y.value()[0]));
    CHECK(y.value()[1] == 0.0);
  }
  SUBCASE("relu sign pattern") {
    auto pattern = [](std::vector<double> v) {
      Tape<double> tape;
      const Shape shape{v.size()};
      ops::relu(tape.constant(Tensor<double>(shape, std::move(v))));
      return debug::take_relu_pattern();
    };
    debug::track_relu_pattern(true);
    const auto a = pattern({0.5, -0.5, 2.0});
    CHECK(pattern({0.7, -3.0, 1e-9}) == a);
    CHECK(pattern({0.5, 1e-9, 2.0}) != a);
    CHECK(pattern({-1e-9, -0.5, 2.0}) != a);
    debug::track_relu_pattern(false);
    pattern({0.5, 1e-9, 2.0});
    CHECK(debug::take_relu_pattern() == 0);
  }
  SUBCASE("product rule") {
    Tape<double> tape;
    auto x = tape.leaf(Tensor<double>(Shape{3}, {1, 2, 3}));
    auto y = tape.leaf(Tensor<double>(Shape{3}, {-4, 5, 0.5}));
    tape.backward(ops::sum(ops::mul(x, y)));
    CHECK(tape.grad(x) == y.value());
    CHECK(tape.grad(y) == x.value());
  }
  SUBCASE("non-scalar loss") {
    Tape<double> tape;
    auto x = tape.leaf(Tensor<double>(Shape{2}, 1.0));
    CHECK_THROWS_AS(tape.backward(ops::relu(x)), ShapeError);
  }
  SUBCASE("unused parameters get zero gradients") {
    Parameter<double> used{"used", "g", Tensor<double>(Shape{2}, 1.0), {}, true};
    Parameter<double> unused{"unused", "g", Tensor<double>(Shape{2}, 1.0), {}, true};
    used.zero_grad();
    unused.zero_grad();
    Tape<double> tape;
    auto u = tape.param(used);
    tape.param(unused);
    tape.backward(ops::sum(u));
    CHECK(used.grad.storage() == std::vector<double>{1, 1});
    CHECK(unused.grad.storage() == std::vector<double>{0, 0});
  }
  SUBCASE("each recorded op is visited once") {
    Tape<double> tape;
    auto x = tape.leaf(Tensor<double>(Shape{2}, {1, 2}));
    auto a = ops::scale(x, 2.0);
    auto b = ops::add(a, a);       // a is consumed twice
    auto c = ops::mul(b, x);       // x is consumed three times overall
    tape.backward(ops::sum(c));
    CHECK(tape.backward_visits() == 4);  // scale, add, mul, sum
    // d/dx sum(4x * x) = 8x
    CHECK(tape.grad(x).storage() == std::vector<double>{8, 16});
    CHECK_THROWS_AS(tape.backward(ops::sum(c)), Error);
  }
  SUBCASE("frozen parameter receives no gradient") {
    Parameter<double> p{"p", "g", Tensor<double>(Shape{2}, 1.0), {}, false};
    p.zero_grad();
    Tape<double> tape;
    auto x = tape.leaf(Tensor<double>(Shape{2}, 3.0));
    tape.backward(ops::sum(ops::mul(tape.param(p), x)));
    CHECK(p.grad.storage() == std::vector<double>{0, 0});
    CHECK(tape.grad(x).storage() == std::vector<double>{1, 1});
  }
}

TEST_CASE("finite-difference gradient checks per op") {
  std::mt19937_64 rng(42);
  using Vars = std::vector<Var<double>>;
  auto check = [&](const char* name, std::vector<Tensor<double>> inputs, mmfer::testing::BuildLoss f) {
    auto r = check_gradients(inputs, f);
    INFO(name << " max rel error " << r.max_rel_error);
    CHECK(r.max_rel_error < 1e-4);
  };

  check("matmul", {random_tensor({3, 4}, rng), random_tensor({4, 2}, rng)},
        [](Tape<double>& t, const Vars& v) { return weighted_sum(t, ops::matmul(v[0], v[1])); });
  check("bmm", {random_tensor({2, 3, 4}, rng), random_tensor({2, 4, 2}, rng)},
        [](Tape<double>& t, const Vars& v) { return weighted_sum(t, ops::bmm(v[0], v[1], false, 0.5)); });
  check("bmm transposed", {random_tensor({2, 3, 4}, rng), random_tensor({2, 5, 4}, rng)},
        [](Tape<double>& t, const Vars& v) { return weighted_sum(t, ops::bmm(v[0], v[1], true, 1.5)); });
  check("linear", {random_tensor({2, 2, 3}, rng), random_tensor({3, 4}, rng), random_tensor({4}, rng)},
        [](Tape<double>& t, const Vars& v) { return weighted_sum(t, ops::linear(v[0], v[1], v[2])); });
  check("add", {random_tensor({4}, rng), random_tensor({4}, rng)},
        [](Tape<double>& t, const Vars& v) { return weighted_sum(t, ops::add(v[0], v[1])); });
  check("add_bcast", {random_tensor({2, 3, 2}, rng), random_tensor({3, 2}, rng)},
        [](Tape<double>& t, const Vars& v) { return weighted_sum(t, ops::add_bcast(v[0], v[1])); });
  check("mul", {random_tensor({5}, rng), random_tensor({5}, rng)},
        [](Tape<double>& t, const Vars& v) { return weighted_sum(t, ops::mul(v[0], v[1])); });
  check("scale", {random_tensor({3}, rng)},
        [](Tape<double>& t, const Vars& v) { return weighted_sum(t, ops::scale(v[0], -2.5)); });
  check("relu", {random_tensor({5}, rng)},
        [](Tape<double>& t, const Vars& v) { return weighted_sum(t, ops::relu(v[0])); });
  check("dropout", {random_tensor({5}, rng)}, [](Tape<double>& t, const Vars& v) {
    return weighted_sum(t, ops::dropout(v[0], 0.4, true, DropoutKey{7, 1, 2, 3, 0}));
  });
  check("reshape", {random_tensor({2, 3}, rng)},
        [](Tape<double>& t, const Vars& v) { return weighted_sum(t, ops::reshape(v[0], {3, 2})); });
  check("permute", {random_tensor({2, 3, 4}, rng)},
        [](Tape<double>& t, const Vars& v) { return weighted_sum(t, ops::permute(v[0], {2, 0, 1})); });
  check("transpose", {random_tensor({2, 3}, rng)},
        [](Tape<double>& t, const Vars& v) { return weighted_sum(t, ops::transpose(v[0])); });
  check("concat", {random_tensor({2, 2, 3}, rng), random_tensor({2, 1, 3}, rng)},
        [](Tape<double>& t, const Vars& v) { return weighted_sum(t, ops::concat<double>({v[0], v[1]}, 1)); });
  check("slice", {random_tensor({2, 4, 2}, rng)},
        [](Tape<double>& t, const Vars& v) { return weighted_sum(t, ops::slice(v[0], 1, 1, 2)); });
  check("mean", {random_tensor({4}, rng)}, [](Tape<double>&, const Vars& v) { return ops::mean(v[0]); });
  check("softmax", {random_tensor({2, 4}, rng)},
        [](Tape<double>& t, const Vars& v) { return weighted_sum(t, ops::softmax(v[0], 1)); });
  check("softmax axis 0", {random_tensor({3, 2}, rng)},
        [](Tape<double>& t, const Vars& v) { return weighted_sum(t, ops::softmax(v[0], 0)); });
  check("log_softmax", {random_tensor({2, 5}, rng)},
        [](Tape<double>& t, const Vars& v) { return weighted_sum(t, ops::log_softmax(v[0], 1)); });
  check("layer_norm", {random_tensor({2, 4}, rng), random_tensor({4}, rng), random_tensor({4}, rng)},
        [](Tape<double>& t, const Vars& v) { return weighted_sum(t, ops::layer_norm(v[0], v[1], v[2])); });
  check("batch_norm_1d train", {random_tensor({4, 3}, rng), random_tensor({3}, rng), random_tensor({3}, rng)},
        [](Tape<double>& t, const Vars& v) {
          BatchNormState<double> st(3);
          return weighted_sum(t, ops::batch_norm_1d(v[0], v[1], v[2], st, true));
        });
  check("batch_norm_1d eval", {random_tensor({2, 3}, rng), random_tensor({3}, rng), random_tensor({3}, rng)},
        [](Tape<double>& t, const Vars& v) {
          BatchNormState<double> st(3);
          st.running_mean.fill(0.2);
          st.running_var.fill(1.7);
          return weighted_sum(t, ops::batch_norm_1d(v[0], v[1], v[2], st, false));
        });
}

TEST_CASE("dropout") {
  Tape<double> tape;
  std::mt19937_64 rng(5);
  auto x = tape.constant(random_tensor({8}, rng));
  CHECK(ops::dropout(x, 0.0, true, DropoutKey{}).value() == x.value());
  CHECK(ops::dropout(x, 0.5, false, DropoutKey{}).value() == x.value());

  const std::size_t n = 100000;
  auto ones = tape.constant(Tensor<double>(Shape{n}, 1.0));
  auto d = ops::dropout(ones, 0.3, true, DropoutKey{11, 0, 0, 0, 0}).value();
  const double m = std::accumulate(d.data().begin(), d.data().end(), 0.0) / n;
  CHECK(std::abs(m - 1.0) < 0.01);

  // Keyed masks are reproducible and differ across keys.
  auto again = ops::dropout(ones, 0.3, true, DropoutKey{11, 0, 0, 0, 0}).value();
  auto other = ops::dropout(ones, 0.3, true, DropoutKey{11, 0, 1, 0, 0}).value();
  CHECK(again == d);
  CHECK_FALSE(other == d);
  CHECK_THROWS_AS(ops::dropout(x, 1.0, true, DropoutKey{}), ConfigError);
}

TEST_CASE("forward determinism") {
  std::mt19937_64 rng(9);
  auto a = random_tensor({16, 32}, rng);
  auto w = random_tensor({32, 8}, rng);
  auto run = [&] {
    Tape<double> tape;
    auto y = ops::softmax(ops::matmul(tape.constant(a), tape.constant(w)), 1);
    return y.value();
  };
  CHECK(run() == run());
}

TEST_CASE("backward fault fixture scales one op's gradients") {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>(Shape{2}, {1, 2}));
  debug::set_backward_fault("scale", 2.0);
  tape.backward(ops::sum(ops::scale(x, 3.0)));
  debug::clear_backward_fault();
  CHECK(tape.grad(x).storage() == std::vector<double>{6, 6});
}
