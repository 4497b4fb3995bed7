// SPDX-License-Identifier: Apache-2.0
#include "ctquant/tensor.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "ctquant/error.hpp"
#include "ctquant/rng.hpp"

namespace ctquant {
namespace {

template <typename Fn>
ErrorCode CodeOf(Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected a ctquant::Error";
  return ErrorCode::InvalidArgument;
}

Tensor2 Random(Rng& rng, int r, int c, double scale = 1.0) {
  Tensor2 t(r, c);
  for (double& x : t.v) x = scale * rng.normal();
  return t;
}

using Builder = std::function<Var(Tape&, const std::vector<Var>&)>;

// Contracts the op output with fixed random weights so every output entry
// contributes to the scalar, then compares analytic and central-difference
// gradients for every input entry.
double MaxRelativeError(const std::vector<Tensor2>& inputs, const Builder& op, std::uint64_t seed) {
  Rng wrng(seed);
  Tensor2 weights;
  auto scalar = [&](const std::vector<Tensor2>& xs, Tape& tape, std::vector<Var>& leaves) {
    leaves.clear();
    for (const auto& x : xs) leaves.push_back(tape.leaf(x, true));
    Var y = op(tape, leaves);
    if (weights.size() != tape.value(y).size()) weights = Random(wrng, tape.value(y).rows, tape.value(y).cols);
    return tape.sum(tape.mul(y, tape.leaf(weights)));
  };
  Tape tape;
  std::vector<Var> leaves;
  Var loss = scalar(inputs, tape, leaves);
  tape.backward(loss);

  constexpr double eps = 1e-5;
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor2 analytic = tape.grad(leaves[k]);
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      auto plus = inputs, minus = inputs;
      plus[k].v[i] += eps;
      minus[k].v[i] -= eps;
      Tape tp, tm;
      std::vector<Var> lp, lm;
      const double fp = tp.value(scalar(plus, tp, lp)).v[0];
      const double fm = tm.value(scalar(minus, tm, lm)).v[0];
      const double numeric = (fp - fm) / (2 * eps);
      const double err = std::abs(numeric - analytic.v[i]) / std::max(1.0, std::abs(numeric) + std::abs(analytic.v[i]));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

struct PrimitiveCase {
  const char* name;
  std::function<std::vector<Tensor2>(Rng&)> inputs;
  Builder op;
};

std::vector<PrimitiveCase> Primitives() {
  return {
      {"matmul", [](Rng& r) { return std::vector{Random(r, 3, 4), Random(r, 4, 5)}; },
       [](Tape& t, const std::vector<Var>& x) { return t.matmul(x[0], x[1]); }},
      {"add", [](Rng& r) { return std::vector{Random(r, 3, 4), Random(r, 3, 4)}; },
       [](Tape& t, const std::vector<Var>& x) { return t.add(x[0], x[1]); }},
      {"add_row", [](Rng& r) { return std::vector{Random(r, 3, 4), Random(r, 1, 4)}; },
       [](Tape& t, const std::vector<Var>& x) { return t.add_row(x[0], x[1]); }},
      {"mul", [](Rng& r) { return std::vector{Random(r, 3, 4), Random(r, 3, 4)}; },
       [](Tape& t, const std::vector<Var>& x) { return t.mul(x[0], x[1]); }},
      {"mul_row", [](Rng& r) { return std::vector{Random(r, 3, 4), Random(r, 1, 4)}; },
       [](Tape& t, const std::vector<Var>& x) { return t.mul_row(x[0], x[1]); }},
      {"scale", [](Rng& r) { return std::vector{Random(r, 2, 5)}; },
       [](Tape& t, const std::vector<Var>& x) { return t.scale(x[0], -0.37); }},
      {"softmax_rows", [](Rng& r) { return std::vector{Random(r, 3, 6, 2.0)}; },
       [](Tape& t, const std::vector<Var>& x) { return t.softmax_rows(x[0]); }},
      {"layer_norm_rows", [](Rng& r) { return std::vector{Random(r, 3, 6, 2.0)}; },
       [](Tape& t, const std::vector<Var>& x) { return t.layer_norm_rows(x[0]); }},
      {"elu", [](Rng& r) { return std::vector{Random(r, 3, 6, 2.0)}; },
       [](Tape& t, const std::vector<Var>& x) { return t.elu(x[0]); }},
      {"sigmoid", [](Rng& r) { return std::vector{Random(r, 3, 6, 3.0)}; },
       [](Tape& t, const std::vector<Var>& x) { return t.sigmoid(x[0]); }},
      {"glu", [](Rng& r) { return std::vector{Random(r, 3, 8, 2.0)}; },
       [](Tape& t, const std::vector<Var>& x) { return t.glu(x[0]); }},
      {"dropout", [](Rng& r) { return std::vector{Random(r, 3, 6)}; },
       [](Tape& t, const std::vector<Var>& x) {
         Tensor2 mask(3, 6);
         for (std::size_t i = 0; i < mask.size(); ++i) mask.v[i] = i % 3 ? 2.0 : 0.0;
         return t.dropout(x[0], mask);
       }},
      {"concat_rows", [](Rng& r) { return std::vector{Random(r, 2, 3), Random(r, 4, 3)}; },
       [](Tape& t, const std::vector<Var>& x) { return t.concat_rows({x[0], x[1], x[0]}); }},
      {"concat_cols", [](Rng& r) { return std::vector{Random(r, 3, 2), Random(r, 3, 4)}; },
       [](Tape& t, const std::vector<Var>& x) { return t.concat_cols({x[1], x[0]}); }},
      {"slice_rows", [](Rng& r) { return std::vector{Random(r, 5, 3)}; },
       [](Tape& t, const std::vector<Var>& x) { return t.slice_rows(x[0], 1, 4); }},
      {"slice_cols", [](Rng& r) { return std::vector{Random(r, 3, 7)}; },
       [](Tape& t, const std::vector<Var>& x) { return t.slice_cols(x[0], 2, 5); }},
      {"transpose", [](Rng& r) { return std::vector{Random(r, 3, 5)}; },
       [](Tape& t, const std::vector<Var>& x) { return t.transpose(x[0]); }},
      {"reshape", [](Rng& r) { return std::vector{Random(r, 3, 4)}; },
       [](Tape& t, const std::vector<Var>& x) { return t.reshape(x[0], 1, 12); }},
      {"sum", [](Rng& r) { return std::vector{Random(r, 3, 4)}; },
       [](Tape& t, const std::vector<Var>& x) { return t.sum(x[0]); }},
      {"bce_with_logits", [](Rng& r) { return std::vector{Random(r, 1, 6, 3.0)}; },
       [](Tape& t, const std::vector<Var>& x) { return t.bce_with_logits(x[0], Tensor2(1, 6, {1, 0, 0, 1, 1, 0})); }},
  };
}

TEST(TensorGradients, EveryPrimitiveMatchesFiniteDifferences) {
  for (const auto& c : Primitives()) {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
      Rng rng(seed);
      EXPECT_LT(MaxRelativeError(c.inputs(rng), c.op, seed + 100), 1e-4) << c.name << " seed " << seed;
    }
  }
}

TEST(TensorGradients, ComposedExpression) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Rng rng(seed);
    const std::vector<Tensor2> in = {Random(rng, 4, 6), Random(rng, 6, 8), Random(rng, 1, 8), Random(rng, 1, 4)};
    const double err = MaxRelativeError(in, [](Tape& t, const std::vector<Var>& x) {
      Var h = t.elu(t.add_row(t.matmul(x[0], x[1]), x[2]));
      Var n = t.layer_norm_rows(t.add(t.glu(h), t.slice_cols(x[0], 0, 4)));
      Var s = t.softmax_rows(t.mul_row(n, x[3]));
      return t.matmul(t.transpose(s), n);
    }, seed);
    EXPECT_LT(err, 1e-4) << "seed " << seed;
  }
}

TEST(Tensor, SoftmaxOfUniformRow) {
  Tape t;
  const Var y = t.softmax_rows(t.leaf(Tensor2(1, 19, 0.3)));
  for (double v : t.value(y).v) EXPECT_DOUBLE_EQ(v, 1.0 / 19.0);
}

TEST(Tensor, SoftmaxRowsArePositiveAndSumToOne) {
  Rng rng(3);
  Tape t;
  const Var y = t.softmax_rows(t.leaf(Random(rng, 20, 19, 10.0)));
  for (int r = 0; r < 20; ++r) {
    double s = 0.0;
    for (int c = 0; c < 19; ++c) {
      EXPECT_GT(t.value(y)(r, c), 0.0);
      s += t.value(y)(r, c);
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Tensor, LayerNormOfStandardizedRow) {
  // mean 0, population variance 1
  const Tensor2 x = Tensor2::row({1.0, -1.0, 1.0, -1.0});
  Tape t;
  const Var y = t.layer_norm_rows(t.leaf(x), 0.0);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(t.value(y).v[i], x.v[i]);
}

TEST(Tensor, GluByHand) {
  Tape t;
  const Var y = t.glu(t.leaf(Tensor2(1, 8, {1.0, -2.0, 0.5, 3.0, 0.0, 1.0, -1.0, 2.0})));
  const double expect[] = {1.0 * 0.5, -2.0 / (1.0 + std::exp(-1.0)), 0.5 / (1.0 + std::exp(1.0)),
                           3.0 / (1.0 + std::exp(-2.0))};
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(t.value(y).v[i], expect[i], 1e-15);
}

TEST(Tensor, SumOfParametersHasUnitGradient) {
  Rng rng(1);
  Tape t;
  const Var a = t.leaf(Random(rng, 3, 3), true);
  const Var b = t.leaf(Random(rng, 3, 3), true);
  t.backward(t.add(t.sum(a), t.sum(b)));
  for (double g : t.grad(a).v) EXPECT_EQ(g, 1.0);
  for (double g : t.grad(b).v) EXPECT_EQ(g, 1.0);
}

TEST(Tensor, DroppedCoordinateHasZeroGradient) {
  Tape t;
  const Var a = t.leaf(Tensor2::row({1.0, 2.0, 3.0}), true);
  t.backward(t.sum(t.elu(t.dropout(a, Tensor2::row({2.0, 0.0, 2.0})))));
  EXPECT_EQ(t.grad(a).v[1], 0.0);
  EXPECT_EQ(t.grad(a).v[0], 2.0);
}

TEST(Tensor, Errors) {
  Tape t;
  const Var a = t.leaf(Tensor2(2, 3), true);
  const Var b = t.leaf(Tensor2(2, 3), true);
  EXPECT_EQ(CodeOf([&] { t.matmul(a, b); }), ErrorCode::ShapeMismatch);
  EXPECT_EQ(CodeOf([&] { t.add(a, t.leaf(Tensor2(3, 2))); }), ErrorCode::ShapeMismatch);
  EXPECT_EQ(CodeOf([&] { t.glu(t.leaf(Tensor2(1, 3))); }), ErrorCode::ShapeMismatch);
  EXPECT_EQ(CodeOf([&] { t.backward(a); }), ErrorCode::NotScalarLoss);
  EXPECT_EQ(CodeOf([&] { t.leaf(Tensor2::row({std::nan("")})); }), ErrorCode::NonFinite);
  EXPECT_EQ(CodeOf([&] { t.scale(t.leaf(Tensor2::row({1e300})), 1e300); }), ErrorCode::NonFinite);
}

}  // namespace
}  // namespace ctquant
