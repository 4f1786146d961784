#include "ega/grad_check.hpp"
#include "ega/ops.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <functional>

using namespace ega;
using ega::test::randn;
using ega::test::weighted_sum;

namespace {

using Fn = std::function<Var<double>(const std::vector<Var<double>>&)>;

double check(const Fn& f, std::vector<NdArray<double>> inputs, double h = 1e-6) {
  return grad_check_inputs<double>(f, std::move(inputs), h).max_rel_err;
}

NdArray<double> naive_matmul(const NdArray<double>& a, const NdArray<double>& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  NdArray<double> c({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) c.at({i, j}) += a.at({i, p}) * b.at({p, j});
  return c;
}

}  // namespace

TEST(Matmul, IdentityLeavesOperand) {
  const auto b = randn({2, 3}, 1);
  const auto eye = NdArray<double>::from({2, 2}, {1, 0, 0, 1});
  const auto c = matmul(Var<double>(eye), Var<double>(b)).value();
  EXPECT_EQ(c.storage(), b.storage());
}

TEST(Matmul, HandExample) {
  const auto a = NdArray<double>::from({2, 2}, {1, 2, 3, 4});
  const auto b = NdArray<double>::from({2, 2}, {5, 6, 7, 8});
  const auto c = matmul(Var<double>(a), Var<double>(b)).value();
  EXPECT_EQ(c.storage(), (std::vector<double>{19, 22, 43, 50}));
}

TEST(Matmul, MatchesTripleLoop) {
  const auto a = randn({5, 7}, 2);
  const auto b = randn({7, 3}, 3);
  EXPECT_LT(test::max_abs_diff(matmul(Var<double>(a), Var<double>(b)).value(), naive_matmul(a, b)), 1e-12);
}

TEST(Matmul, GradientOfSumIsTransposeBroadcast) {
  Tape<double> tape;
  const auto a = tape.leaf(randn({3, 4}, 4));
  const auto bv = randn({4, 2}, 5);
  tape.backward(sum(matmul(a, Var<double>(bv))));
  const auto& ga = tape.grad(a);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(ga.at({i, k}), bv.at({k, 0}) + bv.at({k, 1}), 1e-12);
  EXPECT_LT(check([](const auto& v) { return sum(matmul(v[0], v[1])); }, {randn({3, 4}, 4), bv}), 1e-6);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Var<double>(randn({2, 3}, 1)), Var<double>(randn({4, 2}, 1)));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2, 3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4, 2]"), std::string::npos) << msg;
  }
}

TEST(Softmax, Examples) {
  auto s = softmax_lastdim(Var<double>(NdArray<double>::from({2}, {0, 0}))).value();
  EXPECT_DOUBLE_EQ(s[0], 0.5);
  s = softmax_lastdim(Var<double>(NdArray<double>::from({2}, {1000, 1000}))).value();
  EXPECT_DOUBLE_EQ(s[0], 0.5);
  EXPECT_DOUBLE_EQ(s[1], 0.5);
  const auto mask = NdArray<double>::from({2}, {0, kMaskedLogit});
  s = softmax_lastdim(Var<double>(NdArray<double>::from({2}, {0, 0})), &mask).value();
  EXPECT_DOUBLE_EQ(s[0], 1.0);
  EXPECT_LT(s[1], 1e-30);
}

TEST(Softmax, AllMaskedRowIsUniformAndCounted) {
  const auto before = softmax_all_masked_rows();
  const auto mask = NdArray<double>::from({3}, {kMaskedLogit, kMaskedLogit, kMaskedLogit});
  const auto s = softmax_lastdim(Var<double>(NdArray<double>::from({3}, {1, 2, 3})), &mask).value();
  for (double v : s.values()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
  EXPECT_EQ(softmax_all_masked_rows(), before + 1);
}

TEST(Softmax, RowsSumToOneOnWideInputs) {
  const auto x = test::uniform({4, 8, 8}, 7, -1e4, 1e4);
  const auto mask = causal_mask<double>(8);
  const auto s = softmax_lastdim(Var<double>(x), &mask).value();
  for (std::size_t r = 0; r < 32; ++r) {
    double total = 0.0;
    for (std::size_t j = 0; j < 8; ++j) {
      ASSERT_TRUE(std::isfinite(s[r * 8 + j]));
      total += s[r * 8 + j];
      if (j > r % 8) {
        EXPECT_LT(s[r * 8 + j], 1e-30);
      }
    }
    EXPECT_NEAR(total, 1.0, 1e-6);
  }
}

TEST(LayerNorm, Examples) {
  const Var<double> ones(NdArray<double>({2}, 1.0));
  const Var<double> zeros(NdArray<double>({2}, 0.0));
  auto y = layer_norm(Var<double>(NdArray<double>({2}, 3.0)), ones, zeros).value();
  EXPECT_EQ(y[0], 0.0);
  EXPECT_EQ(y[1], 0.0);
  y = layer_norm(Var<double>(NdArray<double>::from({2}, {1, -1})), ones, zeros).value();
  EXPECT_NEAR(y[0], 1.0 / std::sqrt(1.0 + 1e-5), 1e-15);
  EXPECT_NEAR(y[1], -1.0 / std::sqrt(1.0 + 1e-5), 1e-15);
  const Var<double> bias(NdArray<double>::from({2}, {0.3, -0.7}));
  y = layer_norm(Var<double>(randn({3, 2}, 1)), zeros, bias).value();
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(y[2 * i], 0.3);
    EXPECT_EQ(y[2 * i + 1], -0.7);
  }
}

TEST(CausalConv, KernelOneIsIdentity) {
  const auto x = randn({2, 5}, 3);
  const auto y = causal_conv1d(Var<double>(x), Var<double>(NdArray<double>::from({1}, {1})), PadMode::kZero);
  EXPECT_EQ(y.value().storage(), x.storage());
}

TEST(CausalConv, DelayKernelShiftsByOne) {
  const auto x = NdArray<double>::from({3}, {1, 2, 3});
  const Var<double> k(NdArray<double>::from({2}, {0, 1}));
  EXPECT_EQ(causal_conv1d(Var<double>(x), k, PadMode::kZero).value().storage(), (std::vector<double>{0, 1, 2}));
  EXPECT_EQ(causal_conv1d(Var<double>(x), k, PadMode::kReflect).value().storage(),
            (std::vector<double>{2, 1, 2}));
  EXPECT_EQ(causal_conv1d(Var<double>(x), k, PadMode::kEdge).value().storage(), (std::vector<double>{1, 1, 2}));
}

TEST(CausalConv, FutureSamplesDoNotLeakBack) {
  const auto x = randn({2, 3, 12}, 4);
  const Var<double> k(randn({5}, 5));
  for (PadMode mode : {PadMode::kEdge, PadMode::kZero}) {
    const auto y0 = causal_conv1d(Var<double>(x), k, mode).value();
    for (std::size_t t = 0; t + 1 < 12; ++t) {
      auto xp = x;
      for (std::size_t r = 0; r < 6; ++r) xp[r * 12 + t + 1] += 3.0;
      const auto y1 = causal_conv1d(Var<double>(xp), k, mode).value();
      for (std::size_t r = 0; r < 6; ++r)
        for (std::size_t u = 0; u <= t; ++u) EXPECT_EQ(y0[r * 12 + u], y1[r * 12 + u]);
    }
  }
}

TEST(CausalConv, ValidModeRejectsLongKernel) {
  EXPECT_THROW(causal_conv1d(Var<double>(randn({3}, 1)), Var<double>(randn({4}, 2)), PadMode::kValid),
               LengthError);
  const auto y = causal_conv1d(Var<double>(randn({6}, 1)), Var<double>(randn({4}, 2)), PadMode::kValid);
  EXPECT_EQ(y.shape(), Shape{3});
}

TEST(Backward, SumAndSquare) {
  Tape<double> tape;
  auto x = tape.leaf(NdArray<double>::from({2}, {1, 2}));
  tape.backward(sum(x));
  EXPECT_EQ(tape.grad(x).storage(), (std::vector<double>{1, 1}));

  Tape<double> tape2;
  x = tape2.leaf(NdArray<double>::from({2}, {1, 2}));
  tape2.backward(sum(square(x)));
  EXPECT_EQ(tape2.grad(x).storage(), (std::vector<double>{2, 4}));
}

TEST(Backward, ContractErrors) {
  Tape<double> tape;
  auto x = tape.leaf(randn({3}, 1));
  EXPECT_THROW(tape.backward(square(x)), ContractError);
  auto loss = sum(x);
  tape.backward(loss);
  EXPECT_THROW(tape.backward(loss), ContractError);
  tape.reset();
  x = tape.leaf(randn({3}, 1));
  EXPECT_NO_THROW(tape.backward(sum(x)));
}

TEST(Backward, ParameterGradientsAccumulateAcrossTapes) {
  Parameter<double> p("w", NdArray<double>::from({2}, {1, 2}), ParamRole::kWeight);
  for (int i = 0; i < 2; ++i) {
    Tape<double> tape;
    tape.backward(sum(square(tape.parameter(p))));
  }
  EXPECT_EQ(p.grad.storage(), (std::vector<double>{4, 8}));
}

TEST(GradCheck, QuadraticFormIsExact) {
  const auto q = randn({4, 4}, 8);
  const double err = check(
      [&](const auto& v) {
        const auto x = reshape(v[0], {1, 4});
        return sum(matmul(matmul(x, Var<double>(q)), transpose(x)));
      },
      {randn({4}, 9)}, 1e-2);
  // central differences are exact for quadratics, so a coarse step only trims rounding
  EXPECT_LT(err, 1e-9);
}

TEST(GradCheck, NonFiniteNamesParameter) {
  Parameter<double> p("bad_param", NdArray<double>::from({1}, {-1.0}), ParamRole::kWeight);
  auto loss = [&](Tape<double>* t) {
    const Var<double> v = t ? t->parameter(p) : Var<double>(p.value, nullptr, -1);
    return sum(log(v));
  };
  try {
    grad_check<double>(loss, {&p});
    FAIL() << "expected NonFiniteError";
  } catch (const NonFiniteError& e) {
    EXPECT_NE(std::string(e.what()).find("bad_param"), std::string::npos);
  }
}

TEST(Determinism, ForwardReplayIsBitwiseIdentical) {
  const auto x = randn({4, 8, 8}, 11);
  const auto w = randn({8, 8}, 12);
  auto run = [&] {
    const auto mask = causal_mask<double>(8);
    return softmax_lastdim(matmul(gelu(Var<double>(x)), Var<double>(w)), &mask).value().storage();
  };
  EXPECT_EQ(run(), run());
}

TEST(Dropout, DeterministicGivenStreamAndIdentityInEval) {
  const auto x = randn({4, 16}, 13);
  Rng a(1, Stream::kDropout, 5);
  Rng b(1, Stream::kDropout, 5);
  EXPECT_EQ(dropout(Var<double>(x), 0.1, a, true).value().storage(),
            dropout(Var<double>(x), 0.1, b, true).value().storage());
  Rng c(1, Stream::kDropout, 5);
  EXPECT_EQ(dropout(Var<double>(x), 0.1, c, false).value().storage(), x.storage());
}

TEST(CrossEntropy, UniformAndConfident) {
  NdArray<double> logits({1, 2, 65});
  EXPECT_NEAR(cross_entropy(Var<double>(logits), {3, 7}).value().item(), std::log(65.0), 1e-12);
  logits.at({0, 0, 3}) = 1e3;
  logits.at({0, 1, 7}) = 1e3;
  EXPECT_NEAR(cross_entropy(Var<double>(logits), {3, 7}).value().item(), 0.0, 1e-12);
}

TEST(CrossEntropy, MatchesNaiveLogSoftmax) {
  const auto logits = randn({2, 3, 5}, 14);
  const std::vector<std::int32_t> targets = {0, 4, 2, 1, 3, 3};
  double total = 0.0;
  for (std::size_t r = 0; r < 6; ++r) {
    double z = 0.0;
    for (std::size_t v = 0; v < 5; ++v) z += std::exp(logits[r * 5 + v]);
    total += std::log(z) - logits[r * 5 + static_cast<std::size_t>(targets[r])];
  }
  EXPECT_NEAR(cross_entropy(Var<double>(logits), targets).value().item(), total / 6.0, 1e-10);
}

TEST(Embedding, GathersRows) {
  const auto table = randn({5, 3}, 15);
  const TokenArray ids{{1, 2}, {4, 0}};
  const auto y = embedding(ids, Var<double>(table)).value();
  EXPECT_EQ(y.shape(), (Shape{1, 2, 3}));
  for (std::size_t j = 0; j < 3; ++j) {
    EXPECT_EQ(y[j], table.at({4, j}));
    EXPECT_EQ(y[3 + j], table.at({0, j}));
  }
}

// Finite-difference agreement for every primitive over randomized shapes up to 4x8x8.
class PrimitiveGradient : public ::testing::TestWithParam<int> {
 protected:
  Shape shape() const {
    Rng rng(static_cast<std::uint64_t>(GetParam()), Stream::kTest, 1);
    return {1 + rng.below(4), 1 + rng.below(8), 1 + rng.below(8)};
  }
  std::uint64_t seed() const { return 1000 + static_cast<std::uint64_t>(GetParam()); }
};

TEST_P(PrimitiveGradient, Elementwise) {
  const Shape s = shape();
  const auto a = randn(s, seed());
  const auto b = test::uniform(s, seed() + 1, 0.5, 2.0);
  EXPECT_LT(check([](const auto& v) { return weighted_sum(add(v[0], v[1])); }, {a, b}), 1e-4);
  EXPECT_LT(check([](const auto& v) { return weighted_sum(sub(v[0], v[1])); }, {a, b}), 1e-4);
  EXPECT_LT(check([](const auto& v) { return weighted_sum(mul(v[0], v[1])); }, {a, b}), 1e-4);
  EXPECT_LT(check([](const auto& v) { return weighted_sum(div(v[0], v[1])); }, {a, b}), 1e-4);
  EXPECT_LT(check([](const auto& v) { return weighted_sum(exp(v[0])); }, {a}), 1e-4);
  EXPECT_LT(check([](const auto& v) { return weighted_sum(log(v[0])); }, {b}), 1e-4);
  EXPECT_LT(check([](const auto& v) { return weighted_sum(sigmoid(v[0])); }, {a}), 1e-4);
  EXPECT_LT(check([](const auto& v) { return weighted_sum(gelu(v[0])); }, {a}), 1e-4);
  EXPECT_LT(check([](const auto& v) { return weighted_sum(scale(square(v[0]), 0.7)); }, {a}), 1e-4);
}

TEST_P(PrimitiveGradient, Broadcasting) {
  const Shape s = shape();
  const auto a = randn(s, seed());
  const auto row = randn({s[2]}, seed() + 2);
  const auto col = randn({s[0], 1, s[2]}, seed() + 3);
  EXPECT_LT(check([](const auto& v) { return weighted_sum(mul(v[0], v[1])); }, {a, row}), 1e-4);
  EXPECT_LT(check([](const auto& v) { return weighted_sum(add(v[0], v[1])); }, {a, col}), 1e-4);
  EXPECT_LT(check([](const auto& v) { return weighted_sum(sub(v[1], v[0])); }, {a, col}), 1e-4);
}

TEST_P(PrimitiveGradient, ReductionsAndShapes) {
  const Shape s = shape();
  const auto a = randn(s, seed());
  EXPECT_LT(check([](const auto& v) { return square(mean(v[0])); }, {a}), 1e-4);
  EXPECT_LT(check([](const auto& v) { return weighted_sum(sum_axis(v[0], 1)); }, {a}), 1e-4);
  EXPECT_LT(check([](const auto& v) { return weighted_sum(mean_axis(v[0], -1)); }, {a}), 1e-4);
  EXPECT_LT(check([](const auto& v) { return weighted_sum(transpose(v[0])); }, {a}), 1e-4);
  EXPECT_LT(check([](const auto& v) { return weighted_sum(permute(v[0], {2, 0, 1})); }, {a}), 1e-4);
  EXPECT_LT(check([&](const auto& v) { return weighted_sum(reshape(v[0], {s[0] * s[1], s[2]})); }, {a}), 1e-4);
  EXPECT_LT(check([&](const auto& v) { return weighted_sum(slice(v[0], 2, s[2] / 2, s[2])); }, {a}), 1e-4);
  EXPECT_LT(check([](const auto& v) { return weighted_sum(stack(std::vector{v[0], v[1]}, 1)); },
                  {a, randn(s, seed() + 4)}),
            1e-4);
}

TEST_P(PrimitiveGradient, LinearAlgebraAndNetworkOps) {
  const Shape s = shape();
  const auto a = randn(s, seed());
  const auto w = randn({s[2], 3}, seed() + 5);
  const auto bt = randn({s[0], s[2], s[1]}, seed() + 6);
  EXPECT_LT(check([](const auto& v) { return weighted_sum(matmul(v[0], v[1])); }, {a, w}), 1e-4);
  EXPECT_LT(check([](const auto& v) { return weighted_sum(matmul(v[0], v[1])); }, {a, bt}), 1e-4);
  const auto mask = causal_mask<double>(s[2]);
  const auto sq = randn({s[0], s[2], s[2]}, seed() + 7);
  EXPECT_LT(check([&](const auto& v) { return weighted_sum(softmax_lastdim(v[0], &mask)); }, {sq}), 1e-4);
  // with d <= 2 the normalized output saturates and gradients sink below the difference noise
  const std::size_t d = s[2] + 2;
  EXPECT_LT(check([](const auto& v) { return weighted_sum(layer_norm(v[0], v[1], v[2])); },
                  {randn({s[0], s[1], d}, seed()), randn({d}, seed() + 8), randn({d}, seed() + 9)}),
            1e-4);
  std::vector<std::int32_t> targets(s[0] * s[1]);
  Rng rng(seed(), Stream::kTest, 2);
  for (auto& t : targets) t = static_cast<std::int32_t>(rng.below(s[2]));
  EXPECT_LT(check([&](const auto& v) { return cross_entropy(v[0], targets); }, {a}), 1e-4);
  TokenArray ids{{s[0], s[1]}, targets};
  EXPECT_LT(check([&](const auto& v) { return weighted_sum(embedding(ids, v[0])); }, {randn({s[2], 4}, seed())}),
            1e-4);
  EXPECT_LT(check([](const auto& v) {
              Rng r(3, Stream::kDropout, 0);
              return weighted_sum(dropout(v[0], 0.3, r, true));
            },
                  {a}),
            1e-4);
}

TEST_P(PrimitiveGradient, CausalConvolution) {
  const Shape s = shape();
  const auto x = randn(s, seed());
  const std::size_t k = 1 + s[2] / 2;
  for (PadMode mode : {PadMode::kReflect, PadMode::kEdge, PadMode::kZero}) {
    EXPECT_LT(check([&](const auto& v) { return weighted_sum(causal_conv1d(v[0], v[1], mode)); },
                    {x, randn({k}, seed() + 1)}),
              1e-4);
    EXPECT_LT(check([&](const auto& v) { return weighted_sum(causal_conv1d(v[0], v[1], mode)); },
                    {x, randn({s[1], k}, seed() + 2)}),
              1e-4);
  }
}

INSTANTIATE_TEST_SUITE_P(RandomShapes, PrimitiveGradient, ::testing::Range(0, 6));
