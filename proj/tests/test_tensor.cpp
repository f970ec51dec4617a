#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "smear/tensor.hpp"
#include "test_util.hpp"

using namespace smear;
using smear::testing::uniform_tensor;

namespace {

constexpr double kGradTol = 1e-5;

void expect_values(const Tensor& t, std::vector<double> want, double tol = 0.0) {
  ASSERT_EQ(t.numel(), want.size());
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(t.data()[i], want[i], tol) << "entry " << i;
}

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  const Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  const Tensor b = Tensor::from({2, 2}, {5, 6, 7, 8});
  expect_values(matmul(eye, b), {5, 6, 7, 8});
}

TEST(Matmul, HandArithmetic) {
  expect_values(matmul(Tensor::from({2, 2}, {1, 2, 3, 4}), Tensor::from({2, 1}, {1, 1})), {3, 7});
}

TEST(Matmul, GradientOfSumWrtLeftOperand) {
  const Tensor a = Tensor::from({2, 2}, {1, 0, 0, 1}, true);
  const Tensor b = Tensor::from({2, 1}, {2, 3});
  sum(matmul(a, b)).backward();
  EXPECT_EQ(a.grad(), (std::vector<double>{2, 3, 2, 3}));
  const auto fd = grad_check([&](const Tensor& x) { return sum(matmul(x, b)); }, a);
  EXPECT_LE(fd.max_rel_error, kGradTol);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 2}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[2x2]"), std::string::npos) << msg;
  }
}

TEST(Matmul, BatchedLeadingAxesAndBmmGradients) {
  Rng rng(1);
  const Tensor a = uniform_tensor({2, 3, 4}, rng);
  const Tensor w = uniform_tensor({4, 5}, rng);
  const Tensor c = uniform_tensor({2, 4, 5}, rng);
  EXPECT_LE(grad_check([&](const Tensor& x) { return sum(square(matmul(x, w))); }, a).max_rel_error, kGradTol);
  EXPECT_LE(grad_check([&](const Tensor& x) { return sum(square(matmul(a, x))); }, w).max_rel_error, kGradTol);
  EXPECT_LE(grad_check([&](const Tensor& x) { return sum(square(bmm(x, c))); }, a).max_rel_error, kGradTol);
  EXPECT_LE(grad_check([&](const Tensor& x) { return sum(square(bmm(a, x))); }, c).max_rel_error, kGradTol);
}

TEST(Softmax, SymmetricInputIsUniform) { expect_values(softmax_last_axis(Tensor::from({2}, {0, 0})), {0.5, 0.5}); }

TEST(Softmax, LogTwoGivesTwoThirds) {
  expect_values(softmax_last_axis(Tensor::from({2}, {std::log(2.0), 0})), {2.0 / 3.0, 1.0 / 3.0}, 1e-15);
}

TEST(Softmax, LargeLogitsDoNotOverflow) {
  expect_values(softmax_last_axis(Tensor::from({2}, {1000, 1000})), {0.5, 0.5});
}

TEST(Softmax, RowsLieOnSimplex) {
  Rng rng(2);
  const Tensor p = softmax_last_axis(uniform_tensor({50, 7}, rng, -30, 30));
  for (std::size_t b = 0; b < 50; ++b) {
    double s = 0.0;
    for (std::size_t i = 0; i < 7; ++i) {
      EXPECT_GE(p.at({b, i}), 0.0);
      s += p.at({b, i});
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Softmax, SumHasZeroGradient) {
  const Tensor x = Tensor::from({4}, {0.3, -1.2, 2.0, 0.7}, true);
  sum(softmax_last_axis(x)).backward();
  for (double g : x.grad()) EXPECT_NEAR(g, 0.0, 1e-12);
}

TEST(LayerNorm, TwoPointAnalytic) {
  expect_values(layer_norm(Tensor::from({2}, {1, 3})), {-1, 1}, 1e-5);
}

TEST(LayerNorm, ConstantSliceNormalizesToZero) {
  expect_values(layer_norm(Tensor::from({3}, {4.5, 4.5, 4.5})), {0, 0, 0});
}

TEST(LayerNorm, GradientMatchesFiniteDifferencesWithAndWithoutAffine) {
  Rng rng(3);
  const Tensor x = uniform_tensor({3, 5}, rng);
  const Tensor w = uniform_tensor({3, 5}, rng);
  const Tensor scale = uniform_tensor({5}, rng);
  const Tensor shift = uniform_tensor({5}, rng);
  EXPECT_LE(grad_check([&](const Tensor& t) { return sum(layer_norm(t) * w); }, x).max_rel_error, kGradTol);
  EXPECT_LE(grad_check([&](const Tensor& t) { return sum(layer_norm(t, 1e-6, scale, shift) * w); }, x)
                .max_rel_error,
            kGradTol);
  EXPECT_LE(grad_check_params([&] { return sum(layer_norm(x, 1e-6, scale, shift) * w); }, {scale, shift})
                .max_rel_error,
            kGradTol);
}

TEST(Swish, ZeroSaturationAndSlope) {
  expect_values(swish(Tensor::from({1}, {0})), {0});
  expect_values(swish(Tensor::from({1}, {20})), {20}, 1e-6);
  const Tensor x = Tensor::from({1}, {0}, true);
  sum(swish(x)).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 0.5);
}

TEST(StopGradient, ForwardIdentityBackwardZero) {
  expect_values(stop_gradient(Tensor::from({3}, {1, 2, 3})), {1, 2, 3});
  const Tensor x = Tensor::from({1}, {2}, true);
  sum(stop_gradient(x) * x).backward();
  EXPECT_EQ(x.grad(), std::vector<double>{2});
  const Tensor y = Tensor::from({1}, {2}, true);
  Tensor loss = sum(stop_gradient(y));
  loss.backward();
  EXPECT_EQ(y.grad(), std::vector<double>{0});
}

TEST(Backward, SquaredNormGradient) {
  const Tensor x = Tensor::from({2}, {1, 2}, true);
  sum(square(x)).backward();
  EXPECT_EQ(x.grad(), (std::vector<double>{2, 4}));
}

TEST(Backward, RepeatedCallsAccumulateUntilReset) {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  const Tensor loss = sum(square(x));
  loss.backward();
  loss.backward();
  EXPECT_EQ(x.grad(), (std::vector<double>{4, 8}));
  x.zero_grad();
  loss.backward();
  EXPECT_EQ(x.grad(), (std::vector<double>{2, 4}));
}

TEST(Backward, NonScalarLossIsContractError) {
  const Tensor x = Tensor::from({2}, {1, 2}, true);
  EXPECT_THROW(square(x).backward(), ContractError);
}

TEST(Backward, GraphWithoutTrainableLeavesIsNoOp) {
  const Tensor x = Tensor::from({2}, {1, 2});
  EXPECT_NO_THROW(sum(square(x)).backward());
  EXPECT_FALSE(x.has_grad());
}

TEST(Backward, SharedSubgraphVisitedOnce) {
  const Tensor x = Tensor::from({1}, {3}, true);
  const Tensor y = square(x);
  const Tensor loss = sum(y + y);
  std::size_t nodes = topological_order(loss).size();
  EXPECT_EQ(nodes, 4u);  // x, y, y+y, sum
  loss.backward();
  EXPECT_EQ(x.grad(), std::vector<double>{12});
}

TEST(GradCheck, KnownCorrectCases) {
  Rng rng(4);
  const Tensor x = uniform_tensor({6}, rng);
  EXPECT_LE(grad_check([](const Tensor& t) { return sum(square(t)); }, x).max_rel_error, 1e-7);
  EXPECT_LE(grad_check([](const Tensor& t) { return sum(swish(t)); }, x).max_rel_error, kGradTol);
}

TEST(GradCheck, StopGradientDiscrepancyIsReportedNotHidden) {
  const Tensor x = Tensor::from({2}, {0.5, -1.0});
  const auto r = grad_check([](const Tensor& t) { return sum(square(stop_gradient(t))); }, x);
  EXPECT_EQ(r.analytic, (std::vector<double>{0, 0}));
  EXPECT_NEAR(r.numeric[0], 1.0, 1e-6);
  EXPECT_GT(r.max_rel_error, 0.5);
}

TEST(GradCheck, NonFiniteFunctionIsDomainError) {
  const Tensor x = Tensor::from({1}, {-1.0});
  EXPECT_THROW(grad_check([](const Tensor& t) { return sum(log(t)); }, x), std::domain_error);
}

// Every differentiable op against central differences at points in [-2, 2].
TEST(GradCheck, EveryOpMatchesFiniteDifferences) {
  Rng rng(5);
  const Tensor a = uniform_tensor({3, 4}, rng);
  const Tensor b = uniform_tensor({3, 4}, rng);
  const Tensor pos = uniform_tensor({3, 4}, rng, 0.5, 2.0);
  const Tensor col = uniform_tensor({3, 1}, rng);
  const Tensor row = uniform_tensor({1, 4}, rng);
  const std::vector<std::size_t> labels{0, 3, 2};
  const std::vector<std::size_t> rows{2, 0, 2, 1};
  const std::vector<std::size_t> cols{1, 3, 0};
  using F = std::function<Tensor(const Tensor&)>;
  const std::vector<std::pair<const char*, F>> cases = {
      {"add", [&](const Tensor& t) { return sum(square(t + b)); }},
      {"sub", [&](const Tensor& t) { return sum(square(b - t)); }},
      {"mul", [&](const Tensor& t) { return sum(t * b * t); }},
      {"div", [&](const Tensor& t) { return sum(t / pos); }},
      {"div_denominator", [&](const Tensor& t) { return sum(b / (square(t) + 1.0)); }},
      {"broadcast_col", [&](const Tensor& t) { return sum(square(t * col + col)); }},
      {"broadcast_row", [&](const Tensor& t) { return sum(square(t - row)); }},
      {"broadcast_into_small", [&](const Tensor& t) { return sum(square(a * reshape(select_last(t, 0), {3, 1}))); }},
      {"scalars", [&](const Tensor& t) { return sum(square(3.0 - 2.0 * t + 0.5)); }},
      {"exp", [&](const Tensor& t) { return sum(exp(t) * b); }},
      {"log", [&](const Tensor& t) { return sum(log(square(t) + 1.0)); }},
      {"sigmoid", [&](const Tensor& t) { return sum(sigmoid(t) * b); }},
      {"swish", [&](const Tensor& t) { return sum(swish(t) * b); }},
      {"mean", [&](const Tensor& t) { return square(mean(t * b)); }},
      {"sum_axis0", [&](const Tensor& t) { return sum(square(sum_axis(t, 0))); }},
      {"sum_axis1_keep", [&](const Tensor& t) { return sum(square(sum_axis(t, 1, true) * col)); }},
      {"mean_axis", [&](const Tensor& t) { return sum(square(mean_axis(t, 1))); }},
      {"softmax", [&](const Tensor& t) { return sum(softmax_last_axis(t) * b); }},
      {"entropy", [&](const Tensor& t) { return sum(entropy_last_axis(softmax_last_axis(t))); }},
      {"reshape", [&](const Tensor& t) { return sum(square(reshape(t, {4, 3})) * reshape(b, {4, 3})); }},
      {"concat0", [&](const Tensor& t) { return sum(square(concat({t, b}, 0))); }},
      {"concat1", [&](const Tensor& t) { return sum(square(concat({b, t * b}, 1))); }},
      {"transpose", [&](const Tensor& t) { return sum(matmul(transpose(t), b) * matmul(transpose(b), b)); }},
      {"select_last", [&](const Tensor& t) { return sum(square(select_last(t, 2))); }},
      {"gather_rows", [&](const Tensor& t) { return sum(square(gather_rows(t, rows))); }},
      {"pick_per_row", [&](const Tensor& t) { return sum(square(pick_per_row(t, cols))); }},
      {"huber", [&](const Tensor& t) { return sum(huber(t, b)); }},
      {"huber_target", [&](const Tensor& t) { return sum(huber(b, 2.0 * t)); }},
      {"cross_entropy", [&](const Tensor& t) { return sum(cross_entropy(t * 2.0, labels)); }},
      {"smooth_step", [&](const Tensor& t) { return sum(smooth_step(t * 0.4, 1.0) * b); }},
      {"weighted_stack",
       [&](const Tensor& t) { return sum(square(weighted_stack(reshape(t, {6, 2}), {a, b}))); }},
      {"weighted_stack_parts",
       [&](const Tensor& t) { return sum(square(weighted_stack(Tensor::from({2, 2}, {0.3, 0.7, -1, 2}), {t, b}))); }},
      {"select_stack",
       [&](const Tensor& t) {
         const std::vector<std::size_t> idx{1, 0, 1};
         return sum(square(select_stack(idx, {t, b})));
       }},
  };
  for (const auto& [name, f] : cases) {
    EXPECT_LE(grad_check(f, a).max_rel_error, kGradTol) << name;
  }
}

TEST(Huber, QuadraticAndLinearRegions) {
  expect_values(huber(Tensor::from({2}, {0, 0}), Tensor::from({2}, {1, 3})), {0.5, 2.5});
}

TEST(CrossEntropy, UniformLogitsGiveLogC) {
  const std::vector<std::size_t> labels{2};
  expect_values(cross_entropy(Tensor::zeros({1, 4}), labels), {std::log(4.0)}, 1e-15);
}

TEST(SmoothStep, PiecewiseValuesAndC1Continuity) {
  const double g = 1.0;
  expect_values(smooth_step(Tensor::from({5}, {-1, -0.5, 0, 0.5, 1}), g), {0, 0, 0.5, 1, 1}, 1e-15);
  for (double edge : {-0.5, 0.5}) {
    const double h = 1e-8;
    const Tensor inside = Tensor::from({1}, {edge - (edge > 0 ? h : -h)}, true);
    const Tensor outside = Tensor::from({1}, {edge + (edge > 0 ? h : -h)}, true);
    const Tensor fi = smooth_step(inside, g), fo = smooth_step(outside, g);
    EXPECT_NEAR(fi.item(), fo.item(), 1e-7);
    sum(fi).backward();
    sum(fo).backward();
    EXPECT_NEAR(inside.grad()[0], outside.grad()[0], 1e-7);
  }
}

TEST(Tensor, ConstructionValidatesShapes) {
  EXPECT_THROW(Tensor::from({2, 2}, {1, 2, 3}), ShapeError);
  EXPECT_THROW(Tensor::zeros({2, 3}).item(), ContractError);
  EXPECT_THROW(add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2})), ShapeError);
}

TEST(Tensor, IdenticalOpSequencesAreBitIdentical) {
  auto run = [] {
    Rng rng(9);
    const Tensor x = uniform_tensor({4, 6}, rng);
    const Tensor w = uniform_tensor({6, 3}, rng);
    return softmax_last_axis(layer_norm(matmul(swish(x), w)));
  };
  const Tensor a = run(), b = run();
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a.data()[i], b.data()[i]);
}
