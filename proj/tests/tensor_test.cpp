#include <gtest/gtest.h>

#include <cmath>

#include "support/gradcheck.hpp"
#include "texrect/conv.hpp"
#include "texrect/linalg.hpp"
#include "texrect/norm.hpp"
#include "texrect/ops.hpp"
#include "texrect/optim.hpp"

using namespace texrect;
using texrect::testing::grad_check;
using texrect::testing::random_tensor;

namespace {

constexpr double kGradTol = 1e-4;

}  // namespace

TEST(Matmul, IdentityCases) {
  Tensor<float> eye({2, 2}, std::vector<float>{1, 0, 0, 1});
  auto r = matmul(eye, eye);
  EXPECT_EQ(r.values(), eye.values());
  Tensor<float> a({2, 2}, std::vector<float>{1, 2, 3, 4});
  EXPECT_EQ(matmul(a, eye).values(), (std::vector<float>{1, 2, 3, 4}));
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tensor<float> a({2, 3}), b({4, 5});
  try {
    matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos);
    EXPECT_NE(msg.find("[4x5]"), std::string::npos);
  }
}

TEST(Matmul, GradientOfSumIsOnesTimesBTransposed) {
  auto a = random_tensor({3, 4}, 11);
  auto b = random_tensor({4, 2}, 12, -1, 1, false);
  sum(matmul(a, b)).backward();
  for (Index i = 0; i < 3; ++i)
    for (Index k = 0; k < 4; ++k) {
      const double expected = b.data()[k * 2] + b.data()[k * 2 + 1];
      EXPECT_NEAR(a.grad()[i * 4 + k], expected, 1e-12);
    }
  auto check = grad_check([&] { return sum(matmul(a, b)); }, {a});
  EXPECT_LT(check.worst_relative_error, kGradTol);
}

TEST(Conv2d, OneByOneIdentityKernel) {
  auto x = random_tensor({1, 1, 5, 5}, 3, -1, 1, false);
  Tensor<double> w({1, 1, 1, 1}, 1.0);
  Tensor<double> b({1}, 0.0);
  auto y = conv2d(x, w, b, 1, 0);
  EXPECT_EQ(y.values(), x.values());
}

TEST(Conv2d, AllOnesKernelSumsWindow) {
  Tensor<double> x({1, 1, 3, 3}, 1.0);
  Tensor<double> w({1, 1, 3, 3}, 1.0);
  Tensor<double> b({1}, 0.25);
  auto y = conv2d(x, w, b, 1, 0);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_DOUBLE_EQ(y.item(), 9.25);
}

TEST(Conv2d, ThreeDimensionalInputIsSingleItemBatch) {
  Tensor<double> x({2, 4, 4}, 1.0);
  Tensor<double> w({3, 2, 3, 3}, 0.5);
  auto y = conv2d(x, w, Tensor<double>(), 2, 1);
  EXPECT_EQ(y.shape(), (Shape{3, 2, 2}));
}

TEST(Conv2d, NonPositiveExtentIsDimensionError) {
  Tensor<double> x({1, 1, 2, 2});
  Tensor<double> w({1, 1, 3, 3});
  EXPECT_THROW(conv2d(x, w, Tensor<double>(), 1, 0), DimensionError);
  Tensor<double> even({1, 1, 2, 2});
  EXPECT_THROW(conv2d(Tensor<double>({1, 1, 4, 4}), even, Tensor<double>(), 1, 0), DimensionError);
}

TEST(Conv2d, GradientOfMeanMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto x = random_tensor({2, 3, 6, 5}, 100 + seed);
    auto w = random_tensor({4, 3, 3, 3}, 200 + seed);
    auto b = random_tensor({4}, 300 + seed);
    const Index stride = 1 + static_cast<Index>(seed % 2);
    auto check = grad_check([&] { return mean(conv2d(x, w, b, stride, 1)); }, {x, w, b}, {"x", "w", "b"});
    EXPECT_LT(check.worst_relative_error, kGradTol) << check.worst_tensor;
  }
}

TEST(Softmax, Examples) {
  auto u = softmax(Tensor<double>({3}, 0.0));
  for (double v : u.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
  auto s = softmax(Tensor<float>({2}, std::vector<float>{1000.0f, 0.0f}));
  EXPECT_NEAR(s.data()[0], 1.0f, 1e-6f);
  EXPECT_NEAR(s.data()[1], 0.0f, 1e-6f);
  EXPECT_TRUE(std::isfinite(s.data()[0]));
  auto t = softmax(Tensor<double>({3}, std::vector<double>{1, 2, 3}));
  EXPECT_NEAR(t.data()[0], 0.09003, 1e-5);
  EXPECT_NEAR(t.data()[1], 0.24473, 1e-5);
  EXPECT_NEAR(t.data()[2], 0.66524, 1e-5);
}

TEST(Softmax, RowsSumToOneOnAnyAxis) {
  auto x = random_tensor({3, 4, 5}, 9, -5, 5, false);
  for (int axis = 0; axis < 3; ++axis) {
    auto y = softmax(x, axis);
    const Index len = x.dim(axis);
    Index inner = 1;
    for (int d = axis + 1; d < 3; ++d) inner *= x.dim(d);
    const Index outer = x.numel() / (len * inner);
    for (Index o = 0; o < outer; ++o)
      for (Index i = 0; i < inner; ++i) {
        double s = 0;
        for (Index k = 0; k < len; ++k) s += y.data()[o * len * inner + k * inner + i];
        EXPECT_NEAR(s, 1.0, 1e-12);
      }
  }
}

TEST(Elementwise, ReluAndMean) {
  auto x = Tensor<double>({2}, std::vector<double>{-1, 2}, true);
  auto y = relu(x);
  EXPECT_EQ(y.values(), (std::vector<double>{0, 2}));
  sum(y).backward();
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{0, 1}));
  EXPECT_DOUBLE_EQ(mean(Tensor<double>({4}, std::vector<double>{1, 2, 3, 4})).item(), 2.5);
}

TEST(Elementwise, IncompatibleShapesRejected) {
  EXPECT_THROW(add(Tensor<double>({2, 3}), Tensor<double>({3, 2})), DimensionError);
  EXPECT_NO_THROW(mul(Tensor<double>({2, 3}), Tensor<double>::scalar(2.0)));
  EXPECT_NO_THROW(sub(Tensor<double>::scalar(2.0), Tensor<double>({2, 3})));
}

TEST(GradCheck, ElementwiseSuite) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto a = random_tensor({3, 4}, 10 + seed);
    auto b = random_tensor({3, 4}, 20 + seed);
    auto s = random_tensor({1}, 30 + seed);
    auto p = random_tensor({3, 4}, 40 + seed, 0.5, 2.0);
    std::vector<std::pair<std::string, std::function<Tensor<double>()>>> cases = {
        {"add", [&] { return sum(mul(add(a, b), b)); }},
        {"sub", [&] { return sum(mul(sub(a, b), a)); }},
        {"mul", [&] { return mean(mul(a, b)); }},
        {"scalar_mul", [&] { return sum(mul(a, s)); }},
        {"scalar_left", [&] { return sum(square(sub(s, a))); }},
        {"scale", [&] { return sum(square(scale(a, 3.0))); }},
        {"add_scalar", [&] { return sum(square(add_scalar(a, 0.7))); }},
        {"relu", [&] { return sum(mul(relu(a), b)); }},
        {"silu", [&] { return sum(mul(silu(a), b)); }},
        {"sqrt", [&] { return sum(mul(texrect::sqrt(p), b)); }},
        {"mean", [&] { return mean(square(a)); }},
        {"transpose", [&] { return sum(mul(transpose(a), transpose(b))); }},
        {"softmax", [&] { return sum(mul(softmax(a, 1), b)); }},
        {"softmax0", [&] { return sum(mul(softmax(a, 0), b)); }},
        {"reshape", [&] { return sum(mul(reshape(a, {4, 3}), reshape(b, {4, 3}))); }},
        {"concat", [&] { return sum(mul(concat<double>({a, b}, 1), concat<double>({b, a}, 1))); }},
        {"matmul", [&] { return sum(square(matmul(a, transpose(b)))); }},
    };
    for (auto& [name, fn] : cases) {
      auto r = grad_check(fn, {a, b, s, p});
      EXPECT_LT(r.worst_relative_error, kGradTol) << name << " seed " << seed << " tensor " << r.worst_tensor;
    }
  }
}

TEST(GradCheck, StructuralOps) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto a = random_tensor({2, 3, 4}, 50 + seed);
    auto b = random_tensor({2, 4, 5}, 60 + seed);
    auto w = random_tensor({6, 4}, 70 + seed);
    auto bias = random_tensor({6}, 80 + seed);
    auto x = random_tensor({3, 4}, 90 + seed);
    auto img = random_tensor({2, 3, 4, 4}, 110 + seed);
    auto vec = random_tensor({2, 3}, 120 + seed);
    auto cb = random_tensor({3}, 130 + seed);
    auto col = random_tensor({2, 3, 1}, 140 + seed);
    auto fill = random_tensor({1, 3, 4}, 150 + seed);
    auto table = random_tensor({5, 3}, 160 + seed);
    auto map = random_tensor({2, 1, 4, 4}, 170 + seed, 0, 2, false);
    auto target = random_tensor({2, 3, 8, 8}, 180 + seed, -1, 1, false);
    std::vector<std::pair<std::string, std::function<Tensor<double>()>>> cases = {
        {"bmm", [&] { return sum(square(bmm(a, b))); }},
        {"linear", [&] { return sum(square(linear(x, w, bias))); }},
        {"upsample", [&] { return sum(mul(upsample_nearest2x(img), target)); }},
        {"mul_spatial", [&] { return sum(square(mul_spatial(img, map))); }},
        {"add_channel_vector", [&] { return sum(square(add_channel_vector(img, vec))); }},
        {"add_channel_bias", [&] { return sum(square(add_channel_bias(img, cb))); }},
        {"repeat_last", [&] { return sum(mul(repeat_last(col, 4), a)); }},
        {"replace_items", [&] { return sum(square(replace_items(a, fill, {true, false}))); }},
        {"gather_rows", [&] { return sum(square(gather_rows(table, {4, 0, 4, 2}))); }},
    };
    for (auto& [name, fn] : cases) {
      auto r = grad_check(fn, {a, b, w, bias, x, img, vec, cb, col, fill, table});
      EXPECT_LT(r.worst_relative_error, kGradTol) << name << " seed " << seed << " tensor " << r.worst_tensor;
    }
  }
}

TEST(BatchNorm, ConstantChannelGivesBeta) {
  Tensor<double> x({2, 1, 3, 3}, 4.0);
  Tensor<double> gamma({1}, 2.0), beta({1}, 0.5);
  BatchNormStats<double> stats(1);
  auto y = batch_norm2d(x, gamma, beta, stats, true);
  for (double v : y.data()) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(BatchNorm, StandardisedInputPassesThrough) {
  // Zero-mean, unit-variance by construction.
  Tensor<double> x({1, 1, 2, 2}, std::vector<double>{1, -1, 1, -1});
  Tensor<double> gamma({1}, 1.0), beta({1}, 0.0);
  BatchNormStats<double> stats(1);
  auto y = batch_norm2d(x, gamma, beta, stats, true);
  for (Index i = 0; i < 4; ++i) EXPECT_NEAR(y.data()[i], x.data()[i], 1e-5);
  EXPECT_NEAR(stats.running_mean.data()[0], 0.0, 1e-12);
  // unbiased variance 4/3, momentum 0.1 from 1.0
  EXPECT_NEAR(stats.running_var.data()[0], 0.9 + 0.1 * 4.0 / 3.0, 1e-12);
  auto eval = batch_norm2d(x, gamma, beta, stats, false);
  EXPECT_NEAR(eval.data()[0], 1.0 / std::sqrt(stats.running_var.data()[0] + 1e-5), 1e-12);
}

TEST(BatchNorm, MaskedStatisticsIgnoreInvalidLocations) {
  Tensor<double> x({1, 1, 1, 4}, std::vector<double>{1, 3, 100, -100});
  Tensor<double> mask({1, 1, 1, 4}, std::vector<double>{1, 1, 0, 0});
  Tensor<double> gamma({1}, 1.0), beta({1}, 0.0);
  BatchNormStats<double> stats(1);
  auto y = batch_norm2d(x, gamma, beta, stats, true, mask);
  EXPECT_NEAR(y.data()[0], -1.0, 1e-4);
  EXPECT_NEAR(y.data()[1], 1.0, 1e-4);
  EXPECT_EQ(y.data()[2], 0.0);
  EXPECT_EQ(y.data()[3], 0.0);
  EXPECT_NEAR(stats.running_mean.data()[0], 0.2, 1e-12);
}

TEST(GradCheck, Normalisation) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto x = random_tensor({3, 4, 3, 3}, 400 + seed);
    auto gamma = random_tensor({4}, 410 + seed, 0.5, 1.5);
    auto beta = random_tensor({4}, 420 + seed);
    auto target = random_tensor({3, 4, 3, 3}, 430 + seed, -1, 1, false);
    Rng rng(440 + seed);
    std::vector<double> m(27);
    for (auto& v : m) v = rng.bernoulli(0.6) ? 1.0 : 0.0;
    m[0] = m[1] = 1.0;
    Tensor<double> mask({3, 1, 3, 3}, m);
    BatchNormStats<double> stats(4);
    for (double& v : stats.running_var.mutable_data()) v = 0.7;
    std::vector<std::pair<std::string, std::function<Tensor<double>()>>> cases = {
        {"bn_train", [&] { return sum(mul(batch_norm2d(x, gamma, beta, stats, true), target)); }},
        {"bn_train_masked", [&] { return sum(mul(batch_norm2d(x, gamma, beta, stats, true, mask), target)); }},
        {"bn_eval_masked", [&] { return sum(mul(batch_norm2d(x, gamma, beta, stats, false, mask), target)); }},
        {"group_norm", [&] { return sum(mul(group_norm(x, Index{2}, gamma, beta), target)); }},
    };
    for (auto& [name, fn] : cases) {
      auto r = grad_check(fn, {x, gamma, beta}, {"x", "gamma", "beta"});
      EXPECT_LT(r.worst_relative_error, kGradTol) << name << " seed " << seed << " tensor " << r.worst_tensor;
    }
  }
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  Tensor<double> p({3}, std::vector<double>{1, -2, 3}, true);
  Adam<double> opt({p}, {.lr = 0.1});
  p.mutable_grad();  // zero-filled
  opt.step();
  EXPECT_EQ(p.values(), (std::vector<double>{1, -2, 3}));
  EXPECT_EQ(opt.steps(), 1);
}

TEST(Adam, FirstStepIsSignLike) {
  // m_hat = g, v_hat = g^2 after bias correction, so the step is -lr g/(|g|+eps).
  Tensor<double> p({2}, std::vector<double>{0, 0}, true);
  Adam<double> opt({p}, {.lr = 0.01});
  auto g = p.mutable_grad();
  g[0] = 0.3;
  g[1] = -50.0;
  opt.step();
  EXPECT_NEAR(p.data()[0], -0.01 * 0.3 / (0.3 + 1e-8), 1e-15);
  EXPECT_NEAR(p.data()[1], 0.01 * 50.0 / (50.0 + 1e-8), 1e-15);
}

TEST(Adam, ConstantGradientDescendsConvexQuadratic) {
  // loss = 0.5 (p - 3)^2 starting at p = 0; the constant gradient is that at p = 0.
  Tensor<double> p({1}, std::vector<double>{0.0}, true);
  Adam<double> opt({p}, {.lr = 0.01});
  auto loss = [&] { return 0.5 * (p.item() - 3.0) * (p.item() - 3.0); };
  double prev = loss();
  for (int i = 0; i < 100; ++i) {
    p.mutable_grad()[0] = -3.0;
    opt.step();
    const double cur = loss();
    EXPECT_LT(cur, prev);
    prev = cur;
  }
  EXPECT_EQ(opt.steps(), 100);
}

TEST(Autodiff, DiamondGraphVisitsEachNodeOnce) {
  auto x = random_tensor({4}, 1);
  auto y = mul(x, x);
  auto z = add(y, y);
  auto loss = sum(z);
  loss.backward();
  // x, y, z, loss
  EXPECT_EQ(detail::backward_stats().nodes_visited, 4u);
  for (Index i = 0; i < 4; ++i) EXPECT_NEAR(x.grad()[i], 4.0 * x.data()[i], 1e-12);
}

TEST(Autodiff, NoGradientLeakage) {
  auto a = random_tensor({3, 3}, 2);
  auto c = random_tensor({3, 3}, 3, -1, 1, false);
  sum(mul(matmul(a, c), c)).backward();
  EXPECT_TRUE(a.has_grad());
  EXPECT_FALSE(c.has_grad());
  {
    NoGradGuard guard;
    auto y = mul(a, a);
    EXPECT_FALSE(y.requires_grad());
  }
}

TEST(Autodiff, DeterministicForwardAndBackward) {
  auto run = [] {
    Rng rng(77);
    std::vector<float> xv(2 * 3 * 8 * 8), wv(5 * 3 * 3 * 3);
    for (auto& v : xv) v = static_cast<float>(rng.normal());
    for (auto& v : wv) v = static_cast<float>(rng.normal());
    Tensor<float> x({2, 3, 8, 8}, xv, true);
    Tensor<float> w({5, 3, 3, 3}, wv, true);
    auto y = mean(square(relu(conv2d(x, w, Tensor<float>(), 2, 1))));
    y.backward();
    return std::make_tuple(y.item(), std::vector<float>(x.grad().begin(), x.grad().end()),
                           std::vector<float>(w.grad().begin(), w.grad().end()));
  };
  EXPECT_EQ(run(), run());
}

TEST(Autodiff, GraphReleasedAfterBackward) {
  auto x = random_tensor({3}, 4);
  auto y = mul(x, x);
  auto loss = sum(y);
  loss.backward();
  EXPECT_TRUE(loss.node()->inputs.empty());
  EXPECT_TRUE(y.node()->inputs.empty());
}
