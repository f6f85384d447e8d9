#include <gtest/gtest.h>

#include <cmath>

#include "support/gradcheck.hpp"
#include "texrect/latent_transformer.hpp"

using namespace texrect;
using texrect::testing::grad_check;
using texrect::testing::random_tensor;

namespace {

Tensor<double> random_mask(Shape shape, std::uint64_t seed, double p_valid) {
  Rng rng(seed);
  std::vector<double> v(static_cast<std::size_t>(numel_of(shape)));
  for (auto& x : v) x = rng.bernoulli(p_valid) ? 1.0 : 0.0;
  return Tensor<double>(std::move(shape), std::move(v));
}

// Direct evaluation of the partial-convolution formula, one output at a time.
std::vector<double> partial_conv_oracle(const Tensor<double>& x, const Tensor<double>& m, const Tensor<double>& w,
                                        const Tensor<double>& b, Index stride, std::vector<double>* new_mask) {
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3), o = w.dim(0), k = w.dim(2), pad = k / 2;
  const Index oh = (h + 2 * pad - k) / stride + 1, ow = (wd + 2 * pad - k) / stride + 1;
  std::vector<double> out(static_cast<std::size_t>(n * o * oh * ow), 0.0);
  new_mask->assign(static_cast<std::size_t>(n * oh * ow), 0.0);
  for (Index bi = 0; bi < n; ++bi)
    for (Index oy = 0; oy < oh; ++oy)
      for (Index ox = 0; ox < ow; ++ox) {
        double msum = 0, ones = 0;
        for (Index ky = 0; ky < k; ++ky)
          for (Index kx = 0; kx < k; ++kx) {
            const Index y = oy * stride - pad + ky, xx = ox * stride - pad + kx;
            if (y < 0 || y >= h || xx < 0 || xx >= wd) continue;
            ones += 1;
            msum += m[(bi * h + y) * wd + xx];
          }
        if (msum == 0) continue;
        (*new_mask)[(bi * oh + oy) * ow + ox] = 1;
        for (Index oc = 0; oc < o; ++oc) {
          double s = 0;
          for (Index ic = 0; ic < c; ++ic)
            for (Index ky = 0; ky < k; ++ky)
              for (Index kx = 0; kx < k; ++kx) {
                const Index y = oy * stride - pad + ky, xx = ox * stride - pad + kx;
                if (y < 0 || y >= h || xx < 0 || xx >= wd) continue;
                s += w[((oc * c + ic) * k + ky) * k + kx] * x[((bi * c + ic) * h + y) * wd + xx] *
                     m[(bi * h + y) * wd + xx];
              }
          out[((bi * o + oc) * oh + oy) * ow + ox] = s * ones / msum + b[oc];
        }
      }
  return out;
}

LatentTransformerConfig micro_config() {
  LatentTransformerConfig cfg;
  cfg.image_size = 16;
  cfg.channel_divisor = 16;
  return cfg;
}

}  // namespace

TEST(PartialConv, AllOnesMaskEqualsStandardConv) {
  const auto x = random_tensor({2, 3, 9, 7}, 1, -1, 1, false);
  const auto w = random_tensor({4, 3, 3, 3}, 2, -1, 1, false);
  const auto b = random_tensor({4}, 3, -1, 1, false);
  for (Index stride : {1, 2}) {
    const auto pf = partial_conv<double>({x, Tensor<double>::ones({2, 1, 9, 7})}, w, b, stride);
    const auto ref = conv2d(x, w, b, stride, 1);
    ASSERT_EQ(pf.features.shape(), ref.shape());
    for (Index i = 0; i < ref.numel(); ++i) EXPECT_NEAR(pf.features[i], ref[i], 1e-12);
    for (double v : pf.mask.data()) EXPECT_EQ(v, 1.0);
  }
}

TEST(PartialConv, EmptyWindowGivesZeroAndInvalid) {
  const auto x = random_tensor({1, 2, 5, 5}, 4, -1, 1, false);
  const auto w = random_tensor({3, 2, 3, 3}, 5, -1, 1, false);
  const auto b = Tensor<double>({3}, 0.7);
  const auto pf = partial_conv<double>({x, Tensor<double>::zeros({1, 1, 5, 5})}, w, b, 1);
  for (double v : pf.features.data()) EXPECT_EQ(v, 0.0);
  for (double v : pf.mask.data()) EXPECT_EQ(v, 0.0);
}

TEST(PartialConv, TwoValidPixelsRenormalised) {
  // Two valid pixels valued 2 and 4; the centre output's window lies fully
  // inside the 3x3 input.
  Tensor<double> x({1, 1, 3, 3}, std::vector<double>{0, 2, 0, 0, 0, 0, 0, 4, 0});
  Tensor<double> m({1, 1, 3, 3}, std::vector<double>{0, 1, 0, 0, 0, 0, 0, 1, 0});
  const auto pf = partial_conv<double>({x, m}, Tensor<double>::ones({1, 1, 3, 3}), Tensor<double>::zeros({1}), 1);
  EXPECT_DOUBLE_EQ(pf.features[4], 27.0);  // (2 + 4) * 9 / 2
}

TEST(PartialConv, MatchesDirectOracleOnRandomMasks) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto x = random_tensor({2, 3, 8, 6}, 10 + seed, -1, 1, false);
    const auto m = random_mask({2, 1, 8, 6}, 20 + seed, 0.3);
    const auto w = random_tensor({4, 3, 3, 3}, 30 + seed, -1, 1, false);
    const auto b = random_tensor({4}, 40 + seed, -1, 1, false);
    for (Index stride : {1, 2}) {
      std::vector<double> oracle_mask;
      const auto oracle = partial_conv_oracle(x, m, w, b, stride, &oracle_mask);
      const auto pf = partial_conv<double>({x, m}, w, b, stride);
      ASSERT_EQ(pf.features.numel(), static_cast<Index>(oracle.size()));
      for (std::size_t i = 0; i < oracle.size(); ++i) EXPECT_NEAR(pf.features[i], oracle[i], 1e-12);
      EXPECT_EQ(pf.mask.values(), oracle_mask);
    }
  }
}

TEST(PartialConv, NonBinaryMaskIsContractViolation) {
  Tensor<double> m({1, 1, 3, 3}, 0.5);
  EXPECT_THROW(partial_conv<double>({Tensor<double>::ones({1, 1, 3, 3}), m}, Tensor<double>::ones({1, 1, 3, 3}),
                                    Tensor<double>(), 1),
               ContractError);
}

TEST(PartialConv, GradientsMatchFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto x = random_tensor({2, 2, 6, 5}, 100 + seed);
    auto w = random_tensor({3, 2, 3, 3}, 200 + seed);
    auto b = random_tensor({3}, 300 + seed);
    const auto m = random_mask({2, 1, 6, 5}, 400 + seed, 0.4);
    const auto probe = random_tensor({2, 3, 3, 3}, 500 + seed, -1, 1, false);
    auto loss = [&] { return sum(mul(partial_conv<double>({x, m}, w, b, 2).features, probe)); };
    const auto r = grad_check(loss, {x, w, b}, {"x", "w", "b"});
    EXPECT_LT(r.worst_relative_error, 1e-4) << r.worst_tensor;
  }
}

TEST(SelfAttentionBlock, IdentityAtInitialisation) {
  Rng rng(1);
  SelfAttention<double> sa(16, rng);
  const auto x = random_tensor({2, 16, 4, 3}, 2, -1, 1, false);
  EXPECT_EQ(sa(x).values(), x.values());
}

TEST(SelfAttentionBlock, RowsSumToOneAndGradientsMatch) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    SelfAttention<double> sa(16, rng);
    sa.gamma.mutable_data()[0] = 0.7;
    auto x = random_tensor({2, 16, 3, 3}, 50 + seed);
    int observed = 0;
    attention_observer<double> = [&](const std::string& site, const Tensor<double>& a) {
      EXPECT_EQ(site, "self_attention");
      const Index len = a.dim(2);
      for (Index r = 0; r < a.numel() / len; ++r) {
        double s = 0;
        for (Index j = 0; j < len; ++j) s += a[r * len + j];
        EXPECT_NEAR(s, 1.0, 1e-12);
      }
      ++observed;
    };
    const auto probe = random_tensor({2, 16, 3, 3}, 70 + seed, -1, 1, false);
    auto loss = [&] { return sum(mul(sa(x), probe)); };
    const auto r = grad_check(loss, {x, sa.query.weight, sa.key.weight, sa.value.weight, sa.out.weight, sa.gamma},
                              {"x", "wq", "wk", "wv", "wo", "gamma"});
    attention_observer<double> = nullptr;
    EXPECT_GT(observed, 0);
    EXPECT_LT(r.worst_relative_error, 1e-4) << r.worst_tensor;
  }
}

TEST(SelfAttentionBlock, IdenticalTokensAttendToSharedValue) {
  Rng rng(3);
  SelfAttention<double> sa(8, rng);
  // Same channel vector at every position: every query attends uniformly and
  // receives the shared value vector W_v x + b_v.
  std::vector<double> col{0.3, -0.2, 0.5, 0.1, -0.7, 0.9, 0.0, 0.4};
  std::vector<double> xv;
  for (double c : col) xv.insert(xv.end(), 6, c);
  const Tensor<double> x({1, 8, 2, 3}, xv);
  const auto v = sa.value(x);
  Tensor<double> q = transpose(reshape(sa.query(x), Shape{1, 1, 6}));
  Tensor<double> k = transpose(reshape(sa.key(x), Shape{1, 1, 6}));
  Tensor<double> vt = transpose(reshape(v, Shape{1, 8, 6}));
  const auto a = scaled_dot_attention(q, k, vt);
  for (Index t = 0; t < 6; ++t)
    for (Index c = 0; c < 8; ++c) EXPECT_NEAR(a[t * 8 + c], vt[c], 1e-12);
}

TEST(LatentTransformerNet, DeskAndFullScaleOutputShapes) {
  NoGradGuard no_grad;
  Rng rng(1);
  LatentTransformer<float> desk(LatentTransformerConfig{}, rng);
  const auto out = desk(Tensor<float>({2, 3, 64, 64}, 0.1f), Tensor<float>::ones({2, 1, 64, 64}), false);
  EXPECT_EQ(out.shape(), (Shape{2, 64, 64}));

  LatentTransformerConfig full;
  full.image_size = 256;
  full.channel_divisor = 1;
  LatentTransformer<float> big(full, rng);
  const auto out2 = big(Tensor<float>({1, 3, 256, 256}, 0.1f), Tensor<float>::ones({1, 1, 256, 256}), false);
  EXPECT_EQ(out2.shape(), (Shape{1, 256, 1024}));
}

TEST(LatentTransformerNet, FeaturesZeroWhereMaskInvalid) {
  NoGradGuard no_grad;
  Rng rng(2);
  LatentTransformer<double> net(micro_config(), rng);
  const auto img = random_tensor({2, 3, 16, 16}, 3, -1, 1, false);
  const auto m = random_mask({2, 1, 16, 16}, 4, 0.02);
  std::vector<Tensor<double>> trace;
  const auto out = net(img, m, true, &trace);
  ASSERT_EQ(trace.size(), 8u);
  const auto& last = trace.back();
  const Index c = out.dim(1), l = out.dim(2);
  for (Index b = 0; b < 2; ++b)
    for (Index p = 0; p < l; ++p)
      if (last[b * l + p] == 0.0) {
        for (Index k = 0; k < c; ++k) EXPECT_EQ(out[(b * c + k) * l + p], 0.0);
      }
  // Valid fraction never shrinks from layer to layer.
  double prev = 0;
  for (const auto& t : trace) {
    double f = 0;
    for (double v : t.data()) f += v;
    f /= static_cast<double>(t.numel());
    EXPECT_GE(f, prev);
    prev = f;
  }
}

TEST(LatentTransformerNet, OcclusionInvarianceInEvalMode) {
  NoGradGuard no_grad;
  Rng rng(5);
  LatentTransformer<float> net(LatentTransformerConfig{}, rng);
  const auto m = cast<float>(random_mask({1, 1, 64, 64}, 6, 0.5));
  auto img = cast<float>(random_tensor({1, 3, 64, 64}, 7, -1, 1, false));
  const auto ref = net(img, m, false);
  for (std::uint64_t trial = 0; trial < 5; ++trial) {
    Rng noise(trial);
    auto changed = img.detach();
    auto d = changed.mutable_data();
    for (Index c = 0; c < 3; ++c)
      for (Index p = 0; p < 64 * 64; ++p)
        if (m[p] == 0.0f) d[c * 64 * 64 + p] = static_cast<float>(noise.uniform(-1, 1));
    EXPECT_EQ(net(changed, m, false).values(), ref.values());
  }
}

TEST(LatentTransformerNet, CentredSquareSaturatesFinalMask) {
  NoGradGuard no_grad;
  Rng rng(8);
  LatentTransformer<float> net(LatentTransformerConfig{}, rng);
  Tensor<float> m({1, 1, 64, 64}, 0.0f);
  for (Index y = 24; y < 40; ++y)
    for (Index x = 24; x < 40; ++x) m.mutable_data()[y * 64 + x] = 1.0f;
  // Oracle: iterate the window-OR rule alone.
  std::vector<std::uint8_t> cur(m.data().begin(), m.data().end());
  Index side = 64;
  for (Index stride : LatentTransformerConfig::kStrides) {
    const Index out = (side + 2 - 3) / stride + 1;
    std::vector<std::uint8_t> next(static_cast<std::size_t>(out * out), 0);
    for (Index y = 0; y < out; ++y)
      for (Index x = 0; x < out; ++x)
        for (Index dy = -1; dy <= 1; ++dy)
          for (Index dx = -1; dx <= 1; ++dx) {
            const Index sy = y * stride + dy, sx = x * stride + dx;
            if (sy >= 0 && sy < side && sx >= 0 && sx < side && cur[sy * side + sx]) next[y * out + x] = 1;
          }
    cur = std::move(next);
    side = out;
  }
  EXPECT_EQ(side, 8);
  for (auto v : cur) EXPECT_EQ(v, 1);
  std::vector<Tensor<float>> trace;
  net(Tensor<float>({1, 3, 64, 64}, 0.2f), m, false, &trace);
  for (float v : trace.back().data()) EXPECT_EQ(v, 1.0f);
}

TEST(LatentTransformerNet, GradientFlowsFromSingleValidPixel) {
  Rng rng(9);
  LatentTransformer<float> net(LatentTransformerConfig{}, rng);
  Tensor<float> m({1, 1, 64, 64}, 0.0f);
  m.mutable_data()[10 * 64 + 33] = 1.0f;
  const auto img = cast<float>(random_tensor({1, 3, 64, 64}, 10, -1, 1, false));
  const auto out = net(img, m, true);
  mean(square(out)).backward();
  bool any = false;
  for (const auto& p : net.parameters().trainable())
    for (float g : p.grad()) any = any || g != 0.0f;
  EXPECT_TRUE(any);
}

TEST(LatentTransformerNet, FullyOccludedInputRejected) {
  Rng rng(1);
  LatentTransformer<float> net(LatentTransformerConfig{}, rng);
  try {
    net(Tensor<float>({1, 3, 64, 64}, 0.0f), Tensor<float>({1, 1, 64, 64}, 0.0f), false);
    FAIL();
  } catch (const ContractError& e) {
    EXPECT_NE(std::string(e.what()).find("no valid pixels"), std::string::npos);
  }
}

TEST(LatentTransformerNet, AblationVariants) {
  Rng rng(1);
  LatentTransformerConfig pce;
  pce.self_attention = false;
  LatentTransformerConfig full;
  const auto n_full = LatentTransformer<float>(full, rng).parameters().parameter_count();
  const auto n_pce = LatentTransformer<float>(pce, rng).parameters().parameter_count();
  EXPECT_LT(n_pce, n_full);

  // Standard convolutions: hidden pixels are zeroed at the input but the
  // mask no longer gates the features.
  NoGradGuard no_grad;
  LatentTransformerConfig sae;
  sae.partial = false;
  LatentTransformer<float> net(sae, rng);
  std::vector<Tensor<float>> trace;
  const auto m = cast<float>(random_mask({1, 1, 64, 64}, 3, 0.5));
  net(Tensor<float>({1, 3, 64, 64}, 0.3f), m, false, &trace);
  for (float v : trace.back().data()) EXPECT_EQ(v, 1.0f);
}

TEST(LatentTransformerNet, MicroNetworkGradientsMatchFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    LatentTransformer<double> net(micro_config(), rng);
    net.attention().gamma.node()->value[0] = 0.5;
    auto img = random_tensor({2, 3, 16, 16}, 20 + seed);
    const auto m = random_mask({2, 1, 16, 16}, 30 + seed, 0.6);
    const auto probe = random_tensor({2, 16, 4}, 40 + seed, -1, 1, false);
    const auto& ls = net.layers();
    auto loss = [&] { return sum(mul(net(img, m, true), probe)); };
    const auto r = grad_check(loss,
                              {img, ls[0].conv.weight, ls[3].conv.weight, ls[5].gamma, ls[7].conv.weight,
                               net.attention().query.weight, net.attention().gamma},
                              {"image", "conv0.w", "conv3.w", "bn5.gamma", "conv7.w", "attn.wq", "attn.gamma"});
    EXPECT_LT(r.worst_relative_error, 1e-4) << r.worst_tensor << " seed " << seed;
  }
}
