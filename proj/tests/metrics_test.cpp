#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "support/tempdir.hpp"
#include "texrect/metrics.hpp"
#include "texrect/textures.hpp"

using namespace texrect;
using texrect::testing::TempDir;

namespace {

Image random_image(Index h, Index w, std::uint64_t seed) {
  Rng rng(seed);
  Image img(Shape{3, h, w}, 0.0f);
  for (auto& v : img.mutable_data()) v = static_cast<float>(rng.uniform());
  return img;
}

Image checkerboard(Index n, Index cell, Index shift = 0) {
  Image img(Shape{3, n, n}, 0.0f);
  auto d = img.mutable_data();
  for (Index c = 0; c < 3; ++c)
    for (Index y = 0; y < n; ++y)
      for (Index x = 0; x < n; ++x) d[(c * n + y) * n + x] = (((x + shift) / cell + y / cell) % 2) ? 1.0f : 0.0f;
  return img;
}

// Separable-filter SSIM map: blur each statistic with the 1-D window along
// rows then columns, keep the fully-inside region, average.
double ssim_oracle(const Image& a, const Image& b) {
  const Index c = a.dim(0), h = a.dim(1), w = a.dim(2), k = 11, r = 5;
  std::vector<double> g(k);
  double s = 0;
  for (Index i = 0; i < k; ++i) s += g[i] = std::exp(-double((i - r) * (i - r)) / (2 * 1.5 * 1.5));
  for (auto& v : g) v /= s;
  auto blur = [&](const std::vector<double>& m) {
    std::vector<double> rows((h) * (w - k + 1)), out((h - k + 1) * (w - k + 1));
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x + k <= w; ++x) {
        double acc = 0;
        for (Index j = 0; j < k; ++j) acc += g[j] * m[y * w + x + j];
        rows[y * (w - k + 1) + x] = acc;
      }
    for (Index y = 0; y + k <= h; ++y)
      for (Index x = 0; x + k <= w; ++x) {
        double acc = 0;
        for (Index i = 0; i < k; ++i) acc += g[i] * rows[(y + i) * (w - k + 1) + x];
        out[y * (w - k + 1) + x] = acc;
      }
    return out;
  };
  double total = 0;
  std::size_t count = 0;
  for (Index ch = 0; ch < c; ++ch) {
    std::vector<double> x(h * w), y(h * w), xx(h * w), yy(h * w), xy(h * w);
    for (Index i = 0; i < h * w; ++i) {
      x[i] = a[ch * h * w + i];
      y[i] = b[ch * h * w + i];
      xx[i] = x[i] * x[i];
      yy[i] = y[i] * y[i];
      xy[i] = x[i] * y[i];
    }
    const auto mx = blur(x), my = blur(y), sxx = blur(xx), syy = blur(yy), sxy = blur(xy);
    for (std::size_t i = 0; i < mx.size(); ++i) {
      const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i], cv = sxy[i] - mx[i] * my[i];
      total += ((2 * mx[i] * my[i] + 1e-4) * (2 * cv + 9e-4)) / ((mx[i] * mx[i] + my[i] * my[i] + 1e-4) * (vx + vy + 9e-4));
      ++count;
    }
  }
  return total / count;
}

}  // namespace

TEST(Ssim, IdentitySymmetryAndConstants) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const Image a = random_image(24, 20, seed), b = random_image(24, 20, seed + 1000);
    EXPECT_NEAR(ssim(a, a), 1.0, 1e-9);
    EXPECT_EQ(ssim(a, b), ssim(b, a));
  }
  EXPECT_NEAR(ssim(Image(Shape{3, 16, 16}, 0.3f), Image(Shape{3, 16, 16}, 0.3f)), 1.0, 1e-12);
  EXPECT_THROW(ssim(random_image(16, 16, 1), random_image(16, 17, 1)), DimensionError);
}

TEST(Ssim, MatchesSeparableOracle) {
  const Image a = random_image(32, 28, 1), b = procedural_texture(32, 28, 2);
  EXPECT_NEAR(ssim(a, b), ssim_oracle(a, b), 1e-9);
  const Image board = checkerboard(32, 4);
  Image inverse(board.shape(), board.values());
  for (auto& v : inverse.mutable_data()) v = 1.0f - v;
  const double s = ssim(board, inverse);
  EXPECT_LT(s, 0.0);
  EXPECT_NEAR(s, ssim_oracle(board, inverse), 1e-9);
}

TEST(Ssim, ChannelPermutationInvariant) {
  const Image a = random_image(20, 20, 3), b = random_image(20, 20, 4);
  auto rotate = [](const Image& x) {
    std::vector<float> v(x.values());
    const std::size_t plane = 400;
    std::rotate(v.begin(), v.begin() + plane, v.end());
    return Image(x.shape(), v);
  };
  EXPECT_NEAR(ssim(rotate(a), rotate(b)), ssim(a, b), 1e-12);
}

TEST(GramDistance, IdentitySymmetryNonNegativity) {
  const GramExtractor ex;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const Image a = random_image(16, 16, seed), b = random_image(16, 16, seed + 500);
    EXPECT_EQ(gram_distance(a, a, ex), 0.0);
    const double d = gram_distance(a, b, ex);
    EXPECT_EQ(d, gram_distance(b, a, ex));
    EXPECT_GE(d, 0.0);
  }
}

TEST(GramDistance, TranslationCloserThanUnrelatedTexture) {
  const GramExtractor ex;
  const Image board = checkerboard(32, 4);
  const double shifted = gram_distance(board, checkerboard(32, 4, 2), ex);
  const double unrelated = gram_distance(board, random_image(32, 32, 9), ex);
  EXPECT_LT(shifted, unrelated);
  EXPECT_GT(gram_distance(board, random_image(32, 32, 9), GramExtractor(1)), 0.0);
}

TEST(EvalReport, AggregatesRecomputableAndRunsDeterministic) {
  TempDir root("eval");
  std::filesystem::create_directories(root / "src");
  for (int i = 0; i < 6; ++i) save_png(root / "src" / ("t" + std::to_string(i) + ".png"), procedural_texture(48, 48, i));
  DatasetConfig cfg;
  cfg.size = 32;
  const DatasetManifest m = build_dataset(root / "src", root / "data", {0.5, 0.17, 0.33}, cfg, 3, "fp");
  BatchRectifier passthrough = [](const std::vector<DatasetSample>& s) {
    std::vector<Image> out;
    for (const auto& x : s) out.push_back(x.degraded);
    return out;
  };
  const EvalReport r1 = evaluate_split(root / "data", m, "test", passthrough, root / "e1", "fp", 1);
  const EvalReport r2 = evaluate_split(root / "data", m, "test", passthrough, root / "e2", "fp", 4);
  EXPECT_EQ(r1.csv(), r2.csv());
  EXPECT_TRUE(std::filesystem::exists(root / "e1" / "grid.png"));
  EXPECT_EQ(read_png_text(root / "e1" / "grid.png").at("texrect.fingerprint"), "fp");

  // Recompute the aggregates from the CSV rows.
  std::ifstream in(root / "e1" / "report.csv");
  std::string line, header;
  std::getline(in, header);
  EXPECT_EQ(header, "id,ssim,gmd");
  double sum = 0;
  int n = 0;
  std::map<std::string, std::string> meta;
  while (std::getline(in, line)) {
    if (line.rfind("# ", 0) == 0) {
      const auto eq = line.find('=');
      meta[line.substr(2, eq - 2)] = line.substr(eq + 1);
      continue;
    }
    sum += std::stod(line.substr(line.find(',') + 1));
    ++n;
  }
  EXPECT_EQ(n, 2);
  EXPECT_NEAR(std::stod(meta.at("ssim_mean")), sum / n, 1e-6);
  EXPECT_EQ(meta.at("fingerprint"), "fp");
  EXPECT_EQ(meta.at("gmd_extractor"), GramExtractor().description());

  std::filesystem::remove(sample_paths(root / "data", m.split("test")[0]).mask);
  const EvalReport r3 = evaluate_split(root / "data", m, "test", passthrough, root / "e3", "fp");
  ASSERT_EQ(r3.missing.size(), 1u);
  EXPECT_EQ(r3.rows.size(), 1u);
  EXPECT_THROW(evaluate_split(root / "data", m, "nope", passthrough, root / "e4", "fp"), ConfigError);
}
