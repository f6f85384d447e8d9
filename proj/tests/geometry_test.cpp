#include <gtest/gtest.h>

#include <cmath>

#include "texrect/geometry.hpp"

using namespace texrect;

namespace {

// Smooth random texture: a handful of low-frequency sinusoids per channel.
Image smooth_texture(Index h, Index w, std::uint64_t seed) {
  Rng rng(seed);
  Image img(Shape{3, h, w}, 0.0f);
  auto d = img.mutable_data();
  for (Index c = 0; c < 3; ++c) {
    for (int k = 0; k < 4; ++k) {
      const double fx = rng.uniform(0.5, 3.0), fy = rng.uniform(0.5, 3.0), ph = rng.uniform(0, 6.28);
      for (Index y = 0; y < h; ++y)
        for (Index x = 0; x < w; ++x)
          d[(c * h + y) * w + x] += static_cast<float>(
              0.125 * std::sin(2 * M_PI * (fx * (x + 0.5) / w + fy * (y + 0.5) / h) + ph));
    }
  }
  for (auto& v : d) v += 0.5f;
  return img;
}

double interior_mae(const Image& a, const Image& b, const Mask& valid, Index border) {
  const Index c = a.dim(0), h = a.dim(1), w = a.dim(2);
  double s = 0;
  Index n = 0;
  for (Index y = border; y < h - border; ++y)
    for (Index x = border; x < w - border; ++x) {
      if (!valid.at(y, x)) continue;
      for (Index k = 0; k < c; ++k) s += std::abs(a.data()[(k * h + y) * w + x] - b.data()[(k * h + y) * w + x]);
      n += c;
    }
  EXPECT_GT(n, 0);
  return s / static_cast<double>(n);
}

}  // namespace

TEST(Homography, ZeroScaleIsIdentity) {
  Rng rng(3);
  EXPECT_TRUE(sample_homography(0.0, rng).is_identity());
}

TEST(Homography, SameSeedSameMatrix) {
  Rng a(11), b(11);
  EXPECT_EQ(sample_homography(0.4, a).matrix(), sample_homography(0.4, b).matrix());
}

TEST(Homography, MapsCornersToDisplacedCorners) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    std::array<Point2, 4> dst;
    const Homography h = sample_homography(0.4, rng, &dst);
    EXPECT_NEAR(h.matrix()(2, 2), 1.0, 0.0);
    for (int i = 0; i < 4; ++i) {
      const Point2 p = h.apply(unit_square_corners()[i]);
      EXPECT_NEAR(p.x, dst[i].x, 1e-6);
      EXPECT_NEAR(p.y, dst[i].y, 1e-6);
      const Point2 src = unit_square_corners()[i];
      EXPECT_LE(std::abs(dst[i].x - src.x), 0.2 + 1e-12);
      EXPECT_LE(std::abs(dst[i].y - src.y), 0.2 + 1e-12);
    }
  }
}

TEST(Homography, CollinearCorrespondencesRejected) {
  const std::array<Point2, 4> dst{{{0, 0}, {0.5, 0.5}, {1, 1}, {0, 1}}};
  EXPECT_THROW(Homography::from_correspondences(unit_square_corners(), dst), GeometryError);
  EXPECT_THROW(sample_homography(1.5, *std::make_unique<Rng>(1)), ConfigError);
}

TEST(Tps, ZeroScaleIsIdentity) {
  Rng rng(5);
  const TpsWarp t = sample_tps(0.0, 4, rng);
  EXPECT_EQ(t.weights().cwiseAbs().maxCoeff(), 0.0);
  Eigen::Matrix<double, 2, 3> id;
  id << 0, 1, 0, 0, 0, 1;
  EXPECT_EQ(t.affine(), id);
  const Point2 p = t.apply({0.37, 0.81});
  EXPECT_DOUBLE_EQ(p.x, 0.37);
  EXPECT_DOUBLE_EQ(p.y, 0.81);
}

TEST(Tps, InterpolatesControlPoints) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    const TpsWarp t = sample_tps(0.3, 4, rng);
    ASSERT_EQ(t.sources().size(), 16u);
    for (std::size_t i = 0; i < t.sources().size(); ++i) {
      const Point2 p = t.apply(t.sources()[i]);
      EXPECT_NEAR(p.x, t.targets()[i].x, 1e-6);
      EXPECT_NEAR(p.y, t.targets()[i].y, 1e-6);
    }
  }
}

TEST(Tps, MidpointOfOpposedDisplacementsStaysInHull) {
  std::vector<Point2> src = tps_lattice(3), dst = src;
  // Centre point and its right neighbour pushed apart horizontally.
  const double d = 0.08;
  dst[4].x += d;
  dst[5].x -= d;
  const TpsWarp t = TpsWarp::fit(src, dst);
  for (int k = 0; k <= 10; ++k) {
    const double s = k / 10.0;
    const Point2 p{src[4].x + s * (src[5].x - src[4].x), src[4].y};
    const Point2 q = t.apply(p);
    EXPECT_LE(q.x - p.x, d + 1e-9);
    EXPECT_GE(q.x - p.x, -d - 1e-9);
  }
  const Point2 mid{0.75, 0.5};
  EXPECT_NEAR(t.apply(mid).y, 0.5, 1e-9);
}

TEST(Tps, SingularSystemRejected) {
  const std::vector<Point2> line{{0, 0}, {0.5, 0.5}, {1, 1}, {0.25, 0.25}};
  EXPECT_THROW(TpsWarp::fit(line, line), GeometryError);
  EXPECT_THROW(sample_tps(0.1, 1, *std::make_unique<Rng>(1)), ConfigError);
}

TEST(Warp, IdentityIsExactFixedPoint) {
  const Image img = smooth_texture(24, 32, 1);
  const auto r = warp_image(img, Homography());
  EXPECT_EQ(r.image.values(), img.values());
  EXPECT_EQ(r.validity.valid_count(), 24 * 32);
  const auto t = warp_image(img, TpsWarp());
  EXPECT_EQ(t.image.values(), img.values());
}

TEST(Warp, HalfTranslationInvalidatesRightHalf) {
  const Index w = 64, h = 16;
  const Image img = smooth_texture(h, w, 2);
  const auto r = warp_image(img, Homography::translation(0.5, 0.0));
  // Pixel centre (x+0.5)/w + 0.5 <= 1  <=>  x <= w/2 - 0.5.
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      EXPECT_EQ(r.validity.at(y, x), x < w / 2 ? 1 : 0) << x;
      if (x >= w / 2) {
        for (Index c = 0; c < 3; ++c) EXPECT_EQ(r.image.data()[(c * h + y) * w + x], 0.0f);
      }
    }
}

TEST(Warp, InverseRoundTripRecoversInterior) {
  const Image img = smooth_texture(64, 64, 3);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    const Homography h = sample_homography(0.4, rng);
    const auto fwd = warp_image(img, h);
    const auto back = warp_image(fwd.image, h.inverse());
    const Mask& valid = back.validity;
    // Keep only pixels whose whole bilinear footprint was valid after the first warp.
    Mask strict(64, 64, 0);
    for (Index y = 0; y < 64; ++y)
      for (Index x = 0; x < 64; ++x) {
        const Point2 q = h.inverse().apply({(x + 0.5) / 64, (y + 0.5) / 64});
        const Index sx = static_cast<Index>(std::floor(q.x * 64 - 0.5)), sy = static_cast<Index>(std::floor(q.y * 64 - 0.5));
        bool ok = valid.at(y, x) && sx >= 0 && sy >= 0 && sx + 1 < 64 && sy + 1 < 64;
        for (Index dy = 0; ok && dy < 2; ++dy)
          for (Index dx = 0; ok && dx < 2; ++dx) ok = fwd.validity.at(sy + dy, sx + dx);
        strict.at(y, x) = ok;
      }
    EXPECT_LT(interior_mae(back.image, img, strict, 2), 2e-2);
  }
}

TEST(Warp, CompositionMatchesSequentialWarps) {
  const Image img = smooth_texture(64, 64, 4);
  Rng rng(9);
  const Homography h1 = sample_homography(0.3, rng);
  const Homography h2 = sample_homography(0.3, rng);
  const auto seq = warp_image(warp_image(img, h1).image, h2);
  // out(p) = warped1(h2(p)) = img(h1(h2(p))).
  const auto once = warp_image(img, compose(h1, h2));
  const Mask both = seq.validity.intersect(once.validity);
  EXPECT_LT(interior_mae(seq.image, once.image, both, 4), 2e-2);
}

TEST(Warp, ValidityMonotoneInTranslation) {
  const Image img = smooth_texture(32, 32, 5);
  Index prev = 32 * 32;
  for (int k = 0; k <= 20; ++k) {
    const double t = k / 20.0;
    const Index n = warp_image(img, Homography::translation(t, 0.5 * t)).validity.valid_count();
    EXPECT_LE(n, prev);
    prev = n;
  }
  EXPECT_EQ(prev, 0);
}

TEST(Warp, MaskValuesBinaryAndZeroOutsideValidity) {
  const Image img = smooth_texture(48, 48, 6);
  Rng rng(4);
  HomographyThenTps w{sample_homography(0.5, rng), sample_tps(0.3, 4, rng)};
  const auto r = warp_image(img, w);
  Index n = 0;
  for (Index i = 0; i < 48 * 48; ++i) {
    ASSERT_LE(r.validity.bits[i], 1);
    if (!r.validity.bits[i]) {
      ++n;
      for (Index c = 0; c < 3; ++c) EXPECT_EQ(r.image.data()[c * 48 * 48 + i], 0.0f);
    }
  }
  EXPECT_GT(n, 0);
}
