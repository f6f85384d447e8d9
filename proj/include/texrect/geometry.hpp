#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "texrect/image.hpp"
#include "texrect/rng.hpp"

namespace texrect {

/// Point in normalised image coordinates: (0,0) top-left corner, (1,1)
/// bottom-right corner of the image rectangle.
struct Point2 {
  double x = 0.0;
  double y = 0.0;
  bool operator==(const Point2&) const = default;
};

class GeometryError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kGeometryMaxAttempts = 16;

/// Projective map with H(2,2) = 1.
class Homography {
 public:
  Homography() : m_(Eigen::Matrix3d::Identity()) {}

  explicit Homography(const Eigen::Matrix3d& m) {
    if (std::abs(m(2, 2)) < 1e-12) throw GeometryError("homography with H[2][2] = 0 cannot be normalised");
    m_ = m / m(2, 2);
    if (!(std::abs(m_.determinant()) > 1e-9)) throw GeometryError("homography is singular");
  }

  static Homography translation(double dx, double dy) {
    Eigen::Matrix3d m = Eigen::Matrix3d::Identity();
    m(0, 2) = dx;
    m(1, 2) = dy;
    return Homography(m);
  }

  /// Exact four-point fit (direct linear transform with h33 = 1) mapping
  /// src[i] to dst[i].
  static Homography from_correspondences(const std::array<Point2, 4>& src, const std::array<Point2, 4>& dst) {
    if (src == dst) return Homography();
    Eigen::Matrix<double, 8, 8> a;
    Eigen::Matrix<double, 8, 1> b;
    for (int i = 0; i < 4; ++i) {
      const double x = src[i].x, y = src[i].y, u = dst[i].x, v = dst[i].y;
      a.row(2 * i) << x, y, 1, 0, 0, 0, -u * x, -u * y;
      a.row(2 * i + 1) << 0, 0, 0, x, y, 1, -v * x, -v * y;
      b(2 * i) = u;
      b(2 * i + 1) = v;
    }
    Eigen::FullPivLU<Eigen::Matrix<double, 8, 8>> lu(a);
    if (!lu.isInvertible()) throw GeometryError("degenerate homography correspondences");
    const Eigen::Matrix<double, 8, 1> h = lu.solve(b);
    Eigen::Matrix3d m;
    m << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), 1.0;
    return Homography(m);
  }

  /// Returns a non-finite point when the point maps to infinity.
  Point2 apply(Point2 p) const {
    const double w = m_(2, 0) * p.x + m_(2, 1) * p.y + m_(2, 2);
    if (std::abs(w) < 1e-12) {
      return {std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity()};
    }
    return {(m_(0, 0) * p.x + m_(0, 1) * p.y + m_(0, 2)) / w, (m_(1, 0) * p.x + m_(1, 1) * p.y + m_(1, 2)) / w};
  }

  Homography inverse() const { return Homography(m_.inverse()); }

  bool is_identity() const { return m_ == Eigen::Matrix3d::Identity(); }

  const Eigen::Matrix3d& matrix() const { return m_; }

 private:
  Eigen::Matrix3d m_;
};

/// outer ∘ inner: applies `inner` first.
inline Homography compose(const Homography& outer, const Homography& inner) {
  return Homography(outer.matrix() * inner.matrix());
}

namespace detail {

inline double cross(Point2 o, Point2 a, Point2 b) { return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x); }

inline bool any_three_collinear(const std::array<Point2, 4>& q, double tol = 1e-9) {
  for (int i = 0; i < 4; ++i) {
    const Point2 a = q[(i + 1) % 4], b = q[(i + 2) % 4], c = q[(i + 3) % 4];
    if (std::abs(cross(a, b, c)) < tol) return true;
  }
  return false;
}

}  // namespace detail

inline const std::array<Point2, 4>& unit_square_corners() {
  static const std::array<Point2, 4> corners{{{0, 0}, {1, 0}, {1, 1}, {0, 1}}};
  return corners;
}

/// Random perspective map: each unit-square corner moves by an independent
/// offset in [-s/2, s/2] per axis. Always consumes 8 uniforms per attempt.
inline Homography sample_homography(double s_hmg, Rng& rng, std::array<Point2, 4>* displaced = nullptr) {
  if (!(s_hmg >= 0.0 && s_hmg <= 1.0)) throw ConfigError("homography scale must lie in [0,1]");
  const auto& src = unit_square_corners();
  for (int attempt = 0; attempt < kGeometryMaxAttempts; ++attempt) {
    std::array<Point2, 4> dst = src;
    for (auto& p : dst) {
      p.x += s_hmg * (rng.uniform() - 0.5);
      p.y += s_hmg * (rng.uniform() - 0.5);
    }
    if (detail::any_three_collinear(dst)) continue;
    try {
      Homography h = Homography::from_correspondences(src, dst);
      if (displaced) *displaced = dst;
      return h;
    } catch (const GeometryError&) {
    }
  }
  throw GeometryError("could not sample a non-degenerate homography in 16 attempts");
}

/// Thin-plate spline map f(p) = p + a0 + a1 x + a2 y + sum_i w_i U(|p - c_i|)
/// with U(r) = r^2 log r^2, interpolating sources -> targets.
class TpsWarp {
 public:
  TpsWarp() { affine_ << 0, 1, 0, 0, 0, 1; }

  static double radial(double r2) { return r2 <= 0.0 ? 0.0 : r2 * std::log(r2); }

  static TpsWarp fit(std::vector<Point2> sources, std::vector<Point2> targets) {
    if (sources.size() != targets.size() || sources.size() < 3) {
      throw GeometryError("TPS needs at least 3 paired control points");
    }
    const Index n = static_cast<Index>(sources.size());
    Eigen::MatrixXd l = Eigen::MatrixXd::Zero(n + 3, n + 3);
    Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(n + 3, 2);
    for (Index i = 0; i < n; ++i) {
      for (Index j = 0; j < n; ++j) {
        const double dx = sources[i].x - sources[j].x, dy = sources[i].y - sources[j].y;
        l(i, j) = radial(dx * dx + dy * dy);
      }
      l(i, n) = l(n, i) = 1.0;
      l(i, n + 1) = l(n + 1, i) = sources[i].x;
      l(i, n + 2) = l(n + 2, i) = sources[i].y;
      rhs(i, 0) = targets[i].x - sources[i].x;
      rhs(i, 1) = targets[i].y - sources[i].y;
    }
    Eigen::FullPivLU<Eigen::MatrixXd> lu(l);
    if (!lu.isInvertible()) throw GeometryError("singular TPS system");
    const Eigen::MatrixXd sol = lu.solve(rhs);
    TpsWarp w;
    w.sources_ = std::move(sources);
    w.targets_ = std::move(targets);
    w.weights_ = sol.topRows(n);
    for (int d = 0; d < 2; ++d) {
      w.affine_(d, 0) = sol(n, d);
      w.affine_(d, 1) = sol(n + 1, d) + (d == 0 ? 1.0 : 0.0);
      w.affine_(d, 2) = sol(n + 2, d) + (d == 1 ? 1.0 : 0.0);
    }
    return w;
  }

  Point2 apply(Point2 p) const {
    double x = affine_(0, 0) + affine_(0, 1) * p.x + affine_(0, 2) * p.y;
    double y = affine_(1, 0) + affine_(1, 1) * p.x + affine_(1, 2) * p.y;
    for (std::size_t i = 0; i < sources_.size(); ++i) {
      const double dx = p.x - sources_[i].x, dy = p.y - sources_[i].y;
      const double u = radial(dx * dx + dy * dy);
      x += weights_(static_cast<Index>(i), 0) * u;
      y += weights_(static_cast<Index>(i), 1) * u;
    }
    return {x, y};
  }

  const std::vector<Point2>& sources() const { return sources_; }
  const std::vector<Point2>& targets() const { return targets_; }
  /// Rows are output x and y; columns are (constant, x, y).
  const Eigen::Matrix<double, 2, 3>& affine() const { return affine_; }
  /// n x 2 radial weights.
  const Eigen::MatrixXd& weights() const { return weights_; }

 private:
  std::vector<Point2> sources_;
  std::vector<Point2> targets_;
  Eigen::Matrix<double, 2, 3> affine_;
  Eigen::MatrixXd weights_;
};

inline std::vector<Point2> tps_lattice(int grid) {
  std::vector<Point2> pts;
  for (int i = 0; i < grid; ++i)
    for (int j = 0; j < grid; ++j) pts.push_back({j / double(grid - 1), i / double(grid - 1)});
  return pts;
}

/// Random TPS over a grid x grid lattice spanning the unit square; each
/// target is its source moved by a uniform offset in [-s/2, s/2] per axis.
inline TpsWarp sample_tps(double s_tps, int grid, Rng& rng) {
  if (grid < 2) throw ConfigError("TPS grid must be at least 2");
  if (!(s_tps >= 0.0)) throw ConfigError("TPS scale must be non-negative");
  const std::vector<Point2> src = tps_lattice(grid);
  for (int attempt = 0; attempt < kGeometryMaxAttempts; ++attempt) {
    std::vector<Point2> dst = src;
    for (auto& p : dst) {
      p.x += s_tps * (rng.uniform() - 0.5);
      p.y += s_tps * (rng.uniform() - 0.5);
    }
    try {
      return TpsWarp::fit(src, dst);
    } catch (const GeometryError&) {
    }
  }
  throw GeometryError("could not sample a non-singular TPS in 16 attempts");
}

/// Homography applied after the TPS in coordinate space: out(p) = in(H(tps(p))).
/// Warping an image by this equals warping by H and then by the TPS.
struct HomographyThenTps {
  Homography homography;
  TpsWarp tps;
  Point2 apply(Point2 p) const { return homography.apply(tps.apply(p)); }
};

struct WarpResult {
  Image image;
  Mask validity;
};

/// Inverse warp with bilinear sampling: output pixel p takes the input value
/// at transform.apply(p). Source points outside the unit square are invalid
/// and set to 0.
template <typename Transform>
WarpResult warp_image(const Image& img, const Transform& transform, Index out_h, Index out_w) {
  const Index c = img.dim(0), in_h = img.dim(1), in_w = img.dim(2);
  if (in_h < 1 || in_w < 1 || c < 1) throw DimensionError("warp_image: empty image");
  WarpResult r{Image(Shape{c, out_h, out_w}, 0.0f), Mask(out_h, out_w, 0)};
  auto dst = r.image.mutable_data();
  const auto src = img.data();
  auto snap = [](double v) {
    const double k = std::round(v);
    return std::abs(v - k) < 1e-9 ? k : v;
  };
  for (Index y = 0; y < out_h; ++y) {
    for (Index x = 0; x < out_w; ++x) {
      const Point2 p{(static_cast<double>(x) + 0.5) / static_cast<double>(out_w),
                     (static_cast<double>(y) + 0.5) / static_cast<double>(out_h)};
      const Point2 q = transform.apply(p);
      if (!(q.x >= 0.0 && q.x <= 1.0 && q.y >= 0.0 && q.y <= 1.0)) continue;
      r.validity.at(y, x) = 1;
      const double sx = snap(q.x * static_cast<double>(in_w) - 0.5);
      const double sy = snap(q.y * static_cast<double>(in_h) - 0.5);
      const double fx = std::floor(sx), fy = std::floor(sy);
      const double ax = sx - fx, ay = sy - fy;
      const Index x0 = std::clamp<Index>(static_cast<Index>(fx), 0, in_w - 1);
      const Index x1 = std::clamp<Index>(static_cast<Index>(fx) + 1, 0, in_w - 1);
      const Index y0 = std::clamp<Index>(static_cast<Index>(fy), 0, in_h - 1);
      const Index y1 = std::clamp<Index>(static_cast<Index>(fy) + 1, 0, in_h - 1);
      for (Index k = 0; k < c; ++k) {
        const float* plane = src.data() + k * in_h * in_w;
        double v;
        if (ax == 0.0 && ay == 0.0) {
          v = plane[y0 * in_w + x0];
        } else {
          v = (1 - ay) * ((1 - ax) * plane[y0 * in_w + x0] + ax * plane[y0 * in_w + x1]) +
              ay * ((1 - ax) * plane[y1 * in_w + x0] + ax * plane[y1 * in_w + x1]);
        }
        dst[(k * out_h + y) * out_w + x] = static_cast<float>(v);
      }
    }
  }
  return r;
}

template <typename Transform>
WarpResult warp_image(const Image& img, const Transform& transform) {
  return warp_image(img, transform, img.dim(1), img.dim(2));
}

}  // namespace texrect
