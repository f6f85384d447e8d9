#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "texrect/image.hpp"
#include "texrect/rng.hpp"

namespace texrect {

/// Seeded procedural textures (stripes, checks, bricks, dots, value noise)
/// standing in for photographed planar textures in tests and demos.
inline Image procedural_texture(Index h, Index w, std::uint64_t seed) {
  Rng rng(seed);
  const int kind = static_cast<int>(rng.uniform_int(0, 4));
  double c0[3], c1[3];
  for (int c = 0; c < 3; ++c) {
    c0[c] = rng.uniform(0.05, 0.5);
    c1[c] = rng.uniform(0.5, 0.95);
  }
  const double period = rng.uniform(6.0, 16.0);
  const double angle = rng.uniform(0.0, std::numbers::pi);
  const double ca = std::cos(angle), sa = std::sin(angle);
  // Coarse value-noise lattice for the noise texture and a light overlay.
  const Index g = 9;
  std::vector<double> lattice(static_cast<std::size_t>(g * g));
  for (auto& v : lattice) v = rng.uniform();
  auto noise = [&](double x, double y) {
    const double fx = x / static_cast<double>(w) * (g - 1), fy = y / static_cast<double>(h) * (g - 1);
    const Index ix = std::min<Index>(static_cast<Index>(fx), g - 2), iy = std::min<Index>(static_cast<Index>(fy), g - 2);
    const double ax = fx - ix, ay = fy - iy;
    const double sx = ax * ax * (3 - 2 * ax), sy = ay * ay * (3 - 2 * ay);
    const double a = lattice[iy * g + ix], b = lattice[iy * g + ix + 1];
    const double c = lattice[(iy + 1) * g + ix], d = lattice[(iy + 1) * g + ix + 1];
    return (a * (1 - sx) + b * sx) * (1 - sy) + (c * (1 - sx) + d * sx) * sy;
  };

  Image img(Shape{3, h, w}, 0.0f);
  auto out = img.mutable_data();
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) {
      const double u = x + 0.5, v = y + 0.5;
      const double ru = ca * u + sa * v, rv = -sa * u + ca * v;
      double t = 0.0;
      switch (kind) {
        case 0:  // stripes
          t = 0.5 + 0.5 * std::sin(2 * std::numbers::pi * ru / period);
          break;
        case 1:  // checks
          t = (static_cast<int>(std::floor(ru / period)) + static_cast<int>(std::floor(rv / period))) & 1;
          break;
        case 2: {  // bricks
          const double row = std::floor(v / period);
          const double off = std::fmod(row, 2.0) * period;
          const double bx = std::fmod(u + off, 2 * period), by = std::fmod(v, period);
          t = (bx < 1.5 || by < 1.5) ? 0.0 : 1.0;
          break;
        }
        case 3: {  // dots
          const double cx = std::fmod(ru, period) - period / 2, cy = std::fmod(rv, period) - period / 2;
          const double cxw = cx < -period / 2 ? cx + period : cx, cyw = cy < -period / 2 ? cy + period : cy;
          t = std::hypot(cxw, cyw) < period * 0.3 ? 1.0 : 0.0;
          break;
        }
        default:
          t = noise(u, v);
      }
      t = std::clamp(0.8 * t + 0.2 * noise(u, v), 0.0, 1.0);
      for (int c = 0; c < 3; ++c) out[(c * h + y) * w + x] = static_cast<float>(c0[c] + (c1[c] - c0[c]) * t);
    }
  }
  return img;
}

}  // namespace texrect
