#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "texrect/degradation.hpp"
#include "texrect/image.hpp"
#include "texrect/module.hpp"
#include "texrect/parallel.hpp"

namespace texrect {

/// Normalised 1-D Gaussian taps of odd length `size`.
inline std::vector<double> gaussian_taps(int size, double sigma) {
  std::vector<double> g(static_cast<std::size_t>(size));
  const int r = size / 2;
  double total = 0;
  for (int i = 0; i < size; ++i) total += g[i] = std::exp(-0.5 * (i - r) * (i - r) / (sigma * sigma));
  for (auto& v : g) v /= total;
  return g;
}

/// Mean SSIM over all fully-inside 11x11 Gaussian (sigma 1.5) windows and
/// channels, for images in [0,1] (L = 1). Images smaller than the window use
/// the largest odd window that fits.
inline double ssim(const Image& a, const Image& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("ssim: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
  }
  const Index c = a.dim(0), h = a.dim(1), w = a.dim(2);
  int win = static_cast<int>(std::min<Index>({11, h, w}));
  if (win % 2 == 0) --win;
  const std::vector<double> g = gaussian_taps(win, 1.5);
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  const Index oh = h - win + 1, ow = w - win + 1;
  double total = 0;
  for (Index ch = 0; ch < c; ++ch) {
    const float* pa = a.data().data() + ch * h * w;
    const float* pb = b.data().data() + ch * h * w;
    for (Index y = 0; y < oh; ++y)
      for (Index x = 0; x < ow; ++x) {
        double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
        for (int i = 0; i < win; ++i)
          for (int j = 0; j < win; ++j) {
            const double wt = g[i] * g[j];
            const double va = pa[(y + i) * w + x + j], vb = pb[(y + i) * w + x + j];
            ma += wt * va;
            mb += wt * vb;
            saa += wt * va * va;
            sbb += wt * vb * vb;
            sab += wt * (va * vb);
          }
        const double var_a = saa - ma * ma, var_b = sbb - mb * mb, cov = sab - ma * mb;
        total += ((2 * (ma * mb) + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
      }
  }
  return total / static_cast<double>(c * oh * ow);
}

/// Fixed, seeded, randomly initialised 4-layer conv network whose activations
/// feed the Gram-matrix distance.
class GramExtractor {
 public:
  static constexpr std::uint64_t kDefaultSeed = 0x6A3D5EED;
  static constexpr std::array<Index, 4> kWidths{16, 32, 32, 64};
  static constexpr std::array<Index, 4> kStrides{1, 2, 1, 2};

  explicit GramExtractor(std::uint64_t seed = kDefaultSeed) : seed_(seed) {
    Rng rng(seed);
    Index in = 3;
    for (std::size_t i = 0; i < kWidths.size(); ++i) {
      const double bound = std::sqrt(6.0 / static_cast<double>(in * 9));
      layers_.push_back({uniform_param<float>({kWidths[i], in, 3, 3}, bound, rng).detach(),
                         Tensor<float>(Shape{kWidths[i]}, 0.0f)});
      in = kWidths[i];
    }
  }

  std::uint64_t seed() const { return seed_; }
  std::string description() const { return "random-conv4 seed=" + std::to_string(seed_); }

  /// Gram matrices (C x C, normalised by C*H*W) of each layer's ReLU output.
  std::vector<std::vector<double>> grams(const Image& img) const {
    NoGradGuard no_grad;
    const Index h = img.dim(1), w = img.dim(2);
    Tensor<float> x = add_scalar(reshape(img, Shape{1, img.dim(0), h, w}), -0.5f);
    std::vector<std::vector<double>> out;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      x = relu(conv2d(x, layers_[i].first, layers_[i].second, kStrides[i], 1));
      const Index c = x.dim(1), hw = x.dim(2) * x.dim(3);
      const auto v = x.data();
      std::vector<double> g(static_cast<std::size_t>(c * c), 0.0);
      for (Index p = 0; p < c; ++p)
        for (Index q = p; q < c; ++q) {
          double s = 0;
          for (Index k = 0; k < hw; ++k) s += double(v[p * hw + k]) * v[q * hw + k];
          g[p * c + q] = g[q * c + p] = s / static_cast<double>(c * hw);
        }
      out.push_back(std::move(g));
    }
    return out;
  }

 private:
  std::uint64_t seed_;
  std::vector<std::pair<Tensor<float>, Tensor<float>>> layers_;
};

/// Sum over layers of the Frobenius norm of the Gram-matrix difference.
inline double gram_distance(const Image& a, const Image& b, const GramExtractor& extractor) {
  if (a.shape() != b.shape()) {
    throw DimensionError("gram_distance: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " differ");
  }
  const auto ga = extractor.grams(a), gb = extractor.grams(b);
  double d = 0;
  for (std::size_t l = 0; l < ga.size(); ++l) {
    double s = 0;
    for (std::size_t i = 0; i < ga[l].size(); ++i) s += (ga[l][i] - gb[l][i]) * (ga[l][i] - gb[l][i]);
    d += std::sqrt(s);
  }
  return d;
}

struct EvalRow {
  std::string id;
  double ssim = 0, gmd = 0;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  std::vector<std::string> missing;
  std::string fingerprint;
  std::string extractor;

  static std::pair<double, double> mean_std(const std::vector<double>& v) {
    if (v.empty()) return {0, 0};
    double s = 0;
    for (double x : v) s += x;
    const double m = s / static_cast<double>(v.size());
    double q = 0;
    for (double x : v) q += (x - m) * (x - m);
    return {m, std::sqrt(q / static_cast<double>(v.size()))};
  }
  std::pair<double, double> ssim_stats() const {
    std::vector<double> v;
    for (const auto& r : rows) v.push_back(r.ssim);
    return mean_std(v);
  }
  std::pair<double, double> gmd_stats() const {
    std::vector<double> v;
    for (const auto& r : rows) v.push_back(r.gmd);
    return mean_std(v);
  }

  /// `id,ssim,gmd` rows followed by a `#`-prefixed aggregate block.
  std::string csv() const {
    std::string out = "id,ssim,gmd\n";
    char buf[256];
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof(buf), "%s,%.6f,%.6f\n", r.id.c_str(), r.ssim, r.gmd);
      out += buf;
    }
    const auto [sm, ss] = ssim_stats();
    const auto [gm, gs] = gmd_stats();
    std::snprintf(buf, sizeof(buf), "# count=%zu\n# ssim_mean=%.6f\n# ssim_std=%.6f\n# gmd_mean=%.6f\n# gmd_std=%.6f\n",
                  rows.size(), sm, ss, gm, gs);
    out += buf;
    for (const auto& m : missing) out += "# missing=" + m + "\n";
    out += "# gmd_extractor=" + extractor + "\n";
    out += "# fingerprint=" + fingerprint + "\n";
    return out;
  }
};

/// Maps one batch of degraded samples to rectified images in [0,1].
using BatchRectifier = std::function<std::vector<Image>(const std::vector<DatasetSample>&)>;

/// Side-by-side rows of (input | output | target) tiles.
inline Image comparison_grid(const std::vector<std::array<Image, 3>>& rows) {
  if (rows.empty()) throw ConfigError("comparison grid needs at least one row");
  const Index h = rows.front()[0].dim(1), w = rows.front()[0].dim(2);
  Image grid(Shape{3, h * static_cast<Index>(rows.size()), 3 * w}, 0.0f);
  auto g = grid.mutable_data();
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (Index k = 0; k < 3; ++k) {
      const Image& tile = rows[r][k];
      if (tile.dim(1) != h || tile.dim(2) != w) throw DimensionError("comparison grid: tile size mismatch");
      for (Index c = 0; c < 3; ++c)
        for (Index y = 0; y < h; ++y)
          for (Index x = 0; x < w; ++x)
            g[(c * h * static_cast<Index>(rows.size()) + static_cast<Index>(r) * h + y) * 3 * w + k * w + x] =
                tile[(c * h + y) * w + x];
    }
  return grid;
}

/// Rectifies every sample of `split` in `batch`-sized groups, scores the
/// outputs against the planar targets, and writes `report.csv` and
/// `grid.png` into `out_dir`. Unreadable samples are listed as missing.
inline EvalReport evaluate_split(const std::filesystem::path& data_dir, const DatasetManifest& manifest,
                                 const std::string& split, const BatchRectifier& rectify,
                                 const std::filesystem::path& out_dir, const std::string& fingerprint,
                                 std::size_t batch = 8, std::size_t grid_rows = 8) {
  const auto records = manifest.split(split);
  if (records.empty()) throw ConfigError("split '" + split + "' has no samples");
  EvalReport report;
  report.fingerprint = fingerprint;
  const GramExtractor extractor;
  report.extractor = extractor.description();
  std::vector<DatasetSample> samples;
  for (const auto& r : records) {
    try {
      samples.push_back(load_sample(data_dir, r));
    } catch (const std::exception& e) {
      spdlog::warn("eval: skipping {}: {}", r.id, e.what());
      report.missing.push_back(r.id);
    }
  }
  if (samples.empty()) throw ConfigError("split '" + split + "': every sample is missing");

  std::vector<Image> outputs;
  for (std::size_t i = 0; i < samples.size(); i += batch) {
    std::vector<DatasetSample> group(samples.begin() + i, samples.begin() + std::min(samples.size(), i + batch));
    for (auto& img : rectify(group)) outputs.push_back(std::move(img));
  }
  report.rows.resize(samples.size());
  parallel_for(samples.size(), [&](std::size_t i) {
    report.rows[i] = {samples[i].id, ssim(outputs[i], samples[i].planar),
                      gram_distance(outputs[i], samples[i].planar, extractor)};
  });

  std::filesystem::create_directories(out_dir);
  std::ofstream(out_dir / "report.csv", std::ios::binary) << report.csv();
  std::vector<std::array<Image, 3>> tiles;
  for (std::size_t i = 0; i < std::min(grid_rows, samples.size()); ++i) {
    tiles.push_back({samples[i].degraded, outputs[i], samples[i].planar});
  }
  save_png(out_dir / "grid.png", comparison_grid(tiles), {{"texrect.fingerprint", fingerprint}});
  return report;
}

}  // namespace texrect
