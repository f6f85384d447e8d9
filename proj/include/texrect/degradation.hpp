#pragma once

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "texrect/geometry.hpp"
#include "texrect/image.hpp"
#include "texrect/parallel.hpp"
#include "texrect/rng.hpp"

namespace texrect {

// ---------------------------------------------------------------- masks

/// Brush-stroke parameters. Widths and segment lengths are fractions of the
/// image height.
struct MaskParams {
  std::array<int, 2> stroke_count{1, 5};
  std::array<double, 2> brush_width{1.0 / 16.0, 1.0 / 6.0};
  std::array<int, 2> vertex_count{4, 10};
  std::array<double, 2> segment_length{0.1, 0.25};
  std::array<double, 2> valid_fraction{0.35, 0.9};
  double max_turn = std::numbers::pi / 3.0;

  void validate() const {
    if (stroke_count[0] < 0 || stroke_count[0] > stroke_count[1]) throw ConfigError("mask stroke_count range invalid");
    if (!(brush_width[0] > 0 && brush_width[0] <= brush_width[1])) throw ConfigError("mask brush_width range invalid");
    if (vertex_count[0] < 2 || vertex_count[0] > vertex_count[1]) throw ConfigError("mask vertex_count range invalid");
    if (!(segment_length[0] > 0 && segment_length[0] <= segment_length[1]))
      throw ConfigError("mask segment_length range invalid");
    if (!(valid_fraction[0] > 0 && valid_fraction[0] <= valid_fraction[1] && valid_fraction[1] <= 1))
      throw ConfigError("mask valid_fraction range invalid");
  }
};

struct FreeFormMask {
  Mask mask;
  bool warning = false;  ///< target fraction not reached; `mask` is the closest seen
  int attempts = 0;
};

namespace detail {

struct Stroke {
  std::vector<Point2> vertices;  // pixel units
  double radius = 0.0;
};

inline double segment_distance2(double px, double py, Point2 a, Point2 b) {
  const double vx = b.x - a.x, vy = b.y - a.y;
  const double len2 = vx * vx + vy * vy;
  double t = len2 > 0 ? ((px - a.x) * vx + (py - a.y) * vy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double dx = px - (a.x + t * vx), dy = py - (a.y + t * vy);
  return dx * dx + dy * dy;
}

/// Pixels covered by a round-capped polyline, as flat indices.
inline std::vector<Index> rasterize_stroke(const Stroke& s, Index h, Index w) {
  std::vector<std::uint8_t> hit(static_cast<std::size_t>(h * w), 0);
  const double r2 = s.radius * s.radius;
  for (std::size_t k = 0; k + 1 < s.vertices.size(); ++k) {
    const Point2 a = s.vertices[k], b = s.vertices[k + 1];
    const Index x0 = std::max<Index>(0, static_cast<Index>(std::floor(std::min(a.x, b.x) - s.radius)));
    const Index x1 = std::min<Index>(w - 1, static_cast<Index>(std::ceil(std::max(a.x, b.x) + s.radius)));
    const Index y0 = std::max<Index>(0, static_cast<Index>(std::floor(std::min(a.y, b.y) - s.radius)));
    const Index y1 = std::min<Index>(h - 1, static_cast<Index>(std::ceil(std::max(a.y, b.y) + s.radius)));
    for (Index y = y0; y <= y1; ++y)
      for (Index x = x0; x <= x1; ++x)
        if (segment_distance2(x + 0.5, y + 0.5, a, b) <= r2) hit[y * w + x] = 1;
  }
  std::vector<Index> out;
  for (Index i = 0; i < h * w; ++i)
    if (hit[i]) out.push_back(i);
  return out;
}

/// Random walk with bounded turning angle, clamped to the image.
inline Stroke random_stroke(Index h, Index w, const MaskParams& p, Rng& rng) {
  Stroke s;
  const double hh = static_cast<double>(h);
  s.radius = 0.5 * rng.uniform(p.brush_width[0], p.brush_width[1]) * hh;
  const auto vertices = rng.uniform_int(p.vertex_count[0], p.vertex_count[1]);
  Point2 cur{rng.uniform(0.0, static_cast<double>(w)), rng.uniform(0.0, hh)};
  double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
  s.vertices.push_back(cur);
  for (std::int64_t v = 1; v < vertices; ++v) {
    angle += rng.uniform(-p.max_turn, p.max_turn);
    const double len = rng.uniform(p.segment_length[0], p.segment_length[1]) * hh;
    cur.x = std::clamp(cur.x + len * std::cos(angle), 0.0, static_cast<double>(w));
    cur.y = std::clamp(cur.y + len * std::sin(angle), 0.0, hh);
    s.vertices.push_back(cur);
  }
  return s;
}

}  // namespace detail

inline constexpr int kMaskMaxAttempts = 64;

/// Union of random brush strokes (1 = valid). Strokes are added while the
/// valid fraction is above the target range and removed while it is below.
inline FreeFormMask free_form_mask(Index h, Index w, const MaskParams& params, Rng& rng) {
  if (h < 16 || w < 16) throw DimensionError("free_form_mask: H and W must be at least 16");
  params.validate();
  const double lo = params.valid_fraction[0], hi = params.valid_fraction[1];
  std::vector<std::uint16_t> cover(static_cast<std::size_t>(h * w), 0);
  std::vector<std::vector<Index>> strokes;
  Index occluded = 0;
  auto add_stroke = [&] {
    strokes.push_back(detail::rasterize_stroke(detail::random_stroke(h, w, params, rng), h, w));
    for (Index i : strokes.back()) occluded += (cover[i]++ == 0);
  };
  auto pop_stroke = [&] {
    for (Index i : strokes.back()) occluded -= (--cover[i] == 0);
    strokes.pop_back();
  };
  auto snapshot = [&] {
    Mask m(h, w, 1);
    for (std::size_t i = 0; i < cover.size(); ++i) m.bits[i] = cover[i] == 0;
    return m;
  };

  const auto n = rng.uniform_int(params.stroke_count[0], params.stroke_count[1]);
  for (std::int64_t i = 0; i < n; ++i) add_stroke();

  FreeFormMask best;
  double best_gap = 2.0;
  const double total = static_cast<double>(h * w);
  for (int attempt = 0;; ++attempt) {
    const double f = 1.0 - static_cast<double>(occluded) / total;
    const double gap = f < lo ? lo - f : (f > hi ? f - hi : 0.0);
    if (gap < best_gap) {
      best_gap = gap;
      best.mask = snapshot();
    }
    best.attempts = attempt;
    if (gap == 0.0) return best;
    if (attempt >= kMaskMaxAttempts || params.stroke_count[1] == 0) break;
    if (f > hi) {
      add_stroke();
    } else if (!strokes.empty()) {
      pop_stroke();
    } else {
      break;
    }
  }
  best.warning = true;
  return best;
}

// ---------------------------------------------------------------- degrade

struct DegradationConfig {
  double p_hmg = 0.8;
  double p_tps = 0.8;
  std::array<double, 2> s_hmg{0.3, 0.5};
  std::array<double, 2> s_tps{0.1, 0.3};
  int tps_grid = 4;
  MaskParams mask;
  double min_valid_fraction = 0.05;
};

/// Everything needed to regenerate a degraded sample from its planar crop.
struct TransformRecord {
  std::uint64_t seed = 0;
  bool hmg_applied = false;
  double s_hmg = 0.0;
  bool tps_applied = false;
  double s_tps = 0.0;
  bool mask_warning = false;

  bool operator==(const TransformRecord&) const = default;
};

struct MaskedSample {
  Image degraded;
  Mask mask;
  std::string source_id;
  TransformRecord record;
};

class DegradationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Homography (probability p_hmg), then TPS (probability p_tps), then a
/// free-form mask intersected with the warp validity; occluded pixels are 0.
/// Every draw comes from Rng(seed), so the record regenerates the sample.
inline MaskedSample degrade(const Image& planar, const DegradationConfig& cfg, std::uint64_t seed,
                            std::string source_id = {}) {
  const Index h = planar.dim(1), w = planar.dim(2);
  Rng rng(seed);
  for (int outer = 0; outer < kGeometryMaxAttempts; ++outer) {
    TransformRecord rec;
    rec.seed = seed;
    HomographyThenTps warp;
    rec.hmg_applied = rng.bernoulli(cfg.p_hmg);
    rec.s_hmg = rng.uniform(cfg.s_hmg[0], cfg.s_hmg[1]);
    if (rec.hmg_applied) warp.homography = sample_homography(rec.s_hmg, rng);
    rec.tps_applied = rng.bernoulli(cfg.p_tps);
    rec.s_tps = rng.uniform(cfg.s_tps[0], cfg.s_tps[1]);
    if (rec.tps_applied) warp.tps = sample_tps(rec.s_tps, cfg.tps_grid, rng);
    WarpResult warped = (rec.hmg_applied || rec.tps_applied) ? warp_image(planar, warp)
                                                              : WarpResult{planar.detach(), Mask(h, w, 1)};
    for (int inner = 0; inner < kGeometryMaxAttempts; ++inner) {
      FreeFormMask ff = free_form_mask(h, w, cfg.mask, rng);
      Mask combined = warped.validity.intersect(ff.mask);
      if (combined.valid_fraction() >= cfg.min_valid_fraction) {
        rec.mask_warning = ff.warning;
        return MaskedSample{apply_mask(warped.image, combined), std::move(combined), std::move(source_id), rec};
      }
    }
  }
  throw DegradationError("could not reach minimum valid fraction " + std::to_string(cfg.min_valid_fraction));
}

// ---------------------------------------------------------------- crops

class ImageTooSmall : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shorter side after the pre-crop resize, ceil(S * 294 / 256).
inline Index crop_resize_target(Index s) { return (s * 294 + 255) / 256; }

/// Resizes the shorter side to crop_resize_target(S), then crops S x S at
/// random (train) or at the centre (eval). Sources whose shorter side is
/// below S are rejected rather than upsampled.
inline Image crop_pipeline(const Image& img, Index s, bool train, Rng& rng) {
  const Index h = img.dim(1), w = img.dim(2);
  if (std::min(h, w) < s) {
    throw ImageTooSmall("image " + std::to_string(w) + "x" + std::to_string(h) + " is smaller than " +
                        std::to_string(s) + "x" + std::to_string(s));
  }
  const Index r = crop_resize_target(s);
  Index nh, nw;
  if (h <= w) {
    nh = r;
    nw = std::max(r, static_cast<Index>(std::llround(static_cast<double>(w) * r / h)));
  } else {
    nw = r;
    nh = std::max(r, static_cast<Index>(std::llround(static_cast<double>(h) * r / w)));
  }
  const Image resized = resize_image(img, nh, nw);
  Index top, left;
  if (train) {
    top = rng.uniform_int(0, nh - s);
    left = rng.uniform_int(0, nw - s);
  } else {
    top = (nh - s) / 2;
    left = (nw - s) / 2;
  }
  return crop_image(resized, top, left, s, s);
}

// ---------------------------------------------------------------- dataset

struct SplitFractions {
  double train = 0.7;
  double val = 0.1;
  double test = 0.2;
};

inline constexpr std::array<const char*, 3> kSplitNames{"train", "val", "test"};

/// Per-split source counts: round(f_train n), round(f_val n), remainder.
inline std::array<std::size_t, 3> split_counts(std::size_t n, const SplitFractions& f) {
  for (double v : {f.train, f.val, f.test})
    if (v < 0) throw ConfigError("split fractions must be non-negative");
  if (std::abs(f.train + f.val + f.test - 1.0) > 1e-6) throw ConfigError("split fractions must sum to 1");
  const auto tr = static_cast<std::size_t>(std::llround(f.train * static_cast<double>(n)));
  const auto va = static_cast<std::size_t>(std::llround(f.val * static_cast<double>(n)));
  if (tr + va > n) throw ConfigError("split fractions leave no room for the test split");
  const std::array<std::size_t, 3> c{tr, va, n - tr - va};
  for (std::size_t i = 0; i < 3; ++i)
    if (c[i] == 0) throw ConfigError(std::string("empty split: ") + kSplitNames[i]);
  return c;
}

struct DatasetConfig {
  Index size = 64;
  int samples_per_source = 1;
  DegradationConfig degradation;
};

struct ManifestRecord {
  std::string id;
  std::string split;
  std::string source;  ///< relative to the source directory
  std::uint64_t seed = 0;
  TransformRecord transform;
  double valid_fraction = 0.0;
};

struct DatasetManifest {
  std::string fingerprint;
  Index size = 0;
  std::uint64_t seed = 0;
  std::vector<ManifestRecord> records;
  std::vector<std::pair<std::string, std::string>> skipped;  ///< (source, reason)

  std::vector<ManifestRecord> split(const std::string& name) const {
    std::vector<ManifestRecord> out;
    for (const auto& r : records)
      if (r.split == name) out.push_back(r);
    return out;
  }

  static std::filesystem::path file_in(const std::filesystem::path& dir) { return dir / "manifest.jsonl"; }

  /// One JSON object per line: a header record, then one record per sample.
  void save(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw ImageIoError("cannot write manifest " + path.string());
    nlohmann::ordered_json head;
    head["kind"] = "header";
    head["fingerprint"] = fingerprint;
    head["size"] = size;
    head["seed"] = seed;
    head["warp_order"] = "homography,tps";
    head["skipped"] = nlohmann::ordered_json::array();
    for (const auto& [src, why] : skipped) head["skipped"].push_back({{"source", src}, {"reason", why}});
    os << head.dump() << '\n';
    for (const auto& r : records) {
      nlohmann::ordered_json j;
      j["id"] = r.id;
      j["split"] = r.split;
      j["source"] = r.source;
      j["seed"] = r.seed;
      j["transform_seed"] = r.transform.seed;
      j["s_hmg"] = r.transform.s_hmg;
      j["s_tps"] = r.transform.s_tps;
      j["hmg_applied"] = r.transform.hmg_applied;
      j["tps_applied"] = r.transform.tps_applied;
      j["mask_warning"] = r.transform.mask_warning;
      j["valid_fraction"] = r.valid_fraction;
      os << j.dump() << '\n';
    }
    if (!os) throw ImageIoError("failed writing manifest " + path.string());
  }

  static DatasetManifest load(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ImageIoError("cannot read manifest " + path.string());
    DatasetManifest m;
    std::string line;
    bool header = false;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      if (j.value("kind", "") == "header") {
        header = true;
        m.fingerprint = j.at("fingerprint").get<std::string>();
        m.size = j.at("size").get<Index>();
        m.seed = j.at("seed").get<std::uint64_t>();
        for (const auto& s : j.at("skipped"))
          m.skipped.emplace_back(s.at("source").get<std::string>(), s.at("reason").get<std::string>());
        continue;
      }
      ManifestRecord r;
      r.id = j.at("id").get<std::string>();
      r.split = j.at("split").get<std::string>();
      r.source = j.at("source").get<std::string>();
      r.seed = j.at("seed").get<std::uint64_t>();
      r.transform.seed = j.at("transform_seed").get<std::uint64_t>();
      r.transform.s_hmg = j.at("s_hmg").get<double>();
      r.transform.s_tps = j.at("s_tps").get<double>();
      r.transform.hmg_applied = j.at("hmg_applied").get<bool>();
      r.transform.tps_applied = j.at("tps_applied").get<bool>();
      r.transform.mask_warning = j.at("mask_warning").get<bool>();
      r.valid_fraction = j.at("valid_fraction").get<double>();
      m.records.push_back(std::move(r));
    }
    if (!header) throw ImageIoError("manifest has no header record: " + path.string());
    return m;
  }
};

/// Paths of one sample's image triplet under the dataset root.
struct SamplePaths {
  std::filesystem::path planar, degraded, mask;
};

inline SamplePaths sample_paths(const std::filesystem::path& root, const ManifestRecord& r) {
  const auto dir = root / r.split;
  return {dir / (r.id + "_planar.png"), dir / (r.id + "_degraded.png"), dir / (r.id + "_mask.png")};
}

/// Triplet loaded from disk.
struct DatasetSample {
  std::string id;
  Image planar;
  Image degraded;
  Mask mask;
};

inline DatasetSample load_sample(const std::filesystem::path& root, const ManifestRecord& r) {
  const SamplePaths p = sample_paths(root, r);
  return {r.id, load_image(p.planar), load_image(p.degraded), load_mask(p.mask)};
}

inline bool is_image_file(const std::filesystem::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

inline constexpr std::uint64_t kCropSeedTag = 0xC409;

/// Planar crop and degraded sample for one manifest entry.
inline std::pair<Image, MaskedSample> generate_sample(const Image& source, const DatasetConfig& cfg,
                                                      std::uint64_t sample_seed, bool train, std::string id) {
  Rng crop_rng(derive_seed(sample_seed, kCropSeedTag));
  Image planar = quantize_8bit(crop_pipeline(source, cfg.size, train, crop_rng));
  MaskedSample ms = degrade(planar, cfg.degradation, sample_seed, std::move(id));
  return {std::move(planar), std::move(ms)};
}

/// Splits sources (sorted by file name, shuffled by `seed`) into disjoint
/// train/val/test sets and writes every (planar, degraded, mask) triplet
/// plus the manifest. Unreadable or undersized sources are skipped and
/// recorded.
inline DatasetManifest build_dataset(const std::filesystem::path& source_dir, const std::filesystem::path& out_dir,
                                     const SplitFractions& fractions, const DatasetConfig& cfg, std::uint64_t seed,
                                     const std::string& fingerprint = {}) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(source_dir)) throw ConfigError("source directory not found: " + source_dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(source_dir))
    if (e.is_regular_file() && is_image_file(e.path())) files.push_back(e.path());
  std::sort(files.begin(), files.end());

  DatasetManifest manifest;
  manifest.fingerprint = fingerprint;
  manifest.size = cfg.size;
  manifest.seed = seed;

  // Decode everything first so unreadable files never shift split membership
  // of the remaining ones.
  std::vector<std::optional<Image>> images(files.size());
  std::vector<std::string> errors(files.size());
  parallel_for(files.size(), [&](std::size_t i) {
    try {
      Image img = load_image(files[i]);
      if (std::min(img.dim(1), img.dim(2)) < cfg.size) {
        throw ImageTooSmall("shorter side " + std::to_string(std::min(img.dim(1), img.dim(2))) + " < " +
                            std::to_string(cfg.size));
      }
      images[i] = std::move(img);
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  });
  std::vector<std::size_t> usable;
  for (std::size_t i = 0; i < files.size(); ++i) {
    const std::string rel = fs::relative(files[i], source_dir).generic_string();
    if (images[i]) {
      usable.push_back(i);
    } else {
      spdlog::warn("skipping {}: {}", rel, errors[i]);
      manifest.skipped.emplace_back(rel, errors[i]);
    }
  }
  if (usable.size() < 3) throw ConfigError("need at least 3 readable source images, found " + std::to_string(usable.size()));
  const auto counts = split_counts(usable.size(), fractions);

  Rng split_rng(derive_seed(seed, 0x5B117));
  for (std::size_t i = usable.size(); i > 1; --i) {
    std::swap(usable[i - 1], usable[static_cast<std::size_t>(split_rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
  }

  struct Job {
    std::size_t file;
    std::string split;
    std::string id;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  std::size_t cursor = 0;
  for (std::size_t s = 0; s < 3; ++s) {
    std::vector<std::size_t> members(usable.begin() + cursor, usable.begin() + cursor + counts[s]);
    cursor += counts[s];
    std::sort(members.begin(), members.end());
    for (std::size_t f : members)
      for (int k = 0; k < cfg.samples_per_source; ++k) {
        char id[32];
        std::snprintf(id, sizeof(id), "%05zu_%d", f, k);
        jobs.push_back({f, kSplitNames[s], id, derive_seed(derive_seed(seed, f), static_cast<std::uint64_t>(k))});
      }
  }

  for (const char* s : kSplitNames) fs::create_directories(out_dir / s);
  const std::map<std::string, std::string> text{{"texrect.fingerprint", fingerprint}};
  manifest.records.resize(jobs.size());
  parallel_for(jobs.size(), [&](std::size_t j) {
    const Job& job = jobs[j];
    auto [planar, ms] = generate_sample(*images[job.file], cfg, job.seed, job.split == "train", job.id);
    ManifestRecord rec;
    rec.id = job.id;
    rec.split = job.split;
    rec.source = fs::relative(files[job.file], source_dir).generic_string();
    rec.seed = job.seed;
    rec.transform = ms.record;
    rec.valid_fraction = ms.mask.valid_fraction();
    const SamplePaths p = sample_paths(out_dir, rec);
    save_png(p.planar, planar, text);
    save_png(p.degraded, ms.degraded, text);
    save_mask_png(p.mask, ms.mask, text);
    manifest.records[j] = std::move(rec);
  });
  manifest.save(DatasetManifest::file_in(out_dir));
  return manifest;
}

/// Rebuilds one sample from its manifest record and the source directory.
inline std::pair<Image, MaskedSample> regenerate_sample(const std::filesystem::path& source_dir,
                                                        const ManifestRecord& rec, const DatasetConfig& cfg) {
  return generate_sample(load_image(source_dir / rec.source), cfg, rec.seed, rec.split == "train", rec.id);
}

}  // namespace texrect
