#pragma once

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "texrect/degradation.hpp"
#include "texrect/rectifier.hpp"

namespace texrect {

struct TrainSettings {
  int codec_steps = 2000;
  int codec_batch = 8;
  double codec_lr = 1e-3;
  int diffusion_steps = 5000;
  int batch = 8;
  double lr = 1e-4;
  double p_uncond = 0.1;
  int checkpoint_every = 500;
};

struct SampleSettings {
  int ddim_steps = 50;
  double eta = 0.0;
  double guidance_scale = 1.0;
};

struct ScheduleSettings {
  int steps = 1000;
  double beta_start = 0.0015;
  double beta_end = 0.0195;
};

/// Everything a run depends on. `fingerprint()` hashes the canonical text
/// form, so two configs with equal fingerprints produce identical artifacts.
struct RunConfig {
  std::uint64_t seed = 0;
  Index image_size = 64;
  RectifierConfig model;
  ScheduleSettings schedule;
  TrainSettings train;
  SampleSettings sample;
  DatasetConfig data;
  SplitFractions splits;

  /// Copies the shared image size into every component and links widths.
  RunConfig& sync() {
    model.codec.image_size = image_size;
    data.size = image_size;
    model.sync();
    return *this;
  }

  NoiseSchedule make_noise_schedule() const { return make_schedule(schedule.steps, schedule.beta_start, schedule.beta_end); }

  std::string text() const;
  std::string fingerprint() const;
  void set(const std::string& key, const std::string& value);
  void validate() const;
};

/// S=64, T=1000, 50 DDIM steps, lr 1e-4, batch 8, channel divisor 4.
inline RunConfig desk_preset() {
  RunConfig c;
  c.model.transformer.channel_divisor = 4;
  return c.sync();
}

/// S=256, T=1000, 200 DDIM steps, lr 1e-6, batch 32, full-width transformer
/// (256 x 1024 output), one million diffusion iterations.
inline RunConfig paper_preset() {
  RunConfig c;
  c.image_size = 256;
  c.model.transformer.channel_divisor = 1;
  c.model.denoiser.base_channels = 64;
  c.model.denoiser.channel_mults = {1, 2, 2, 4};
  c.model.denoiser.attention_levels = {false, true, true, true};
  c.model.codec.hidden = 64;
  c.sample.ddim_steps = 200;
  c.train.lr = 1e-6;
  c.train.batch = 32;
  c.train.diffusion_steps = 1'000'000;
  c.train.checkpoint_every = 10'000;
  return c.sync();
}

inline RunConfig preset(const std::string& name) {
  if (name == "desk") return desk_preset();
  if (name == "paper") return paper_preset();
  throw ConfigError("unknown preset '" + name + "' (valid: desk, paper)");
}

namespace detail {

// Shortest text that parses back to the same double.
inline std::string fmt_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

inline double parse_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double d = 0;
  try {
    d = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty()) throw ConfigError(key + ": expected a number, got '" + v + "'");
  return d;
}

inline long long parse_int(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  long long n = 0;
  try {
    n = std::stoll(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty()) throw ConfigError(key + ": expected an integer, got '" + v + "'");
  return n;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(item);
  return out;
}

struct Field {
  const char* key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <typename M>
Field int_field(const char* key, M member) {
  return {key, [member](const RunConfig& c) { return std::to_string(member(c)); },
          [member, key](RunConfig& c, const std::string& v) {
            auto& ref = member(c);
            ref = static_cast<std::remove_reference_t<decltype(ref)>>(parse_int(key, v));
          }};
}

template <typename M>
Field double_field(const char* key, M member) {
  return {key, [member](const RunConfig& c) { return fmt_double(member(c)); },
          [member, key](RunConfig& c, const std::string& v) { member(c) = parse_double(key, v); }};
}

template <typename M>
Field bool_field(const char* key, M member) {
  return {key, [member](const RunConfig& c) { return std::string(member(c) ? "true" : "false"); },
          [member, key](RunConfig& c, const std::string& v) { member(c) = parse_bool(key, v); }};
}

// Key table in canonical order. Accessors return references into the config.
inline const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back(int_field("seed", [](auto& c) -> auto& { return c.seed; }));
    f.push_back(int_field("image_size", [](auto& c) -> auto& { return c.image_size; }));

    f.push_back(int_field("codec.downsample", [](auto& c) -> auto& { return c.model.codec.downsample; }));
    f.push_back(int_field("codec.latent_channels", [](auto& c) -> auto& { return c.model.codec.latent_channels; }));
    f.push_back(int_field("codec.codebook_size", [](auto& c) -> auto& { return c.model.codec.codebook_size; }));
    f.push_back(int_field("codec.hidden", [](auto& c) -> auto& { return c.model.codec.hidden; }));
    f.push_back(int_field("codec.residual_blocks", [](auto& c) -> auto& { return c.model.codec.residual_blocks; }));
    f.push_back(double_field("codec.commitment", [](auto& c) -> auto& { return c.model.codec.commitment; }));
    f.push_back(int_field("codec.dead_code_steps", [](auto& c) -> auto& { return c.model.codec.dead_code_steps; }));

    f.push_back(int_field("transformer.channel_divisor",
                          [](auto& c) -> auto& { return c.model.transformer.channel_divisor; }));
    f.push_back(bool_field("transformer.partial", [](auto& c) -> auto& { return c.model.transformer.partial; }));
    f.push_back(bool_field("transformer.self_attention",
                           [](auto& c) -> auto& { return c.model.transformer.self_attention; }));

    f.push_back(int_field("denoiser.base_channels", [](auto& c) -> auto& { return c.model.denoiser.base_channels; }));
    f.push_back({"denoiser.channel_mults",
                 [](const RunConfig& c) {
                   std::string s;
                   for (Index m : c.model.denoiser.channel_mults) s += (s.empty() ? "" : ",") + std::to_string(m);
                   return s;
                 },
                 [](RunConfig& c, const std::string& v) {
                   c.model.denoiser.channel_mults.clear();
                   for (const auto& x : split_list(v)) c.model.denoiser.channel_mults.push_back(parse_int("denoiser.channel_mults", x));
                 }});
    f.push_back({"denoiser.attention_levels",
                 [](const RunConfig& c) {
                   std::string s;
                   for (bool b : c.model.denoiser.attention_levels) s += (s.empty() ? "" : ",") + std::string(b ? "true" : "false");
                   return s;
                 },
                 [](RunConfig& c, const std::string& v) {
                   c.model.denoiser.attention_levels.clear();
                   for (const auto& x : split_list(v))
                     c.model.denoiser.attention_levels.push_back(parse_bool("denoiser.attention_levels", x));
                 }});
    f.push_back(bool_field("denoiser.attention_mid", [](auto& c) -> auto& { return c.model.denoiser.attention_mid; }));
    f.push_back(int_field("denoiser.blocks_per_level", [](auto& c) -> auto& { return c.model.denoiser.blocks_per_level; }));
    f.push_back(int_field("denoiser.groups", [](auto& c) -> auto& { return c.model.denoiser.groups; }));
    f.push_back(bool_field("denoiser.concat_condition",
                           [](auto& c) -> auto& { return c.model.denoiser.concat_condition; }));
    f.push_back(bool_field("denoiser.cross_condition", [](auto& c) -> auto& { return c.model.denoiser.cross_condition; }));

    f.push_back(int_field("schedule.steps", [](auto& c) -> auto& { return c.schedule.steps; }));
    f.push_back(double_field("schedule.beta_start", [](auto& c) -> auto& { return c.schedule.beta_start; }));
    f.push_back(double_field("schedule.beta_end", [](auto& c) -> auto& { return c.schedule.beta_end; }));

    f.push_back(int_field("train.codec_steps", [](auto& c) -> auto& { return c.train.codec_steps; }));
    f.push_back(int_field("train.codec_batch", [](auto& c) -> auto& { return c.train.codec_batch; }));
    f.push_back(double_field("train.codec_lr", [](auto& c) -> auto& { return c.train.codec_lr; }));
    f.push_back(int_field("train.diffusion_steps", [](auto& c) -> auto& { return c.train.diffusion_steps; }));
    f.push_back(int_field("train.batch", [](auto& c) -> auto& { return c.train.batch; }));
    f.push_back(double_field("train.lr", [](auto& c) -> auto& { return c.train.lr; }));
    f.push_back(double_field("train.p_uncond", [](auto& c) -> auto& { return c.train.p_uncond; }));
    f.push_back(int_field("train.checkpoint_every", [](auto& c) -> auto& { return c.train.checkpoint_every; }));

    f.push_back(int_field("sample.ddim_steps", [](auto& c) -> auto& { return c.sample.ddim_steps; }));
    f.push_back(double_field("sample.eta", [](auto& c) -> auto& { return c.sample.eta; }));
    f.push_back(double_field("sample.guidance_scale", [](auto& c) -> auto& { return c.sample.guidance_scale; }));

    f.push_back(int_field("data.samples_per_source", [](auto& c) -> auto& { return c.data.samples_per_source; }));
    f.push_back(double_field("data.p_hmg", [](auto& c) -> auto& { return c.data.degradation.p_hmg; }));
    f.push_back(double_field("data.p_tps", [](auto& c) -> auto& { return c.data.degradation.p_tps; }));
    f.push_back(double_field("data.s_hmg_min", [](auto& c) -> auto& { return c.data.degradation.s_hmg[0]; }));
    f.push_back(double_field("data.s_hmg_max", [](auto& c) -> auto& { return c.data.degradation.s_hmg[1]; }));
    f.push_back(double_field("data.s_tps_min", [](auto& c) -> auto& { return c.data.degradation.s_tps[0]; }));
    f.push_back(double_field("data.s_tps_max", [](auto& c) -> auto& { return c.data.degradation.s_tps[1]; }));
    // Fixed; present so the run text states which warp is applied first.
    f.push_back({"data.warp_order", [](const RunConfig&) { return std::string("homography,tps"); },
                 [](RunConfig&, const std::string& v) {
                   if (v != "homography,tps") throw ConfigError("data.warp_order: only 'homography,tps' is supported");
                 }});
    f.push_back(int_field("data.tps_grid", [](auto& c) -> auto& { return c.data.degradation.tps_grid; }));
    f.push_back(double_field("data.min_valid_fraction",
                             [](auto& c) -> auto& { return c.data.degradation.min_valid_fraction; }));
    f.push_back(int_field("data.mask.strokes_min", [](auto& c) -> auto& { return c.data.degradation.mask.stroke_count[0]; }));
    f.push_back(int_field("data.mask.strokes_max", [](auto& c) -> auto& { return c.data.degradation.mask.stroke_count[1]; }));
    f.push_back(double_field("data.mask.valid_min", [](auto& c) -> auto& { return c.data.degradation.mask.valid_fraction[0]; }));
    f.push_back(double_field("data.mask.valid_max", [](auto& c) -> auto& { return c.data.degradation.mask.valid_fraction[1]; }));
    f.push_back(double_field("data.split.train", [](auto& c) -> auto& { return c.splits.train; }));
    f.push_back(double_field("data.split.val", [](auto& c) -> auto& { return c.splits.val; }));
    f.push_back(double_field("data.split.test", [](auto& c) -> auto& { return c.splits.test; }));
    return f;
  }();
  return table;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace detail

/// One `key = value` line per setting, in canonical order.
inline std::string RunConfig::text() const {
  std::string out;
  for (const auto& f : detail::fields()) out += std::string(f.key) + " = " + f.get(*this) + "\n";
  return out;
}

/// 16 hex digits of the FNV-1a hash of `text()`.
inline std::string RunConfig::fingerprint() const {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(detail::fnv1a(text())));
  return buf;
}

inline void RunConfig::set(const std::string& key, const std::string& value) {
  for (const auto& f : detail::fields())
    if (key == f.key) {
      f.set(*this, value);
      return;
    }
  throw ConfigError("unknown config key '" + key + "'");
}

inline void RunConfig::validate() const {
  RunConfig c = *this;
  c.sync();
  c.model.codec.validate();
  c.model.denoiser.validate();
  c.data.degradation.mask.validate();
  make_schedule(schedule.steps, schedule.beta_start, schedule.beta_end);
  ddim_timesteps(schedule.steps, sample.ddim_steps);
  if (image_size % 8 != 0) throw ConfigError("image_size must be a multiple of 8");
  if (train.batch < 1 || train.codec_batch < 1) throw ConfigError("batch sizes must be positive");
  if (!(train.lr > 0 && train.codec_lr > 0)) throw ConfigError("learning rates must be positive");
  if (!(train.p_uncond >= 0 && train.p_uncond <= 1)) throw ConfigError("train.p_uncond must lie in [0,1]");
  if (train.checkpoint_every < 1) throw ConfigError("train.checkpoint_every must be positive");
}

/// Applies `key = value` lines (with `#` comments) on top of `base`.
/// Unknown keys and malformed lines are errors naming the line.
inline RunConfig parse_config(const std::string& text, RunConfig base, const std::string& origin = "config") {
  std::istringstream in(text);
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(number) + ": expected 'key = value'");
    }
    try {
      base.set(detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(number) + ": " + e.what());
    }
  }
  base.sync();
  base.validate();
  return base;
}

inline RunConfig load_config(const std::filesystem::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base), path.string());
}

}  // namespace texrect
