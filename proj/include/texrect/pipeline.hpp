#pragma once

#include <spdlog/spdlog.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "texrect/checkpoint.hpp"
#include "texrect/config.hpp"
#include "texrect/metrics.hpp"

namespace texrect {

/// Loads every sample of `split`; unlike evaluation, training refuses gaps.
inline std::vector<DatasetSample> load_split(const std::filesystem::path& data_dir, const DatasetManifest& manifest,
                                             const std::string& split) {
  std::vector<DatasetSample> out;
  for (const auto& r : manifest.split(split)) out.push_back(load_sample(data_dir, r));
  if (out.empty()) throw ConfigError("split '" + split + "' has no samples in " + data_dir.string());
  return out;
}

/// Images in [0,1] stacked into a [N,3,H,W] batch in [-1,1].
inline Tensor<float> signed_batch(const std::vector<const Image*>& images) {
  std::vector<Tensor<float>> parts;
  for (const Image* img : images) parts.push_back(to_signed_batch<float>(*img));
  return concat(parts, 0);
}

/// `count` distinct indices in [0, n) (all of them, in order, when count >= n).
inline std::vector<std::size_t> draw_indices(std::size_t n, std::size_t count, Rng& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  if (count >= n) return idx;
  for (std::size_t i = 0; i < count; ++i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(i), static_cast<std::int64_t>(n) - 1));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(count);
  return idx;
}

struct TrainOptions {
  std::filesystem::path run_dir;
  std::int64_t stop_after = 0;  ///< halt (with a checkpoint) at this global step; 0 runs to the end
  int log_every = 100;
};

struct LossRow {
  std::int64_t step = 0;
  std::string stage;
  double loss = 0;
};

/// Two-stage training: the codec for `train.codec_steps` steps, then (with
/// the codec frozen and its latent scale fixed) the transformer, denoiser
/// and null conditions for `train.diffusion_steps` steps. Steps are counted
/// globally, so step codec_steps + 1 is the first diffusion step.
///
/// All randomness comes from one generator whose state travels with every
/// checkpoint; resuming from step k reproduces an uninterrupted run.
class Trainer {
 public:
  Trainer(const RunConfig& cfg, std::vector<DatasetSample> data)
      : cfg_(cfg), data_(std::move(data)), model_(cfg.model, cfg.seed), rng_(derive_seed(cfg.seed, 0x7EA1)) {
    cfg_.sync();
    cfg_.validate();
    if (data_.empty()) throw ConfigError("training needs at least one sample");
    for (const auto& s : data_) {
      if (s.planar.dim(1) != cfg_.image_size || s.planar.dim(2) != cfg_.image_size) {
        throw DimensionError("sample " + s.id + " is " + shape_str(s.planar.shape()) + ", config expects size " +
                             std::to_string(cfg_.image_size));
      }
    }
    codec_opt_.emplace(model_.codec.parameters().trainable(), AdamOptions{cfg_.train.codec_lr});
  }

  const RunConfig& config() const { return cfg_; }
  const Rectifier<float>& model() const { return model_; }
  std::int64_t step() const { return step_; }
  std::int64_t total_steps() const { return cfg_.train.codec_steps + cfg_.train.diffusion_steps; }
  bool finished() const { return step_ >= total_steps(); }
  const std::vector<LossRow>& history() const { return history_; }

  Checkpoint checkpoint() const {
    Checkpoint c;
    c.fingerprint = cfg_.fingerprint();
    c.meta["config"] = cfg_.text();
    c.meta["step"] = std::to_string(step_);
    c.meta["rng"] = rng_.state();
    c.meta["stage"] = in_diffusion() ? "diffusion" : "codec";
    c.params = capture_parameters(model_.parameters());
    if (in_diffusion() && diffusion_opt_) c.optimizer = capture_optimizer(*diffusion_opt_);
    if (!in_diffusion()) c.optimizer = capture_optimizer(*codec_opt_);
    return c;
  }

  void resume(const Checkpoint& c) {
    restore_parameters(model_.parameters(), c);
    step_ = std::stoll(c.meta.at("step"));
    rng_.set_state(c.meta.at("rng"));
    if (in_diffusion()) {
      begin_diffusion(false);
      if (c.optimizer) restore_optimizer(*diffusion_opt_, *c.optimizer);
    } else if (c.optimizer) {
      restore_optimizer(*codec_opt_, *c.optimizer);
    }
  }

  /// Trains until the end (or `stop_after`), appending to `run_dir/loss.csv`
  /// and checkpointing every `train.checkpoint_every` steps.
  void run(const TrainOptions& opts) {
    namespace fs = std::filesystem;
    fs::create_directories(opts.run_dir / "checkpoints");
    std::ofstream(opts.run_dir / "config.txt", std::ios::binary)
        << "# fingerprint=" << cfg_.fingerprint() << "\n" << cfg_.text();
    LossLog log(opts.run_dir / "loss.csv", cfg_.fingerprint(), step_);
    const auto start = std::chrono::steady_clock::now();
    const std::int64_t end = opts.stop_after > 0 ? std::min(opts.stop_after, total_steps()) : total_steps();
    while (step_ < end) {
      const LossRow row = advance();
      const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      log.append(row, wall, cfg_.seed);
      if (opts.log_every > 0 && (row.step % opts.log_every == 0 || row.step == end)) {
        spdlog::info("step {}/{} [{}] loss {:.5f} ({:.1f}s)", row.step, total_steps(), row.stage, row.loss, wall);
      }
      if (step_ == cfg_.train.codec_steps) save(opts.run_dir / "codec.txrc");
      if (step_ % cfg_.train.checkpoint_every == 0) {
        char name[32];
        std::snprintf(name, sizeof(name), "step_%08lld.txrc", static_cast<long long>(step_));
        save(opts.run_dir / "checkpoints" / name);
      }
    }
    save(opts.run_dir / "last.txrc");
    if (finished()) save(opts.run_dir / "model.txrc");
  }

  /// Performs one global step and returns its loss.
  LossRow advance() {
    if (finished()) throw ContractError("training already finished");
    if (step_ < cfg_.train.codec_steps) {
      std::vector<const Image*> pool;
      for (const auto& s : data_) {
        pool.push_back(&s.planar);
        pool.push_back(&s.degraded);
      }
      std::vector<const Image*> pick;
      for (std::size_t i : draw_indices(pool.size(), static_cast<std::size_t>(cfg_.train.codec_batch), rng_))
        pick.push_back(pool[i]);
      const CodecStepReport r = codec_train_step(model_.codec, *codec_opt_, signed_batch(pick), rng_);
      ++step_;
      if (step_ == cfg_.train.codec_steps && cfg_.train.diffusion_steps > 0) begin_diffusion(true);
      return record({step_, "codec", r.total});
    }
    if (!diffusion_opt_) begin_diffusion(true);
    const auto idx = draw_indices(data_.size(), static_cast<std::size_t>(cfg_.train.batch), rng_);
    PairBatch<float> b;
    std::vector<Tensor<float>> zp, zd, deg;
    std::vector<const Mask*> masks;
    for (std::size_t i : idx) {
      zp.push_back(planar_latents_[i]);
      zd.push_back(degraded_latents_[i]);
      deg.push_back(degraded_inputs_[i]);
      masks.push_back(&data_[i].mask);
    }
    b.planar_latent = concat(zp, 0);
    b.degraded_latent = concat(zd, 0);
    b.degraded = concat(deg, 0);
    b.mask = mask_batch<float>(masks);
    const DiffusionStepReport r = diffusion_training_step(model_, *diffusion_opt_, b, schedule_, rng_,
                                                          cfg_.train.p_uncond);
    ++step_;
    return record({step_, "diffusion", r.loss});
  }

  void save(const std::filesystem::path& path) const { save_checkpoint(path, checkpoint()); }

 private:
  class LossLog {
   public:
    // Rows past `resume_step` (written after the checkpoint being resumed)
    // are dropped so steps stay strictly increasing.
    LossLog(const std::filesystem::path& path, const std::string& fingerprint, std::int64_t resume_step) {
      std::vector<std::string> keep;
      if (resume_step > 0 && std::filesystem::exists(path)) {
        std::ifstream in(path);
        std::string line;
        while (std::getline(in, line)) {
          if (line.empty()) continue;
          if (std::isdigit(static_cast<unsigned char>(line[0])) && std::stoll(line) > resume_step) continue;
          keep.push_back(line);
        }
      }
      if (keep.empty()) keep = {"# fingerprint=" + fingerprint, "step,stage,loss,wall_time,seed"};
      {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        for (const auto& l : keep) out << l << '\n';
        if (!out) throw std::runtime_error("cannot write loss log " + path.string());
      }
      out_.open(path, std::ios::binary | std::ios::app);
      path_ = path;
    }
    void append(const LossRow& r, double wall, std::uint64_t seed) {
      char buf[160];
      std::snprintf(buf, sizeof(buf), "%lld,%s,%.8g,%.3f,%llu\n", static_cast<long long>(r.step), r.stage.c_str(),
                    r.loss, wall, static_cast<unsigned long long>(seed));
      out_ << buf;
      out_.flush();
      if (!out_) throw std::runtime_error("write to loss log " + path_.string() + " failed (disk full?)");
    }

   private:
    std::ofstream out_;
    std::filesystem::path path_;
  };

  bool in_diffusion() const { return step_ >= cfg_.train.codec_steps && cfg_.train.diffusion_steps > 0; }

  LossRow record(LossRow r) {
    history_.push_back(r);
    return r;
  }

  // Freezes the codec, fixes its latent scale (unless restored) and caches
  // the latents of every training pair.
  void begin_diffusion(bool compute_scale) {
    model_.codec.set_trainable(false);
    std::vector<Tensor<float>> planar;
    for (const auto& s : data_) planar.push_back(to_signed_batch<float>(s.planar));
    if (compute_scale) {
      model_.codec.set_latent_scale(latent_scale_for(model_.codec, planar));
      spdlog::info("codec stage done; latent scale {:.4f}", model_.codec.latent_scale());
    }
    planar_latents_.clear();
    degraded_latents_.clear();
    degraded_inputs_.clear();
    for (std::size_t i = 0; i < data_.size(); ++i) {
      degraded_inputs_.push_back(to_signed_batch<float>(apply_mask(data_[i].degraded, data_[i].mask)));
      planar_latents_.push_back(model_.latents(planar[i]));
      degraded_latents_.push_back(model_.latents(degraded_inputs_.back()));
    }
    schedule_ = cfg_.make_noise_schedule();
    diffusion_opt_.emplace(model_.diffusion_parameters().trainable(), AdamOptions{cfg_.train.lr});
  }

  RunConfig cfg_;
  std::vector<DatasetSample> data_;
  Rectifier<float> model_;
  Rng rng_;
  std::int64_t step_ = 0;
  std::optional<Adam<float>> codec_opt_, diffusion_opt_;
  NoiseSchedule schedule_;
  std::vector<Tensor<float>> planar_latents_, degraded_latents_, degraded_inputs_;
  std::vector<LossRow> history_;
};

/// A trained model together with the configuration it was trained under.
struct LoadedModel {
  RunConfig config;
  Rectifier<float> model;
};

/// Rebuilds a model from a checkpoint. When `expected` is given, its
/// fingerprint must match the checkpoint's unless `force` is set.
inline LoadedModel load_model(const std::filesystem::path& path, const RunConfig* expected = nullptr,
                              bool force = false) {
  const Checkpoint c = load_checkpoint(path, expected ? expected->fingerprint() : "", force);
  const auto it = c.meta.find("config");
  if (it == c.meta.end()) throw CheckpointError(path.string() + ": checkpoint carries no configuration");
  LoadedModel m{parse_config(it->second, RunConfig{}, path.string() + "#config"), {}};
  m.model = Rectifier<float>(m.config.model, m.config.seed);
  restore_parameters(m.model.parameters(), c);
  return m;
}

/// Rectifies degraded images (in [0,1]) under binary masks; returns images in [0,1].
inline std::vector<Image> rectify_images(const LoadedModel& m, const std::vector<const Image*>& degraded,
                                         const std::vector<const Mask*>& masks, std::uint64_t seed) {
  if (degraded.size() != masks.size()) throw DimensionError("rectify: image and mask counts differ");
  const Index s = m.config.image_size;
  std::vector<Tensor<float>> parts;
  for (std::size_t i = 0; i < degraded.size(); ++i) {
    const Image& img = *degraded[i];
    if (img.dim(0) != 3 || img.dim(1) != s || img.dim(2) != s) {
      throw DimensionError("rectify: input is " + shape_str(img.shape()) + ", model expects [3," + std::to_string(s) +
                           "," + std::to_string(s) + "]");
    }
    if (masks[i]->height != s || masks[i]->width != s) {
      throw DimensionError("rectify: mask is " + std::to_string(masks[i]->height) + "x" +
                           std::to_string(masks[i]->width) + ", image is " + std::to_string(s) + "x" +
                           std::to_string(s));
    }
    parts.push_back(to_signed_batch<float>(apply_mask(img, *masks[i])));
  }
  SamplerOptions o;
  o.steps = m.config.sample.ddim_steps;
  o.eta = m.config.sample.eta;
  o.guidance_scale = m.config.sample.guidance_scale;
  o.seed = seed;
  const Tensor<float> out = ddim_sample(m.model, concat(parts, 0), mask_batch<float>(masks),
                                        m.config.make_noise_schedule(), o);
  std::vector<Image> images;
  for (Index i = 0; i < out.dim(0); ++i) images.push_back(from_signed_batch(out, i));
  return images;
}

/// Batch rectifier for `evaluate_split`; each batch's noise seed derives
/// from `seed` and the ids in it, so reruns reproduce the report.
inline BatchRectifier model_rectifier(const LoadedModel& m, std::uint64_t seed) {
  return [&m, seed](const std::vector<DatasetSample>& batch) {
    std::vector<const Image*> imgs;
    std::vector<const Mask*> masks;
    std::string ids;
    for (const auto& s : batch) {
      imgs.push_back(&s.degraded);
      masks.push_back(&s.mask);
      ids += s.id + ";";
    }
    return rectify_images(m, imgs, masks, derive_seed(seed, detail::fnv1a(ids)));
  };
}

inline constexpr std::array<const char*, 5> kAblationVariants{"full", "concat", "crossattn", "sae", "pce"};

/// Config of one ablation variant: concat / crossattn keep a single
/// conditioning path; sae swaps partial for standard convolutions; pce drops
/// the transformer's self-attention.
inline RunConfig ablation_config(RunConfig cfg, const std::string& variant) {
  if (variant == "concat") {
    cfg.model.denoiser.cross_condition = false;
  } else if (variant == "crossattn") {
    cfg.model.denoiser.concat_condition = false;
  } else if (variant == "sae") {
    cfg.model.transformer.partial = false;
  } else if (variant == "pce") {
    cfg.model.transformer.self_attention = false;
  } else if (variant != "full") {
    std::string valid;
    for (const char* v : kAblationVariants) valid += (valid.empty() ? "" : ", ") + std::string(v);
    throw ConfigError("unknown ablation variant '" + variant + "' (valid: " + valid + ")");
  }
  return cfg.sync();
}

struct AblationRow {
  std::string variant;
  double ssim = 0, ssim_std = 0, gmd = 0, gmd_std = 0;
  std::string fingerprint;
};

inline std::string ablation_csv(const std::vector<AblationRow>& rows, const std::string& extractor) {
  std::string out = "variant,ssim,gmd,ssim_std,gmd_std,fingerprint\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%s,%.6f,%.6f,%.6f,%.6f,%s\n", r.variant.c_str(), r.ssim, r.gmd, r.ssim_std,
                  r.gmd_std, r.fingerprint.c_str());
    out += buf;
  }
  return out + "# gmd_extractor=" + extractor + "\n";
}

/// Trains and evaluates each variant under `out_dir/<variant>`, then writes
/// `out_dir/ablation.csv`.
inline std::vector<AblationRow> run_ablation(const RunConfig& base, const std::vector<std::string>& variants,
                                             const std::filesystem::path& data_dir,
                                             const std::filesystem::path& out_dir, const std::string& eval_split) {
  std::vector<RunConfig> configs;
  for (const auto& v : variants) configs.push_back(ablation_config(base, v));
  const DatasetManifest manifest = DatasetManifest::load(DatasetManifest::file_in(data_dir));
  const std::vector<DatasetSample> train = load_split(data_dir, manifest, "train");
  std::vector<AblationRow> rows;
  for (std::size_t i = 0; i < variants.size(); ++i) {
    const auto dir = out_dir / variants[i];
    spdlog::info("ablation: training variant '{}' ({})", variants[i], configs[i].fingerprint());
    Trainer trainer(configs[i], train);
    trainer.run({dir, 0, 500});
    const LoadedModel m{configs[i], trainer.model()};
    const EvalReport r = evaluate_split(data_dir, manifest, eval_split, model_rectifier(m, configs[i].seed),
                                        dir / "eval", configs[i].fingerprint(),
                                        static_cast<std::size_t>(configs[i].train.batch));
    const auto [sm, ss] = r.ssim_stats();
    const auto [gm, gs] = r.gmd_stats();
    rows.push_back({variants[i], sm, ss, gm, gs, configs[i].fingerprint()});
    spdlog::info("ablation: {} ssim {:.4f} gmd {:.4f}", variants[i], sm, gm);
  }
  std::filesystem::create_directories(out_dir);
  std::ofstream(out_dir / "ablation.csv", std::ios::binary) << ablation_csv(rows, GramExtractor().description());
  return rows;
}

}  // namespace texrect
