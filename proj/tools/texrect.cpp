// texrect: dataset generation, training, rectification, evaluation and
// ablation for the latent-diffusion texture rectifier.

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <chrono>
#include <iostream>
#include <optional>

#include "texrect/texrect.hpp"

namespace fs = std::filesystem;
using namespace texrect;

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kConfig = 2, kDimension = 3, kCheckpoint = 4, kDiverged = 5 };

struct Common {
  std::string config_file;
  std::string preset = "desk";
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  bool force = false;

  bool explicit_config(const CLI::App& sub) const {
    return sub.count("--config") + sub.count("--preset") + sub.count("--set") > 0;
  }

  // Preset, then config file, then --set overrides, then --seed.
  RunConfig resolve() const {
    RunConfig cfg = preset_config();
    if (!config_file.empty()) cfg = load_config(config_file, cfg);
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
      cfg.set(detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
    }
    if (seed) cfg.seed = *seed;
    cfg.sync();
    cfg.validate();
    return cfg;
  }

  RunConfig preset_config() const { return texrect::preset(preset); }
};

void add_common(CLI::App& sub, Common& c, bool seed_is_run_seed = true) {
  sub.add_option("--config", c.config_file, "key = value configuration file")->check(CLI::ExistingFile);
  sub.add_option("--preset", c.preset, "base settings")->check(CLI::IsMember({"desk", "paper"}));
  sub.add_option("--set", c.overrides, "override one setting, key=value (repeatable)");
  sub.add_option("--seed", c.seed, seed_is_run_seed ? "run seed" : "sampling seed (defaults to the model's run seed)");
  sub.add_flag("--force", c.force, "load checkpoints even when the config fingerprint differs");
}

int cmd_make_textures(const fs::path& out, int count, Index size, std::uint64_t seed) {
  fs::create_directories(out);
  for (int i = 0; i < count; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "texture_%04d.png", i);
    save_png(out / name, procedural_texture(size, size, derive_seed(seed, static_cast<std::uint64_t>(i))));
  }
  spdlog::info("wrote {} procedural textures to {}", count, out.string());
  return kOk;
}

int cmd_gen_data(const RunConfig& cfg, const fs::path& src, const fs::path& out) {
  const auto t0 = std::chrono::steady_clock::now();
  const DatasetManifest m = build_dataset(src, out, cfg.splits, cfg.data, cfg.seed, cfg.fingerprint());
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cout << "dataset " << out.string() << " (fingerprint " << m.fingerprint << ", size " << m.size << ", seed "
            << m.seed << ")\n";
  for (const char* s : kSplitNames) std::cout << "  " << s << ": " << m.split(s).size() << " samples\n";
  for (const auto& [source, why] : m.skipped) std::cout << "  skipped " << source << ": " << why << "\n";
  spdlog::info("gen-data finished in {:.2f}s", secs);
  return kOk;
}

int cmd_train(const RunConfig& cfg, const fs::path& data, const fs::path& out, const std::string& resume,
              std::int64_t stop_after, bool force) {
  const DatasetManifest m = DatasetManifest::load(DatasetManifest::file_in(data));
  if (m.size != cfg.image_size) {
    throw ConfigError("dataset " + data.string() + " has size " + std::to_string(m.size) + " but image_size is " +
                      std::to_string(cfg.image_size));
  }
  Trainer trainer(cfg, load_split(data, m, "train"));
  if (!resume.empty()) {
    trainer.resume(load_checkpoint(resume, cfg.fingerprint(), force));
    spdlog::info("resumed from {} at step {}", resume, trainer.step());
  }
  spdlog::info("training {} steps (codec {}, diffusion {}), fingerprint {}", trainer.total_steps(),
               cfg.train.codec_steps, cfg.train.diffusion_steps, cfg.fingerprint());
  trainer.run({out, stop_after, 50});
  std::cout << (trainer.finished() ? "finished" : "stopped") << " at step " << trainer.step() << "; checkpoint "
            << (out / (trainer.finished() ? "model.txrc" : "last.txrc")).string() << "\n";
  return kOk;
}

LoadedModel open_model(const fs::path& ckpt, const Common& c, const CLI::App& sub) {
  std::optional<RunConfig> expected;
  if (c.explicit_config(sub)) expected = c.resolve();
  LoadedModel m = load_model(ckpt, expected ? &*expected : nullptr, c.force);
  spdlog::info("loaded {} (fingerprint {})", ckpt.string(), m.config.fingerprint());
  return m;
}

int cmd_rectify(const LoadedModel& m, const fs::path& input, const fs::path& mask_path, const fs::path& out,
                std::uint64_t seed) {
  Image img = load_image(input);
  Mask mask = load_mask(mask_path);
  if (mask.height != img.dim(1) || mask.width != img.dim(2)) {
    throw DimensionError("mask " + mask_path.string() + " is " + std::to_string(mask.height) + "x" +
                         std::to_string(mask.width) + " but input is " + std::to_string(img.dim(1)) + "x" +
                         std::to_string(img.dim(2)));
  }
  const Index s = m.config.image_size;
  if (img.dim(1) != s || img.dim(2) != s) {
    spdlog::warn("resizing {}x{} input to the model size {}x{}", img.dim(1), img.dim(2), s, s);
    img = resize_image(img, s, s);
    mask = resize_mask(mask, s, s);
  }
  const auto t0 = std::chrono::steady_clock::now();
  const auto result = rectify_images(m, {&img}, {&mask}, seed);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  save_png(out, result.front(), {{"texrect.fingerprint", m.config.fingerprint()}});
  spdlog::info("rectified with {} DDIM steps (seed {}) in {:.2f}s -> {}", m.config.sample.ddim_steps, seed, secs,
               out.string());
  return kOk;
}

int cmd_eval(const LoadedModel& m, const fs::path& data, const std::string& split, const fs::path& out,
             std::uint64_t seed) {
  const DatasetManifest manifest = DatasetManifest::load(DatasetManifest::file_in(data));
  const EvalReport r = evaluate_split(data, manifest, split, model_rectifier(m, seed), out, m.config.fingerprint(),
                                      static_cast<std::size_t>(m.config.train.batch));
  const auto [sm, ss] = r.ssim_stats();
  const auto [gm, gs] = r.gmd_stats();
  std::cout << split << ": " << r.rows.size() << " images, ssim " << sm << " +- " << ss << ", gmd " << gm << " +- "
            << gs;
  if (!r.missing.empty()) std::cout << ", " << r.missing.size() << " missing";
  std::cout << "\nreport " << (out / "report.csv").string() << "\n";
  return kOk;
}

int cmd_ablate(const RunConfig& cfg, const fs::path& data, const fs::path& out, std::vector<std::string> variants,
               const std::string& split) {
  if (variants.empty()) variants.assign(kAblationVariants.begin(), kAblationVariants.end());
  const auto rows = run_ablation(cfg, variants, data, out, split);
  std::cout << ablation_csv(rows, GramExtractor().description());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  spdlog::set_default_logger(spdlog::stderr_color_mt("texrect"));
  spdlog::set_pattern("[%H:%M:%S] [%^%l%$] %v");

  CLI::App app{"texrect: holistic texture rectification with latent diffusion"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "texrect 1.0");

  Common common;
  fs::path src, out, data, input, mask, checkpoint;
  Index size = 0;
  int count = 16;
  std::string resume, split = "test";
  std::int64_t stop_after = 0;
  std::vector<std::string> variants;
  std::vector<double> splits;

  auto* textures = app.add_subcommand("make-textures", "write seeded procedural texture images");
  textures->add_option("--out", out, "output directory")->required();
  textures->add_option("--count", count, "number of textures")->check(CLI::PositiveNumber);
  textures->add_option("--size", size, "edge length in pixels (default 96)");
  textures->add_option("--seed", common.seed, "texture seed");

  auto* gen = app.add_subcommand("gen-data", "build a degraded/planar training set from source textures");
  gen->add_option("--src", src, "directory of source images")->required()->check(CLI::ExistingDirectory);
  gen->add_option("--out", out, "dataset directory")->required();
  gen->add_option("--size", size, "sample size S (overrides image_size)");
  gen->add_option("--splits", splits, "train,val,test fractions")->delimiter(',')->expected(3);
  add_common(*gen, common);

  auto* train = app.add_subcommand("train", "train the codec, then the diffusion model");
  train->add_option("--data", data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  train->add_option("--out", out, "run directory")->required();
  train->add_option("--resume", resume, "checkpoint to continue from")->check(CLI::ExistingFile);
  train->add_option("--stop-after", stop_after, "stop (with a checkpoint) at this global step");
  add_common(*train, common);

  auto* rect = app.add_subcommand("rectify", "rectify one image under its mask");
  rect->add_option("--input", input, "degraded image")->required()->check(CLI::ExistingFile);
  rect->add_option("--mask", mask, "binary mask image (white = valid)")->required()->check(CLI::ExistingFile);
  rect->add_option("--checkpoint", checkpoint, "trained model")->required();
  rect->add_option("--out", out, "output PNG")->required();
  add_common(*rect, common, false);

  auto* eval = app.add_subcommand("eval", "score a model on a dataset split");
  eval->add_option("--checkpoint", checkpoint, "trained model")->required();
  eval->add_option("--data", data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--split", split, "split to evaluate");
  eval->add_option("--out", out, "report directory")->required();
  add_common(*eval, common, false);

  auto* ablate = app.add_subcommand("ablate", "train and evaluate the ablation variants");
  ablate->add_option("--data", data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  ablate->add_option("--out", out, "output directory")->required();
  ablate->add_option("--variants", variants, "subset of: full concat crossattn sae pce")->delimiter(',');
  ablate->add_option("--split", split, "split to evaluate each variant on");
  add_common(*ablate, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*textures) return cmd_make_textures(out, count, size ? size : 96, common.seed.value_or(0));
    if (*gen) {
      if (size) common.overrides.push_back("image_size=" + std::to_string(size));
      const char* split_keys[] = {"data.split.train=", "data.split.val=", "data.split.test="};
      for (std::size_t i = 0; i < splits.size(); ++i) common.overrides.push_back(split_keys[i] + detail::fmt_double(splits[i]));
      return cmd_gen_data(common.resolve(), src, out);
    }
    if (*train) return cmd_train(common.resolve(), data, out, resume, stop_after, common.force);
    if (*rect) {
      const LoadedModel m = open_model(checkpoint, common, *rect);
      return cmd_rectify(m, input, mask, out, common.seed.value_or(m.config.seed));
    }
    if (*eval) {
      const LoadedModel m = open_model(checkpoint, common, *eval);
      return cmd_eval(m, data, split, out, common.seed.value_or(m.config.seed));
    }
    if (*ablate) {
      try {
        for (const auto& v : variants) ablation_config(RunConfig{}, v);
      } catch (const ConfigError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return static_cast<int>(CLI::ExitCodes::ValidationError);
      }
      return cmd_ablate(common.resolve(), data, out, variants, split);
    }
  } catch (const ConfigError& e) {
    spdlog::error("configuration error: {}", e.what());
    return kConfig;
  } catch (const DimensionError& e) {
    spdlog::error("dimension error: {}", e.what());
    return kDimension;
  } catch (const CheckpointError& e) {
    spdlog::error("checkpoint error: {}", e.what());
    return kCheckpoint;
  } catch (const TrainingDiverged& e) {
    spdlog::error("training diverged: {}", e.what());
    return kDiverged;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kFailure;
  }
  return kOk;
}
