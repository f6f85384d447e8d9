#include <gtest/gtest.h>

#include <fstream>

#include "support/tempdir.hpp"
#include "texrect/pipeline.hpp"
#include "texrect/textures.hpp"

using namespace texrect;
using texrect::testing::TempDir;

namespace {

RunConfig tiny_config() {
  RunConfig c = desk_preset();
  c.image_size = 16;
  c.model.codec.hidden = 8;
  c.model.codec.residual_blocks = 1;
  c.model.codec.codebook_size = 16;
  c.model.transformer.channel_divisor = 16;
  c.model.denoiser.base_channels = 8;
  c.model.denoiser.groups = 2;
  c.model.denoiser.blocks_per_level = 1;
  c.train.codec_steps = 6;
  c.train.codec_batch = 4;
  c.train.diffusion_steps = 6;
  c.train.batch = 2;
  c.train.checkpoint_every = 4;
  c.schedule.steps = 100;
  c.sample.ddim_steps = 5;
  c.data.samples_per_source = 1;
  c.splits = {0.6, 0.2, 0.2};
  return c.sync();
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

struct Fixture {
  TempDir root{"pipeline"};
  RunConfig cfg = tiny_config();
  DatasetManifest manifest;

  Fixture() {
    std::filesystem::create_directories(root / "src");
    for (int i = 0; i < 5; ++i) save_png(root / "src" / ("t" + std::to_string(i) + ".png"), procedural_texture(40, 40, i));
    manifest = build_dataset(root / "src", root / "data", cfg.splits, cfg.data, 5, cfg.fingerprint());
  }
  std::vector<DatasetSample> train() const { return load_split(root / "data", manifest, "train"); }
};

}  // namespace

TEST(Trainer, ResumeReproducesUninterruptedRun) {
  Fixture f;
  Trainer full(f.cfg, f.train());
  full.run({f.root / "full", 0, 0});
  ASSERT_TRUE(full.finished());

  // Interrupt once inside each stage.
  for (std::int64_t stop : {3, 9}) {
    const auto dir = f.root / ("split" + std::to_string(stop));
    Trainer first(f.cfg, f.train());
    first.run({dir, stop, 0});
    EXPECT_EQ(first.step(), stop);
    EXPECT_FALSE(std::filesystem::exists(dir / "model.txrc"));
    Trainer second(f.cfg, f.train());
    second.resume(load_checkpoint(dir / "last.txrc", f.cfg.fingerprint()));
    second.run({dir, 0, 0});
    EXPECT_EQ(slurp(dir / "model.txrc"), slurp(f.root / "full" / "model.txrc")) << stop;

    // The log stays strictly increasing across the restart.
    std::ifstream in(dir / "loss.csv");
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "# fingerprint=" + f.cfg.fingerprint());
    std::getline(in, line);
    EXPECT_EQ(line, "step,stage,loss,wall_time,seed");
    std::int64_t prev = 0, rows = 0;
    while (std::getline(in, line)) {
      const std::int64_t step = std::stoll(line);
      EXPECT_EQ(step, prev + 1);
      prev = step;
      ++rows;
    }
    EXPECT_EQ(rows, 12);
  }
  EXPECT_TRUE(std::filesystem::exists(f.root / "full" / "codec.txrc"));
  EXPECT_TRUE(std::filesystem::exists(f.root / "full" / "checkpoints" / "step_00000008.txrc"));
}

TEST(Trainer, RejectsWrongImageSize) {
  Fixture f;
  RunConfig other = f.cfg;
  other.image_size = 32;
  other.sync();
  EXPECT_THROW(Trainer(other, f.train()), DimensionError);
}

TEST(Rectify, DeterministicAndChecksSizes) {
  Fixture f;
  Trainer t(f.cfg, f.train());
  t.run({f.root / "run", 0, 0});
  const LoadedModel m = load_model(f.root / "run" / "model.txrc", &f.cfg);
  const auto samples = f.train();
  const std::vector<const Image*> imgs{&samples[0].degraded};
  const std::vector<const Mask*> masks{&samples[0].mask};
  const auto a = rectify_images(m, imgs, masks, 3);
  const auto b = rectify_images(m, imgs, masks, 3);
  ASSERT_EQ(a.size(), 1u);
  EXPECT_EQ(a[0].values(), b[0].values());
  EXPECT_EQ(a[0].shape(), (Shape{3, 16, 16}));
  for (float v : a[0].data()) EXPECT_TRUE(v >= 0.0f && v <= 1.0f);
  EXPECT_NE(rectify_images(m, imgs, masks, 4)[0].values(), a[0].values());

  const Mask wrong(8, 8, 1);
  EXPECT_THROW(rectify_images(m, imgs, {&wrong}, 3), DimensionError);

  RunConfig other = f.cfg;
  other.seed = 77;
  EXPECT_THROW(load_model(f.root / "run" / "model.txrc", &other), CheckpointError);
  EXPECT_NO_THROW(load_model(f.root / "run" / "model.txrc", &other, true));
  EXPECT_THROW(load_model(f.root / "run" / "nothing.txrc"), CheckpointError);

  // Evaluation through the trained model reproduces its report.
  const EvalReport r1 = evaluate_split(f.root / "data", f.manifest, "test", model_rectifier(m, 5), f.root / "e1", "fp");
  const EvalReport r2 = evaluate_split(f.root / "data", f.manifest, "test", model_rectifier(m, 5), f.root / "e2", "fp");
  EXPECT_EQ(slurp(f.root / "e1" / "report.csv"), slurp(f.root / "e2" / "report.csv"));
  EXPECT_EQ(r1.rows.size(), r2.rows.size());
}

TEST(Ablation, VariantsMapToComponentSwitches) {
  const RunConfig base = tiny_config();
  EXPECT_FALSE(ablation_config(base, "concat").model.denoiser.cross_condition);
  EXPECT_FALSE(ablation_config(base, "crossattn").model.denoiser.concat_condition);
  EXPECT_FALSE(ablation_config(base, "sae").model.transformer.partial);
  EXPECT_FALSE(ablation_config(base, "pce").model.transformer.self_attention);
  EXPECT_EQ(ablation_config(base, "full").fingerprint(), base.fingerprint());
  try {
    ablation_config(base, "dropout");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("full, concat, crossattn, sae, pce"), std::string::npos);
  }
}

TEST(Ablation, CsvHasOneRowPerVariant) {
  Fixture f;
  RunConfig c = f.cfg;
  c.train.codec_steps = 2;
  c.train.diffusion_steps = 2;
  const std::vector<std::string> variants(kAblationVariants.begin(), kAblationVariants.end());
  const auto rows = run_ablation(c, variants, f.root / "data", f.root / "abl", "test");
  ASSERT_EQ(rows.size(), 5u);
  std::ifstream in(f.root / "abl" / "ablation.csv");
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "variant,ssim,gmd,ssim_std,gmd_std,fingerprint");
  std::vector<std::string> seen;
  while (std::getline(in, line))
    if (line[0] != '#') seen.push_back(line.substr(0, line.find(',')));
  EXPECT_EQ(seen, variants);
}
