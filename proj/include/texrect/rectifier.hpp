#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "texrect/codec.hpp"
#include "texrect/denoiser.hpp"
#include "texrect/diffusion.hpp"
#include "texrect/latent_transformer.hpp"
#include "texrect/optim.hpp"

namespace texrect {

struct RectifierConfig {
  CodecConfig codec;
  LatentTransformerConfig transformer;
  DenoiserConfig denoiser;

  /// Propagates the image size and latent/context widths between components.
  void sync() {
    transformer.image_size = codec.image_size;
    denoiser.latent_channels = codec.latent_channels;
    denoiser.latent_side = codec.latent_side();
    denoiser.context_channels = transformer.output_channels();
  }
};

/// The two conditions of a batch: z_vq-d [N,c,h,w] and z_lt-d [N,C_lt,L].
/// A condition the denoiser does not consume stays undefined.
template <typename T>
struct Conditions {
  Tensor<T> vq, lt;
};

/// Codec + occlusion-aware latent transformer + denoiser, with learned null
/// conditions for classifier-free guidance.
template <typename T>
class Rectifier {
 public:
  Rectifier() = default;
  Rectifier(RectifierConfig cfg, std::uint64_t seed) {
    cfg.sync();
    cfg_ = cfg;
    Rng codec_rng(derive_seed(seed, 0xC0DEC)), lt_rng(derive_seed(seed, 0x17)), unet_rng(derive_seed(seed, 0xE95));
    codec = VqCodec<T>(cfg.codec, codec_rng);
    transformer = LatentTransformer<T>(cfg.transformer, lt_rng);
    denoiser = Denoiser<T>(cfg.denoiser, unet_rng);
    const Index side = cfg.codec.latent_side();
    null_vq = constant_param<T>({1, cfg.codec.latent_channels, side, side}, T(0));
    null_lt = constant_param<T>({1, cfg.transformer.output_channels(), 1}, T(0));
  }

  const RectifierConfig& config() const { return cfg_; }

  /// Scaled, quantised latents of images in [-1,1].
  Tensor<T> latents(const Tensor<T>& images) const {
    NoGradGuard no_grad;
    return scale(codec.encode(images), codec.latent_scale());
  }

  /// Images in [-1,1] from scaled latents.
  Tensor<T> images(const Tensor<T>& latents) const {
    NoGradGuard no_grad;
    return codec.decode(scale(latents, T(1) / codec.latent_scale()));
  }

  /// Conditions for degraded images [N,3,S,S] (already encoded as `degraded_latent`)
  /// and masks [N,1,S,S]; items flagged in `drop` get the null conditions.
  Conditions<T> conditions(const Tensor<T>& degraded_latent, const Tensor<T>& degraded, const Tensor<T>& masks,
                           bool training, const std::vector<bool>& drop) const {
    Conditions<T> c;
    if (cfg_.denoiser.concat_condition) c.vq = replace_items(degraded_latent, null_vq, drop);
    if (cfg_.denoiser.cross_condition) {
      const Tensor<T> lt = transformer(degraded, masks, training);
      c.lt = replace_items(lt, repeat_last(null_lt, lt.dim(2)), drop);
    }
    return c;
  }

  /// Null conditions for a batch of `n` items.
  Conditions<T> null_conditions(Index n) const {
    Conditions<T> c;
    const std::vector<bool> all(static_cast<std::size_t>(n), true);
    if (cfg_.denoiser.concat_condition) {
      Shape s = null_vq.shape();
      s[0] = n;
      c.vq = replace_items(Tensor<T>(s, T(0)), null_vq, all);
    }
    if (cfg_.denoiser.cross_condition) {
      const Index len = cfg_.transformer.tokens();
      c.lt = replace_items(Tensor<T>(Shape{n, null_lt.dim(1), len}, T(0)), repeat_last(null_lt, len), all);
    }
    return c;
  }

  Tensor<T> predict(const Tensor<T>& z_t, const std::vector<int>& t, const Conditions<T>& c) const {
    return denoiser(z_t, t, c.vq, c.lt);
  }

  /// Parameters trained in the diffusion stage (the codec stays frozen).
  ParameterList<T> diffusion_parameters() const {
    ParameterList<T> l;
    if (cfg_.denoiser.cross_condition) transformer.collect(l, "transformer");
    denoiser.collect(l, "denoiser");
    l.add("null.vq", null_vq);
    l.add("null.lt", null_lt);
    return l;
  }

  ParameterList<T> parameters() const {
    ParameterList<T> l = codec.parameters("codec");
    l.append(diffusion_parameters());
    return l;
  }

  VqCodec<T> codec;
  LatentTransformer<T> transformer;
  Denoiser<T> denoiser;
  Tensor<T> null_vq, null_lt;

 private:
  RectifierConfig cfg_;
};

/// Training pairs with latents precomputed by the frozen codec.
template <typename T>
struct PairBatch {
  Tensor<T> planar_latent;    ///< z_0
  Tensor<T> degraded_latent;  ///< z_vq-d before null substitution
  Tensor<T> degraded;         ///< [N,3,S,S] in [-1,1]
  Tensor<T> mask;             ///< [N,1,S,S]
};

struct DiffusionStepReport {
  std::int64_t step = 0;
  double loss = 0;
  int dropped = 0;
};

/// One optimisation step of the noise-prediction objective. Per item, both
/// conditions are replaced by the null ones with probability p_uncond.
/// Draw order from `rng`: drop flags, timesteps, noise.
template <typename T>
DiffusionStepReport diffusion_training_step(const Rectifier<T>& model, Adam<T>& opt, const PairBatch<T>& batch,
                                            const NoiseSchedule& sched, Rng& rng, double p_uncond) {
  const Index n = batch.planar_latent.dim(0);
  if (n == 0) throw ContractError("diffusion training step on an empty batch");
  std::vector<bool> drop(static_cast<std::size_t>(n));
  int dropped = 0;
  for (std::size_t i = 0; i < drop.size(); ++i) dropped += (drop[i] = rng.bernoulli(p_uncond));
  opt.zero_grad();
  const Conditions<T> cond = model.conditions(batch.degraded_latent, batch.degraded, batch.mask, true, drop);
  NoisePredictor<T> predict = [&](const Tensor<T>& zt, const std::vector<int>& t) { return model.predict(zt, t, cond); };
  DiffusionLoss<T> l = diffusion_loss(batch.planar_latent, predict, sched, rng);
  const double value = static_cast<double>(l.loss.item());
  if (!std::isfinite(value)) {
    std::string ts;
    for (int t : l.timesteps) ts += (ts.empty() ? "" : ",") + std::to_string(t);
    throw TrainingDiverged("diffusion loss is not finite at step " + std::to_string(opt.steps() + 1) +
                           " (timesteps " + ts + ", dropped " + std::to_string(dropped) + ")");
  }
  l.loss.backward();
  opt.step();
  return {opt.steps(), value, dropped};
}

struct SamplerOptions {
  int steps = 200;
  double eta = 0.0;
  double guidance_scale = 1.0;
  std::uint64_t seed = 0;
};

/// Rectified images [N,3,S,S] in [-1,1] for degraded images and masks.
/// With guidance_scale = 1 the null branch is never evaluated.
template <typename T>
Tensor<T> ddim_sample(const Rectifier<T>& model, const Tensor<T>& degraded, const Tensor<T>& masks,
                      const NoiseSchedule& sched, const SamplerOptions& opts) {
  NoGradGuard no_grad;
  const Index n = degraded.dim(0);
  const std::vector<bool> keep(static_cast<std::size_t>(n), false);
  Tensor<T> zvq = model.config().denoiser.concat_condition ? model.latents(degraded) : Tensor<T>();
  const Conditions<T> cond = model.conditions(zvq, degraded, masks, false, keep);
  const bool guided = opts.guidance_scale != 1.0;
  const Conditions<T> uncond = guided ? model.null_conditions(n) : Conditions<T>{};
  NoisePredictor<T> predict = [&](const Tensor<T>& zt, const std::vector<int>& t) {
    Tensor<T> eps = model.predict(zt, t, cond);
    if (!guided) return eps;
    return guided_noise(eps, model.predict(zt, t, uncond), opts.guidance_scale);
  };
  const RectifierConfig& cfg = model.config();
  const Index side = cfg.codec.latent_side();
  const Tensor<T> z0 = ddim_loop<T>(Shape{n, cfg.codec.latent_channels, side, side}, predict, sched, opts.steps,
                                    opts.eta, opts.seed);
  return model.images(z0);
}

}  // namespace texrect
