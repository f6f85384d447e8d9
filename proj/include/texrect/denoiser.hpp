#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "texrect/attention.hpp"
#include "texrect/conv.hpp"
#include "texrect/module.hpp"
#include "texrect/ops.hpp"

namespace texrect {

struct DenoiserConfig {
  Index latent_channels = 4;
  Index latent_side = 16;
  Index base_channels = 32;
  std::vector<Index> channel_mults{1, 2};
  std::vector<bool> attention_levels{false, true};  ///< cross-attention per resolution level
  bool attention_mid = true;
  int blocks_per_level = 2;
  Index groups = 8;
  Index context_channels = 64;  ///< C_lt, width of each conditioning token
  bool concat_condition = true;  ///< feed z_vq-d next to the noisy latent
  bool cross_condition = true;   ///< attend to z_lt-d

  Index time_channels() const { return 4 * base_channels; }
  Index input_channels() const { return concat_condition ? 2 * latent_channels : latent_channels; }
  Index level_channels(std::size_t level) const { return base_channels * channel_mults[level]; }

  void validate() const {
    if (channel_mults.empty() || attention_levels.size() != channel_mults.size()) {
      throw ConfigError("denoiser: one attention flag per resolution level is required");
    }
    if (latent_side % (Index(1) << (channel_mults.size() - 1)) != 0) {
      throw ConfigError("denoiser: latent side " + std::to_string(latent_side) + " cannot be halved " +
                        std::to_string(channel_mults.size() - 1) + " times");
    }
    if (cross_condition && !attention_mid &&
        std::none_of(attention_levels.begin(), attention_levels.end(), [](bool b) { return b; })) {
      throw ConfigError("denoiser: cross-attention conditioning needs at least one attention site");
    }
    for (std::size_t l = 0; l < channel_mults.size(); ++l)
      if (level_channels(l) % groups != 0) throw ConfigError("denoiser: channels not divisible by group count");
  }
};

/// Sinusoidal features of integer timesteps: [sin(t w_i), cos(t w_i)],
/// w_i = 10000^(-i/half), as a [N, dim] tensor.
template <typename T>
Tensor<T> timestep_features(const std::vector<int>& t, Index dim) {
  const Index half = dim / 2;
  std::vector<T> out(static_cast<std::size_t>(t.size()) * dim, T(0));
  for (std::size_t n = 0; n < t.size(); ++n)
    for (Index i = 0; i < half; ++i) {
      const double w = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(half));
      out[n * dim + i] = static_cast<T>(std::sin(t[n] * w));
      out[n * dim + half + i] = static_cast<T>(std::cos(t[n] * w));
    }
  return Tensor<T>(Shape{static_cast<Index>(t.size()), dim}, std::move(out));
}

/// GN -> SiLU -> conv -> + time bias -> GN -> SiLU -> conv (zero-init), plus a
/// 1x1 skip when the width changes.
template <typename T>
struct TimeResBlock {
  GroupNorm<T> norm1, norm2;
  Conv2d<T> conv1, conv2, skip;
  Linear<T> time;
  bool has_skip = false;

  TimeResBlock() = default;
  TimeResBlock(Index in, Index out, Index time_ch, Index groups, Rng& rng)
      : norm1(in, groups),
        norm2(out, groups),
        conv1(in, out, 3, 1, rng),
        conv2(out, out, 3, 1, rng, true),
        time(time_ch, out, rng),
        has_skip(in != out) {
    if (has_skip) skip = Conv2d<T>(in, out, 1, 1, rng);
  }

  Tensor<T> operator()(const Tensor<T>& x, const Tensor<T>& temb) const {
    Tensor<T> h = conv1(silu(norm1(x)));
    h = add_channel_vector(h, time(silu(temb)));
    h = conv2(silu(norm2(h)));
    return add(has_skip ? skip(x) : x, h);
  }

  void collect(ParameterList<T>& l, const std::string& p) const {
    norm1.collect(l, p + ".norm1");
    conv1.collect(l, p + ".conv1");
    time.collect(l, p + ".time");
    norm2.collect(l, p + ".norm2");
    conv2.collect(l, p + ".conv2");
    if (has_skip) skip.collect(l, p + ".skip");
  }
};

/// Time-conditioned U-Net predicting the noise of a latent, conditioned on
/// z_vq-d by channel concatenation and on z_lt-d by cross-attention.
template <typename T>
class Denoiser {
 public:
  Denoiser() = default;
  Denoiser(const DenoiserConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    const Index tc = cfg.time_channels(), g = cfg.groups;
    time1_ = Linear<T>(cfg.base_channels, tc, rng);
    time2_ = Linear<T>(tc, tc, rng);
    conv_in_ = Conv2d<T>(cfg.input_channels(), cfg.base_channels, 3, 1, rng);

    std::vector<Index> skip_ch{cfg.base_channels};
    Index ch = cfg.base_channels;
    const std::size_t levels = cfg.channel_mults.size();
    for (std::size_t l = 0; l < levels; ++l) {
      const Index out = cfg.level_channels(l);
      for (int b = 0; b < cfg.blocks_per_level; ++b) {
        Stage s;
        s.block = TimeResBlock<T>(ch, out, tc, g, rng);
        ch = out;
        if (attends(l)) s.attention = CrossAttention<T>(ch, cfg.context_channels, ch, g, rng);
        s.has_attention = attends(l);
        down_.push_back(std::move(s));
        skip_ch.push_back(ch);
      }
      if (l + 1 < levels) {
        downsample_.emplace_back(ch, ch, 3, 2, rng);
        skip_ch.push_back(ch);
      }
    }
    mid1_ = TimeResBlock<T>(ch, ch, tc, g, rng);
    mid_has_attention_ = cfg.attention_mid && cfg.cross_condition;
    if (mid_has_attention_) mid_attention_ = CrossAttention<T>(ch, cfg.context_channels, ch, g, rng);
    mid2_ = TimeResBlock<T>(ch, ch, tc, g, rng);

    for (std::size_t li = levels; li-- > 0;) {
      const Index out = cfg.level_channels(li);
      for (int b = 0; b <= cfg.blocks_per_level; ++b) {
        Stage s;
        const Index skip = skip_ch.back();
        skip_ch.pop_back();
        s.block = TimeResBlock<T>(ch + skip, out, tc, g, rng);
        ch = out;
        if (attends(li)) s.attention = CrossAttention<T>(ch, cfg.context_channels, ch, g, rng);
        s.has_attention = attends(li);
        up_.push_back(std::move(s));
      }
      if (li > 0) upsample_.emplace_back(ch, ch, 3, 1, rng);
    }
    norm_out_ = GroupNorm<T>(ch, g);
    conv_out_ = Conv2d<T>(ch, cfg.latent_channels, 3, 1, rng, true);
  }

  const DenoiserConfig& config() const { return cfg_; }

  /// Time embedding [N, time_channels] of integer timesteps.
  Tensor<T> time_embedding(const std::vector<int>& t) const {
    return time2_(silu(time1_(timestep_features<T>(t, cfg_.base_channels))));
  }

  /// eps_hat for noisy latents z_t [N,c,h,w] at timesteps t, with conditions
  /// z_vq [N,c,h,w] and z_lt [N,C_lt,L]. Unused conditions may be undefined.
  Tensor<T> operator()(const Tensor<T>& z_t, const std::vector<int>& t, const Tensor<T>& z_vq,
                       const Tensor<T>& z_lt) const {
    const Index n = z_t.dim(0), c = cfg_.latent_channels, s = cfg_.latent_side;
    if (z_t.rank() != 4 || z_t.dim(1) != c || z_t.dim(2) != s || z_t.dim(3) != s) {
      throw DimensionError("denoiser: noisy latent " + shape_str(z_t.shape()) + " does not match config [N," +
                           std::to_string(c) + "," + std::to_string(s) + "," + std::to_string(s) + "]");
    }
    if (static_cast<Index>(t.size()) != n) throw DimensionError("denoiser: one timestep per item required");
    Tensor<T> x = z_t;
    if (cfg_.concat_condition) {
      if (!z_vq.defined() || z_vq.shape() != z_t.shape()) {
        throw DimensionError("denoiser: z_vq-d must match the noisy latent " + shape_str(z_t.shape()));
      }
      x = concat(std::vector<Tensor<T>>{z_t, z_vq}, 1);
    }
    if (cfg_.cross_condition && (!z_lt.defined() || z_lt.rank() != 3 || z_lt.dim(0) != n)) {
      throw DimensionError("denoiser: z_lt-d must be [N, C_lt, L]");
    }
    const Tensor<T> temb = time_embedding(t);

    x = conv_in_(x);
    std::vector<Tensor<T>> skips{x};
    std::size_t di = 0;
    for (std::size_t l = 0; l < cfg_.channel_mults.size(); ++l) {
      for (int b = 0; b < cfg_.blocks_per_level; ++b) {
        x = down_[di++].apply(x, temb, z_lt);
        skips.push_back(x);
      }
      if (l < downsample_.size()) {
        x = downsample_[l](x);
        skips.push_back(x);
      }
    }
    x = mid1_(x, temb);
    if (mid_has_attention_) x = mid_attention_(x, z_lt);
    x = mid2_(x, temb);

    std::size_t ui = 0;
    for (std::size_t k = 0; k < cfg_.channel_mults.size(); ++k) {
      for (int b = 0; b <= cfg_.blocks_per_level; ++b) {
        x = concat(std::vector<Tensor<T>>{x, skips.back()}, 1);
        skips.pop_back();
        x = up_[ui++].apply(x, temb, z_lt);
      }
      if (k < upsample_.size()) x = upsample_[k](upsample_nearest2x(x));
    }
    return conv_out_(silu(norm_out_(x)));
  }

  void collect(ParameterList<T>& l, const std::string& p) const {
    time1_.collect(l, p + ".time.fc1");
    time2_.collect(l, p + ".time.fc2");
    conv_in_.collect(l, p + ".conv_in");
    for (std::size_t i = 0; i < down_.size(); ++i) down_[i].collect(l, p + ".down" + std::to_string(i));
    for (std::size_t i = 0; i < downsample_.size(); ++i) downsample_[i].collect(l, p + ".downsample" + std::to_string(i));
    mid1_.collect(l, p + ".mid.block1");
    if (mid_has_attention_) mid_attention_.collect(l, p + ".mid.attention");
    mid2_.collect(l, p + ".mid.block2");
    for (std::size_t i = 0; i < up_.size(); ++i) up_[i].collect(l, p + ".up" + std::to_string(i));
    for (std::size_t i = 0; i < upsample_.size(); ++i) upsample_[i].collect(l, p + ".upsample" + std::to_string(i));
    norm_out_.collect(l, p + ".norm_out");
    conv_out_.collect(l, p + ".conv_out");
  }

  ParameterList<T> parameters(const std::string& prefix = "denoiser") const {
    ParameterList<T> l;
    collect(l, prefix);
    return l;
  }

 private:
  struct Stage {
    TimeResBlock<T> block;
    CrossAttention<T> attention;
    bool has_attention = false;

    Tensor<T> apply(const Tensor<T>& x, const Tensor<T>& temb, const Tensor<T>& ctx) const {
      Tensor<T> y = block(x, temb);
      return has_attention ? attention(y, ctx) : y;
    }
    void collect(ParameterList<T>& l, const std::string& p) const {
      block.collect(l, p + ".block");
      if (has_attention) attention.collect(l, p + ".attention");
    }
  };

  bool attends(std::size_t level) const { return cfg_.cross_condition && cfg_.attention_levels[level]; }

  DenoiserConfig cfg_;
  Linear<T> time1_, time2_;
  Conv2d<T> conv_in_, conv_out_;
  std::vector<Stage> down_, up_;
  std::vector<Conv2d<T>> downsample_, upsample_;
  TimeResBlock<T> mid1_, mid2_;
  CrossAttention<T> mid_attention_;
  bool mid_has_attention_ = false;
  GroupNorm<T> norm_out_;
};

}  // namespace texrect
