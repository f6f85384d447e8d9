#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "texrect/conv.hpp"
#include "texrect/module.hpp"
#include "texrect/ops.hpp"
#include "texrect/optim.hpp"

namespace texrect {

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CodecConfig {
  Index image_size = 64;
  Index downsample = 4;  ///< f, a power of two
  Index latent_channels = 4;
  Index codebook_size = 512;
  Index hidden = 32;
  int residual_blocks = 3;
  double commitment = 0.25;
  int dead_code_steps = 100;

  int downsample_levels() const {
    int levels = 0;
    for (Index f = downsample; f > 1; f /= 2) ++levels;
    return levels;
  }
  Index latent_side() const { return image_size / downsample; }

  void validate() const {
    if (downsample < 1 || (downsample & (downsample - 1)) != 0) throw ConfigError("codec downsample must be a power of 2");
    if (image_size % downsample != 0) {
      throw DimensionError("image size " + std::to_string(image_size) + " is not divisible by f = " +
                           std::to_string(downsample));
    }
    if (codebook_size < 2) throw ConfigError("codebook needs at least 2 entries");
  }
};

/// relu -> 3x3 conv -> relu -> 1x1 conv, added to the input.
template <typename T>
struct ResidualBlock {
  Conv2d<T> conv3, conv1;
  ResidualBlock() = default;
  ResidualBlock(Index ch, Rng& rng) : conv3(ch, ch, 3, 1, rng), conv1(ch, ch, 1, 1, rng) {}
  Tensor<T> operator()(const Tensor<T>& x) const { return add(x, conv1(relu(conv3(relu(x))))); }
  void collect(ParameterList<T>& l, const std::string& p) const {
    conv3.collect(l, p + ".conv3");
    conv1.collect(l, p + ".conv1");
  }
};

/// Nearest-codebook assignment of token rows.
struct Quantized {
  std::vector<Index> indices;
};

/// Vector-quantised autoencoder. Images in [-1,1], latents c x S/f x S/f.
template <typename T>
class VqCodec {
 public:
  VqCodec() = default;
  VqCodec(const CodecConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    const Index h = cfg.hidden;
    enc_in_ = Conv2d<T>(3, h, 3, 1, rng);
    for (int i = 0; i < cfg.downsample_levels(); ++i) enc_down_.emplace_back(h, h, 3, 2, rng);
    for (int i = 0; i < cfg.residual_blocks; ++i) enc_res_.emplace_back(h, rng);
    enc_out_ = Conv2d<T>(h, cfg.latent_channels, 1, 1, rng);
    dec_in_ = Conv2d<T>(cfg.latent_channels, h, 3, 1, rng);
    for (int i = 0; i < cfg.residual_blocks; ++i) dec_res_.emplace_back(h, rng);
    for (int i = 0; i < cfg.downsample_levels(); ++i) dec_up_.emplace_back(h, h, 3, 1, rng);
    dec_out_ = Conv2d<T>(h, 3, 3, 1, rng);
    const double bound = 1.0 / static_cast<double>(cfg.codebook_size);
    codebook_ = uniform_param<T>({cfg.codebook_size, cfg.latent_channels}, bound, rng);
    idle_ = Tensor<T>(Shape{cfg.codebook_size}, T(0));
    initialised_ = Tensor<T>(Shape{1}, T(0));
    latent_scale_ = Tensor<T>(Shape{1}, T(1));
  }

  const CodecConfig& config() const { return cfg_; }
  const Tensor<T>& codebook() const { return codebook_; }
  const Tensor<T>& idle_steps() const { return idle_; }
  T latent_scale() const { return latent_scale_[0]; }
  void set_latent_scale(T s) { latent_scale_.mutable_data()[0] = s; }

  /// Continuous encoder output [N,c,h,w].
  Tensor<T> encode_continuous(const Tensor<T>& images) const {
    check_image(images);
    Tensor<T> x = relu(enc_in_(images));
    for (const auto& d : enc_down_) x = relu(d(x));
    for (const auto& r : enc_res_) x = r(x);
    return enc_out_(relu(x));
  }

  /// Index of the nearest codebook row for each latent vector of z [N,c,h,w].
  Quantized assign(const Tensor<T>& z) const {
    const Index n = z.dim(0), c = z.dim(1), hw = z.dim(2) * z.dim(3), k = cfg_.codebook_size;
    const auto zv = z.data();
    const auto cb = codebook_.data();
    Quantized q;
    q.indices.resize(static_cast<std::size_t>(n * hw));
    for (Index b = 0; b < n; ++b)
      for (Index p = 0; p < hw; ++p) {
        T best = std::numeric_limits<T>::infinity();
        Index arg = 0;
        for (Index e = 0; e < k; ++e) {
          T d = T(0);
          for (Index ch = 0; ch < c; ++ch) {
            const T diff = zv[(b * c + ch) * hw + p] - cb[e * c + ch];
            d += diff * diff;
          }
          if (d < best) {
            best = d;
            arg = e;
          }
        }
        q.indices[b * hw + p] = arg;
      }
    return q;
  }

  /// Codebook rows for `q`, laid out as [N,c,h,w] (differentiable w.r.t. the codebook).
  Tensor<T> lookup(const Quantized& q, Index n, Index h, Index w) const {
    Tensor<T> rows = gather_rows(codebook_, q.indices);  // [N*h*w, c]
    const Index c = cfg_.latent_channels;
    return reshape(transpose(reshape(rows, Shape{n, h * w, c})), Shape{n, c, h, w});
  }

  /// Maps continuous latents to their nearest codebook entries (no gradient).
  Tensor<T> quantize(const Tensor<T>& z) const {
    NoGradGuard no_grad;
    return lookup(assign(z), z.dim(0), z.dim(2), z.dim(3));
  }

  /// Quantised latent [N,c,S/f,S/f] of images [N,3,S,S] in [-1,1].
  Tensor<T> encode(const Tensor<T>& images) const {
    NoGradGuard no_grad;
    return quantize(encode_continuous(images));
  }

  /// Raw decoder output (unclamped, differentiable).
  Tensor<T> decode_raw(const Tensor<T>& z) const {
    const Index s = cfg_.latent_side();
    if (z.rank() != 4 || z.dim(1) != cfg_.latent_channels || z.dim(2) != s || z.dim(3) != s) {
      throw DimensionError("decode: expected latent [N," + std::to_string(cfg_.latent_channels) + "," +
                           std::to_string(s) + "," + std::to_string(s) + "], got " + shape_str(z.shape()));
    }
    Tensor<T> x = dec_in_(z);
    for (const auto& r : dec_res_) x = r(x);
    x = relu(x);
    for (const auto& u : dec_up_) x = relu(u(upsample_nearest2x(x)));
    return dec_out_(x);
  }

  /// Image [N,3,S,S] clamped to [-1,1].
  Tensor<T> decode(const Tensor<T>& z) const {
    NoGradGuard no_grad;
    Tensor<T> x = decode_raw(z);
    auto v = x.mutable_data();
    for (auto& e : v) e = std::clamp(e, T(-1), T(1));
    return x;
  }

  struct Losses {
    Tensor<T> total;
    T reconstruction, codebook, commitment;
    Quantized assignment;
  };

  /// Reconstruction MSE + codebook loss + commitment * commitment loss,
  /// with the straight-through estimator carrying decoder gradients to
  /// the encoder.
  Losses losses(const Tensor<T>& images) const {
    Tensor<T> z = encode_continuous(images);
    Quantized q = assign(z);
    Tensor<T> e = lookup(q, z.dim(0), z.dim(2), z.dim(3));
    Tensor<T> st = add(z, stop_gradient(sub(e, z)));
    Tensor<T> recon = mse_loss(decode_raw(st), images);
    Tensor<T> cb = mse_loss(e, stop_gradient(z));
    Tensor<T> commit = mse_loss(z, stop_gradient(e));
    Tensor<T> total = add(add(recon, cb), scale(commit, static_cast<T>(cfg_.commitment)));
    return {total, recon.item(), cb.item(), commit.item(), std::move(q)};
  }

  /// Codebook initialisation from encoder outputs, and re-seeding of entries
  /// unused for `dead_code_steps` consecutive steps. Draws come from `rng`.
  void update_codebook_usage(const Tensor<T>& z, const Quantized& q, Rng& rng) {
    const Index k = cfg_.codebook_size, c = cfg_.latent_channels;
    const Index hw = z.dim(2) * z.dim(3), rows = static_cast<Index>(q.indices.size());
    const auto zv = z.data();
    auto row_of = [&](Index r, Index ch) { return zv[((r / hw) * c + ch) * hw + r % hw]; };
    auto cb = codebook_.mutable_data();
    auto reseed = [&](Index e) {
      const Index r = rng.uniform_int(0, rows - 1);
      for (Index ch = 0; ch < c; ++ch) cb[e * c + ch] = row_of(r, ch) + static_cast<T>(0.01 * rng.normal());
    };
    if (initialised_[0] == T(0)) {
      for (Index e = 0; e < k; ++e) reseed(e);
      initialised_.mutable_data()[0] = T(1);
      return;
    }
    std::vector<bool> used(static_cast<std::size_t>(k), false);
    for (Index i : q.indices) used[i] = true;
    auto idle = idle_.mutable_data();
    for (Index e = 0; e < k; ++e) {
      idle[e] = used[e] ? T(0) : idle[e] + T(1);
      if (idle[e] >= static_cast<T>(cfg_.dead_code_steps)) {
        reseed(e);
        idle[e] = T(0);
      }
    }
  }

  void set_trainable(bool on) {
    for (Tensor<T> t : parameters().trainable()) t.set_requires_grad(on);
  }

  void collect(ParameterList<T>& l, const std::string& p) const {
    enc_in_.collect(l, p + ".enc_in");
    for (std::size_t i = 0; i < enc_down_.size(); ++i) enc_down_[i].collect(l, p + ".enc_down" + std::to_string(i));
    for (std::size_t i = 0; i < enc_res_.size(); ++i) enc_res_[i].collect(l, p + ".enc_res" + std::to_string(i));
    enc_out_.collect(l, p + ".enc_out");
    dec_in_.collect(l, p + ".dec_in");
    for (std::size_t i = 0; i < dec_res_.size(); ++i) dec_res_[i].collect(l, p + ".dec_res" + std::to_string(i));
    for (std::size_t i = 0; i < dec_up_.size(); ++i) dec_up_[i].collect(l, p + ".dec_up" + std::to_string(i));
    dec_out_.collect(l, p + ".dec_out");
    l.add(p + ".codebook", codebook_);
    l.add(p + ".codebook_idle", idle_, false);
    l.add(p + ".codebook_initialised", initialised_, false);
    l.add(p + ".latent_scale", latent_scale_, false);
  }

  ParameterList<T> parameters(const std::string& prefix = "codec") const {
    ParameterList<T> l;
    collect(l, prefix);
    return l;
  }

 private:
  void check_image(const Tensor<T>& images) const {
    if (images.rank() != 4 || images.dim(1) != 3) {
      throw DimensionError("codec: expected images [N,3,S,S], got " + shape_str(images.shape()));
    }
    if (images.dim(2) % cfg_.downsample != 0 || images.dim(3) % cfg_.downsample != 0) {
      throw DimensionError("codec: image size " + shape_str(images.shape()) + " not divisible by f = " +
                           std::to_string(cfg_.downsample));
    }
    if (images.dim(2) != cfg_.image_size || images.dim(3) != cfg_.image_size) {
      throw DimensionError("codec: configured for " + std::to_string(cfg_.image_size) + "px images, got " +
                           shape_str(images.shape()));
    }
  }

  CodecConfig cfg_;
  Conv2d<T> enc_in_, enc_out_, dec_in_, dec_out_;
  std::vector<Conv2d<T>> enc_down_, dec_up_;
  std::vector<ResidualBlock<T>> enc_res_, dec_res_;
  Tensor<T> codebook_, idle_, initialised_, latent_scale_;
};

struct CodecStepReport {
  std::int64_t step = 0;
  double total = 0, reconstruction = 0, codebook = 0, commitment = 0;
};

/// One optimisation step on a batch. Throws TrainingDiverged on a NaN loss.
template <typename T>
CodecStepReport codec_train_step(VqCodec<T>& codec, Adam<T>& opt, const Tensor<T>& batch, Rng& rng) {
  opt.zero_grad();
  auto l = codec.losses(batch);
  const double total = static_cast<double>(l.total.item());
  if (!std::isfinite(total)) {
    throw TrainingDiverged("codec loss is not finite at step " + std::to_string(opt.steps() + 1) +
                           " (reconstruction " + std::to_string(l.reconstruction) + ", codebook " +
                           std::to_string(l.codebook) + ", commitment " + std::to_string(l.commitment) + ")");
  }
  l.total.backward();
  opt.step();
  {
    NoGradGuard no_grad;
    codec.update_codebook_usage(codec.encode_continuous(batch), l.assignment, rng);
  }
  return {opt.steps(), total, static_cast<double>(l.reconstruction), static_cast<double>(l.codebook),
          static_cast<double>(l.commitment)};
}

/// 1 / standard deviation of the quantised latents of `images`, used to
/// bring diffusion targets to roughly unit variance.
template <typename T>
T latent_scale_for(const VqCodec<T>& codec, const std::vector<Tensor<T>>& batches) {
  double s = 0, s2 = 0;
  std::size_t n = 0;
  for (const auto& b : batches) {
    const Tensor<T> z = codec.encode(b);
    for (T v : z.data()) {
      s += v;
      s2 += static_cast<double>(v) * v;
      ++n;
    }
  }
  const double mean = s / static_cast<double>(n);
  const double var = s2 / static_cast<double>(n) - mean * mean;
  return var > 1e-12 ? static_cast<T>(1.0 / std::sqrt(var)) : T(1);
}

}  // namespace texrect
