#pragma once

#include <algorithm>
#include <array>
#include <memory>
#include <string>
#include <vector>

#include "texrect/attention.hpp"
#include "texrect/conv.hpp"
#include "texrect/image.hpp"
#include "texrect/module.hpp"
#include "texrect/norm.hpp"

namespace texrect {

/// Features with a single-channel validity mask shared by all channels.
template <typename T>
struct PartialFeature {
  Tensor<T> features;  ///< [N,C,H,W]
  Tensor<T> mask;      ///< [N,1,H,W], values in {0,1}
};

/// Updated mask of a k x k window sweep: 1 wherever the window saw any
/// valid input. Also returns the renormalisation factor per output location:
/// (in-bounds window size) / (valid count), or 0 where nothing was valid.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> partial_window_stats(const Tensor<T>& mask, Index kernel, Index stride, Index pad) {
  const Index n = mask.dim(0), h = mask.dim(2), w = mask.dim(3);
  const Index oh = conv_out_extent(h, kernel, stride, pad), ow = conv_out_extent(w, kernel, stride, pad);
  std::vector<T> updated(static_cast<std::size_t>(n * oh * ow), T(0));
  std::vector<T> ratio(updated.size(), T(0));
  const auto m = mask.data();
  for (Index b = 0; b < n; ++b)
    for (Index oy = 0; oy < oh; ++oy)
      for (Index ox = 0; ox < ow; ++ox) {
        Index valid = 0, inside = 0;
        for (Index ky = 0; ky < kernel; ++ky) {
          const Index y = oy * stride - pad + ky;
          if (y < 0 || y >= h) continue;
          for (Index kx = 0; kx < kernel; ++kx) {
            const Index x = ox * stride - pad + kx;
            if (x < 0 || x >= w) continue;
            ++inside;
            valid += m[(b * h + y) * w + x] != T(0);
          }
        }
        const Index o = (b * oh + oy) * ow + ox;
        if (valid > 0) {
          updated[o] = T(1);
          ratio[o] = static_cast<T>(inside) / static_cast<T>(valid);
        }
      }
  return {Tensor<T>(Shape{n, 1, oh, ow}, std::move(updated)), Tensor<T>(Shape{n, 1, oh, ow}, std::move(ratio))};
}

template <typename T>
void require_binary_mask(const Tensor<T>& mask) {
  for (T v : mask.data())
    if (v != T(0) && v != T(1)) throw ContractError("partial convolution mask must be binary");
}

/// Partial convolution: where the window holds any valid input,
///   out = W^T (x * m) * (sum(1) / sum(m)) + b,  else 0,
/// and the new mask marks those locations valid. sum(1) counts the window
/// positions that fall inside the image, so an all-ones mask reproduces a
/// zero-padded standard convolution everywhere including the borders.
template <typename T>
PartialFeature<T> partial_conv(const PartialFeature<T>& in, const Tensor<T>& weight, const Tensor<T>& bias,
                               Index stride) {
  require_binary_mask(in.mask);
  const Index k = weight.dim(2);
  const Index pad = k / 2;
  auto [updated, ratio] = partial_window_stats(in.mask, k, stride, pad);
  Tensor<T> raw = conv2d(mul_spatial(in.features, in.mask), weight, Tensor<T>(), stride, pad);
  Tensor<T> out = mul_spatial(raw, ratio);
  if (bias.defined()) out = mul_spatial(add_channel_bias(out, bias), updated);
  return {out, updated};
}

struct LatentTransformerConfig {
  Index image_size = 64;
  int channel_divisor = 4;
  bool partial = true;         ///< false: standard convolutions (ablation "SAE")
  bool self_attention = true;  ///< false: no attention block (ablation "PCE")

  /// Output channels of the eight convolution layers, unscaled.
  static constexpr std::array<Index, 8> kChannels{64, 128, 128, 256, 256, 512, 512, 256};
  static constexpr std::array<Index, 8> kStrides{2, 1, 2, 1, 2, 1, 1, 1};

  Index channels(std::size_t layer) const { return kChannels[layer] / channel_divisor; }
  Index output_channels() const { return channels(7); }
  Index output_side() const { return image_size / 8; }
  Index tokens() const { return output_side() * output_side(); }
};

/// Occlusion-aware encoder of a degraded image and its mask: eight
/// (partial) conv -> batch-norm -> ReLU layers with a self-attention block
/// before the last one, flattened to [N, C_lt, d_lt].
template <typename T>
class LatentTransformer {
 public:
  struct Layer {
    Conv2d<T> conv;
    Tensor<T> gamma, beta;
    std::shared_ptr<BatchNormStats<T>> stats;
  };

  LatentTransformer() = default;
  LatentTransformer(const LatentTransformerConfig& cfg, Rng& rng) : cfg_(cfg) {
    if (cfg.image_size % 8 != 0) throw DimensionError("latent transformer: image size must be divisible by 8");
    Index in = 6;
    for (std::size_t i = 0; i < 8; ++i) {
      const Index out = cfg.channels(i);
      Layer l{Conv2d<T>(in, out, 3, LatentTransformerConfig::kStrides[i], rng),
              constant_param<T>({out}, T(1)), constant_param<T>({out}, T(0)),
              std::make_shared<BatchNormStats<T>>(out)};
      layers_.push_back(std::move(l));
      in = out;
    }
    if (cfg.self_attention) attention_ = SelfAttention<T>(cfg.channels(6), rng);
  }

  const LatentTransformerConfig& config() const { return cfg_; }
  const std::vector<Layer>& layers() const { return layers_; }
  const SelfAttention<T>& attention() const { return attention_; }

  /// Network input: [masked image in [-1,1], mask x 3] -> [N,6,S,S].
  static Tensor<T> assemble_input(const Tensor<T>& images, const Tensor<T>& masks) {
    const Tensor<T> m3 = concat(std::vector<Tensor<T>>{masks, masks, masks}, 1);
    return concat(std::vector<Tensor<T>>{mul_spatial(images, masks), m3}, 1);
  }

  /// images [N,3,S,S] in [-1,1]; masks [N,1,S,S] binary. Returns [N, C_lt, d_lt].
  /// `mask_trace`, if given, receives the mask after each convolution layer.
  Tensor<T> operator()(const Tensor<T>& images, const Tensor<T>& masks, bool training,
                       std::vector<Tensor<T>>* mask_trace = nullptr) const {
    const Index n = images.dim(0), s = cfg_.image_size;
    if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != s || images.dim(3) != s) {
      throw DimensionError("latent transformer: expected [N,3," + std::to_string(s) + "," + std::to_string(s) +
                           "], got " + shape_str(images.shape()));
    }
    if (masks.rank() != 4 || masks.dim(0) != n || masks.dim(1) != 1 || masks.dim(2) != s || masks.dim(3) != s) {
      throw DimensionError("latent transformer: mask " + shape_str(masks.shape()) + " does not match images");
    }
    require_binary_mask(masks);
    const Index hw = s * s;
    for (Index b = 0; b < n; ++b) {
      const auto m = masks.data().subspan(static_cast<std::size_t>(b * hw), static_cast<std::size_t>(hw));
      if (std::all_of(m.begin(), m.end(), [](T v) { return v == T(0); })) {
        throw ContractError("no valid pixels in mask of item " + std::to_string(b));
      }
    }
    PartialFeature<T> pf{assemble_input(images, masks), masks};
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      if (i == 7 && cfg_.self_attention) pf.features = attention_(pf.features);
      const Layer& l = layers_[i];
      if (cfg_.partial) {
        pf = partial_conv(pf, l.conv.weight, l.conv.bias, l.conv.stride);
        pf.features = relu(batch_norm2d(pf.features, l.gamma, l.beta, *l.stats, training, pf.mask));
      } else {
        pf.features = relu(batch_norm2d(l.conv(pf.features), l.gamma, l.beta, *l.stats, training));
        pf.mask = Tensor<T>(Shape{n, 1, pf.features.dim(2), pf.features.dim(3)}, T(1));
      }
      if (mask_trace) mask_trace->push_back(pf.mask);
    }
    const Tensor<T>& f = pf.features;
    return reshape(f, Shape{n, f.dim(1), f.dim(2) * f.dim(3)});
  }

  void collect(ParameterList<T>& list, const std::string& prefix) const {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const std::string p = prefix + ".layer" + std::to_string(i);
      layers_[i].conv.collect(list, p + ".conv");
      list.add(p + ".bn.gamma", layers_[i].gamma);
      list.add(p + ".bn.beta", layers_[i].beta);
      list.add(p + ".bn.running_mean", layers_[i].stats->running_mean, false);
      list.add(p + ".bn.running_var", layers_[i].stats->running_var, false);
    }
    if (cfg_.self_attention) attention_.collect(list, prefix + ".attention");
  }

  ParameterList<T> parameters(const std::string& prefix = "transformer") const {
    ParameterList<T> list;
    collect(list, prefix);
    return list;
  }

 private:
  LatentTransformerConfig cfg_;
  std::vector<Layer> layers_;
  SelfAttention<T> attention_;
};

/// Stacks masks into a [N,1,H,W] tensor.
template <typename T>
Tensor<T> mask_batch(const std::vector<const Mask*>& masks) {
  const Index h = masks.front()->height, w = masks.front()->width;
  std::vector<T> v;
  v.reserve(masks.size() * static_cast<std::size_t>(h * w));
  for (const Mask* m : masks) {
    if (m->height != h || m->width != w) throw DimensionError("mask batch: size mismatch");
    v.insert(v.end(), m->bits.begin(), m->bits.end());
  }
  return Tensor<T>(Shape{static_cast<Index>(masks.size()), 1, h, w}, std::move(v));
}

}  // namespace texrect
