#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "texrect/linalg.hpp"
#include "texrect/ops.hpp"
#include "texrect/tensor.hpp"

namespace texrect {

struct ConvGeometry {
  Index batch, in_channels, height, width;
  Index out_channels, kernel, stride, pad;
  Index out_height, out_width;

  Index patch() const { return in_channels * kernel * kernel; }
  Index out_pixels() const { return out_height * out_width; }
};

inline Index conv_out_extent(Index in, Index kernel, Index stride, Index pad) {
  return (in + 2 * pad - kernel) / stride + 1;
}

namespace detail {

inline ConvGeometry conv_geometry(const Shape& x, const Shape& w, Index stride, Index pad) {
  if (x.size() != 4 || w.size() != 4) {
    throw DimensionError("conv2d: expected x [N,C,H,W] and w [O,C,k,k], got " + shape_str(x) + " and " + shape_str(w));
  }
  if (x[1] != w[1] || w[2] != w[3]) {
    throw DimensionError("conv2d: input " + shape_str(x) + " incompatible with weight " + shape_str(w));
  }
  if (w[2] % 2 == 0) throw DimensionError("conv2d: kernel extent must be odd, got " + std::to_string(w[2]));
  if (stride < 1 || pad < 0) throw DimensionError("conv2d: invalid stride/pad");
  ConvGeometry g{x[0], x[1], x[2], x[3], w[0], w[2], stride, pad, 0, 0};
  if (x[2] + 2 * pad < w[2] || x[3] + 2 * pad < w[2]) {
    throw DimensionError("conv2d: non-positive output extent for input " + shape_str(x));
  }
  g.out_height = conv_out_extent(x[2], w[2], stride, pad);
  g.out_width = conv_out_extent(x[3], w[2], stride, pad);
  return g;
}

// col layout: [C*k*k, N*Ho*Wo]
template <typename T>
void im2col(const ConvGeometry& g, const T* x, T* col) {
  const Index cols = g.batch * g.out_pixels();
  for (Index c = 0; c < g.in_channels; ++c) {
    for (Index ky = 0; ky < g.kernel; ++ky) {
      for (Index kx = 0; kx < g.kernel; ++kx) {
        T* row = col + ((c * g.kernel + ky) * g.kernel + kx) * cols;
        for (Index n = 0; n < g.batch; ++n) {
          const T* plane = x + (n * g.in_channels + c) * g.height * g.width;
          T* dst = row + n * g.out_pixels();
          for (Index oy = 0; oy < g.out_height; ++oy) {
            const Index iy = oy * g.stride - g.pad + ky;
            if (iy < 0 || iy >= g.height) {
              std::fill_n(dst + oy * g.out_width, g.out_width, T(0));
              continue;
            }
            for (Index ox = 0; ox < g.out_width; ++ox) {
              const Index ix = ox * g.stride - g.pad + kx;
              dst[oy * g.out_width + ox] = (ix >= 0 && ix < g.width) ? plane[iy * g.width + ix] : T(0);
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const ConvGeometry& g, const T* col, T* x) {
  const Index cols = g.batch * g.out_pixels();
  for (Index c = 0; c < g.in_channels; ++c) {
    for (Index ky = 0; ky < g.kernel; ++ky) {
      for (Index kx = 0; kx < g.kernel; ++kx) {
        const T* row = col + ((c * g.kernel + ky) * g.kernel + kx) * cols;
        for (Index n = 0; n < g.batch; ++n) {
          T* plane = x + (n * g.in_channels + c) * g.height * g.width;
          const T* src = row + n * g.out_pixels();
          for (Index oy = 0; oy < g.out_height; ++oy) {
            const Index iy = oy * g.stride - g.pad + ky;
            if (iy < 0 || iy >= g.height) continue;
            for (Index ox = 0; ox < g.out_width; ++ox) {
              const Index ix = ox * g.stride - g.pad + kx;
              if (ix >= 0 && ix < g.width) plane[iy * g.width + ix] += src[oy * g.out_width + ox];
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

/// 2-D cross-correlation over a batch: x [N,C,H,W], w [O,C,k,k], optional bias [O].
/// Output extent floor((H + 2 pad - k) / stride) + 1.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, Index stride = 1, Index pad = 0) {
  if (x.rank() == 3) {
    Tensor<T> batched = reshape(x, Shape{1, x.dim(0), x.dim(1), x.dim(2)});
    Tensor<T> y = conv2d(batched, w, bias, stride, pad);
    return reshape(y, Shape{y.dim(1), y.dim(2), y.dim(3)});
  }
  const ConvGeometry g = detail::conv_geometry(x.shape(), w.shape(), stride, pad);
  if (bias.defined() && bias.numel() != g.out_channels) throw DimensionError("conv2d: bias length mismatch");
  const Index cols = g.batch * g.out_pixels();
  auto col = std::make_shared<std::vector<T>>(static_cast<std::size_t>(g.patch() * cols));
  detail::im2col(g, x.data().data(), col->data());
  std::vector<T> tmp(static_cast<std::size_t>(g.out_channels * cols));
  detail::gemm<T>(false, false, g.out_channels, cols, g.patch(), w.data().data(), col->data(), tmp.data(), false);
  std::vector<T> out(tmp.size());
  const auto bv = bias.defined() ? bias.data() : std::span<const T>{};
  for (Index n = 0; n < g.batch; ++n) {
    for (Index o = 0; o < g.out_channels; ++o) {
      const T b = bias.defined() ? bv[o] : T(0);
      const T* src = tmp.data() + o * cols + n * g.out_pixels();
      T* dst = out.data() + (n * g.out_channels + o) * g.out_pixels();
      for (Index p = 0; p < g.out_pixels(); ++p) dst[p] = src[p] + b;
    }
  }
  Node<T>* xn = x.node();
  Node<T>* wn = w.node();
  Node<T>* bn = bias.defined() ? bias.node() : nullptr;
  if (!grad_enabled() || !(x.requires_grad() || w.requires_grad() || (bn && bias.requires_grad()))) col.reset();
  return detail::make_result<T>(
      Shape{g.batch, g.out_channels, g.out_height, g.out_width}, std::move(out), {&x, &w, &bias}, "conv2d",
      [xn, wn, bn, g, col, cols](Node<T>& self) {
        std::vector<T> gout(static_cast<std::size_t>(g.out_channels * cols));
        for (Index n = 0; n < g.batch; ++n)
          for (Index o = 0; o < g.out_channels; ++o)
            std::copy_n(self.grad.data() + (n * g.out_channels + o) * g.out_pixels(), g.out_pixels(),
                        gout.data() + o * cols + n * g.out_pixels());
        if (bn && bn->requires_grad) {
          auto& gb = bn->grad_buffer();
          for (Index o = 0; o < g.out_channels; ++o) {
            T s = T(0);
            for (Index p = 0; p < cols; ++p) s += gout[o * cols + p];
            gb[o] += s;
          }
        }
        if (wn->requires_grad) {
          detail::gemm<T>(false, true, g.out_channels, g.patch(), cols, gout.data(), col->data(),
                          wn->grad_buffer().data(), true);
        }
        if (xn->requires_grad) {
          std::vector<T> gcol(static_cast<std::size_t>(g.patch() * cols));
          detail::gemm<T>(true, false, g.patch(), cols, g.out_channels, wn->value.data(), gout.data(), gcol.data(),
                          false);
          detail::col2im(g, gcol.data(), xn->grad_buffer().data());
        }
      });
}

/// Nearest-neighbour 2x upsampling of [N,C,H,W].
template <typename T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x) {
  if (x.rank() != 4) throw DimensionError("upsample: expected [N,C,H,W], got " + shape_str(x.shape()));
  const Index planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  std::vector<T> out(static_cast<std::size_t>(planes * 4 * h * w));
  const auto xv = x.data();
  for (Index p = 0; p < planes; ++p)
    for (Index y = 0; y < 2 * h; ++y)
      for (Index xx = 0; xx < 2 * w; ++xx) out[(p * 2 * h + y) * 2 * w + xx] = xv[(p * h + y / 2) * w + xx / 2];
  Node<T>* xn = x.node();
  return detail::make_result<T>(Shape{x.dim(0), x.dim(1), 2 * h, 2 * w}, std::move(out), {&x}, "upsample",
                                [xn, planes, h, w](Node<T>& self) {
                                  auto& gx = xn->grad_buffer();
                                  for (Index p = 0; p < planes; ++p)
                                    for (Index y = 0; y < 2 * h; ++y)
                                      for (Index xx = 0; xx < 2 * w; ++xx)
                                        gx[(p * h + y / 2) * w + xx / 2] += self.grad[(p * 2 * h + y) * 2 * w + xx];
                                });
}

/// Multiplies every channel of x [N,C,H,W] by a constant spatial map [N,1,H,W]
/// (or [1,1,H,W], shared by the batch). The map carries no gradient.
template <typename T>
Tensor<T> mul_spatial(const Tensor<T>& x, const Tensor<T>& map) {
  if (x.rank() != 4 || map.rank() != 4 || map.dim(1) != 1 || map.dim(2) != x.dim(2) || map.dim(3) != x.dim(3) ||
      (map.dim(0) != x.dim(0) && map.dim(0) != 1)) {
    throw DimensionError("mul_spatial: map " + shape_str(map.shape()) + " incompatible with " + shape_str(x.shape()));
  }
  const Index batch = x.dim(0), ch = x.dim(1), hw = x.dim(2) * x.dim(3);
  const bool shared = map.dim(0) == 1;
  auto m = std::make_shared<std::vector<T>>(map.values());
  std::vector<T> out(x.values());
  for (Index n = 0; n < batch; ++n) {
    const T* mp = m->data() + (shared ? 0 : n * hw);
    for (Index c = 0; c < ch; ++c) {
      T* dst = out.data() + (n * ch + c) * hw;
      for (Index p = 0; p < hw; ++p) dst[p] *= mp[p];
    }
  }
  Node<T>* xn = x.node();
  return detail::make_result<T>(x.shape(), std::move(out), {&x}, "mul_spatial",
                                [xn, m, batch, ch, hw, shared](Node<T>& self) {
                                  auto& gx = xn->grad_buffer();
                                  for (Index n = 0; n < batch; ++n) {
                                    const T* mp = m->data() + (shared ? 0 : n * hw);
                                    for (Index c = 0; c < ch; ++c)
                                      for (Index p = 0; p < hw; ++p)
                                        gx[(n * ch + c) * hw + p] += self.grad[(n * ch + c) * hw + p] * mp[p];
                                  }
                                });
}

/// Adds v [N,C] to every spatial position of x [N,C,H,W] (time-embedding bias).
template <typename T>
Tensor<T> add_channel_vector(const Tensor<T>& x, const Tensor<T>& v) {
  if (x.rank() != 4 || v.rank() != 2 || v.dim(0) != x.dim(0) || v.dim(1) != x.dim(1)) {
    throw DimensionError("add_channel_vector: " + shape_str(v.shape()) + " incompatible with " + shape_str(x.shape()));
  }
  const Index nc = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<T> out(x.values());
  const auto vv = v.data();
  for (Index i = 0; i < nc; ++i)
    for (Index p = 0; p < hw; ++p) out[i * hw + p] += vv[i];
  Node<T>* xn = x.node();
  Node<T>* vn = v.node();
  return detail::make_result<T>(x.shape(), std::move(out), {&x, &v}, "add_channel_vector",
                                [xn, vn, nc, hw](Node<T>& self) {
                                  if (xn->requires_grad) {
                                    auto& gx = xn->grad_buffer();
                                    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
                                  }
                                  if (vn->requires_grad) {
                                    auto& gv = vn->grad_buffer();
                                    for (Index i = 0; i < nc; ++i) {
                                      T s = T(0);
                                      for (Index p = 0; p < hw; ++p) s += self.grad[i * hw + p];
                                      gv[i] += s;
                                    }
                                  }
                                });
}

/// Adds a per-channel bias b [C] to x [N,C,H,W].
template <typename T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& b) {
  if (x.rank() != 4 || b.numel() != x.dim(1)) {
    throw DimensionError("add_channel_bias: " + shape_str(b.shape()) + " incompatible with " + shape_str(x.shape()));
  }
  const Index batch = x.dim(0), ch = x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<T> out(x.values());
  const auto bv = b.data();
  for (Index n = 0; n < batch; ++n)
    for (Index c = 0; c < ch; ++c)
      for (Index p = 0; p < hw; ++p) out[(n * ch + c) * hw + p] += bv[c];
  Node<T>* xn = x.node();
  Node<T>* bn = b.node();
  return detail::make_result<T>(x.shape(), std::move(out), {&x, &b}, "add_channel_bias",
                                [xn, bn, batch, ch, hw](Node<T>& self) {
                                  if (xn->requires_grad) {
                                    auto& gx = xn->grad_buffer();
                                    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
                                  }
                                  if (bn->requires_grad) {
                                    auto& gb = bn->grad_buffer();
                                    for (Index n = 0; n < batch; ++n)
                                      for (Index c = 0; c < ch; ++c) {
                                        T s = T(0);
                                        for (Index p = 0; p < hw; ++p) s += self.grad[(n * ch + c) * hw + p];
                                        gb[c] += s;
                                      }
                                  }
                                });
}

}  // namespace texrect
