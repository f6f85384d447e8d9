#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "texrect/tensor.hpp"

namespace texrect {

/// Running statistics of a batch-norm layer. Buffers, never trained.
template <typename T>
struct BatchNormStats {
  Tensor<T> running_mean;
  Tensor<T> running_var;

  explicit BatchNormStats(Index channels = 0)
      : running_mean(Shape{channels}, T(0)), running_var(Shape{channels}, T(1)) {}
};

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

/// Batch normalisation over x [N,C,H,W] with per-channel gamma/beta.
///
/// `mask` ([N,1,H,W], binary, optional) restricts the statistics to valid
/// locations and zeroes the output elsewhere. Training mode normalises by
/// the batch statistics and updates the running ones (momentum 0.1,
/// unbiased variance); eval mode uses the running statistics.
template <typename T>
Tensor<T> batch_norm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, BatchNormStats<T>& stats,
                       bool training, const Tensor<T>& mask = Tensor<T>()) {
  if (x.rank() != 4 || gamma.numel() != x.dim(1) || beta.numel() != x.dim(1) ||
      stats.running_mean.numel() != x.dim(1)) {
    throw DimensionError("batch_norm2d: parameters do not match input " + shape_str(x.shape()));
  }
  const Index batch = x.dim(0), ch = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (mask.defined() && (mask.rank() != 4 || mask.dim(0) != batch || mask.dim(1) != 1 || mask.numel() != batch * hw)) {
    throw DimensionError("batch_norm2d: mask " + shape_str(mask.shape()) + " does not match " + shape_str(x.shape()));
  }
  const T eps = static_cast<T>(kBatchNormEps);
  auto m = std::make_shared<std::vector<T>>(mask.defined() ? mask.values()
                                                           : std::vector<T>(static_cast<std::size_t>(batch * hw), T(1)));
  T count = T(0);
  for (T v : *m) count += v;

  const auto xv = x.data();
  const auto gv = gamma.data();
  const auto bv = beta.data();
  auto xhat = std::make_shared<std::vector<T>>(xv.size(), T(0));
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(ch), T(0));
  std::vector<T> out(xv.size(), T(0));
  auto rm = stats.running_mean.mutable_data();
  auto rv = stats.running_var.mutable_data();

  for (Index c = 0; c < ch; ++c) {
    T mu, var;
    if (training) {
      if (count <= T(0)) continue;
      T s = T(0);
      for (Index n = 0; n < batch; ++n)
        for (Index p = 0; p < hw; ++p) s += (*m)[n * hw + p] * xv[(n * ch + c) * hw + p];
      mu = s / count;
      T ss = T(0);
      for (Index n = 0; n < batch; ++n)
        for (Index p = 0; p < hw; ++p) {
          const T d = xv[(n * ch + c) * hw + p] - mu;
          ss += (*m)[n * hw + p] * d * d;
        }
      var = ss / count;
      const T unbiased = count > T(1) ? ss / (count - T(1)) : var;
      const T mom = static_cast<T>(kBatchNormMomentum);
      rm[c] = (T(1) - mom) * rm[c] + mom * mu;
      rv[c] = (T(1) - mom) * rv[c] + mom * unbiased;
    } else {
      mu = rm[c];
      var = rv[c];
    }
    const T inv = T(1) / std::sqrt(var + eps);
    (*inv_std)[c] = inv;
    for (Index n = 0; n < batch; ++n)
      for (Index p = 0; p < hw; ++p) {
        const Index i = (n * ch + c) * hw + p;
        const T mk = (*m)[n * hw + p];
        if (mk == T(0)) continue;
        (*xhat)[i] = (xv[i] - mu) * inv;
        out[i] = (gv[c] * (*xhat)[i] + bv[c]) * mk;
      }
  }

  Node<T>* xn = x.node();
  Node<T>* gn = gamma.node();
  Node<T>* bn = beta.node();
  return detail::make_result<T>(
      x.shape(), std::move(out), {&x, &gamma, &beta}, "batch_norm2d",
      [xn, gn, bn, m, xhat, inv_std, batch, ch, hw, count, training](Node<T>& self) {
        const auto& g = self.grad;
        for (Index c = 0; c < ch; ++c) {
          T sum_dy = T(0), sum_dy_xhat = T(0);
          for (Index n = 0; n < batch; ++n)
            for (Index p = 0; p < hw; ++p) {
              const Index i = (n * ch + c) * hw + p;
              const T dy = g[i] * (*m)[n * hw + p];
              sum_dy += dy;
              sum_dy_xhat += dy * (*xhat)[i];
            }
          if (gn->requires_grad) gn->grad_buffer()[c] += sum_dy_xhat;
          if (bn->requires_grad) bn->grad_buffer()[c] += sum_dy;
          if (!xn->requires_grad || (training && count <= T(0))) continue;
          auto& gx = xn->grad_buffer();
          const T gamma_c = gn->value[c];
          const T inv = (*inv_std)[c];
          for (Index n = 0; n < batch; ++n)
            for (Index p = 0; p < hw; ++p) {
              const Index i = (n * ch + c) * hw + p;
              const T mk = (*m)[n * hw + p];
              if (mk == T(0)) continue;
              const T dy = g[i] * mk;
              if (training) {
                gx[i] += gamma_c * inv / count * (count * dy - sum_dy - (*xhat)[i] * sum_dy_xhat);
              } else {
                gx[i] += gamma_c * inv * dy;
              }
            }
        }
      });
}

/// Group normalisation of x [N,C,H,W] over `groups` channel groups.
template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, Index groups, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = static_cast<T>(1e-5)) {
  if (x.rank() != 4 || x.dim(1) % groups != 0 || gamma.numel() != x.dim(1) || beta.numel() != x.dim(1)) {
    throw DimensionError("group_norm: " + std::to_string(groups) + " groups incompatible with " + shape_str(x.shape()));
  }
  const Index batch = x.dim(0), ch = x.dim(1), hw = x.dim(2) * x.dim(3);
  const Index per = ch / groups;
  const Index count = per * hw;
  const auto xv = x.data();
  const auto gv = gamma.data();
  const auto bv = beta.data();
  auto xhat = std::make_shared<std::vector<T>>(xv.size());
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(batch * groups));
  std::vector<T> out(xv.size());
  for (Index n = 0; n < batch; ++n) {
    for (Index gi = 0; gi < groups; ++gi) {
      const Index base = (n * ch + gi * per) * hw;
      T s = T(0);
      for (Index i = 0; i < count; ++i) s += xv[base + i];
      const T mu = s / static_cast<T>(count);
      T ss = T(0);
      for (Index i = 0; i < count; ++i) ss += (xv[base + i] - mu) * (xv[base + i] - mu);
      const T inv = T(1) / std::sqrt(ss / static_cast<T>(count) + eps);
      (*inv_std)[n * groups + gi] = inv;
      for (Index i = 0; i < count; ++i) {
        const Index c = gi * per + i / hw;
        (*xhat)[base + i] = (xv[base + i] - mu) * inv;
        out[base + i] = gv[c] * (*xhat)[base + i] + bv[c];
      }
    }
  }
  Node<T>* xn = x.node();
  Node<T>* gn = gamma.node();
  Node<T>* bn = beta.node();
  return detail::make_result<T>(
      x.shape(), std::move(out), {&x, &gamma, &beta}, "group_norm",
      [xn, gn, bn, xhat, inv_std, batch, ch, hw, groups, per, count](Node<T>& self) {
        const auto& g = self.grad;
        if (gn->requires_grad || bn->requires_grad) {
          for (Index n = 0; n < batch; ++n)
            for (Index c = 0; c < ch; ++c) {
              T sg = T(0), sgx = T(0);
              for (Index p = 0; p < hw; ++p) {
                const Index i = (n * ch + c) * hw + p;
                sg += g[i];
                sgx += g[i] * (*xhat)[i];
              }
              if (gn->requires_grad) gn->grad_buffer()[c] += sgx;
              if (bn->requires_grad) bn->grad_buffer()[c] += sg;
            }
        }
        if (!xn->requires_grad) return;
        auto& gx = xn->grad_buffer();
        for (Index n = 0; n < batch; ++n) {
          for (Index gi = 0; gi < groups; ++gi) {
            const Index base = (n * ch + gi * per) * hw;
            T sd = T(0), sdx = T(0);
            for (Index i = 0; i < count; ++i) {
              const T d = g[base + i] * gn->value[gi * per + i / hw];
              sd += d;
              sdx += d * (*xhat)[base + i];
            }
            const T inv = (*inv_std)[n * groups + gi];
            const T cnt = static_cast<T>(count);
            for (Index i = 0; i < count; ++i) {
              const T d = g[base + i] * gn->value[gi * per + i / hw];
              gx[base + i] += inv / cnt * (cnt * d - sd - (*xhat)[base + i] * sdx);
            }
          }
        }
      });
}

}  // namespace texrect
