#pragma once

#include <cmath>
#include <functional>
#include <string>

#include "texrect/conv.hpp"
#include "texrect/linalg.hpp"
#include "texrect/module.hpp"
#include "texrect/ops.hpp"

namespace texrect {

/// Optional per-thread hook receiving every attention weight matrix
/// [N, Lq, Lk] as it is computed, tagged with the calling layer's name.
template <typename T>
inline thread_local std::function<void(const std::string&, const Tensor<T>&)> attention_observer;

/// softmax(Q K^T / sqrt(d)) V for q [N,Lq,d], k [N,Lk,d], v [N,Lk,dv].
template <typename T>
Tensor<T> scaled_dot_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               const std::string& site = "attention") {
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3 || q.dim(2) != k.dim(2) || k.dim(1) != v.dim(1) ||
      q.dim(0) != k.dim(0) || k.dim(0) != v.dim(0)) {
    throw DimensionError("attention: incompatible q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) +
                         ", v " + shape_str(v.shape()));
  }
  const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(q.dim(2)));
  Tensor<T> weights = softmax(scale(bmm(q, transpose(k)), inv_sqrt_d), -1);
  if (attention_observer<T>) attention_observer<T>(site, weights);
  return bmm(weights, v);
}

/// [N,C,H,W] -> [N*H*W, C] token rows.
template <typename T>
Tensor<T> to_token_rows(const Tensor<T>& x) {
  const Index n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  return reshape(transpose(reshape(x, Shape{n, c, hw})), Shape{n * hw, c});
}

/// [N*H*W, C] token rows -> [N,C,H,W].
template <typename T>
Tensor<T> from_token_rows(const Tensor<T>& rows, Index n, Index h, Index w) {
  const Index c = rows.dim(1);
  return reshape(transpose(reshape(rows, Shape{n, h * w, c})), Shape{n, c, h, w});
}

/// Single-head self-attention over the H*W positions of x [N,C,H,W] with
/// 1x1 query/key/value/output projections and a learnable residual gain
/// gamma (initialised to 0): y = x + gamma * attn(x).
template <typename T>
struct SelfAttention {
  Conv2d<T> query, key, value, out;
  Tensor<T> gamma;
  Index key_dim = 0;

  SelfAttention() = default;
  SelfAttention(Index channels, Rng& rng)
      : query(channels, std::max<Index>(1, channels / 8), 1, 1, rng),
        key(channels, std::max<Index>(1, channels / 8), 1, 1, rng),
        value(channels, channels, 1, 1, rng),
        out(channels, channels, 1, 1, rng),
        gamma(constant_param<T>({1}, T(0))),
        key_dim(std::max<Index>(1, channels / 8)) {}

  Tensor<T> operator()(const Tensor<T>& x) const {
    const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3), hw = h * w;
    Tensor<T> q = transpose(reshape(query(x), Shape{n, key_dim, hw}));  // [N,HW,d]
    Tensor<T> k = transpose(reshape(key(x), Shape{n, key_dim, hw}));
    Tensor<T> v = transpose(reshape(value(x), Shape{n, c, hw}));  // [N,HW,C]
    Tensor<T> a = scaled_dot_attention(q, k, v, "self_attention");  // [N,HW,C]
    Tensor<T> o = out(reshape(transpose(a), Shape{n, c, h, w}));
    return add(x, mul(gamma, o));
  }

  void collect(ParameterList<T>& list, const std::string& prefix) const {
    query.collect(list, prefix + ".query");
    key.collect(list, prefix + ".key");
    value.collect(list, prefix + ".value");
    out.collect(list, prefix + ".out");
    list.add(prefix + ".gamma", gamma);
  }
};

/// Cross-attention from spatial feature tokens (queries) to context tokens
/// (keys/values). Context [N, C_ctx, L] holds L tokens of width C_ctx. The
/// query path is group-normalised; the projected output is added back to
/// the feature. The output projection starts at zero, so the layer is the
/// identity at initialisation.
template <typename T>
struct CrossAttention {
  GroupNorm<T> norm;
  Tensor<T> wq, wk, wv;  // [d, C], [d, C_ctx], [d, C_ctx]
  Linear<T> out;         // d -> C, zero-initialised
  Index dim = 0;
  Index context_dim = 0;

  CrossAttention() = default;
  CrossAttention(Index channels, Index ctx_channels, Index attn_dim, Index groups, Rng& rng)
      : norm(channels, groups), dim(attn_dim), context_dim(ctx_channels) {
    wq = uniform_param<T>({attn_dim, channels}, 1.0 / std::sqrt(double(channels)), rng);
    wk = uniform_param<T>({attn_dim, ctx_channels}, 1.0 / std::sqrt(double(ctx_channels)), rng);
    wv = uniform_param<T>({attn_dim, ctx_channels}, 1.0 / std::sqrt(double(ctx_channels)), rng);
    out.weight = constant_param<T>({channels, attn_dim}, T(0));
    out.bias = constant_param<T>({channels}, T(0));
  }

  Tensor<T> operator()(const Tensor<T>& x, const Tensor<T>& context) const {
    const Index n = x.dim(0), h = x.dim(2), w = x.dim(3);
    if (context.rank() != 3 || context.dim(0) != n || context.dim(1) != context_dim) {
      throw DimensionError("cross-attention: context " + shape_str(context.shape()) + " does not match [" +
                           std::to_string(n) + ", " + std::to_string(context_dim) + ", L]");
    }
    const Index len = context.dim(2);
    Tensor<T> q = reshape(linear(to_token_rows(norm(x)), wq, Tensor<T>()), Shape{n, h * w, dim});
    Tensor<T> ctx_rows = reshape(transpose(context), Shape{n * len, context_dim});
    Tensor<T> k = reshape(linear(ctx_rows, wk, Tensor<T>()), Shape{n, len, dim});
    Tensor<T> v = reshape(linear(ctx_rows, wv, Tensor<T>()), Shape{n, len, dim});
    Tensor<T> a = scaled_dot_attention(q, k, v, "cross_attention");  // [N,HW,d]
    Tensor<T> o = out(reshape(a, Shape{n * h * w, dim}));
    return add(x, from_token_rows(o, n, h, w));
  }

  void collect(ParameterList<T>& list, const std::string& prefix) const {
    norm.collect(list, prefix + ".norm");
    list.add(prefix + ".wq", wq);
    list.add(prefix + ".wk", wk);
    list.add(prefix + ".wv", wv);
    out.collect(list, prefix + ".out");
  }
};

}  // namespace texrect
