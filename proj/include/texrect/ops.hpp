#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "texrect/tensor.hpp"

namespace texrect {

namespace detail {

enum class Broadcast { kSame, kRightScalar, kLeftScalar };

template <typename T>
Broadcast broadcast_kind(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::kSame;
  if (b.numel() == 1) return Broadcast::kRightScalar;
  if (a.numel() == 1) return Broadcast::kLeftScalar;
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                       shape_str(b.shape()));
}

template <typename T>
void accumulate(Node<T>* n, std::size_t i, T g) {
  n->grad_buffer()[i] += g;
}

// Generic binary op with scalar broadcasting. f(a,b) and its partials da, db.
template <typename T, typename F, typename DA, typename DB>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, const char* op, F f, DA da, DB db) {
  const Broadcast kind = broadcast_kind(a, b, op);
  const Shape shape = kind == Broadcast::kLeftScalar ? b.shape() : a.shape();
  const std::size_t n = static_cast<std::size_t>(numel_of(shape));
  const auto av = a.data();
  const auto bv = b.data();
  auto ai = [&](std::size_t i) { return kind == Broadcast::kLeftScalar ? av[0] : av[i]; };
  auto bi = [&](std::size_t i) { return kind == Broadcast::kRightScalar ? bv[0] : bv[i]; };
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = f(ai(i), bi(i));
  Node<T>* an = a.node();
  Node<T>* bn = b.node();
  return make_result<T>(shape, std::move(out), {&a, &b}, op, [an, bn, kind, da, db](Node<T>& self) {
    const auto& g = self.grad;
    const auto& av = an->value;
    const auto& bv = bn->value;
    const std::size_t n = g.size();
    auto ai = [&](std::size_t i) { return kind == Broadcast::kLeftScalar ? av[0] : av[i]; };
    auto bi = [&](std::size_t i) { return kind == Broadcast::kRightScalar ? bv[0] : bv[i]; };
    if (an->requires_grad) {
      auto& ga = an->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) ga[kind == Broadcast::kLeftScalar ? 0 : i] += g[i] * da(ai(i), bi(i));
    }
    if (bn->requires_grad) {
      auto& gb = bn->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) gb[kind == Broadcast::kRightScalar ? 0 : i] += g[i] * db(ai(i), bi(i));
    }
  });
}

template <typename T, typename F, typename D>
Tensor<T> unary(const Tensor<T>& x, const char* op, F f, D d) {
  const auto xv = x.data();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  Node<T>* xn = x.node();
  return make_result<T>(x.shape(), std::move(out), {&x}, op, [xn, d](Node<T>& self) {
    auto& gx = xn->grad_buffer();
    const auto& xv = xn->value;
    const auto& yv = self.value;
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * d(xv[i], yv[i]);
  });
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, "add", [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
                        [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, "sub", [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
                        [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y) { return y; },
                        [](T x, T) { return x; });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
  return detail::unary(x, "scale", [c](T v) { return v * c; }, [c](T, T) { return c; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
  return detail::unary(x, "add_scalar", [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary(x, "relu", [](T v) { return v > T(0) ? v : T(0); },
                       [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  return detail::unary(
      x, "silu", [](T v) { return v / (T(1) + std::exp(-v)); },
      [](T v, T) {
        const T s = T(1) / (T(1) + std::exp(-v));
        return s * (T(1) + v * (T(1) - s));
      });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& x) {
  return detail::unary(x, "sqrt", [](T v) { return std::sqrt(v); }, [](T, T y) { return T(0.5) / y; });
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
  return detail::unary(x, "square", [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = T(0);
  for (T v : x.data()) s += v;
  Node<T>* xn = x.node();
  return detail::make_result<T>(Shape{1}, {s}, {&x}, "sum", [xn](Node<T>& self) {
    auto& gx = xn->grad_buffer();
    for (auto& g : gx) g += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  const T inv = T(1) / static_cast<T>(x.numel());
  T s = T(0);
  for (T v : x.data()) s += v;
  Node<T>* xn = x.node();
  return detail::make_result<T>(Shape{1}, {s * inv}, {&x}, "mean", [xn, inv](Node<T>& self) {
    auto& gx = xn->grad_buffer();
    const T g = self.grad[0] * inv;
    for (auto& v : gx) v += g;
  });
}

template <typename T>
Tensor<T> mse_loss(const Tensor<T>& a, const Tensor<T>& b) {
  return mean(square(sub(a, b)));
}

/// Identity in the forward pass, blocks gradients (stop-gradient).
template <typename T>
Tensor<T> stop_gradient(const Tensor<T>& x) {
  return x.detach();
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel_of(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  Node<T>* xn = x.node();
  return detail::make_result<T>(std::move(shape), x.values(), {&x}, "reshape", [xn](Node<T>& self) {
    auto& gx = xn->grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
  });
}

/// Swaps the last two axes of a rank-2 or rank-3 tensor.
template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  if (x.rank() != 2 && x.rank() != 3) throw DimensionError("transpose: expected rank 2 or 3, got " + shape_str(x.shape()));
  const Index batch = x.rank() == 3 ? x.dim(0) : 1;
  const Index rows = x.dim(x.rank() - 2);
  const Index cols = x.dim(x.rank() - 1);
  Shape shape = x.shape();
  std::swap(shape[shape.size() - 1], shape[shape.size() - 2]);
  const auto xv = x.data();
  std::vector<T> out(xv.size());
  for (Index b = 0; b < batch; ++b) {
    const T* src = xv.data() + b * rows * cols;
    T* dst = out.data() + b * rows * cols;
    for (Index i = 0; i < rows; ++i)
      for (Index j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
  }
  Node<T>* xn = x.node();
  return detail::make_result<T>(shape, std::move(out), {&x}, "transpose", [xn, batch, rows, cols](Node<T>& self) {
    auto& gx = xn->grad_buffer();
    for (Index b = 0; b < batch; ++b) {
      T* dst = gx.data() + b * rows * cols;
      const T* src = self.grad.data() + b * rows * cols;
      for (Index i = 0; i < rows; ++i)
        for (Index j = 0; j < cols; ++j) dst[i * cols + j] += src[j * rows + i];
    }
  });
}

/// Numerically stable softmax along `axis` (max subtracted before exponentiation).
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis = -1) {
  const int r = static_cast<int>(x.rank());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw DimensionError("softmax: invalid axis for shape " + shape_str(x.shape()));
  Index outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < r; ++i) inner *= x.dim(i);
  const Index len = x.dim(axis);
  const auto xv = x.data();
  std::vector<T> out(xv.size());
  for (Index o = 0; o < outer; ++o) {
    for (Index in = 0; in < inner; ++in) {
      const Index base = o * len * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (Index k = 0; k < len; ++k) mx = std::max(mx, xv[base + k * inner]);
      T s = T(0);
      for (Index k = 0; k < len; ++k) {
        const T e = std::exp(xv[base + k * inner] - mx);
        out[base + k * inner] = e;
        s += e;
      }
      const T inv = T(1) / s;
      for (Index k = 0; k < len; ++k) out[base + k * inner] *= inv;
    }
  }
  Node<T>* xn = x.node();
  return detail::make_result<T>(x.shape(), std::move(out), {&x}, "softmax", [xn, outer, inner, len](Node<T>& self) {
    auto& gx = xn->grad_buffer();
    const auto& y = self.value;
    const auto& g = self.grad;
    for (Index o = 0; o < outer; ++o) {
      for (Index in = 0; in < inner; ++in) {
        const Index base = o * len * inner + in;
        T dot = T(0);
        for (Index k = 0; k < len; ++k) dot += g[base + k * inner] * y[base + k * inner];
        for (Index k = 0; k < len; ++k) {
          const Index idx = base + k * inner;
          gx[idx] += y[idx] * (g[idx] - dot);
        }
      }
    }
  });
}

/// Concatenation along `axis`; all other extents must match.
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& ref = parts[0].shape();
  if (axis >= ref.size()) throw DimensionError("concat: axis out of range for " + shape_str(ref));
  Shape shape = ref;
  shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != ref.size()) throw DimensionError("concat: rank mismatch " + shape_str(ref) + " vs " + shape_str(p.shape()));
    for (std::size_t d = 0; d < ref.size(); ++d) {
      if (d != axis && p.dim(d) != ref[d]) {
        throw DimensionError("concat: shape mismatch " + shape_str(ref) + " vs " + shape_str(p.shape()));
      }
    }
    shape[axis] += p.dim(axis);
  }
  Index outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= ref[d];
  for (std::size_t d = axis + 1; d < ref.size(); ++d) inner *= ref[d];
  std::vector<Index> widths;
  for (const auto& p : parts) widths.push_back(p.dim(axis) * inner);
  const Index row = shape[axis] * inner;
  std::vector<T> out(static_cast<std::size_t>(numel_of(shape)));
  Index offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto pv = parts[k].data();
    for (Index o = 0; o < outer; ++o)
      std::copy_n(pv.data() + o * widths[k], widths[k], out.data() + o * row + offset);
    offset += widths[k];
  }
  std::vector<Node<T>*> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return detail::make_result<T>(shape, std::move(out), parts, "concat", [nodes, widths, outer, row](Node<T>& self) {
    Index offset = 0;
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      if (nodes[k]->requires_grad) {
        auto& gp = nodes[k]->grad_buffer();
        for (Index o = 0; o < outer; ++o)
          for (Index i = 0; i < widths[k]; ++i) gp[o * widths[k] + i] += self.grad[o * row + offset + i];
      }
      offset += widths[k];
    }
  });
}

/// Repeats a tensor whose last extent is 1 along that axis `count` times.
template <typename T>
Tensor<T> repeat_last(const Tensor<T>& x, Index count) {
  if (x.shape().back() != 1) throw DimensionError("repeat_last: last extent must be 1, got " + shape_str(x.shape()));
  Shape shape = x.shape();
  shape.back() = count;
  const auto xv = x.data();
  std::vector<T> out(xv.size() * count);
  for (std::size_t i = 0; i < xv.size(); ++i) std::fill_n(out.data() + i * count, count, xv[i]);
  Node<T>* xn = x.node();
  return detail::make_result<T>(shape, std::move(out), {&x}, "repeat_last", [xn, count](Node<T>& self) {
    auto& gx = xn->grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i)
      for (Index k = 0; k < count; ++k) gx[i] += self.grad[i * count + k];
  });
}

/// Per batch item, keeps x[n] or substitutes the single-item `fill` where
/// `replace[n]` is set. Gradients route to whichever source was used.
template <typename T>
Tensor<T> replace_items(const Tensor<T>& x, const Tensor<T>& fill, const std::vector<bool>& replace) {
  const Index batch = x.dim(0);
  const Index item = x.numel() / batch;
  if (fill.numel() != item || static_cast<Index>(replace.size()) != batch) {
    throw DimensionError("replace_items: fill " + shape_str(fill.shape()) + " does not match item of " +
                         shape_str(x.shape()));
  }
  std::vector<T> out(x.values());
  for (Index n = 0; n < batch; ++n)
    if (replace[n]) std::copy_n(fill.data().data(), item, out.data() + n * item);
  Node<T>* xn = x.node();
  Node<T>* fn = fill.node();
  return detail::make_result<T>(x.shape(), std::move(out), {&x, &fill}, "replace_items",
                                [xn, fn, replace, item](Node<T>& self) {
                                  for (std::size_t n = 0; n < replace.size(); ++n) {
                                    Node<T>* dst = replace[n] ? fn : xn;
                                    if (!dst->requires_grad) continue;
                                    auto& g = dst->grad_buffer();
                                    const Index off = replace[n] ? 0 : static_cast<Index>(n) * item;
                                    for (Index i = 0; i < item; ++i) g[off + i] += self.grad[n * item + i];
                                  }
                                });
}

/// Rows of `table` [K x D] selected by `indices`, as [M x D]. Gradients scatter-add.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, const std::vector<Index>& indices) {
  if (table.rank() != 2) throw DimensionError("gather_rows: table must be rank 2, got " + shape_str(table.shape()));
  const Index k = table.dim(0);
  const Index d = table.dim(1);
  std::vector<T> out(indices.size() * d);
  const auto tv = table.data();
  for (std::size_t m = 0; m < indices.size(); ++m) {
    if (indices[m] < 0 || indices[m] >= k) throw DimensionError("gather_rows: index out of range");
    std::copy_n(tv.data() + indices[m] * d, d, out.data() + m * d);
  }
  Node<T>* tn = table.node();
  return detail::make_result<T>(Shape{static_cast<Index>(indices.size()), d}, std::move(out), {&table}, "gather_rows",
                                [tn, indices, d](Node<T>& self) {
                                  auto& g = tn->grad_buffer();
                                  for (std::size_t m = 0; m < indices.size(); ++m)
                                    for (Index j = 0; j < d; ++j) g[indices[m] * d + j] += self.grad[m * d + j];
                                });
}

}  // namespace texrect
