#pragma once

#include <Eigen/Core>

#include <string>
#include <vector>

#include "texrect/tensor.hpp"

namespace texrect {

namespace detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

/// C (+)= op(A) * op(B) on row-major buffers. Single-threaded, so the
/// summation order is fixed for given extents.
template <typename T>
void gemm(bool trans_a, bool trans_b, Index m, Index n, Index k, const T* a, const T* b, T* c, bool accumulate) {
  ConstMatMap<T> A(a, trans_a ? k : m, trans_a ? m : k);
  ConstMatMap<T> B(b, trans_b ? n : k, trans_b ? k : n);
  MatMap<T> C(c, m, n);
  if (!accumulate) C.setZero();
  if (trans_a && trans_b) {
    C.noalias() += A.transpose() * B.transpose();
  } else if (trans_a) {
    C.noalias() += A.transpose() * B;
  } else if (trans_b) {
    C.noalias() += A * B.transpose();
  } else {
    C.noalias() += A * B;
  }
}

}  // namespace detail

/// [M x K] * [K x N] -> [M x N].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(static_cast<std::size_t>(m * n));
  detail::gemm<T>(false, false, m, n, k, a.data().data(), b.data().data(), out.data(), false);
  Node<T>* an = a.node();
  Node<T>* bn = b.node();
  return detail::make_result<T>(Shape{m, n}, std::move(out), {&a, &b}, "matmul", [an, bn, m, n, k](Node<T>& self) {
    if (an->requires_grad)
      detail::gemm<T>(false, true, m, k, n, self.grad.data(), bn->value.data(), an->grad_buffer().data(), true);
    if (bn->requires_grad)
      detail::gemm<T>(true, false, k, n, m, an->value.data(), self.grad.data(), bn->grad_buffer().data(), true);
  });
}

/// Batched [B x M x K] * [B x K x N] -> [B x M x N].
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
    throw DimensionError("bmm: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const Index batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  std::vector<T> out(static_cast<std::size_t>(batch * m * n));
  for (Index i = 0; i < batch; ++i) {
    detail::gemm<T>(false, false, m, n, k, a.data().data() + i * m * k, b.data().data() + i * k * n,
                    out.data() + i * m * n, false);
  }
  Node<T>* an = a.node();
  Node<T>* bn = b.node();
  return detail::make_result<T>(Shape{batch, m, n}, std::move(out), {&a, &b}, "bmm",
                                [an, bn, batch, m, n, k](Node<T>& self) {
                                  for (Index i = 0; i < batch; ++i) {
                                    const T* g = self.grad.data() + i * m * n;
                                    if (an->requires_grad)
                                      detail::gemm<T>(false, true, m, k, n, g, bn->value.data() + i * k * n,
                                                      an->grad_buffer().data() + i * m * k, true);
                                    if (bn->requires_grad)
                                      detail::gemm<T>(true, false, k, n, m, an->value.data() + i * m * k, g,
                                                      bn->grad_buffer().data() + i * k * n, true);
                                  }
                                });
}

/// Fully connected layer: x [N x in], weight [out x in], bias [out] (optional).
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (x.rank() != 2 || weight.rank() != 2 || x.dim(1) != weight.dim(1)) {
    throw DimensionError("linear: incompatible shapes " + shape_str(x.shape()) + " and " + shape_str(weight.shape()));
  }
  const Index batch = x.dim(0), in = x.dim(1), out_dim = weight.dim(0);
  if (bias.defined() && bias.numel() != out_dim) throw DimensionError("linear: bias length mismatch");
  std::vector<T> out(static_cast<std::size_t>(batch * out_dim));
  detail::gemm<T>(false, true, batch, out_dim, in, x.data().data(), weight.data().data(), out.data(), false);
  if (bias.defined()) {
    const auto bv = bias.data();
    for (Index i = 0; i < batch; ++i)
      for (Index j = 0; j < out_dim; ++j) out[i * out_dim + j] += bv[j];
  }
  Node<T>* xn = x.node();
  Node<T>* wn = weight.node();
  Node<T>* bn = bias.defined() ? bias.node() : nullptr;
  return detail::make_result<T>(Shape{batch, out_dim}, std::move(out), {&x, &weight, &bias}, "linear",
                                [xn, wn, bn, batch, in, out_dim](Node<T>& self) {
                                  const T* g = self.grad.data();
                                  if (xn->requires_grad)
                                    detail::gemm<T>(false, false, batch, in, out_dim, g, wn->value.data(),
                                                    xn->grad_buffer().data(), true);
                                  if (wn->requires_grad)
                                    detail::gemm<T>(true, false, out_dim, in, batch, g, xn->value.data(),
                                                    wn->grad_buffer().data(), true);
                                  if (bn && bn->requires_grad) {
                                    auto& gb = bn->grad_buffer();
                                    for (Index i = 0; i < batch; ++i)
                                      for (Index j = 0; j < out_dim; ++j) gb[j] += g[i * out_dim + j];
                                  }
                                });
}

}  // namespace texrect
