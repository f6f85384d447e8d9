#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "texrect/conv.hpp"
#include "texrect/linalg.hpp"
#include "texrect/norm.hpp"
#include "texrect/ops.hpp"
#include "texrect/rng.hpp"
#include "texrect/tensor.hpp"

namespace texrect {

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
  bool trainable = true;
};

/// Flat, ordered view over a model's parameters and buffers. Entries alias
/// the model's storage.
template <typename T>
class ParameterList {
 public:
  void add(std::string name, const Tensor<T>& t, bool trainable = true) {
    items_.push_back({std::move(name), t, trainable});
  }

  const std::vector<NamedTensor<T>>& items() const { return items_; }

  std::vector<Tensor<T>> trainable() const {
    std::vector<Tensor<T>> out;
    for (const auto& it : items_)
      if (it.trainable) out.push_back(it.tensor);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& it : items_)
      if (it.trainable) n += static_cast<std::size_t>(it.tensor.numel());
    return n;
  }

  void append(const ParameterList& other) { items_.insert(items_.end(), other.items_.begin(), other.items_.end()); }

 private:
  std::vector<NamedTensor<T>> items_;
};

/// Leaf parameter filled uniformly in [-bound, bound].
template <typename T>
Tensor<T> uniform_param(Shape shape, double bound, Rng& rng) {
  std::vector<T> v(static_cast<std::size_t>(numel_of(shape)));
  for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor<T>(std::move(shape), std::move(v), true);
}

template <typename T>
Tensor<T> constant_param(Shape shape, T value) {
  return Tensor<T>(std::move(shape), value, true);
}

/// Convolution layer with fan-in scaled uniform initialisation.
template <typename T>
struct Conv2d {
  Tensor<T> weight;
  Tensor<T> bias;
  Index stride = 1;
  Index pad = 0;

  Conv2d() = default;
  Conv2d(Index in, Index out, Index kernel, Index stride_, Rng& rng, bool zero_init = false, bool with_bias = true)
      : stride(stride_), pad(kernel / 2) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in * kernel * kernel));
    weight = zero_init ? constant_param<T>({out, in, kernel, kernel}, T(0))
                       : uniform_param<T>({out, in, kernel, kernel}, bound, rng);
    if (with_bias) bias = zero_init ? constant_param<T>({out}, T(0)) : uniform_param<T>({out}, bound, rng);
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, bias, stride, pad); }

  void collect(ParameterList<T>& out, const std::string& prefix) const {
    out.add(prefix + ".weight", weight);
    if (bias.defined()) out.add(prefix + ".bias", bias);
  }
};

template <typename T>
struct Linear {
  Tensor<T> weight;
  Tensor<T> bias;

  Linear() = default;
  Linear(Index in, Index out, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    weight = uniform_param<T>({out, in}, bound, rng);
    bias = uniform_param<T>({out}, bound, rng);
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }

  void collect(ParameterList<T>& out, const std::string& prefix) const {
    out.add(prefix + ".weight", weight);
    out.add(prefix + ".bias", bias);
  }
};

template <typename T>
struct GroupNorm {
  Tensor<T> gamma;
  Tensor<T> beta;
  Index groups = 8;

  GroupNorm() = default;
  GroupNorm(Index channels, Index groups_) : gamma(constant_param<T>({channels}, T(1))),
                                             beta(constant_param<T>({channels}, T(0))), groups(groups_) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return group_norm(x, groups, gamma, beta); }

  void collect(ParameterList<T>& out, const std::string& prefix) const {
    out.add(prefix + ".gamma", gamma);
    out.add(prefix + ".beta", beta);
  }
};

}  // namespace texrect
