#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "texrect/tensor.hpp"

namespace texrect {

struct AdamOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First/second moment buffers for one parameter tensor.
template <typename T>
struct AdamMoments {
  std::vector<T> m;
  std::vector<T> v;
};

/// One bias-corrected Adam update of `params` in place. `step` is the
/// 1-based index of this update.
template <typename T>
void adam_step(std::span<T> params, std::span<const T> grads, AdamMoments<T>& moments, std::int64_t step,
               const AdamOptions& opt) {
  if (moments.m.size() != params.size()) {
    moments.m.assign(params.size(), T(0));
    moments.v.assign(params.size(), T(0));
  }
  const T b1 = static_cast<T>(opt.beta1);
  const T b2 = static_cast<T>(opt.beta2);
  const T c1 = static_cast<T>(1.0 - std::pow(opt.beta1, static_cast<double>(step)));
  const T c2 = static_cast<T>(1.0 - std::pow(opt.beta2, static_cast<double>(step)));
  const T lr = static_cast<T>(opt.lr);
  const T eps = static_cast<T>(opt.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const T g = grads.empty() ? T(0) : grads[i];
    moments.m[i] = b1 * moments.m[i] + (T(1) - b1) * g;
    moments.v[i] = b2 * moments.v[i] + (T(1) - b2) * g * g;
    const T mhat = moments.m[i] / c1;
    const T vhat = moments.v[i] / c2;
    params[i] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

/// Adam over a fixed parameter set. Parameters without a gradient buffer
/// are updated as if their gradient were zero.
template <typename T>
class Adam {
 public:
  Adam(std::vector<Tensor<T>> params, AdamOptions options)
      : params_(std::move(params)), options_(options), moments_(params_.size()) {}

  void step() {
    ++step_;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor<T>& p = params_[i];
      adam_step<T>(p.mutable_data(), p.grad(), moments_[i], step_, options_);
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  std::int64_t steps() const { return step_; }
  void set_steps(std::int64_t s) { step_ = s; }
  const AdamOptions& options() const { return options_; }
  std::vector<AdamMoments<T>>& moments() { return moments_; }
  const std::vector<AdamMoments<T>>& moments() const { return moments_; }
  const std::vector<Tensor<T>>& params() const { return params_; }

 private:
  std::vector<Tensor<T>> params_;
  AdamOptions options_;
  std::vector<AdamMoments<T>> moments_;
  std::int64_t step_ = 0;
};

}  // namespace texrect
