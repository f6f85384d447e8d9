#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "texrect/codec.hpp"
#include "texrect/ops.hpp"
#include "texrect/rng.hpp"

namespace texrect {

/// Linear beta schedule. Arrays are indexed by timestep 0..T with
/// alpha_bar[0] = 1 standing for the clean latent.
struct NoiseSchedule {
  int steps = 0;
  std::vector<double> beta, alpha, alpha_bar;

  double sqrt_alpha_bar(int t) const { return std::sqrt(alpha_bar.at(t)); }
  double sqrt_one_minus_alpha_bar(int t) const { return std::sqrt(1.0 - alpha_bar.at(t)); }
};

inline NoiseSchedule make_schedule(int steps = 1000, double beta_start = 0.0015, double beta_end = 0.0195) {
  if (steps < 2) throw ConfigError("noise schedule needs T >= 2, got " + std::to_string(steps));
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw ConfigError("noise schedule needs 0 < beta_start <= beta_end < 1, got " + std::to_string(beta_start) +
                      ", " + std::to_string(beta_end));
  }
  NoiseSchedule s;
  s.steps = steps;
  s.beta.assign(steps + 1, 0.0);
  s.alpha.assign(steps + 1, 1.0);
  s.alpha_bar.assign(steps + 1, 1.0);
  for (int t = 1; t <= steps; ++t) {
    s.beta[t] = beta_start + (beta_end - beta_start) * (t - 1) / (steps - 1);
    s.alpha[t] = 1.0 - s.beta[t];
    s.alpha_bar[t] = s.alpha_bar[t - 1] * s.alpha[t];
  }
  return s;
}

/// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps, one timestep per batch item.
template <typename T>
Tensor<T> forward_diffuse(const Tensor<T>& z0, const std::vector<int>& t, const Tensor<T>& eps,
                          const NoiseSchedule& sched) {
  if (eps.shape() != z0.shape()) {
    throw DimensionError("forward_diffuse: noise " + shape_str(eps.shape()) + " vs latent " + shape_str(z0.shape()));
  }
  const Index n = z0.dim(0);
  if (static_cast<Index>(t.size()) != n) throw DimensionError("forward_diffuse: one timestep per item required");
  const Index item = z0.numel() / n;
  std::vector<T> out(z0.values().size());
  for (Index b = 0; b < n; ++b) {
    if (t[b] < 1 || t[b] > sched.steps) {
      throw ContractError("forward_diffuse: timestep " + std::to_string(t[b]) + " outside [1, " +
                          std::to_string(sched.steps) + "]");
    }
    const T a = static_cast<T>(sched.sqrt_alpha_bar(t[b]));
    const T s = static_cast<T>(sched.sqrt_one_minus_alpha_bar(t[b]));
    for (Index i = b * item; i < (b + 1) * item; ++i) out[i] = a * z0[i] + s * eps[i];
  }
  return Tensor<T>(z0.shape(), std::move(out));
}

template <typename T>
Tensor<T> gaussian_like(const Shape& shape, Rng& rng) {
  std::vector<T> v(static_cast<std::size_t>(numel_of(shape)));
  for (auto& x : v) x = static_cast<T>(rng.normal());
  return Tensor<T>(shape, std::move(v));
}

/// eps_theta(z_t, t); conditioning is bound inside the callable.
template <typename T>
using NoisePredictor = std::function<Tensor<T>(const Tensor<T>& z_t, const std::vector<int>& t)>;

template <typename T>
struct DiffusionLoss {
  Tensor<T> loss;
  std::vector<int> timesteps;
};

/// Samples t ~ U{1..T} per item and eps ~ N(0, I), then returns
/// mean((eps - eps_theta(z_t, t))^2).
template <typename T>
DiffusionLoss<T> diffusion_loss(const Tensor<T>& z0, const NoisePredictor<T>& predict, const NoiseSchedule& sched,
                                Rng& rng) {
  const Index n = z0.dim(0);
  std::vector<int> t(static_cast<std::size_t>(n));
  for (auto& v : t) v = static_cast<int>(rng.uniform_int(1, sched.steps));
  const Tensor<T> eps = gaussian_like<T>(z0.shape(), rng);
  const Tensor<T> zt = forward_diffuse(z0, t, eps, sched);
  return {mse_loss(predict(zt, t), eps), std::move(t)};
}

/// Uniform-stride DDIM timesteps in increasing order, starting at t = 1.
inline std::vector<int> ddim_timesteps(int total, int steps) {
  if (steps < 1 || steps > total) {
    throw ConfigError("ddim steps must lie in [1, " + std::to_string(total) + "], got " + std::to_string(steps));
  }
  const int stride = total / steps;
  std::vector<int> seq(static_cast<std::size_t>(steps));
  for (int i = 0; i < steps; ++i) seq[i] = 1 + i * stride;
  return seq;
}

/// One DDIM update from t to t_prev given eps_hat. With eta = 0 the step is
/// deterministic; `rng` is only drawn from when eta > 0.
template <typename T>
Tensor<T> ddim_step(const Tensor<T>& zt, const Tensor<T>& eps_hat, int t, int t_prev, const NoiseSchedule& sched,
                    double eta, Rng& rng) {
  const double ab = sched.alpha_bar.at(t), ab_prev = sched.alpha_bar.at(t_prev);
  const double sigma = eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab)) * std::sqrt(1.0 - ab / ab_prev);
  const double dir = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));
  std::vector<T> out(zt.values().size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x0 = (zt.values()[i] - std::sqrt(1.0 - ab) * eps_hat.values()[i]) / std::sqrt(ab);
    double v = std::sqrt(ab_prev) * x0 + dir * eps_hat.values()[i];
    if (sigma > 0.0) v += sigma * rng.normal();
    out[i] = static_cast<T>(v);
  }
  return Tensor<T>(zt.shape(), std::move(out));
}

/// Runs the DDIM chain from z_T ~ N(0, I) (drawn from Rng(seed)) down to z_0.
template <typename T>
Tensor<T> ddim_loop(const Shape& shape, const NoisePredictor<T>& predict, const NoiseSchedule& sched, int steps,
                    double eta, std::uint64_t seed) {
  const std::vector<int> seq = ddim_timesteps(sched.steps, steps);
  Rng rng(seed);
  Tensor<T> z = gaussian_like<T>(shape, rng);
  NoGradGuard no_grad;
  for (std::size_t i = seq.size(); i-- > 0;) {
    const int t = seq[i];
    const int t_prev = i == 0 ? 0 : seq[i - 1];
    const Tensor<T> eps = predict(z, std::vector<int>(static_cast<std::size_t>(shape[0]), t));
    z = ddim_step(z, eps, t, t_prev, sched, eta, rng);
  }
  return z;
}

/// eps_u + g (eps_c - eps_u).
template <typename T>
Tensor<T> guided_noise(const Tensor<T>& eps_cond, const Tensor<T>& eps_uncond, double g) {
  std::vector<T> out(eps_cond.values().size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<T>(eps_uncond.values()[i] + g * (eps_cond.values()[i] - eps_uncond.values()[i]));
  }
  return Tensor<T>(eps_cond.shape(), std::move(out));
}

}  // namespace texrect
