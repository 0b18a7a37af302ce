#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "bandvq/engine/tensor.hpp"
#include "bandvq/error.hpp"

namespace bandvq::engine {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;
  double clip_norm = 1.0;
};

/// First/second moments per parameter (index-aligned with the ParamList).
template <class T>
struct OptimizerState {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  std::uint64_t step = 0;

  void init_for(const ParamList<T>& params) {
    m.clear();
    v.clear();
    for (const auto& p : params) {
      m.emplace_back(p.tensor.numel(), T(0));
      v.emplace_back(p.tensor.numel(), T(0));
    }
    step = 0;
  }
};

/// Global L2 norm over all parameter gradients.
template <class T>
double global_grad_norm(ParamList<T>& params) {
  double sq = 0.0;
  for (auto& p : params)
    for (T g : p.tensor.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  return std::sqrt(sq);
}

/// Scales gradients so their global norm is at most clip_norm. Returns the
/// pre-clip norm.
template <class T>
double clip_grad_norm(ParamList<T>& params, double clip_norm) {
  const double norm = global_grad_norm(params);
  if (norm > clip_norm) {
    const T s = static_cast<T>(clip_norm / norm);
    for (auto& p : params)
      for (T& g : p.tensor.grad()) g *= s;
  }
  return norm;
}

/// Throws NumericalError naming the first parameter with a non-finite gradient.
template <class T>
void check_finite_grads(ParamList<T>& params) {
  for (auto& p : params)
    for (T g : p.tensor.grad())
      if (!std::isfinite(g))
        throw NumericalError("adamw_step: non-finite gradient in parameter '" + p.name + "'");
}

/// AdamW moment and weight update without clipping. `lr_scale[i]` multiplies
/// `lr` for parameter i (empty = all 1).
template <class T>
void adamw_update(ParamList<T>& params, OptimizerState<T>& state, double lr,
                  const AdamWConfig& cfg, const std::vector<double>& lr_scale = {}) {
  if (state.m.size() != params.size()) state.init_for(params);
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double plr = lr * (lr_scale.empty() ? 1.0 : lr_scale.at(i));
    auto value = params[i].tensor.mutable_data();
    auto grad = params[i].tensor.grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != value.size())
      throw ShapeError("adamw_step: moment size mismatch for '" + params[i].name + "'");
    const T decay = static_cast<T>(1.0 - plr * cfg.weight_decay);
    for (std::size_t j = 0; j < value.size(); ++j) {
      const double g = grad[j];
      m[j] = static_cast<T>(cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g);
      v[j] = static_cast<T>(cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g);
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      value[j] *= decay;
      value[j] -= static_cast<T>(plr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
}

/// Finite check, global-norm clip, then one AdamW update.
template <class T>
void adamw_step(ParamList<T>& params, OptimizerState<T>& state, double lr,
                const AdamWConfig& cfg, const std::vector<double>& lr_scale = {}) {
  if (!(cfg.clip_norm > 0.0)) throw ArgumentError("adamw_step: clip_norm must be > 0");
  check_finite_grads(params);
  clip_grad_norm(params, cfg.clip_norm);
  adamw_update(params, state, lr, cfg, lr_scale);
}

struct LrSchedule {
  double peak_lr = 3e-4;
  double min_lr = 3e-5;
  std::uint64_t warmup_steps = 10000;
  std::uint64_t total_steps = 30000;

  void validate() const {
    if (!(peak_lr > 0.0) || !(min_lr > 0.0) || min_lr > peak_lr)
      throw ArgumentError("LrSchedule: need 0 < min_lr <= peak_lr");
    if (warmup_steps == 0 || warmup_steps >= total_steps)
      throw ArgumentError("LrSchedule: need 0 < warmup_steps < total_steps");
  }
};

/// Linear warmup 0 -> peak, then cosine decay peak -> min at total_steps.
inline double cosine_lr(std::uint64_t step, const LrSchedule& s) {
  if (step <= s.warmup_steps)
    return s.peak_lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  if (step >= s.total_steps) return s.min_lr;
  const double progress = static_cast<double>(step - s.warmup_steps) /
                          static_cast<double>(s.total_steps - s.warmup_steps);
  return s.min_lr + 0.5 * (s.peak_lr - s.min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace bandvq::engine
