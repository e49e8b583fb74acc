#pragma once

#include <cmath>
#include <vector>

#include "spanscl/autodiff.hpp"

namespace spanscl {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t warmup_steps = 100;
  /// Global gradient-norm clip; 0 disables clipping.
  double clip_norm = 1.0;
};

/// Linear warmup to the base rate, then constant. `step` counts from 1.
inline double scheduled_learning_rate(const AdamConfig& c, std::size_t step) {
  if (c.warmup_steps == 0 || step >= c.warmup_steps) return c.learning_rate;
  return c.learning_rate * static_cast<double>(step) / static_cast<double>(c.warmup_steps);
}

inline double gradient_norm(const std::vector<Parameter*>& params) {
  double sq = 0.0;
  for (const auto* p : params) sq += p->grad.squaredNorm();
  return std::sqrt(sq);
}

/// Scales every gradient so the global norm is at most `max_norm`. Returns
/// the norm before clipping.
inline double clip_gradients(const std::vector<Parameter*>& params, double max_norm) {
  const double norm = gradient_norm(params);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto* p : params) p->grad *= s;
  }
  return norm;
}

/// One bias-corrected Adam update; clears the gradients afterwards.
inline void adam_step(const std::vector<Parameter*>& params, const AdamConfig& c, std::size_t step) {
  const double lr = scheduled_learning_rate(c, step);
  const double t = static_cast<double>(step);
  const double correction1 = 1.0 - std::pow(c.beta1, t);
  const double correction2 = 1.0 - std::pow(c.beta2, t);
  for (auto* p : params) {
    p->first_moment = c.beta1 * p->first_moment + (1.0 - c.beta1) * p->grad;
    p->second_moment = c.beta2 * p->second_moment + (1.0 - c.beta2) * p->grad.cwiseProduct(p->grad);
    p->value.array() -= lr * (p->first_moment.array() / correction1) /
                        ((p->second_moment.array() / correction2).sqrt() + c.epsilon);
    p->zero_grad();
  }
}

}  // namespace spanscl
