#pragma once

#include <cmath>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include "lacvit/autograd.hpp"

namespace lacvit {

// Per-parameter momentum buffers, keyed by parameter name.
struct SgdState {
  std::map<std::string, Tensor> velocity;
};

// v <- momentum * v + (g + wd * w);  w <- w - lr * v.
// Frozen parameters are left untouched; every gradient is zeroed afterwards.
inline void sgd_step(const std::vector<Parameter*>& params, SgdState& state, double lr, double weight_decay,
                     double momentum) {
  for (Parameter* p : params) {
    if (p->trainable) {
      auto [it, fresh] = state.velocity.try_emplace(p->name, p->value.shape());
      Tensor& v = it->second;
      if (!v.same_shape(p->value)) throw DimensionError("sgd: velocity shape drifted for " + p->name);
      auto w = p->value.data();
      auto g = p->grad.data();
      auto vv = v.data();
      for (std::size_t i = 0; i < w.size(); ++i) {
        vv[i] = momentum * vv[i] + (g[i] + weight_decay * w[i]);
        w[i] -= lr * vv[i];
      }
    }
    p->zero_grad();
  }
}

// Constant rate, or cosine decay from base_lr to 0 over total_steps.
inline double learning_rate_at(double base_lr, bool cosine, std::size_t step, std::size_t total_steps) {
  if (!cosine || total_steps == 0) return base_lr;
  const double t = static_cast<double>(step) / static_cast<double>(total_steps);
  return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * t));
}

}  // namespace lacvit
