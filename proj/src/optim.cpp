#include "tinc/optim.hpp"

#include <cmath>
#include <numbers>

namespace tinc::optim {

double lr_schedule(long step, long total_steps, long warmup_steps, double base_lr) {
  if (warmup_steps > 0 && step < warmup_steps)
    return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  const long span = total_steps - warmup_steps;
  if (span <= 0) return base_lr;
  const double progress = std::min(1.0, static_cast<double>(step - warmup_steps) / static_cast<double>(span));
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

void adamw_step(const std::vector<nn::Param*>& params, AdamWState& state, double lr, double weight_decay,
                const AdamWHyper& hyper) {
  if (state.m.size() != params.size()) {
    state.m.clear();
    state.v.clear();
    for (const auto* p : params) {
      state.m.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
      state.v.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    }
  }
  for (const auto* p : params)
    if (!p->grad.allFinite())
      throw NumericalError("divergence detected at step " + std::to_string(state.t + 1) + " (non-finite gradient in " +
                           p->name + ")");
  ++state.t;
  const double bc1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(state.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = *params[k];
    if (weight_decay != 0.0) p.value *= (1.0 - lr * weight_decay);
    state.m[k] = hyper.beta1 * state.m[k] + (1.0 - hyper.beta1) * p.grad;
    state.v[k] = hyper.beta2 * state.v[k] + (1.0 - hyper.beta2) * p.grad.cwiseAbs2();
    p.value.array() -= lr * (state.m[k].array() / bc1) / ((state.v[k].array() / bc2).sqrt() + hyper.eps);
  }
}

}  // namespace tinc::optim
