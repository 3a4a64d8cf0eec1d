#pragma once

#include <vector>

#include "tinc/nn.hpp"

namespace tinc::optim {

/// Linear warmup from 0 to base_lr, then half-cosine decay to 0 at total_steps.
double lr_schedule(long step, long total_steps, long warmup_steps, double base_lr);

struct AdamWHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamWState {
  std::vector<Matrix> m;
  std::vector<Matrix> v;
  long t = 0;
};

/// Adaptive-moment update with bias correction; weight decay shrinks the
/// parameters directly (p <- p - lr * wd * p) instead of entering the gradient.
/// Throws NumericalError("divergence detected ...") on a non-finite gradient.
void adamw_step(const std::vector<nn::Param*>& params, AdamWState& state, double lr, double weight_decay,
                const AdamWHyper& hyper = {});

}  // namespace tinc::optim
