#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "tinc/losses.hpp"

namespace tinc {

struct FdStats {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  // Coordinates whose +-10h neighbourhood flips a hinge or ReLU.
  std::size_t excluded = 0;
};

/// Central-difference check of `analytic` against f over every coordinate of
/// `x`. `x` is perturbed in place and restored. Relative error uses the
/// denominator max(|analytic|, |numeric|, 1e-5 * max(1, |f(x)|)) so that
/// coordinates with a vanishing gradient are judged against the loss scale.
FdStats central_difference_check(std::span<double> x, std::span<const double> analytic,
                                 const std::function<double()>& f,
                                 const std::function<std::vector<bool>()>& hinge_state, double step);

struct FdInputReport {
  std::string input;
  FdStats stats;
};

struct FdReport {
  std::string loss;
  std::vector<FdInputReport> inputs;
  double max_rel_error = 0.0;
  bool passed = true;
};

/// Checks losses::loss_gradient for `id` at `inputs` with step h.
/// `gradient_override`, when set, replaces the analytic gradient (negative-control hook).
FdReport finite_difference_check(
    losses::LossId id, const losses::LossInputs& inputs, double step, double tolerance,
    const std::function<std::vector<Matrix>(losses::LossId, const losses::LossInputs&)>& gradient_override = {});

/// Random check instance: n x d views with a per-instance scale, some pairs
/// nearly identical so TINC hinges sit on both sides, dv and labels in range.
losses::LossInputs random_loss_inputs(std::uint64_t seed, int n, int d);

}  // namespace tinc
