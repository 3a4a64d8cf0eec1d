#include "tinc/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace tinc {

FdStats central_difference_check(std::span<double> x, std::span<const double> analytic,
                                 const std::function<double()>& f,
                                 const std::function<std::vector<bool>()>& hinge_state, double step) {
  if (!(step > 0.0)) throw ValidationError("finite-difference step must be positive");
  if (x.size() != analytic.size())
    throw ValidationError("gradient size " + std::to_string(analytic.size()) + " does not match input size " +
                          std::to_string(x.size()));
  FdStats stats;
  const double f0 = f();
  const double floor = 1e-5 * std::max(1.0, std::abs(f0));
  const auto base_state = hinge_state ? hinge_state() : std::vector<bool>{};
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double orig = x[k];
    if (hinge_state) {
      x[k] = orig + 10.0 * step;
      const bool up_same = hinge_state() == base_state;
      x[k] = orig - 10.0 * step;
      const bool down_same = hinge_state() == base_state;
      x[k] = orig;
      if (!up_same || !down_same) {
        ++stats.excluded;
        continue;
      }
    }
    x[k] = orig + step;
    const double fp = f();
    x[k] = orig - step;
    const double fm = f();
    x[k] = orig;
    const double numeric = (fp - fm) / (2.0 * step);
    const double denom = std::max({std::abs(analytic[k]), std::abs(numeric), floor});
    const double rel = std::abs(analytic[k] - numeric) / denom;
    stats.max_rel_error = std::max(stats.max_rel_error, std::isfinite(rel) ? rel : 1e300);
    ++stats.checked;
  }
  return stats;
}

FdReport finite_difference_check(
    losses::LossId id, const losses::LossInputs& inputs, double step, double tolerance,
    const std::function<std::vector<Matrix>(losses::LossId, const losses::LossInputs&)>& gradient_override) {
  FdReport report;
  report.loss = losses::to_string(id);
  losses::LossInputs work = inputs;
  const auto grads = gradient_override ? gradient_override(id, work) : losses::loss_gradient(id, work);
  const auto names = losses::differentiable_inputs(id);
  auto f = [&] { return losses::evaluate(id, work); };
  auto hinges = [&] { return losses::hinge_state(id, work); };
  for (std::size_t k = 0; k < names.size(); ++k) {
    // Eigen storage is contiguous column-major; gradients share that layout.
    std::span<double> x;
    if (names[k] == "Z1") x = {work.z1.data(), static_cast<std::size_t>(work.z1.size())};
    if (names[k] == "Z2") x = {work.z2.data(), static_cast<std::size_t>(work.z2.size())};
    if (names[k] == "pred") x = {work.pred.data(), static_cast<std::size_t>(work.pred.size())};
    const FdStats stats = central_difference_check(
        x, std::span<const double>(grads[k].data(), static_cast<std::size_t>(grads[k].size())), f, hinges, step);
    report.max_rel_error = std::max(report.max_rel_error, stats.max_rel_error);
    report.inputs.push_back({names[k], stats});
  }
  report.passed = report.max_rel_error <= tolerance;
  return report;
}

losses::LossInputs random_loss_inputs(std::uint64_t seed, int n, int d) {
  Rng rng = make_rng({seed, 0x6C4Eu});
  std::normal_distribution<double> normal;
  losses::LossInputs in;
  const double scale = uniform(rng, 0.3, 2.0);
  in.z1 = Matrix::NullaryExpr(n, d, [&] { return scale * normal(rng); });
  in.z2 = Matrix::NullaryExpr(n, d, [&] { return scale * normal(rng); });
  for (int i = 0; i < n; ++i)
    if (uniform(rng, 0.0, 1.0) < 0.5) in.z2.row(i) = in.z1.row(i) + 0.2 * in.z2.row(i) / std::sqrt(static_cast<double>(d));
  in.dv = Vector::NullaryExpr(n, [&] { return uniform(rng, 0.0, 1.0); });
  in.pred = Vector::NullaryExpr(n, [&] { return normal(rng); });
  in.labels = Vector::NullaryExpr(n, [&] { return uniform(rng, -1.0, 1.0); });
  return in;
}

}  // namespace tinc
