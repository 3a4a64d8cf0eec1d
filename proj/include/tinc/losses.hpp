#pragma once

// Self-supervised loss terms operating on n x d embedding batches (rows are
// samples, columns are embedding components), with analytic gradients.

#include <optional>
#include <string>
#include <vector>

#include "tinc/common.hpp"

namespace tinc::losses {

enum class SimilarityVariant { mse, tinc, tinc_squared };

std::string to_string(SimilarityVariant v);
SimilarityVariant similarity_variant_from_string(const std::string& s);

struct LossConfig {
  double lambda_inv = 25.0;
  double mu_var = 5.0;
  double nu_cov = 1.0;
  double gamma = 1.0;
  // Stabilizer inside the per-dimension std: sqrt(var + epsilon).
  double epsilon = 1e-4;
  double lambda_bt = 0.005;
  // Added to the biased std when standardizing views for the cross-correlation.
  double bt_epsilon = 1e-12;
  SimilarityVariant similarity_variant = SimilarityVariant::mse;
  int dv_min_days = 0;
  int dv_max_days = 540;

  void validate() const;
};

/// Unweighted parts of a composite loss plus the weighted total.
/// For Barlow Twins, `invariance` holds the on-diagonal part and `covariance`
/// the unweighted off-diagonal sum.
struct LossBreakdown {
  double total = 0.0;
  double invariance = 0.0;
  double variance = 0.0;
  double covariance = 0.0;
  std::optional<double> extra;
};

// Eq-level terms. All throw ValidationError on shape mismatch, non-finite
// entries, or a batch too small for the n-1 divisor.
double invariance_term(const Matrix& z1, const Matrix& z2);
double variance_term(const Matrix& z, double gamma, double epsilon);
double covariance_term(const Matrix& z);
double tinc_term(const Matrix& z1, const Matrix& z2, const Vector& dv);
double tinc_squared_term(const Matrix& z1, const Matrix& z2, const Vector& dv);

double similarity_term(SimilarityVariant variant, const Matrix& z1, const Matrix& z2,
                       const std::optional<Vector>& dv);

/// lambda * Sim(Z1, Z2) + mu * [V(Z1) + V(Z2)] + nu * [C(Z1) + C(Z2)].
/// `dv` is required for the margin variants.
LossBreakdown vicreg_loss(const Matrix& z1, const Matrix& z2, const LossConfig& cfg,
                          const std::optional<Vector>& dv = std::nullopt);

/// Recomputes the total from the unweighted parts of a vicreg_loss breakdown.
double vicreg_recombine(const LossBreakdown& parts, const LossConfig& cfg);

LossBreakdown barlow_twins_loss(const Matrix& z1, const Matrix& z2, double lambda_bt,
                                double bt_epsilon = 1e-12);

double time_head_loss(const Vector& pred, const Vector& labels);

// Gradients. Hinges at their boundary take the inactive (zero) branch.
struct PairGrad {
  Matrix dz1;
  Matrix dz2;
};

PairGrad invariance_grad(const Matrix& z1, const Matrix& z2);
Matrix variance_grad(const Matrix& z, double gamma, double epsilon);
Matrix covariance_grad(const Matrix& z);
PairGrad tinc_grad(const Matrix& z1, const Matrix& z2, const Vector& dv);
PairGrad tinc_squared_grad(const Matrix& z1, const Matrix& z2, const Vector& dv);
PairGrad vicreg_grad(const Matrix& z1, const Matrix& z2, const LossConfig& cfg,
                     const std::optional<Vector>& dv = std::nullopt);
PairGrad barlow_twins_grad(const Matrix& z1, const Matrix& z2, double lambda_bt,
                           double bt_epsilon = 1e-12);
Vector time_head_grad(const Vector& pred, const Vector& labels);

// Uniform dispatch used by the gradient checker and the CLI.

enum class LossId { invariance, variance, covariance, tinc, tinc_squared, vicreg, barlow_twins, time_head };

std::string to_string(LossId id);
const std::vector<LossId>& all_loss_ids();

struct LossInputs {
  Matrix z1;
  Matrix z2;
  Vector dv;
  Vector pred;
  Vector labels;
  LossConfig cfg;
};

double evaluate(LossId id, const LossInputs& in);

/// Gradients with respect to each differentiable input of `id`, in the order
/// given by differentiable_inputs(id). dv and labels are treated as constants.
std::vector<Matrix> loss_gradient(LossId id, const LossInputs& in);
std::vector<std::string> differentiable_inputs(LossId id);

/// Active/inactive flag of every hinge the loss contains; empty for smooth losses.
std::vector<bool> hinge_state(LossId id, const LossInputs& in);

}  // namespace tinc::losses
