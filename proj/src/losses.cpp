#include "tinc/losses.hpp"

#include <algorithm>
#include <cmath>

namespace tinc::losses {

namespace {

void require_finite(const Matrix& z, const char* what) {
  if (!z.allFinite()) throw ValidationError(std::string(what) + " contains non-finite entries");
}

void require_same_shape(const Matrix& z1, const Matrix& z2) {
  if (z1.rows() != z2.rows() || z1.cols() != z2.cols())
    throw ValidationError("embedding shape mismatch: Z1 is " + shape_str(z1) + ", Z2 is " + shape_str(z2));
  if (z1.rows() < 1 || z1.cols() < 1) throw ValidationError("empty embedding batch " + shape_str(z1));
  require_finite(z1, "Z1");
  require_finite(z2, "Z2");
}

void require_batch(const Matrix& z) {
  if (z.rows() < 2) throw ValidationError("batch too small for variance term (n=" + std::to_string(z.rows()) + ")");
  if (z.cols() < 1) throw ValidationError("embedding dimension must be positive");
  require_finite(z, "Z");
}

void require_margins(const Matrix& z1, const Vector& dv) {
  if (dv.size() != z1.rows())
    throw ValidationError("dv length " + std::to_string(dv.size()) + " does not match batch size " +
                          std::to_string(z1.rows()));
  for (Eigen::Index i = 0; i < dv.size(); ++i)
    if (!(dv[i] >= 0.0 && dv[i] <= 1.0)) throw ValidationError("dv[" + std::to_string(i) + "] outside [0,1]");
}

Vector pair_sq_dist(const Matrix& z1, const Matrix& z2) { return (z1 - z2).rowwise().squaredNorm(); }

Matrix centered(const Matrix& z) { return z.rowwise() - z.colwise().mean(); }

// Unbiased per-column std with the stabilizer inside the root.
Eigen::RowVectorXd column_std(const Matrix& zc, double epsilon) {
  const double denom = static_cast<double>(zc.rows() - 1);
  return ((zc.array().square().colwise().sum() / denom) + epsilon).sqrt().matrix();
}

Matrix covariance_matrix(const Matrix& zc) { return (zc.transpose() * zc) / static_cast<double>(zc.rows() - 1); }

struct Standardized {
  Matrix zhat;
  Matrix zc;
  Eigen::RowVectorXd sigma;  // biased std
};

Standardized standardize_biased(const Matrix& z, double eps) {
  Standardized s;
  s.zc = centered(z);
  s.sigma = (s.zc.array().square().colwise().sum() / static_cast<double>(z.rows())).sqrt().matrix();
  for (Eigen::Index j = 0; j < s.sigma.size(); ++j)
    if (s.sigma[j] + eps <= 0.0)
      throw ValidationError("zero-variance dimension " + std::to_string(j) + " in Barlow Twins normalization");
  s.zhat = s.zc.array().rowwise() / (s.sigma.array() + eps);
  return s;
}

Matrix cross_correlation(const Matrix& a, const Matrix& b) { return (a.transpose() * b) / static_cast<double>(a.rows()); }

// Backprop through per-column (x - mean) / (sigma + eps) with biased sigma.
Matrix standardize_backward(const Standardized& s, const Matrix& g, double eps) {
  const double n = static_cast<double>(g.rows());
  Matrix dz(g.rows(), g.cols());
  for (Eigen::Index j = 0; j < g.cols(); ++j) {
    const double sig = s.sigma[j];
    const double denom = sig + eps;
    const double gmean = g.col(j).mean();
    const double gx = g.col(j).dot(s.zc.col(j));
    const double coef = sig > 0.0 ? gx / (n * sig * denom * denom) : 0.0;
    dz.col(j) = (g.col(j).array() - gmean) / denom - coef * s.zc.col(j).array();
  }
  return dz;
}

}  // namespace

std::string to_string(SimilarityVariant v) {
  switch (v) {
    case SimilarityVariant::mse: return "mse";
    case SimilarityVariant::tinc: return "tinc";
    case SimilarityVariant::tinc_squared: return "tinc_squared";
  }
  return "?";
}

SimilarityVariant similarity_variant_from_string(const std::string& s) {
  if (s == "mse") return SimilarityVariant::mse;
  if (s == "tinc") return SimilarityVariant::tinc;
  if (s == "tinc_squared") return SimilarityVariant::tinc_squared;
  throw ValidationError("unknown similarity variant '" + s + "' (expected mse|tinc|tinc_squared)");
}

void LossConfig::validate() const {
  if (lambda_inv < 0 || mu_var < 0 || nu_cov < 0 || lambda_bt < 0)
    throw ValidationError("loss weights must be non-negative");
  if (!(gamma > 0)) throw ValidationError("gamma must be positive");
  if (!(epsilon > 0)) throw ValidationError("epsilon must be positive");
  if (bt_epsilon < 0) throw ValidationError("bt_epsilon must be non-negative");
  if (dv_min_days >= dv_max_days) throw ValidationError("dv_min_days must be below dv_max_days");
}

double invariance_term(const Matrix& z1, const Matrix& z2) {
  require_same_shape(z1, z2);
  return pair_sq_dist(z1, z2).sum() / static_cast<double>(z1.rows());
}

double variance_term(const Matrix& z, double gamma, double epsilon) {
  require_batch(z);
  const auto sd = column_std(centered(z), epsilon);
  return (gamma - sd.array()).max(0.0).sum() / static_cast<double>(z.cols());
}

double covariance_term(const Matrix& z) {
  require_batch(z);
  const Matrix cov = covariance_matrix(centered(z));
  const double off = cov.array().square().sum() - cov.diagonal().array().square().sum();
  return off / static_cast<double>(z.cols());
}

double tinc_term(const Matrix& z1, const Matrix& z2, const Vector& dv) {
  require_same_shape(z1, z2);
  require_margins(z1, dv);
  return (pair_sq_dist(z1, z2) - dv).array().max(0.0).sum() / static_cast<double>(z1.rows());
}

double tinc_squared_term(const Matrix& z1, const Matrix& z2, const Vector& dv) {
  require_same_shape(z1, z2);
  require_margins(z1, dv);
  return (pair_sq_dist(z1, z2) - dv).array().max(0.0).square().sum() / static_cast<double>(z1.rows());
}

double similarity_term(SimilarityVariant variant, const Matrix& z1, const Matrix& z2,
                       const std::optional<Vector>& dv) {
  if (variant == SimilarityVariant::mse) return invariance_term(z1, z2);
  if (!dv) throw ValidationError("similarity variant " + to_string(variant) + " requires dv margins");
  return variant == SimilarityVariant::tinc ? tinc_term(z1, z2, *dv) : tinc_squared_term(z1, z2, *dv);
}

double vicreg_recombine(const LossBreakdown& p, const LossConfig& cfg) {
  return cfg.lambda_inv * p.invariance + cfg.mu_var * p.variance + cfg.nu_cov * p.covariance;
}

LossBreakdown vicreg_loss(const Matrix& z1, const Matrix& z2, const LossConfig& cfg, const std::optional<Vector>& dv) {
  LossBreakdown b;
  b.invariance = similarity_term(cfg.similarity_variant, z1, z2, dv);
  b.variance = variance_term(z1, cfg.gamma, cfg.epsilon) + variance_term(z2, cfg.gamma, cfg.epsilon);
  b.covariance = covariance_term(z1) + covariance_term(z2);
  b.total = vicreg_recombine(b, cfg);
  return b;
}

LossBreakdown barlow_twins_loss(const Matrix& z1, const Matrix& z2, double lambda_bt, double bt_epsilon) {
  require_same_shape(z1, z2);
  require_batch(z1);
  const auto s1 = standardize_biased(z1, bt_epsilon);
  const auto s2 = standardize_biased(z2, bt_epsilon);
  const Matrix c = cross_correlation(s1.zhat, s2.zhat);
  LossBreakdown b;
  b.invariance = (1.0 - c.diagonal().array()).square().sum();
  b.covariance = c.array().square().sum() - c.diagonal().array().square().sum();
  b.total = b.invariance + lambda_bt * b.covariance;
  return b;
}

double time_head_loss(const Vector& pred, const Vector& labels) {
  if (pred.size() != labels.size())
    throw ValidationError("time-head length mismatch: " + std::to_string(pred.size()) + " predictions vs " +
                          std::to_string(labels.size()) + " labels");
  if (pred.size() == 0) throw ValidationError("time-head loss on empty batch");
  return (pred - labels).squaredNorm() / static_cast<double>(pred.size());
}

PairGrad invariance_grad(const Matrix& z1, const Matrix& z2) {
  require_same_shape(z1, z2);
  const double scale = 2.0 / static_cast<double>(z1.rows());
  Matrix d = scale * (z1 - z2);
  return {d, -d};
}

Matrix variance_grad(const Matrix& z, double gamma, double epsilon) {
  require_batch(z);
  const Matrix zc = centered(z);
  const auto sd = column_std(zc, epsilon);
  const double n1 = static_cast<double>(z.rows() - 1);
  const double d = static_cast<double>(z.cols());
  Matrix g = Matrix::Zero(z.rows(), z.cols());
  for (Eigen::Index j = 0; j < z.cols(); ++j)
    if (gamma - sd[j] > 0.0) g.col(j) = -zc.col(j) / (d * n1 * sd[j]);
  return g;
}

Matrix covariance_grad(const Matrix& z) {
  require_batch(z);
  const Matrix zc = centered(z);
  Matrix cov = covariance_matrix(zc);
  cov.diagonal().setZero();
  const double scale = 4.0 / (static_cast<double>(z.cols()) * static_cast<double>(z.rows() - 1));
  return scale * zc * cov;
}

PairGrad tinc_grad(const Matrix& z1, const Matrix& z2, const Vector& dv) {
  require_same_shape(z1, z2);
  require_margins(z1, dv);
  const Vector dist = pair_sq_dist(z1, z2);
  const double scale = 2.0 / static_cast<double>(z1.rows());
  Matrix d = Matrix::Zero(z1.rows(), z1.cols());
  for (Eigen::Index i = 0; i < z1.rows(); ++i)
    if (dist[i] - dv[i] > 0.0) d.row(i) = scale * (z1.row(i) - z2.row(i));
  return {d, -d};
}

PairGrad tinc_squared_grad(const Matrix& z1, const Matrix& z2, const Vector& dv) {
  require_same_shape(z1, z2);
  require_margins(z1, dv);
  const Vector dist = pair_sq_dist(z1, z2);
  const double scale = 4.0 / static_cast<double>(z1.rows());
  Matrix d = Matrix::Zero(z1.rows(), z1.cols());
  for (Eigen::Index i = 0; i < z1.rows(); ++i) {
    const double h = dist[i] - dv[i];
    if (h > 0.0) d.row(i) = scale * h * (z1.row(i) - z2.row(i));
  }
  return {d, -d};
}

PairGrad vicreg_grad(const Matrix& z1, const Matrix& z2, const LossConfig& cfg, const std::optional<Vector>& dv) {
  PairGrad sim;
  switch (cfg.similarity_variant) {
    case SimilarityVariant::mse: sim = invariance_grad(z1, z2); break;
    case SimilarityVariant::tinc:
      if (!dv) throw ValidationError("similarity variant tinc requires dv margins");
      sim = tinc_grad(z1, z2, *dv);
      break;
    case SimilarityVariant::tinc_squared:
      if (!dv) throw ValidationError("similarity variant tinc_squared requires dv margins");
      sim = tinc_squared_grad(z1, z2, *dv);
      break;
  }
  PairGrad g;
  g.dz1 = cfg.lambda_inv * sim.dz1 + cfg.mu_var * variance_grad(z1, cfg.gamma, cfg.epsilon) +
          cfg.nu_cov * covariance_grad(z1);
  g.dz2 = cfg.lambda_inv * sim.dz2 + cfg.mu_var * variance_grad(z2, cfg.gamma, cfg.epsilon) +
          cfg.nu_cov * covariance_grad(z2);
  return g;
}

PairGrad barlow_twins_grad(const Matrix& z1, const Matrix& z2, double lambda_bt, double bt_epsilon) {
  require_same_shape(z1, z2);
  require_batch(z1);
  const auto s1 = standardize_biased(z1, bt_epsilon);
  const auto s2 = standardize_biased(z2, bt_epsilon);
  const Matrix c = cross_correlation(s1.zhat, s2.zhat);
  Matrix gc = 2.0 * lambda_bt * c;
  for (Eigen::Index i = 0; i < c.rows(); ++i) gc(i, i) = -2.0 * (1.0 - c(i, i));
  const double n = static_cast<double>(z1.rows());
  const Matrix gh1 = s2.zhat * gc.transpose() / n;
  const Matrix gh2 = s1.zhat * gc / n;
  return {standardize_backward(s1, gh1, bt_epsilon), standardize_backward(s2, gh2, bt_epsilon)};
}

Vector time_head_grad(const Vector& pred, const Vector& labels) {
  time_head_loss(pred, labels);
  return 2.0 * (pred - labels) / static_cast<double>(pred.size());
}

std::string to_string(LossId id) {
  switch (id) {
    case LossId::invariance: return "invariance";
    case LossId::variance: return "variance";
    case LossId::covariance: return "covariance";
    case LossId::tinc: return "tinc";
    case LossId::tinc_squared: return "tinc_squared";
    case LossId::vicreg: return "vicreg";
    case LossId::barlow_twins: return "barlow_twins";
    case LossId::time_head: return "time_head";
  }
  return "?";
}

const std::vector<LossId>& all_loss_ids() {
  static const std::vector<LossId> ids{LossId::invariance, LossId::variance,     LossId::covariance,
                                       LossId::tinc,       LossId::tinc_squared, LossId::vicreg,
                                       LossId::barlow_twins, LossId::time_head};
  return ids;
}

std::vector<std::string> differentiable_inputs(LossId id) {
  switch (id) {
    case LossId::variance:
    case LossId::covariance: return {"Z1"};
    case LossId::time_head: return {"pred"};
    default: return {"Z1", "Z2"};
  }
}

namespace {
std::optional<Vector> dv_if_needed(const LossInputs& in) {
  if (in.cfg.similarity_variant == SimilarityVariant::mse) return std::nullopt;
  return in.dv;
}
}  // namespace

double evaluate(LossId id, const LossInputs& in) {
  switch (id) {
    case LossId::invariance: return invariance_term(in.z1, in.z2);
    case LossId::variance: return variance_term(in.z1, in.cfg.gamma, in.cfg.epsilon);
    case LossId::covariance: return covariance_term(in.z1);
    case LossId::tinc: return tinc_term(in.z1, in.z2, in.dv);
    case LossId::tinc_squared: return tinc_squared_term(in.z1, in.z2, in.dv);
    case LossId::vicreg: return vicreg_loss(in.z1, in.z2, in.cfg, dv_if_needed(in)).total;
    case LossId::barlow_twins: return barlow_twins_loss(in.z1, in.z2, in.cfg.lambda_bt, in.cfg.bt_epsilon).total;
    case LossId::time_head: return time_head_loss(in.pred, in.labels);
  }
  throw ValidationError("unknown loss id");
}

std::vector<Matrix> loss_gradient(LossId id, const LossInputs& in) {
  auto pair = [](PairGrad g) { return std::vector<Matrix>{std::move(g.dz1), std::move(g.dz2)}; };
  switch (id) {
    case LossId::invariance: return pair(invariance_grad(in.z1, in.z2));
    case LossId::variance: return {variance_grad(in.z1, in.cfg.gamma, in.cfg.epsilon)};
    case LossId::covariance: return {covariance_grad(in.z1)};
    case LossId::tinc: return pair(tinc_grad(in.z1, in.z2, in.dv));
    case LossId::tinc_squared: return pair(tinc_squared_grad(in.z1, in.z2, in.dv));
    case LossId::vicreg: return pair(vicreg_grad(in.z1, in.z2, in.cfg, dv_if_needed(in)));
    case LossId::barlow_twins: return pair(barlow_twins_grad(in.z1, in.z2, in.cfg.lambda_bt, in.cfg.bt_epsilon));
    case LossId::time_head: return {Matrix(time_head_grad(in.pred, in.labels))};
  }
  throw ValidationError("unknown loss id");
}

std::vector<bool> hinge_state(LossId id, const LossInputs& in) {
  std::vector<bool> state;
  auto add_variance = [&](const Matrix& z) {
    const auto sd = column_std(centered(z), in.cfg.epsilon);
    for (Eigen::Index j = 0; j < sd.size(); ++j) state.push_back(in.cfg.gamma - sd[j] > 0.0);
  };
  auto add_margin = [&] {
    const Vector dist = pair_sq_dist(in.z1, in.z2);
    for (Eigen::Index i = 0; i < dist.size(); ++i) state.push_back(dist[i] - in.dv[i] > 0.0);
  };
  switch (id) {
    case LossId::variance: add_variance(in.z1); break;
    case LossId::tinc:
    case LossId::tinc_squared: add_margin(); break;
    case LossId::vicreg:
      add_variance(in.z1);
      add_variance(in.z2);
      if (in.cfg.similarity_variant != SimilarityVariant::mse) add_margin();
      break;
    default: break;
  }
  return state;
}

}  // namespace tinc::losses
