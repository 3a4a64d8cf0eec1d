#include "tinc/nn.hpp"

#include <cmath>

namespace tinc::nn {

FeatureMap images_to_features(const std::vector<augment::Image>& images) {
  if (images.empty()) throw ValidationError("empty image batch");
  const auto h = images.front().height(), w = images.front().width();
  FeatureMap f;
  f.n = static_cast<int>(images.size());
  f.h = static_cast<int>(h);
  f.w = static_cast<int>(w);
  f.data.resize(static_cast<Eigen::Index>(images.size()) * h * w, 1);
  Eigen::Index r = 0;
  for (const auto& img : images) {
    if (img.height() != h || img.width() != w) throw ValidationError("images in a batch must share one size");
    for (Eigen::Index y = 0; y < h; ++y)
      for (Eigen::Index x = 0; x < w; ++x) f.data(r++, 0) = img.pixels(y, x);
  }
  return f;
}

void init_uniform(Matrix& m, double bound, Rng& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = u(rng);
}

// ---------------------------------------------------------------------------

Conv2d::Conv2d(std::string name, int in_channels, int out_channels, int stride, Rng& rng)
    : in_(in_channels), out_(out_channels), stride_(stride) {
  weight_ = {name + ".weight", Matrix(9 * in_, out_), Matrix::Zero(9 * in_, out_)};
  bias_ = {name + ".bias", Matrix::Zero(1, out_), Matrix::Zero(1, out_)};
  init_uniform(weight_.value, std::sqrt(6.0 / (9.0 * in_)), rng);
}

FeatureMap Conv2d::forward(const FeatureMap& x, Trace& tr) const {
  if (x.channels() != in_) throw ValidationError("conv input has " + std::to_string(x.channels()) + " channels, expected " + std::to_string(in_));
  tr.n = x.n;
  tr.h = x.h;
  tr.w = x.w;
  tr.oh = (x.h + 2 - 3) / stride_ + 1;
  tr.ow = (x.w + 2 - 3) / stride_ + 1;
  tr.col.setZero(static_cast<Eigen::Index>(tr.n) * tr.oh * tr.ow, 9 * in_);
  for (int img = 0; img < tr.n; ++img)
    for (int oy = 0; oy < tr.oh; ++oy)
      for (int ox = 0; ox < tr.ow; ++ox) {
        const Eigen::Index r = (static_cast<Eigen::Index>(img) * tr.oh + oy) * tr.ow + ox;
        for (int ky = 0; ky < 3; ++ky) {
          const int iy = oy * stride_ + ky - 1;
          if (iy < 0 || iy >= x.h) continue;
          for (int kx = 0; kx < 3; ++kx) {
            const int ix = ox * stride_ + kx - 1;
            if (ix < 0 || ix >= x.w) continue;
            const Eigen::Index src = (static_cast<Eigen::Index>(img) * x.h + iy) * x.w + ix;
            tr.col.block(r, (ky * 3 + kx) * in_, 1, in_) = x.data.row(src);
          }
        }
      }
  FeatureMap y;
  y.n = tr.n;
  y.h = tr.oh;
  y.w = tr.ow;
  y.data = tr.col * weight_.value;
  y.data.rowwise() += bias_.value.row(0);
  return y;
}

RowMatrix Conv2d::backward(const RowMatrix& dy, const Trace& tr) {
  weight_.grad.noalias() += tr.col.transpose() * dy;
  bias_.grad.row(0) += dy.colwise().sum();
  const RowMatrix dcol = dy * weight_.value.transpose();
  RowMatrix dx = RowMatrix::Zero(static_cast<Eigen::Index>(tr.n) * tr.h * tr.w, in_);
  for (int img = 0; img < tr.n; ++img)
    for (int oy = 0; oy < tr.oh; ++oy)
      for (int ox = 0; ox < tr.ow; ++ox) {
        const Eigen::Index r = (static_cast<Eigen::Index>(img) * tr.oh + oy) * tr.ow + ox;
        for (int ky = 0; ky < 3; ++ky) {
          const int iy = oy * stride_ + ky - 1;
          if (iy < 0 || iy >= tr.h) continue;
          for (int kx = 0; kx < 3; ++kx) {
            const int ix = ox * stride_ + kx - 1;
            if (ix < 0 || ix >= tr.w) continue;
            const Eigen::Index dst = (static_cast<Eigen::Index>(img) * tr.h + iy) * tr.w + ix;
            dx.row(dst) += dcol.block(r, (ky * 3 + kx) * in_, 1, in_);
          }
        }
      }
  return dx;
}

// ---------------------------------------------------------------------------

Linear::Linear(std::string name, int in_features, int out_features, Rng& rng) {
  weight_ = {name + ".weight", Matrix(in_features, out_features), Matrix::Zero(in_features, out_features)};
  bias_ = {name + ".bias", Matrix::Zero(1, out_features), Matrix::Zero(1, out_features)};
  init_uniform(weight_.value, 1.0 / std::sqrt(static_cast<double>(in_features)), rng);
}

Matrix Linear::forward(const Matrix& x, Trace& tr) const {
  if (x.cols() != weight_.value.rows())
    throw ValidationError("linear input width " + std::to_string(x.cols()) + ", expected " + std::to_string(weight_.value.rows()));
  tr.input = x;
  Matrix y = x * weight_.value;
  y.rowwise() += bias_.value.row(0);
  return y;
}

Matrix Linear::backward(const Matrix& dy, const Trace& tr) {
  weight_.grad.noalias() += tr.input.transpose() * dy;
  bias_.grad.row(0) += dy.colwise().sum();
  return dy * weight_.value.transpose();
}

// ---------------------------------------------------------------------------

BatchNorm1d::BatchNorm1d(std::string name, int features, double momentum, double eps)
    : name_(std::move(name)), momentum_(momentum), eps_(eps) {
  gamma_ = {name_ + ".gamma", Matrix::Ones(1, features), Matrix::Zero(1, features)};
  beta_ = {name_ + ".beta", Matrix::Zero(1, features), Matrix::Zero(1, features)};
  running_mean_ = Matrix::Zero(1, features);
  running_var_ = Matrix::Ones(1, features);
}

Matrix BatchNorm1d::forward(const Matrix& x, Mode mode, Trace& tr) {
  tr.train = mode == Mode::train;
  Eigen::RowVectorXd mean, var;
  if (tr.train) {
    if (x.rows() < 2) throw ValidationError("batch statistics need at least 2 samples in train mode");
    mean = x.colwise().mean();
    const Matrix xc = x.rowwise() - mean;
    var = xc.array().square().colwise().sum() / static_cast<double>(x.rows());
    const double unbias = static_cast<double>(x.rows()) / static_cast<double>(x.rows() - 1);
    running_mean_.row(0) = momentum_ * running_mean_.row(0) + (1.0 - momentum_) * mean;
    running_var_.row(0) = momentum_ * running_var_.row(0) + (1.0 - momentum_) * unbias * var;
  } else {
    mean = running_mean_.row(0);
    var = running_var_.row(0);
  }
  tr.inv_std = (var.array() + eps_).rsqrt().matrix();
  tr.xhat = (x.rowwise() - mean).array().rowwise() * tr.inv_std.array();
  Matrix y = tr.xhat.array().rowwise() * gamma_.value.row(0).array();
  y.rowwise() += beta_.value.row(0);
  return y;
}

Matrix BatchNorm1d::backward(const Matrix& dy, const Trace& tr) {
  gamma_.grad.row(0) += (dy.array() * tr.xhat.array()).colwise().sum().matrix();
  beta_.grad.row(0) += dy.colwise().sum();
  const Matrix dxhat = dy.array().rowwise() * gamma_.value.row(0).array();
  if (!tr.train) return dxhat.array().rowwise() * tr.inv_std.array();
  const double n = static_cast<double>(dy.rows());
  const Eigen::RowVectorXd mean_d = dxhat.colwise().mean();
  const Eigen::RowVectorXd mean_dx = (dxhat.array() * tr.xhat.array()).colwise().sum().matrix() / n;
  Matrix dx = dxhat.rowwise() - mean_d;
  dx.array() -= tr.xhat.array().rowwise() * mean_dx.array();
  return dx.array().rowwise() * tr.inv_std.array();
}

// ---------------------------------------------------------------------------

Matrix relu_forward(const Matrix& x, ReluTrace& tr) {
  tr.active = x.array() > 0.0;
  return tr.active.select(x, 0.0);
}

Matrix relu_backward(const Matrix& dy, const ReluTrace& tr) { return tr.active.select(dy, 0.0); }

RowMatrix relu_forward(const RowMatrix& x, MapReluTrace& tr) {
  tr.active = x.array() > 0.0;
  return tr.active.select(x, 0.0);
}

RowMatrix relu_backward(const RowMatrix& dy, const MapReluTrace& tr) { return tr.active.select(dy, 0.0); }

Matrix global_avg_pool(const FeatureMap& x) {
  const Eigen::Index hw = static_cast<Eigen::Index>(x.h) * x.w;
  Matrix out(x.n, x.channels());
  for (int img = 0; img < x.n; ++img) out.row(img) = x.data.middleRows(img * hw, hw).colwise().mean();
  return out;
}

RowMatrix global_avg_pool_backward(const Matrix& dy, int n, int h, int w) {
  const Eigen::Index hw = static_cast<Eigen::Index>(h) * w;
  RowMatrix dx(n * hw, dy.cols());
  for (int img = 0; img < n; ++img) dx.middleRows(img * hw, hw).rowwise() = dy.row(img) / static_cast<double>(hw);
  return dx;
}

}  // namespace tinc::nn
