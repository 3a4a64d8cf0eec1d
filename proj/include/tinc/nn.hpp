#pragma once

// Minimal layers with explicit forward traces. A trace holds whatever the
// backward pass needs, so one layer can be run on several batches (the two
// views of a pair) before either is back-propagated.

#include <string>
#include <vector>

#include "tinc/augment.hpp"
#include "tinc/common.hpp"

namespace tinc::nn {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Param {
  std::string name;
  Matrix value;
  Matrix grad;
};

/// Non-trainable state saved with the weights (running statistics).
struct Buffer {
  std::string name;
  Matrix* value;
};

enum class Mode { train, eval };

/// Channels-last activations: row (img * h + y) * w + x, one column per channel.
struct FeatureMap {
  RowMatrix data;
  int n = 0;
  int h = 0;
  int w = 0;
  int channels() const { return static_cast<int>(data.cols()); }
};

FeatureMap images_to_features(const std::vector<augment::Image>& images);

void init_uniform(Matrix& m, double bound, Rng& rng);

// 3x3 convolution, padding 1.
class Conv2d {
 public:
  struct Trace {
    RowMatrix col;
    int n = 0, h = 0, w = 0, oh = 0, ow = 0;
  };

  Conv2d(std::string name, int in_channels, int out_channels, int stride, Rng& rng);

  FeatureMap forward(const FeatureMap& x, Trace& trace) const;
  /// Accumulates parameter gradients; returns the gradient wrt the input map.
  RowMatrix backward(const RowMatrix& dy, const Trace& trace);

  std::vector<Param*> params() { return {&weight_, &bias_}; }

 private:
  int in_, out_, stride_;
  Param weight_;  // (9 * in) x out
  Param bias_;    // 1 x out
};

class Linear {
 public:
  struct Trace {
    Matrix input;
  };

  Linear(std::string name, int in_features, int out_features, Rng& rng);

  Matrix forward(const Matrix& x, Trace& trace) const;
  Matrix backward(const Matrix& dy, const Trace& trace);

  std::vector<Param*> params() { return {&weight_, &bias_}; }
  int in_features() const { return static_cast<int>(weight_.value.rows()); }
  int out_features() const { return static_cast<int>(weight_.value.cols()); }
  Param& weight() { return weight_; }
  Param& bias() { return bias_; }

 private:
  Param weight_;  // in x out
  Param bias_;    // 1 x out
};

/// Per-feature batch standardization with learnable scale and shift.
/// Training uses batch statistics; eval uses running averages.
class BatchNorm1d {
 public:
  struct Trace {
    Matrix xhat;
    Eigen::RowVectorXd inv_std;
    bool train = true;
  };

  BatchNorm1d(std::string name, int features, double momentum = 0.9, double eps = 1e-5);

  Matrix forward(const Matrix& x, Mode mode, Trace& trace);
  Matrix backward(const Matrix& dy, const Trace& trace);

  std::vector<Param*> params() { return {&gamma_, &beta_}; }
  std::vector<Buffer> buffers() { return {{name_ + ".running_mean", &running_mean_}, {name_ + ".running_var", &running_var_}}; }

 private:
  std::string name_;
  double momentum_, eps_;
  Param gamma_, beta_;
  Matrix running_mean_, running_var_;
};

struct ReluTrace {
  Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> active;
};

struct MapReluTrace {
  Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> active;
};

Matrix relu_forward(const Matrix& x, ReluTrace& trace);
Matrix relu_backward(const Matrix& dy, const ReluTrace& trace);
RowMatrix relu_forward(const RowMatrix& x, MapReluTrace& trace);
RowMatrix relu_backward(const RowMatrix& dy, const MapReluTrace& trace);

/// Mean over spatial positions: n x channels.
Matrix global_avg_pool(const FeatureMap& x);
RowMatrix global_avg_pool_backward(const Matrix& dy, int n, int h, int w);

}  // namespace tinc::nn
