#pragma once

#include <array>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tinc/nn.hpp"

namespace tinc::model {

enum class EncoderKind { small_cnn, mlp };

std::string to_string(EncoderKind k);
EncoderKind encoder_kind_from_string(const std::string& s);

struct ModelConfig {
  EncoderKind encoder = EncoderKind::small_cnn;
  // Strided conv widths; the last one is the representation dimension.
  std::vector<int> cnn_channels{16, 32, 64, 64};
  int mlp_hidden = 128;
  int representation_dim = 64;
  std::array<int, 3> projector_dims{128, 128, 128};
  bool time_head = false;
  int time_head_hidden = 64;
  std::array<int, 2> input_size{32, 32};  // (H, W) fed to the encoder

  void validate() const;
  int embedding_dim() const { return projector_dims[2]; }
};

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

class Encoder {
 public:
  struct Trace {
    std::vector<nn::Conv2d::Trace> conv;
    std::vector<nn::MapReluTrace> conv_relu;
    std::vector<nn::Linear::Trace> linear;
    std::vector<nn::ReluTrace> relu;
    int pool_n = 0, pool_h = 0, pool_w = 0;
  };

  Encoder(const ModelConfig& cfg, Rng& rng);

  /// n x representation_dim.
  Matrix forward(const nn::FeatureMap& x, Trace& trace) const;
  void backward(const Matrix& dy, const Trace& trace);
  std::vector<nn::Param*> params();

 private:
  EncoderKind kind_;
  std::vector<nn::Conv2d> convs_;
  std::vector<nn::Linear> linears_;
};

/// Linear -> BN -> ReLU -> Linear -> BN -> ReLU -> Linear.
class Projector {
 public:
  struct Trace {
    std::array<nn::Linear::Trace, 3> linear;
    std::array<nn::BatchNorm1d::Trace, 2> bn;
    std::array<nn::ReluTrace, 2> relu;
  };

  Projector(int in_dim, std::array<int, 3> dims, Rng& rng);

  Matrix forward(const Matrix& y, nn::Mode mode, Trace& trace);
  Matrix backward(const Matrix& dz, const Trace& trace);
  std::vector<nn::Param*> params();
  std::vector<nn::Buffer> buffers();

 private:
  std::vector<nn::Linear> linears_;
  std::vector<nn::BatchNorm1d> norms_;
};

/// MLP over concatenated embeddings [Z1 | Z2] predicting the signed gap.
class TimeHead {
 public:
  struct Trace {
    nn::Linear::Trace l1, l2;
    nn::ReluTrace relu;
  };

  TimeHead(int embedding_dim, int hidden, Rng& rng);

  Vector forward(const Matrix& z1, const Matrix& z2, Trace& trace) const;
  /// Returns gradients wrt (Z1, Z2).
  std::array<Matrix, 2> backward(const Vector& dpred, const Trace& trace);
  std::vector<nn::Param*> params();

 private:
  int d_;
  nn::Linear l1_, l2_;
};

/// Encoder + projector (+ optional time head) sharing weights across both views.
class SslModel {
 public:
  struct ViewTrace {
    Encoder::Trace enc;
    Projector::Trace proj;
  };
  struct ViewOutput {
    Matrix y;
    Matrix z;
  };

  SslModel(const ModelConfig& cfg, std::uint64_t init_seed);

  ViewOutput forward(const nn::FeatureMap& x, nn::Mode mode, ViewTrace& trace);
  ViewOutput forward(const std::vector<augment::Image>& images, nn::Mode mode, ViewTrace& trace);
  /// Representations only, eval mode, in chunks.
  Matrix represent(const std::vector<augment::Image>& images, std::size_t chunk = 256) const;
  /// Embeddings in eval mode.
  Matrix embed(const std::vector<augment::Image>& images, std::size_t chunk = 256);

  void backward(const Matrix& dz, const ViewTrace& trace);

  Encoder& encoder() { return encoder_; }
  Projector& projector() { return projector_; }
  TimeHead* time_head() { return time_head_ ? &*time_head_ : nullptr; }
  const ModelConfig& config() const { return cfg_; }

  std::vector<nn::Param*> params();
  std::vector<nn::Buffer> buffers();
  void zero_grad();

 private:
  ModelConfig cfg_;
  Encoder encoder_;
  Projector projector_;
  std::optional<TimeHead> time_head_;
};

/// Activation pattern of every ReLU in a trace, for hinge-aware gradient checks.
std::vector<bool> relu_signature(const SslModel::ViewTrace& trace);

void zero_grad(const std::vector<nn::Param*>& params);

}  // namespace tinc::model
