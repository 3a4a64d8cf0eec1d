#include "tinc/model.hpp"

namespace tinc::model {

std::string to_string(EncoderKind k) { return k == EncoderKind::small_cnn ? "small_cnn" : "mlp"; }

EncoderKind encoder_kind_from_string(const std::string& s) {
  if (s == "small_cnn") return EncoderKind::small_cnn;
  if (s == "mlp") return EncoderKind::mlp;
  throw ValidationError("unknown encoder '" + s + "' (expected small_cnn|mlp)");
}

void ModelConfig::validate() const {
  if (representation_dim < 1 || mlp_hidden < 1 || time_head_hidden < 1) throw ValidationError("model dims must be positive");
  for (int d : projector_dims)
    if (d < 1) throw ValidationError("projector dims must be positive");
  if (input_size[0] < 4 || input_size[1] < 4) throw ValidationError("encoder input too small");
  if (encoder == EncoderKind::small_cnn) {
    if (cnn_channels.empty()) throw ValidationError("small_cnn needs at least one conv block");
    for (int c : cnn_channels)
      if (c < 1) throw ValidationError("conv widths must be positive");
    if (cnn_channels.back() != representation_dim)
      throw ValidationError("last conv width must equal representation_dim");
  }
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"encoder", to_string(c.encoder)},         {"cnn_channels", c.cnn_channels},
          {"mlp_hidden", c.mlp_hidden},              {"representation_dim", c.representation_dim},
          {"projector_dims", c.projector_dims},      {"time_head", c.time_head},
          {"time_head_hidden", c.time_head_hidden},  {"input_size", c.input_size}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "encoder") c.encoder = encoder_kind_from_string(v.get<std::string>());
    else if (key == "cnn_channels") c.cnn_channels = v.get<std::vector<int>>();
    else if (key == "mlp_hidden") c.mlp_hidden = v.get<int>();
    else if (key == "representation_dim") c.representation_dim = v.get<int>();
    else if (key == "projector_dims") c.projector_dims = v.get<std::array<int, 3>>();
    else if (key == "time_head") c.time_head = v.get<bool>();
    else if (key == "time_head_hidden") c.time_head_hidden = v.get<int>();
    else if (key == "input_size") c.input_size = v.get<std::array<int, 2>>();
    else throw ValidationError("unknown key '" + key + "' in model config");
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------

Encoder::Encoder(const ModelConfig& cfg, Rng& rng) : kind_(cfg.encoder) {
  if (kind_ == EncoderKind::small_cnn) {
    int in = 1;
    for (std::size_t k = 0; k < cfg.cnn_channels.size(); ++k) {
      convs_.emplace_back("encoder.conv" + std::to_string(k), in, cfg.cnn_channels[k], 2, rng);
      in = cfg.cnn_channels[k];
    }
  } else {
    linears_.emplace_back("encoder.fc0", cfg.input_size[0] * cfg.input_size[1], cfg.mlp_hidden, rng);
    linears_.emplace_back("encoder.fc1", cfg.mlp_hidden, cfg.representation_dim, rng);
  }
}

Matrix Encoder::forward(const nn::FeatureMap& x, Trace& tr) const {
  if (kind_ == EncoderKind::small_cnn) {
    tr.conv.resize(convs_.size());
    tr.conv_relu.resize(convs_.size());
    nn::FeatureMap h = x;
    for (std::size_t k = 0; k < convs_.size(); ++k) {
      h = convs_[k].forward(h, tr.conv[k]);
      h.data = nn::relu_forward(h.data, tr.conv_relu[k]);
    }
    tr.pool_n = h.n;
    tr.pool_h = h.h;
    tr.pool_w = h.w;
    return nn::global_avg_pool(h);
  }
  if (x.channels() != 1) throw ValidationError("mlp encoder expects single-channel images");
  const Eigen::Index pixels = static_cast<Eigen::Index>(x.h) * x.w;
  Matrix flat = Eigen::Map<const nn::RowMatrix>(x.data.data(), x.n, pixels);
  tr.linear.resize(2);
  tr.relu.resize(1);
  Matrix h = nn::relu_forward(linears_[0].forward(flat, tr.linear[0]), tr.relu[0]);
  return linears_[1].forward(h, tr.linear[1]);
}

void Encoder::backward(const Matrix& dy, const Trace& tr) {
  if (kind_ == EncoderKind::small_cnn) {
    nn::RowMatrix g = nn::global_avg_pool_backward(dy, tr.pool_n, tr.pool_h, tr.pool_w);
    for (std::size_t k = convs_.size(); k-- > 0;) {
      g = nn::relu_backward(g, tr.conv_relu[k]);
      // The first layer's input gradient is not needed.
      if (k == 0) {
        nn::RowMatrix unused = convs_[k].backward(g, tr.conv[k]);
        (void)unused;
      } else {
        g = convs_[k].backward(g, tr.conv[k]);
      }
    }
    return;
  }
  Matrix g = linears_[1].backward(dy, tr.linear[1]);
  g = nn::relu_backward(g, tr.relu[0]);
  linears_[0].backward(g, tr.linear[0]);
}

std::vector<nn::Param*> Encoder::params() {
  std::vector<nn::Param*> out;
  for (auto& c : convs_)
    for (auto* p : c.params()) out.push_back(p);
  for (auto& l : linears_)
    for (auto* p : l.params()) out.push_back(p);
  return out;
}

// ---------------------------------------------------------------------------

Projector::Projector(int in_dim, std::array<int, 3> dims, Rng& rng) {
  linears_.emplace_back("projector.fc0", in_dim, dims[0], rng);
  linears_.emplace_back("projector.fc1", dims[0], dims[1], rng);
  linears_.emplace_back("projector.fc2", dims[1], dims[2], rng);
  norms_.emplace_back("projector.bn0", dims[0]);
  norms_.emplace_back("projector.bn1", dims[1]);
}

Matrix Projector::forward(const Matrix& y, nn::Mode mode, Trace& tr) {
  Matrix h = y;
  for (std::size_t k = 0; k < 2; ++k) {
    h = linears_[k].forward(h, tr.linear[k]);
    h = norms_[k].forward(h, mode, tr.bn[k]);
    h = nn::relu_forward(h, tr.relu[k]);
  }
  return linears_[2].forward(h, tr.linear[2]);
}

Matrix Projector::backward(const Matrix& dz, const Trace& tr) {
  Matrix g = linears_[2].backward(dz, tr.linear[2]);
  for (std::size_t k = 2; k-- > 0;) {
    g = nn::relu_backward(g, tr.relu[k]);
    g = norms_[k].backward(g, tr.bn[k]);
    g = linears_[k].backward(g, tr.linear[k]);
  }
  return g;
}

std::vector<nn::Param*> Projector::params() {
  std::vector<nn::Param*> out;
  for (std::size_t k = 0; k < 3; ++k) {
    for (auto* p : linears_[k].params()) out.push_back(p);
    if (k < 2)
      for (auto* p : norms_[k].params()) out.push_back(p);
  }
  return out;
}

std::vector<nn::Buffer> Projector::buffers() {
  std::vector<nn::Buffer> out;
  for (auto& n : norms_)
    for (auto b : n.buffers()) out.push_back(b);
  return out;
}

// ---------------------------------------------------------------------------

TimeHead::TimeHead(int embedding_dim, int hidden, Rng& rng)
    : d_(embedding_dim), l1_("time_head.fc0", 2 * embedding_dim, hidden, rng), l2_("time_head.fc1", hidden, 1, rng) {}

Vector TimeHead::forward(const Matrix& z1, const Matrix& z2, Trace& tr) const {
  Matrix cat(z1.rows(), z1.cols() + z2.cols());
  cat << z1, z2;
  Matrix h = nn::relu_forward(l1_.forward(cat, tr.l1), tr.relu);
  return l2_.forward(h, tr.l2).col(0);
}

std::array<Matrix, 2> TimeHead::backward(const Vector& dpred, const Trace& tr) {
  Matrix g = l2_.backward(Matrix(dpred), tr.l2);
  g = nn::relu_backward(g, tr.relu);
  g = l1_.backward(g, tr.l1);
  return {g.leftCols(d_), g.rightCols(d_)};
}

std::vector<nn::Param*> TimeHead::params() {
  auto out = l1_.params();
  for (auto* p : l2_.params()) out.push_back(p);
  return out;
}

// ---------------------------------------------------------------------------

namespace {
Rng init_rng(std::uint64_t seed, std::uint64_t part) { return make_rng({seed, part, 0x1417u}); }
}  // namespace

SslModel::SslModel(const ModelConfig& cfg, std::uint64_t init_seed)
    : cfg_((cfg.validate(), cfg)),
      encoder_([&] {
        Rng r = init_rng(init_seed, 0);
        return Encoder(cfg, r);
      }()),
      projector_([&] {
        Rng r = init_rng(init_seed, 1);
        return Projector(cfg.representation_dim, cfg.projector_dims, r);
      }()) {
  if (cfg.time_head) {
    Rng r = init_rng(init_seed, 2);
    time_head_.emplace(cfg.embedding_dim(), cfg.time_head_hidden, r);
  }
}

SslModel::ViewOutput SslModel::forward(const nn::FeatureMap& x, nn::Mode mode, ViewTrace& tr) {
  ViewOutput out;
  out.y = encoder_.forward(x, tr.enc);
  out.z = projector_.forward(out.y, mode, tr.proj);
  return out;
}

SslModel::ViewOutput SslModel::forward(const std::vector<augment::Image>& images, nn::Mode mode, ViewTrace& tr) {
  return forward(nn::images_to_features(images), mode, tr);
}

Matrix SslModel::represent(const std::vector<augment::Image>& images, std::size_t chunk) const {
  Matrix out(static_cast<Eigen::Index>(images.size()), cfg_.representation_dim);
  for (std::size_t start = 0; start < images.size(); start += chunk) {
    const std::size_t stop = std::min(images.size(), start + chunk);
    std::vector<augment::Image> part(images.begin() + static_cast<std::ptrdiff_t>(start),
                                     images.begin() + static_cast<std::ptrdiff_t>(stop));
    Encoder::Trace tr;
    out.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(stop - start)) =
        encoder_.forward(nn::images_to_features(part), tr);
  }
  return out;
}

Matrix SslModel::embed(const std::vector<augment::Image>& images, std::size_t chunk) {
  const Matrix y = represent(images, chunk);
  Projector::Trace tr;
  return projector_.forward(y, nn::Mode::eval, tr);
}

void SslModel::backward(const Matrix& dz, const ViewTrace& tr) {
  const Matrix dy = projector_.backward(dz, tr.proj);
  encoder_.backward(dy, tr.enc);
}

std::vector<nn::Param*> SslModel::params() {
  auto out = encoder_.params();
  for (auto* p : projector_.params()) out.push_back(p);
  if (time_head_)
    for (auto* p : time_head_->params()) out.push_back(p);
  return out;
}

std::vector<nn::Buffer> SslModel::buffers() { return projector_.buffers(); }

void SslModel::zero_grad() { model::zero_grad(params()); }

void zero_grad(const std::vector<nn::Param*>& params) {
  for (auto* p : params) p->grad.setZero();
}

std::vector<bool> relu_signature(const SslModel::ViewTrace& tr) {
  std::vector<bool> sig;
  auto append = [&](const auto& active) {
    for (Eigen::Index k = 0; k < active.size(); ++k) sig.push_back(active.data()[k]);
  };
  for (const auto& r : tr.enc.conv_relu) append(r.active);
  for (const auto& r : tr.enc.relu) append(r.active);
  for (const auto& r : tr.proj.relu) append(r.active);
  return sig;
}

}  // namespace tinc::model
