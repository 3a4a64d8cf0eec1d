#include "tinc/trainer.hpp"

#include <cmath>
#include <fstream>
#include <iostream>

#include "tinc/config.hpp"
#include "tinc/gradcheck.hpp"

namespace tinc::trainer {

using losses::LossBreakdown;

std::string to_string(Method m) {
  switch (m) {
    case Method::vicreg: return "vicreg";
    case Method::tinc: return "tinc";
    case Method::barlow_twins: return "barlow_twins";
    case Method::vicreg_timehead: return "vicreg_timehead";
  }
  return "?";
}

Method method_from_string(const std::string& s) {
  for (auto m : {Method::vicreg, Method::tinc, Method::barlow_twins, Method::vicreg_timehead})
    if (to_string(m) == s) return m;
  throw ValidationError("invalid method '" + s + "'; valid methods: vicreg, tinc, barlow_twins, vicreg_timehead");
}

void TrainConfig::validate() const {
  if (batch_size < 2) throw ValidationError("batch_size must be at least 2");
  if (epochs < 0) throw ValidationError("epochs must be non-negative");
  if (warmup_epochs < 0 || (epochs > 0 && warmup_epochs >= epochs))
    throw ValidationError("warmup_epochs must be smaller than epochs");
  if (!(base_lr >= 0.0) || !(weight_decay >= 0.0)) throw ValidationError("base_lr and weight_decay must be >= 0");
  if (gap_min_days < 0 || gap_max_days < gap_min_days) throw ValidationError("bad gap range");
  if (checkpoint_every < 0) throw ValidationError("checkpoint_every must be >= 0");
  if (threads < 1) throw ValidationError("threads must be >= 1");
  loss.validate();
}

MethodLoss method_loss(Method method, const losses::LossConfig& cfg, const Matrix& z1, const Matrix& z2,
                       const Vector& dv) {
  MethodLoss out;
  if (method == Method::barlow_twins) {
    out.parts = losses::barlow_twins_loss(z1, z2, cfg.lambda_bt, cfg.bt_epsilon);
    auto g = losses::barlow_twins_grad(z1, z2, cfg.lambda_bt, cfg.bt_epsilon);
    out.dz1 = std::move(g.dz1);
    out.dz2 = std::move(g.dz2);
    return out;
  }
  losses::LossConfig c = cfg;
  if (method == Method::tinc) {
    if (c.similarity_variant == losses::SimilarityVariant::mse) c.similarity_variant = losses::SimilarityVariant::tinc;
  } else {
    c.similarity_variant = losses::SimilarityVariant::mse;
  }
  const bool uses_dv = c.similarity_variant != losses::SimilarityVariant::mse;
  const std::optional<Vector> margin = uses_dv ? std::optional<Vector>(dv) : std::nullopt;
  out.parts = losses::vicreg_loss(z1, z2, c, margin);
  auto g = losses::vicreg_grad(z1, z2, c, margin);
  out.dz1 = std::move(g.dz1);
  out.dz2 = std::move(g.dz2);
  return out;
}

nlohmann::json to_json(const EpochLog& e) {
  nlohmann::json j;
  j["epoch"] = e.epoch;
  j["invariance"] = e.mean.invariance;
  j["variance"] = e.mean.variance;
  j["covariance"] = e.mean.covariance;
  j["extra"] = e.mean.extra ? nlohmann::json(*e.mean.extra) : nlohmann::json(nullptr);
  j["total"] = e.mean.total;
  j["lr"] = e.lr;
  j["z_std"] = e.z_std;
  return j;
}

namespace {

double mean_std(const Matrix& z) {
  if (z.rows() < 2) return 0.0;
  const Matrix c = z.rowwise() - z.colwise().mean();
  return (c.colwise().squaredNorm() / static_cast<double>(z.rows() - 1)).array().sqrt().mean();
}

model::ModelConfig effective_model(model::ModelConfig m, Method method) {
  if (method == Method::vicreg_timehead) m.time_head = true;
  return m;
}

cohort::SamplerConfig sampler_config(const TrainConfig& t) {
  cohort::SamplerConfig s;
  s.gap_min_days = t.gap_min_days;
  s.gap_max_days = t.gap_max_days;
  s.dv_min_days = t.loss.dv_min_days;
  s.dv_max_days = t.loss.dv_max_days;
  s.mode = t.pair_mode;
  return s;
}

nlohmann::json config_snapshot(const Trainer& t) {
  return {{"train", config::to_json(t.train_config())},
          {"model", model::to_json(t.model_config())},
          {"augment", config::to_json(t.policy())},
          {"preprocess", config::to_json(t.preprocess())}};
}

}  // namespace

Trainer::Trainer(cohort::CohortManifest manifest, TrainConfig train, model::ModelConfig model,
                 augment::AugmentPolicy policy, augment::PreprocessConfig prep,
                 std::shared_ptr<data::ScanStore> store)
    : manifest_(std::move(manifest)),
      train_(std::move(train)),
      model_cfg_(effective_model(std::move(model), train_.method)),
      policy_(policy),
      prep_(prep) {
  train_.validate();
  model_cfg_.validate();
  policy_.validate();
  if (policy_.target_size[0] != model_cfg_.input_size[0] || policy_.target_size[1] != model_cfg_.input_size[1])
    throw ValidationError("augment target_size must equal model input_size");
  model_ = std::make_unique<model::SslModel>(model_cfg_, derive_seed({train_.seed, 0x1A17u}));
  sampler_ = std::make_unique<cohort::PairSampler>(manifest_, sampler_config(train_));
  if (store && (store->config().rows_above != prep_.rows_above || store->config().rows_below != prep_.rows_below))
    throw ValidationError("shared scan store uses a different preprocessing");
  store_ = store ? std::move(store) : std::make_shared<data::ScanStore>(prep_);
  const auto pairs = static_cast<long>(sampler_->eligible_eye_count());
  const long b = train_.batch_size;
  // A trailing batch of one pair cannot be standardized, so it is dropped.
  steps_per_epoch_ = pairs / b + (pairs % b >= 2 ? 1 : 0);
  if (steps_per_epoch_ == 0) throw ValidationError("fewer than two eligible eyes for pair sampling");
}

std::size_t Trainer::batch_pairs(long b) const {
  const auto pairs = static_cast<long>(sampler_->eligible_eye_count());
  return static_cast<std::size_t>(std::min<long>(train_.batch_size, pairs - b * train_.batch_size));
}

StepResult Trainer::step() {
  if (finished()) throw ValidationError("training already finished");
  StepResult r;
  r.step = step_;
  r.epoch = static_cast<int>(step_ / steps_per_epoch_);
  r.batch = static_cast<int>(step_ % steps_per_epoch_);

  const augment::AugmentPolicy policy = policy_;
  data::Augmenter aug = [policy](const augment::Image& img, Rng& rng) {
    return policy.mode == augment::AugmentMode::ssl ? augment::ssl_augment(img, policy, rng)
                                                    : augment::supervised_augment(img, policy, rng);
  };
  auto pb = data::sample_pair_batch(manifest_, *sampler_, *store_, batch_pairs(r.batch),
                                    static_cast<std::size_t>(train_.batch_size), train_.seed,
                                    static_cast<std::uint64_t>(r.epoch), static_cast<std::uint64_t>(r.batch), aug,
                                    train_.threads);
  if (train_.force_zero_dv) pb.dv.setZero();

  model_->zero_grad();
  model::SslModel::ViewTrace t1, t2;
  const auto o1 = model_->forward(pb.x1, nn::Mode::train, t1);
  const auto o2 = model_->forward(pb.x2, nn::Mode::train, t2);

  MethodLoss ml = method_loss(train_.method, train_.loss, o1.z, o2.z, pb.dv);
  if (train_.method == Method::vicreg_timehead) {
    model::TimeHead::Trace th;
    const Vector pred = model_->time_head()->forward(o1.z, o2.z, th);
    const double tl = losses::time_head_loss(pred, pb.delta_signed);
    ml.parts.extra = tl;
    ml.parts.total += train_.time_head_weight * tl;
    const auto dz = model_->time_head()->backward(train_.time_head_weight * losses::time_head_grad(pred, pb.delta_signed), th);
    ml.dz1 += dz[0];
    ml.dz2 += dz[1];
  }
  if (!std::isfinite(ml.parts.total))
    throw NumericalError("divergence detected at step " + std::to_string(step_) + " (non-finite loss)");

  model_->backward(ml.dz1, t1);
  model_->backward(ml.dz2, t2);
  const long warmup = static_cast<long>(train_.warmup_epochs) * steps_per_epoch_;
  r.lr = optim::lr_schedule(step_, total_steps(), warmup, train_.base_lr);
  optim::adamw_step(model_->params(), opt_, r.lr, train_.weight_decay);
  r.loss = ml.parts;
  r.z_std = mean_std(o1.z);
  ++step_;
  return r;
}

checkpoint::Contents Trainer::snapshot() {
  checkpoint::Contents c;
  c.meta = {{"kind", "ssl"},
            {"config", config_snapshot(*this)},
            {"step", step_},
            {"steps_per_epoch", steps_per_epoch_},
            {"rng", {{"seed", train_.seed}, {"epoch", step_ / steps_per_epoch_}, {"batch", step_ % steps_per_epoch_}}},
            {"optimizer", {{"t", opt_.t}}}};
  const auto params = model_->params();
  for (const auto* p : params) c.tensors.push_back({"param/" + p->name, p->value});
  for (const auto& b : model_->buffers()) c.tensors.push_back({"buffer/" + b.name, *b.value});
  if (opt_.m.size() == params.size())
    for (std::size_t k = 0; k < params.size(); ++k) {
      c.tensors.push_back({"adam_m/" + params[k]->name, opt_.m[k]});
      c.tensors.push_back({"adam_v/" + params[k]->name, opt_.v[k]});
    }
  return c;
}

void load_weights(model::SslModel& m, const checkpoint::Contents& c) {
  for (auto* p : m.params()) {
    const Matrix& v = c.tensor("param/" + p->name);
    if (v.rows() != p->value.rows() || v.cols() != p->value.cols())
      throw ValidationError("incompatible checkpoint: " + p->name + " is " + shape_str(v) + ", model expects " +
                            shape_str(p->value));
    p->value = v;
  }
  for (auto& b : m.buffers()) {
    const Matrix& v = c.tensor("buffer/" + b.name);
    if (v.rows() != b.value->rows() || v.cols() != b.value->cols())
      throw ValidationError("incompatible checkpoint: buffer " + b.name);
    *b.value = v;
  }
}

void Trainer::restore(const checkpoint::Contents& c) {
  if (c.meta.at("config") != config_snapshot(*this))
    throw ValidationError("checkpoint configuration does not match the trainer");
  load_weights(*model_, c);
  const auto params = model_->params();
  opt_ = {};
  opt_.t = c.meta.at("optimizer").at("t").get<long>();
  if (c.has("adam_m/" + params.front()->name)) {
    for (const auto* p : params) {
      opt_.m.push_back(c.tensor("adam_m/" + p->name));
      opt_.v.push_back(c.tensor("adam_v/" + p->name));
    }
  }
  step_ = c.meta.at("step").get<long>();
}

LoadedModel load_model(const checkpoint::Contents& c) {
  LoadedModel out;
  const auto& cfg = c.meta.at("config");
  config::apply(cfg.at("train"), out.train);
  out.model_cfg = model::model_config_from_json(cfg.at("model"));
  config::apply(cfg.at("augment"), out.policy);
  config::apply(cfg.at("preprocess"), out.prep);
  out.model = std::make_unique<model::SslModel>(out.model_cfg, 0);
  load_weights(*out.model, c);
  out.step = c.meta.value("step", 0L);
  return out;
}

namespace {

PretrainResult run(Trainer& tr, const std::filesystem::path& out_dir, const PretrainHooks& hooks, bool append_log) {
  std::filesystem::create_directories(out_dir);
  PretrainResult res;
  res.checkpoint = out_dir / "checkpoint.bin";
  std::ofstream log(out_dir / "losses.jsonl", append_log ? std::ios::app : std::ios::trunc);
  if (!log) throw IoError("cannot write " + (out_dir / "losses.jsonl").string());

  const auto& cfg = tr.train_config();
  std::string last_good = checkpoint::serialize(tr.snapshot());
  try {
    while (!tr.finished()) {
      EpochLog e;
      e.epoch = static_cast<int>(tr.global_step() / tr.steps_per_epoch());
      LossBreakdown sum;
      bool has_extra = false;
      double extra = 0.0;
      long n = 0;
      do {
        const StepResult s = tr.step();
        if (hooks.on_step) hooks.on_step(s);
        sum.total += s.loss.total;
        sum.invariance += s.loss.invariance;
        sum.variance += s.loss.variance;
        sum.covariance += s.loss.covariance;
        if (s.loss.extra) {
          has_extra = true;
          extra += *s.loss.extra;
        }
        e.z_std += s.z_std;
        e.lr = s.lr;
        ++n;
      } while (tr.global_step() % tr.steps_per_epoch() != 0);
      const double k = static_cast<double>(n);
      e.mean = {sum.total / k, sum.invariance / k, sum.variance / k, sum.covariance / k, std::nullopt};
      if (has_extra) e.mean.extra = extra / k;
      e.z_std /= k;
      log << to_json(e).dump() << '\n';
      log.flush();
      if (hooks.on_epoch) hooks.on_epoch(e);
      res.epochs.push_back(e);
      last_good = checkpoint::serialize(tr.snapshot());
      if (cfg.checkpoint_every > 0 && (e.epoch + 1) % cfg.checkpoint_every == 0)
        checkpoint::write_bytes(res.checkpoint, last_good);
    }
  } catch (const NumericalError&) {
    checkpoint::write_bytes(res.checkpoint, last_good);
    throw;
  }
  checkpoint::write_bytes(res.checkpoint, last_good);
  return res;
}

}  // namespace

PretrainResult pretrain(const cohort::CohortManifest& manifest, const TrainConfig& train,
                        const model::ModelConfig& model, const augment::AugmentPolicy& policy,
                        const augment::PreprocessConfig& prep, const std::filesystem::path& out_dir,
                        const PretrainHooks& hooks, std::shared_ptr<data::ScanStore> store) {
  Trainer tr(manifest, train, model, policy, prep, std::move(store));
  return run(tr, out_dir, hooks, false);
}

PretrainResult resume(const cohort::CohortManifest& manifest, const std::filesystem::path& out_dir,
                      const PretrainHooks& hooks) {
  const auto c = checkpoint::load(out_dir / "checkpoint.bin");
  auto loaded = load_model(c);
  Trainer tr(manifest, loaded.train, loaded.model_cfg, loaded.policy, loaded.prep);
  tr.restore(c);
  return run(tr, out_dir, hooks, true);
}

// ---------------------------------------------------------------------------

EndToEndReport end_to_end_gradcheck(Method method, std::uint64_t seed, double step, double tol) {
  model::ModelConfig mc;
  mc.encoder = model::EncoderKind::mlp;
  mc.input_size = {4, 4};
  mc.mlp_hidden = 8;
  mc.representation_dim = 8;
  mc.projector_dims = {8, 8, 6};
  mc.time_head = method == Method::vicreg_timehead;
  mc.time_head_hidden = 5;
  model::SslModel m(mc, seed);

  Rng rng = make_rng({seed, 0xE2Eu});
  const int n = 8;
  nn::FeatureMap x1, x2;
  for (auto* x : {&x1, &x2}) {
    x->n = n;
    x->h = 4;
    x->w = 4;
    x->data = nn::RowMatrix::NullaryExpr(n * 16, 1, [&] { return uniform(rng, 0.0, 1.0); });
  }
  Vector dv(n), delta(n);
  for (int i = 0; i < n; ++i) {
    dv[i] = uniform(rng, 0.0, 1.0);
    delta[i] = uniform(rng, -1.0, 1.0);
  }
  losses::LossConfig lc;

  model::SslModel::ViewTrace t1, t2;
  model::TimeHead::Trace th;
  Matrix z1, z2;
  Vector pred;
  // Loss from the cached embeddings (and the time head output).
  auto loss_of = [&](const Matrix& a, const Matrix& b, const Vector& p) {
    double total = method_loss(method, lc, a, b, dv).parts.total;
    if (method == Method::vicreg_timehead) total += losses::time_head_loss(p, delta);
    return total;
  };
  auto forward = [&] {
    z1 = m.forward(x1, nn::Mode::train, t1).z;
    z2 = m.forward(x2, nn::Mode::train, t2).z;
    if (method == Method::vicreg_timehead) pred = m.time_head()->forward(z1, z2, th);
    return loss_of(z1, z2, pred);
  };
  auto loss_hinges = [&](const Matrix& a, const Matrix& b) {
    losses::LossInputs in;
    in.z1 = a;
    in.z2 = b;
    in.dv = dv;
    in.cfg = lc;
    std::vector<bool> s;
    if (method == Method::barlow_twins) return s;
    const auto id = method == Method::tinc ? losses::LossId::tinc : losses::LossId::invariance;
    s = losses::hinge_state(id, in);
    const auto v = losses::hinge_state(losses::LossId::variance, in);
    s.insert(s.end(), v.begin(), v.end());
    return s;
  };

  forward();
  m.zero_grad();
  MethodLoss ml = method_loss(method, lc, z1, z2, dv);
  if (method == Method::vicreg_timehead) {
    const auto dz = m.time_head()->backward(losses::time_head_grad(pred, delta), th);
    ml.dz1 += dz[0];
    ml.dz2 += dz[1];
  }
  m.backward(ml.dz1, t1);
  m.backward(ml.dz2, t2);

  EndToEndReport rep;
  rep.method = method;

  // Gradient wrt the projector output, with the time head (if any) in the loop.
  const Matrix z1_0 = z1, z2_0 = z2;
  for (int view = 0; view < 2; ++view) {
    Matrix a = z1_0, b = z2_0;
    Matrix& target = view == 0 ? a : b;
    const Matrix analytic = view == 0 ? ml.dz1 : ml.dz2;
    auto f = [&] {
      Vector p;
      if (method == Method::vicreg_timehead) {
        model::TimeHead::Trace tt;
        p = m.time_head()->forward(a, b, tt);
      }
      return loss_of(a, b, p);
    };
    auto hs = [&] {
      auto s = loss_hinges(a, b);
      if (method == Method::vicreg_timehead) {
        model::TimeHead::Trace tt;
        m.time_head()->forward(a, b, tt);
        for (Eigen::Index k = 0; k < tt.relu.active.size(); ++k) s.push_back(tt.relu.active.data()[k]);
      }
      return s;
    };
    const auto st = central_difference_check({target.data(), static_cast<std::size_t>(target.size())},
                                             {analytic.data(), static_cast<std::size_t>(analytic.size())}, f, hs, step);
    rep.embedding_rel_error = std::max(rep.embedding_rel_error, st.max_rel_error);
    rep.checked += st.checked;
    rep.excluded += st.excluded;
  }

  // Gradient wrt every weight through the full network.
  auto state = [&] {
    forward();
    auto s = model::relu_signature(t1);
    const auto s2 = model::relu_signature(t2);
    s.insert(s.end(), s2.begin(), s2.end());
    const auto h = loss_hinges(z1, z2);
    s.insert(s.end(), h.begin(), h.end());
    if (method == Method::vicreg_timehead)
      for (Eigen::Index k = 0; k < th.relu.active.size(); ++k) s.push_back(th.relu.active.data()[k]);
    return s;
  };
  for (auto* p : m.params()) {
    const Matrix analytic = p->grad;
    const auto st = central_difference_check({p->value.data(), static_cast<std::size_t>(p->value.size())},
                                             {analytic.data(), static_cast<std::size_t>(analytic.size())}, forward,
                                             state, step);
    rep.param_rel_error = std::max(rep.param_rel_error, st.max_rel_error);
    rep.checked += st.checked;
    rep.excluded += st.excluded;
  }
  rep.passed = rep.embedding_rel_error <= tol && rep.param_rel_error <= tol;
  return rep;
}

}  // namespace tinc::trainer
