#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "oracles.hpp"
#include "tinc/synth.hpp"
#include "tinc/trainer.hpp"

using namespace tinc;
using namespace tinc::trainer;
namespace fs = std::filesystem;

namespace {

const cohort::CohortManifest& tiny_cohort() {
  static const cohort::CohortManifest m = [] {
    synth::SynthConfig c;
    c.n_patients = 8;
    c.visits_per_eye = 8;
    c.scans_per_visit = 2;
    c.image_size = {48, 48};
    c.converter_fraction = 0.25;
    const auto dir = fs::temp_directory_path() / "tinc_trainer_cohort";
    fs::remove_all(dir);
    return synth::generate_cohort(c, dir).manifest;
  }();
  return m;
}

model::ModelConfig tiny_model() {
  model::ModelConfig m;
  m.encoder = model::EncoderKind::mlp;
  m.mlp_hidden = 16;
  m.representation_dim = 8;
  m.projector_dims = {16, 16, 8};
  m.time_head_hidden = 8;
  m.input_size = {16, 16};
  return m;
}

augment::AugmentPolicy tiny_policy() {
  augment::AugmentPolicy p;
  p.target_size = {16, 16};
  return p;
}

TrainConfig tiny_train(Method method) {
  TrainConfig t;
  t.method = method;
  t.batch_size = 4;
  t.epochs = 3;
  t.warmup_epochs = 1;
  t.base_lr = 1e-3;
  t.seed = 5;
  return t;
}

bool same_params(model::SslModel& a, model::SslModel& b) {
  const auto pa = a.params(), pb = b.params();
  if (pa.size() != pb.size()) return false;
  for (std::size_t k = 0; k < pa.size(); ++k)
    if (pa[k]->value != pb[k]->value) return false;
  return true;
}

std::vector<augment::Image> random_images(int n, int h, int w, std::uint64_t seed) {
  Rng rng = make_rng({seed});
  std::vector<augment::Image> out(static_cast<std::size_t>(n));
  for (auto& img : out) {
    img.pixels.resize(h, w);
    for (Eigen::Index k = 0; k < img.pixels.size(); ++k) img.pixels.data()[k] = uniform(rng, 0.0, 1.0);
  }
  return out;
}

}  // namespace

TEST_CASE("learning rate schedule") {
  using optim::lr_schedule;
  CHECK(lr_schedule(10, 100, 10, 0.5) == 0.5);
  CHECK(std::abs(lr_schedule(100, 100, 10, 0.5)) <= 1e-15);
  CHECK(lr_schedule(55, 100, 10, 0.5) == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(lr_schedule(0, 100, 10, 0.5) == 0.0);
  CHECK(lr_schedule(5, 100, 10, 0.5) == doctest::Approx(0.25).epsilon(1e-15));

  // Continuous at the junction, non-increasing afterwards.
  const long total = 1000, warmup = 100;
  CHECK(std::abs(lr_schedule(warmup - 1, total, warmup, 1.0) - lr_schedule(warmup, total, warmup, 1.0)) <= 0.011);
  for (long s = warmup; s < total; ++s)
    CHECK(lr_schedule(s + 1, total, warmup, 1.0) <= lr_schedule(s, total, warmup, 1.0));
  for (long s = 0; s < warmup; ++s) CHECK(lr_schedule(s + 1, total, warmup, 1.0) > lr_schedule(s, total, warmup, 1.0));
}

TEST_CASE("adamw update") {
  nn::Param p{"p", Matrix::Constant(2, 2, 1.5), Matrix::Zero(2, 2)};
  optim::AdamWState st;
  optim::adamw_step({&p}, st, 0.1, 0.0);
  CHECK(p.value == Matrix::Constant(2, 2, 1.5));

  optim::AdamWState st2;
  optim::adamw_step({&p}, st2, 0.1, 0.01);
  CHECK(p.value(0, 0) == doctest::Approx(1.5 * (1.0 - 0.1 * 0.01)).epsilon(1e-15));

  // Constant gradient over three steps against the moment recursion.
  nn::Param q{"q", Matrix::Constant(1, 1, 0.8), Matrix::Constant(1, 1, 0.3)};
  optim::AdamWState s3;
  const double lr = 0.05, wd = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8, g = 0.3;
  double x = 0.8, m = 0.0, v = 0.0;
  for (int t = 1; t <= 3; ++t) {
    optim::adamw_step({&q}, s3, lr, wd);
    x *= 1.0 - lr * wd;
    m = b1 * m + (1.0 - b1) * g;
    v = b2 * v + (1.0 - b2) * g * g;
    const double mh = m / (1.0 - std::pow(b1, t)), vh = v / (1.0 - std::pow(b2, t));
    x -= lr * mh / (std::sqrt(vh) + eps);
    CHECK(std::abs(q.value(0, 0) - x) <= 1e-12);
  }
  CHECK(s3.t == 3);

  nn::Param bad{"bad", Matrix::Zero(1, 1), Matrix::Constant(1, 1, std::nan(""))};
  optim::AdamWState sb;
  CHECK_THROWS_WITH_AS(optim::adamw_step({&bad}, sb, 0.1, 0.0), doctest::Contains("divergence detected at step 1"),
                       NumericalError);
}

TEST_CASE("forward shapes and determinism") {
  for (auto enc : {model::EncoderKind::mlp, model::EncoderKind::small_cnn}) {
    auto cfg = tiny_model();
    cfg.encoder = enc;
    cfg.cnn_channels = {4, 8};
    model::SslModel m(cfg, 3);
    auto imgs = random_images(5, 16, 16, 1);
    imgs[3] = imgs[1];
    model::SslModel::ViewTrace tr;
    const auto out = m.forward(imgs, nn::Mode::train, tr);
    CHECK(out.y.rows() == 5);
    CHECK(out.y.cols() == 8);
    CHECK(out.z.rows() == 5);
    CHECK(out.z.cols() == 8);
    CHECK(out.y.row(1) == out.y.row(3));
    CHECK(out.z.row(1) == out.z.row(3));

    const Matrix e1 = m.embed(imgs), e2 = m.embed(imgs);
    CHECK(e1 == e2);
    CHECK(m.represent(imgs) == out.y);

    model::SslModel::ViewTrace t1;
    CHECK_THROWS_AS(m.forward(std::vector<augment::Image>{imgs[0]}, nn::Mode::train, t1), ValidationError);
    CHECK_NOTHROW(m.embed({imgs[0]}));
  }
}

TEST_CASE("config validation") {
  TrainConfig t;
  CHECK_NOTHROW(t.validate());
  t.batch_size = 1;
  CHECK_THROWS_AS(t.validate(), ValidationError);
  t = {};
  t.warmup_epochs = t.epochs;
  CHECK_THROWS_AS(t.validate(), ValidationError);
  CHECK(method_from_string("barlow_twins") == Method::barlow_twins);
  CHECK_THROWS_WITH_AS(method_from_string("simclr"), doctest::Contains("valid methods"), ValidationError);
  auto m = tiny_model();
  m.encoder = model::EncoderKind::small_cnn;
  m.cnn_channels = {4, 6};
  CHECK_THROWS_AS(m.validate(), ValidationError);
}

TEST_CASE("tinc loss never exceeds vicreg on the same batch") {
  losses::LossConfig cfg;
  for (std::uint64_t s = 0; s < 200; ++s) {
    Rng rng = make_rng({s, 99});
    Matrix z1(16, 6), z2(16, 6);
    for (Eigen::Index k = 0; k < z1.size(); ++k) {
      z1.data()[k] = uniform(rng, -1, 1);
      z2.data()[k] = z1.data()[k] + uniform(rng, -0.3, 0.3);
    }
    Vector dv(16);
    for (int i = 0; i < 16; ++i) dv[i] = uniform(rng, 90.0 / 540.0, 1.0);
    const auto t = method_loss(Method::tinc, cfg, z1, z2, dv);
    const auto v = method_loss(Method::vicreg, cfg, z1, z2, dv);
    CHECK(t.parts.invariance <= v.parts.invariance);
    CHECK(t.parts.total <= v.parts.total);
    CHECK(t.parts.variance == v.parts.variance);
    CHECK(t.parts.covariance == v.parts.covariance);
    CHECK(t.parts.invariance == doctest::Approx(oracle::tinc(z1, z2, dv)).epsilon(1e-12));
  }
}

TEST_CASE("epoch length and trailing batch") {
  const auto& m = tiny_cohort();
  Trainer tr(m, tiny_train(Method::vicreg), tiny_model(), tiny_policy());
  CHECK(tr.sampler().eligible_eye_count() == 8);
  CHECK(tr.steps_per_epoch() == 2);
  CHECK(tr.total_steps() == 6);
  auto t = tiny_train(Method::vicreg);
  t.batch_size = 7;  // 8 = 7 + 1: the single leftover pair is dropped
  Trainer tr7(m, t, tiny_model(), tiny_policy());
  CHECK(tr7.steps_per_epoch() == 1);
  t.batch_size = 3;  // 8 = 3 + 3 + 2
  Trainer tr3(m, t, tiny_model(), tiny_policy());
  CHECK(tr3.steps_per_epoch() == 3);
  CHECK(tr3.batch_pairs(2) == 2);

  auto p = tiny_policy();
  p.target_size = {32, 32};
  CHECK_THROWS_AS(Trainer(m, tiny_train(Method::vicreg), tiny_model(), p), ValidationError);
}

TEST_CASE("fixed seed gives identical epoch-0 losses") {
  const auto& m = tiny_cohort();
  for (auto method : {Method::vicreg, Method::tinc, Method::barlow_twins, Method::vicreg_timehead}) {
    CAPTURE(to_string(method));
    Trainer a(m, tiny_train(method), tiny_model(), tiny_policy());
    Trainer b(m, tiny_train(method), tiny_model(), tiny_policy());
    for (int k = 0; k < 2; ++k) {
      const auto sa = a.step(), sb = b.step();
      CHECK(sa.loss.total == sb.loss.total);
      CHECK(std::isfinite(sa.loss.total));
    }
    CHECK(same_params(a.model(), b.model()));
    if (method == Method::vicreg_timehead) {
      CHECK(a.model().time_head() != nullptr);
    }
    auto other = tiny_train(method);
    other.seed = 6;
    Trainer c(m, other, tiny_model(), tiny_policy());
    CHECK(c.step().loss.total != Trainer(m, tiny_train(method), tiny_model(), tiny_policy()).step().loss.total);
  }
}

TEST_CASE("tinc with zero gaps follows vicreg step for step") {
  const auto& m = tiny_cohort();
  auto tv = tiny_train(Method::vicreg);
  auto tt = tiny_train(Method::tinc);
  tt.force_zero_dv = true;
  Trainer a(m, tv, tiny_model(), tiny_policy());
  Trainer b(m, tt, tiny_model(), tiny_policy());
  while (!a.finished()) {
    const auto sa = a.step(), sb = b.step();
    CHECK(sb.loss.total == doctest::Approx(sa.loss.total).epsilon(1e-12));
    CHECK(sb.loss.invariance == doctest::Approx(sa.loss.invariance).epsilon(1e-12));
  }
  CHECK(b.finished());
}

TEST_CASE("checkpoint round trip resumes bit-exactly") {
  const auto& m = tiny_cohort();
  for (auto method : {Method::tinc, Method::vicreg_timehead}) {
    CAPTURE(to_string(method));
    Trainer straight(m, tiny_train(method), tiny_model(), tiny_policy());
    straight.step();
    straight.step();
    const auto expected = straight.step();

    Trainer first(m, tiny_train(method), tiny_model(), tiny_policy());
    first.step();
    first.step();
    const std::string bytes = checkpoint::serialize(first.snapshot());
    CHECK(bytes.substr(0, 8) == "TINCCKPT");

    const auto contents = checkpoint::deserialize(bytes);
    auto loaded = load_model(contents);
    Trainer second(m, loaded.train, loaded.model_cfg, loaded.policy, loaded.prep);
    second.restore(contents);
    CHECK(second.global_step() == 2);
    const auto got = second.step();
    CHECK(got.loss.total == expected.loss.total);
    CHECK(got.lr == expected.lr);
    CHECK(same_params(second.model(), straight.model()));
  }
}

TEST_CASE("checkpoint container errors") {
  const auto& m = tiny_cohort();
  Trainer tr(m, tiny_train(Method::vicreg), tiny_model(), tiny_policy());
  std::string bytes = checkpoint::serialize(tr.snapshot());
  CHECK_THROWS_AS(checkpoint::deserialize(bytes.substr(0, bytes.size() - 3)), std::exception);
  std::string bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(checkpoint::deserialize(bad), std::exception);

  // A trainer with a different configuration refuses the snapshot.
  auto other = tiny_train(Method::vicreg);
  other.base_lr = 5e-3;
  Trainer tr2(m, other, tiny_model(), tiny_policy());
  CHECK_THROWS_AS(tr2.restore(checkpoint::deserialize(bytes)), ValidationError);

  // Shape mismatch names the tensor.
  auto wide = tiny_model();
  wide.projector_dims = {16, 16, 12};
  model::SslModel wm(wide, 0);
  CHECK_THROWS_WITH_AS(load_weights(wm, checkpoint::deserialize(bytes)), doctest::Contains("incompatible checkpoint"),
                       ValidationError);
}

TEST_CASE("pretrain writes the loss log and checkpoint; resume continues it") {
  const auto& m = tiny_cohort();
  const auto dir = fs::temp_directory_path() / "tinc_trainer_run";
  fs::remove_all(dir);
  auto t = tiny_train(Method::tinc);
  t.checkpoint_every = 1;
  const auto res = pretrain(m, t, tiny_model(), tiny_policy(), {}, dir);
  CHECK(res.epochs.size() == 3);
  CHECK(fs::exists(res.checkpoint));
  std::ifstream in(dir / "losses.jsonl");
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    for (const char* key : {"epoch", "invariance", "variance", "covariance", "extra", "total", "lr"})
      CHECK(j.contains(key));
    CHECK(j.at("epoch") == lines);
    ++lines;
  }
  CHECK(lines == 3);
  const auto c = checkpoint::load(res.checkpoint);
  CHECK(c.meta.at("step") == 6);
  // Nothing left to do after the final epoch.
  CHECK(resume(m, dir).epochs.empty());
  fs::remove_all(dir);
}

TEST_CASE("end-to-end gradient check on a tiny model") {
  for (auto method : {Method::vicreg, Method::tinc, Method::barlow_twins, Method::vicreg_timehead})
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      CAPTURE(to_string(method));
      CAPTURE(seed);
      const auto r = end_to_end_gradcheck(method, seed);
      CHECK(r.passed);
      CHECK(r.embedding_rel_error <= 1e-4);
      CHECK(r.param_rel_error <= 1e-4);
      CHECK(r.checked > 0);
    }
}
