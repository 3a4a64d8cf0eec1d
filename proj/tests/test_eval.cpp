#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "oracles.hpp"
#include "tinc/eval.hpp"
#include "tinc/synth.hpp"

using namespace tinc;
using namespace tinc::eval;
namespace fs = std::filesystem;

namespace {

struct Instance {
  std::vector<double> s;
  std::vector<int> y;
};

/// Random scores on a coarse grid (so ties are common) with both classes present.
Instance random_instance(Rng& rng) {
  Instance in;
  const std::size_t n = 2 + uniform_index(rng, 49);
  const int levels = 2 + static_cast<int>(uniform_index(rng, 12));
  for (std::size_t i = 0; i < n; ++i) {
    in.s.push_back(static_cast<double>(uniform_index(rng, static_cast<std::size_t>(levels))) / levels);
    in.y.push_back(uniform(rng, 0, 1) < 0.3 ? 1 : 0);
  }
  in.y[0] = 1;
  in.y[1] = 0;
  return in;
}

struct Fixture {
  cohort::CohortManifest manifest;
  SplitScans scans;
  std::vector<std::string> train_eyes;
};

const Fixture& small_cohort() {
  static const Fixture f = [] {
    synth::SynthConfig c;
    c.n_patients = 20;
    c.visits_per_eye = 10;
    c.scans_per_visit = 2;
    c.image_size = {48, 48};
    c.converter_fraction = 0.5;
    c.seed = 3;
    const auto dir = fs::temp_directory_path() / "tinc_eval_cohort";
    fs::remove_all(dir);
    Fixture out;
    out.manifest = synth::generate_cohort(c, dir).manifest;
    const auto split = cohort::split_patients(out.manifest, {}, 1);
    out.scans = split_scans(out.manifest, split);
    out.train_eyes = split.train;
    return out;
  }();
  return f;
}

model::ModelConfig tiny_model() {
  model::ModelConfig m;
  m.encoder = model::EncoderKind::mlp;
  m.mlp_hidden = 16;
  m.representation_dim = 8;
  m.projector_dims = {16, 16, 8};
  m.input_size = {16, 16};
  return m;
}

}  // namespace

TEST_CASE("auroc examples") {
  CHECK(auroc(std::vector<double>{0.9, 0.1}, std::vector<int>{1, 0}) == 1.0);
  CHECK(auroc(std::vector<double>{0.1, 0.9}, std::vector<int>{1, 0}) == 0.0);
  CHECK(auroc(std::vector<double>(6, 0.4), std::vector<int>{1, 0, 1, 0, 0, 0}) == 0.5);
  CHECK_THROWS_WITH_AS(auroc(std::vector<double>{0.2, 0.3}, std::vector<int>{1, 1}),
                       doctest::Contains("AUROC undefined"), ValidationError);
  CHECK_THROWS_AS(auroc(std::vector<double>{0.2}, std::vector<int>{1, 0}), ValidationError);
}

TEST_CASE("prauc examples") {
  CHECK(prauc(std::vector<double>{0.9, 0.8, 0.2, 0.1}, std::vector<int>{1, 1, 0, 0}) == 1.0);
  CHECK(prauc(std::vector<double>(5, 0.3), std::vector<int>{1, 0, 1, 0, 0}) == doctest::Approx(0.4).epsilon(1e-15));
  // Ranking + - + : AP = (1/1 + 2/3) / 2.
  CHECK(prauc(std::vector<double>{0.9, 0.5, 0.4}, std::vector<int>{1, 0, 1}) == doctest::Approx(5.0 / 6.0).epsilon(1e-15));
  CHECK_THROWS_AS(prauc(std::vector<double>{0.2, 0.3}, std::vector<int>{0, 0}), ValidationError);
}

TEST_CASE("metrics match brute-force oracles on random instances") {
  Rng rng = make_rng({2024});
  for (int k = 0; k < 1000; ++k) {
    const auto in = random_instance(rng);
    CAPTURE(k);
    CHECK(auroc(in.s, in.y) == oracle::auroc(in.s, in.y));
    CHECK(std::abs(prauc(in.s, in.y) - oracle::prauc(in.s, in.y)) <= 1e-12);
  }
}

TEST_CASE("auroc is invariant under monotone transforms") {
  Rng rng = make_rng({7});
  for (int k = 0; k < 200; ++k) {
    const auto in = random_instance(rng);
    std::vector<double> t;
    for (double v : in.s) t.push_back(std::exp(3.0 * v) - 10.0);
    CHECK(auroc(t, in.y) == auroc(in.s, in.y));
    CHECK(prauc(t, in.y) == doctest::Approx(prauc(in.s, in.y)).epsilon(1e-12));
  }
}

TEST_CASE("volume score is the max") {
  std::vector<double> v{0.2, 0.9, 0.4};
  CHECK(volume_score(v) == 0.9);
  std::reverse(v.begin(), v.end());
  CHECK(volume_score(v) == 0.9);
  CHECK(volume_score(std::vector<double>{0.37}) == 0.37);
  CHECK_THROWS_AS(volume_score(std::vector<double>{}), ValidationError);
}

TEST_CASE("scan and volume level metrics") {
  std::vector<ScoredScan> s{
      {"e1", "v1", 0, 0.9, true},  {"e1", "v1", 0, 0.1, true},  {"e2", "v2", 0, 0.5, false},
      {"e2", "v2", 0, 0.3, false}, {"e3", "v3", 0, 0.2, false}, {"e3", "v3", 0, 0.2, false},
  };
  const auto m = score_metrics(s);
  std::vector<double> scores;
  std::vector<int> labels;
  for (const auto& x : s) {
    scores.push_back(x.score);
    labels.push_back(x.label);
  }
  CHECK(m.scan_auroc == oracle::auroc(scores, labels));
  CHECK(m.scan_prauc == doctest::Approx(oracle::prauc(scores, labels)).epsilon(1e-12));
  // Volumes: v1 0.9 (+), v2 0.5, v3 0.2.
  CHECK(m.volume_auroc == 1.0);
  CHECK(m.volume_prauc == 1.0);
}

TEST_CASE("spearman") {
  const std::vector<double> a{1, 2, 3, 4, 5};
  CHECK(spearman(a, a) == doctest::Approx(1.0).epsilon(1e-15));
  const std::vector<double> sq{1, 4, 9, 16, 25};
  CHECK(spearman(a, sq) == doctest::Approx(1.0).epsilon(1e-15));
  const std::vector<double> rev{5, 4, 3, 2, 1};
  CHECK(spearman(a, rev) == doctest::Approx(-1.0).epsilon(1e-15));
  // Mid-ranks: b ranks (1.5, 1.5, 3, 4, 5).
  const std::vector<double> b{1, 1, 2, 3, 4};
  const std::vector<double> ra{1, 2, 3, 4, 5}, rb{1.5, 1.5, 3, 4, 5};
  double ma = 3, mb = 3, sab = 0, saa = 0, sbb = 0;
  for (int i = 0; i < 5; ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  CHECK(spearman(a, b) == doctest::Approx(sab / std::sqrt(saa * sbb)).epsilon(1e-14));
  CHECK_THROWS_AS(spearman(a, std::vector<double>(5, 1.0)), ValidationError);
}

TEST_CASE("collapse diagnostics") {
  const Matrix same = Matrix::Constant(10, 6, 0.3);
  const auto c = collapse_diagnostics(same);
  CHECK(c.mean_std == 0.0);
  CHECK(c.effective_rank == 1.0);

  const int d = 5;
  Matrix z(2 * d, d);
  z << Matrix::Identity(d, d), -Matrix::Identity(d, d);
  const auto o = collapse_diagnostics(z);
  CHECK(o.effective_rank == doctest::Approx(d).epsilon(1e-9));
  CHECK(o.per_dim_std.size() == d);

  Rng rng = make_rng({4});
  Matrix r(40, 8);
  for (Eigen::Index k = 0; k < r.size(); ++k) r.data()[k] = uniform(rng, -1, 1) * (1 + k % 8);
  const auto base = collapse_diagnostics(r);
  CHECK(base.effective_rank >= 1.0);
  CHECK(base.effective_rank <= 8.0);
  CHECK(collapse_diagnostics(2.0 * r).effective_rank == doctest::Approx(base.effective_rank).epsilon(1e-12));
  CHECK(collapse_diagnostics(2.0 * r).mean_std == doctest::Approx(2.0 * base.mean_std).epsilon(1e-12));
  Matrix g(8, 8);
  for (Eigen::Index k = 0; k < g.size(); ++k) g.data()[k] = uniform(rng, -1, 1);
  const Matrix q = Eigen::HouseholderQR<Matrix>(g).householderQ();
  CHECK(collapse_diagnostics(r * q).effective_rank == doctest::Approx(base.effective_rank).epsilon(1e-9));
  for (double s : base.per_dim_std) CHECK(s >= 0.0);
  CHECK_THROWS_AS(collapse_diagnostics(Matrix::Zero(1, 4)), ValidationError);
}

TEST_CASE("probe on oracle features separates perfectly") {
  const auto& f = small_cohort();
  auto oracle_features = [](const std::vector<cohort::LabeledScan>& s, std::uint64_t seed) {
    Rng rng = make_rng({seed});
    FeatureSet fs{Matrix(static_cast<Eigen::Index>(s.size()), 4), s};
    for (std::size_t i = 0; i < s.size(); ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      fs.x(r, 0) = s[i].label ? 1.0 : 0.0;
      for (int j = 1; j < 4; ++j) fs.x(r, j) = uniform(rng, -1, 1);
    }
    return fs;
  };
  ProbeConfig cfg;
  cfg.lr = 0.1;
  const auto res = train_linear_probe(oracle_features(f.scans.train, 1), oracle_features(f.scans.val, 2),
                                      oracle_features(f.scans.test, 3), cfg);
  CHECK(res.test.scan_auroc == 1.0);
  CHECK(res.test.volume_auroc == 1.0);
  CHECK(res.val_auroc.size() == 10);
  CHECK(res.best_epoch >= 0);
}

TEST_CASE("probe training does not depend on the test split") {
  const auto& f = small_cohort();
  Rng rng = make_rng({8});
  auto random_features = [&](const std::vector<cohort::LabeledScan>& s) {
    FeatureSet fs{Matrix(static_cast<Eigen::Index>(s.size()), 6), s};
    for (Eigen::Index k = 0; k < fs.x.size(); ++k) fs.x.data()[k] = uniform(rng, -1, 1);
    return fs;
  };
  const auto tr = random_features(f.scans.train), va = random_features(f.scans.val);
  const auto te1 = random_features(f.scans.test);
  auto te2 = random_features(f.scans.val);  // a different "test" split altogether
  for (auto& s : te2.scans) s.label = !s.label;
  const auto a = train_linear_probe(tr, va, te1, {});
  const auto b = train_linear_probe(tr, va, te2, {});
  CHECK(a.train_scores == b.train_scores);
  CHECK(a.val_auroc == b.val_auroc);
  CHECK(a.best_epoch == b.best_epoch);
}

TEST_CASE("fine-tuning with zero learning rate keeps the initialization") {
  const auto& f = small_cohort();
  data::ScanStore store;
  model::SslModel m(tiny_model(), 11);
  std::vector<Matrix> before;
  for (auto* p : m.params()) before.push_back(p->value);

  ProbeConfig cfg = default_finetune_config();
  cfg.epochs = 0;
  const auto init = finetune(m, f.scans, store, cfg, {});
  cfg.epochs = 3;
  cfg.lr = 0.0;
  cfg.weight_decay = 0.0;
  const auto still = finetune(m, f.scans, store, cfg, {});
  REQUIRE(init.test_scores.size() == still.test_scores.size());
  for (std::size_t i = 0; i < init.test_scores.size(); ++i) CHECK(init.test_scores[i].score == still.test_scores[i].score);
  CHECK(init.test.scan_auroc == still.test.scan_auroc);
  const auto after = m.params();
  for (std::size_t k = 0; k < before.size(); ++k) CHECK(after[k]->value == before[k]);
}

TEST_CASE("linear probe on a frozen encoder is deterministic") {
  const auto& f = small_cohort();
  data::ScanStore store;
  const model::SslModel m(tiny_model(), 2);
  ProbeConfig cfg;
  cfg.epochs = 3;
  const auto a = linear_probe(m, f.scans, store, cfg);
  const auto b = linear_probe(m, f.scans, store, cfg);
  CHECK(a.test.scan_auroc == b.test.scan_auroc);
  CHECK(a.test.scan_prauc == b.test.scan_prauc);
  CHECK(a.test.scan_auroc >= 0.0);
  CHECK(a.test.scan_auroc <= 1.0);
}

TEST_CASE("dv probe") {
  const auto& f = small_cohort();
  data::ScanStore store;
  model::SslModel m(tiny_model(), 5);
  const double rho = dv_probe(m, f.manifest, f.train_eyes, store, 500, 17);
  CHECK(std::abs(rho) <= 0.3);
  CHECK(dv_probe(m, f.manifest, f.train_eyes, store, 500, 17) == rho);
  CHECK_THROWS_WITH_AS(dv_probe(m, f.manifest, f.train_eyes, store, 9, 17), doctest::Contains("at least 10 pairs"),
                       ValidationError);

  // Distances equal to the gaps give a perfect rank correlation.
  std::vector<double> dv{0.2, 0.5, 0.3, 0.9, 0.7};
  CHECK(spearman(dv, dv) == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("subset keeps only the listed eyes") {
  const auto& f = small_cohort();
  const auto sub = subset(f.manifest, f.train_eyes);
  std::size_t eyes = 0;
  for (const auto& p : sub.patients) eyes += p.eyes.size();
  CHECK(eyes == f.train_eyes.size());
  CHECK_NOTHROW(sub.validate());
}
