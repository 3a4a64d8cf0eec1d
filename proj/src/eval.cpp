#include "tinc/eval.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include "tinc/optim.hpp"

namespace tinc::eval {

namespace {

void check_scored(std::span<const double> scores, std::span<const int> labels, const char* what) {
  if (scores.size() != labels.size())
    throw ValidationError(std::string(what) + ": " + std::to_string(scores.size()) + " scores but " +
                          std::to_string(labels.size()) + " labels");
  for (double s : scores)
    if (!std::isfinite(s)) throw ValidationError(std::string(what) + ": non-finite score");
}

// 1-based mid-ranks (ties share the mean of their positions).
std::vector<double> mid_ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = rank;
    i = j + 1;
  }
  return r;
}

double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

std::vector<int> labels_of(const std::vector<cohort::LabeledScan>& scans) {
  std::vector<int> out;
  out.reserve(scans.size());
  for (const auto& s : scans) out.push_back(s.label ? 1 : 0);
  return out;
}

std::vector<ScoredScan> scored(const std::vector<cohort::LabeledScan>& scans, const Vector& scores) {
  std::vector<ScoredScan> out;
  out.reserve(scans.size());
  for (std::size_t i = 0; i < scans.size(); ++i)
    out.push_back({scans[i].eye, scans[i].volume_id, scans[i].day, scores[static_cast<Eigen::Index>(i)], scans[i].label});
  return out;
}

double scan_auroc(const std::vector<cohort::LabeledScan>& scans, const Vector& scores) {
  const auto labels = labels_of(scans);
  return auroc({scores.data(), static_cast<std::size_t>(scores.size())}, labels);
}

// Weighted binary cross-entropy over sigmoid(logits); returns d loss / d logit.
Vector weighted_bce_grad(const Vector& logits, const std::vector<int>& y, const std::vector<std::size_t>& rows,
                         double pos_weight) {
  Vector g(logits.size());
  double wsum = 0.0;
  for (std::size_t i = 0; i < rows.size(); ++i) wsum += y[rows[i]] ? pos_weight : 1.0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const double w = y[rows[i]] ? pos_weight : 1.0;
    g[static_cast<Eigen::Index>(i)] = w * (sigmoid(logits[static_cast<Eigen::Index>(i)]) - y[rows[i]]) / wsum;
  }
  return g;
}

std::vector<std::size_t> shuffled(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

void require_two_classes(const std::vector<cohort::LabeledScan>& scans, const char* split) {
  bool pos = false, neg = false;
  for (const auto& s : scans) (s.label ? pos : neg) = true;
  if (!pos || !neg) throw ValidationError(std::string(split) + " split needs both converting and stable scans");
}

Vector probs(const Vector& logits) { return logits.unaryExpr([](double x) { return sigmoid(x); }); }

}  // namespace

double auroc(std::span<const double> scores, std::span<const int> labels) {
  check_scored(scores, labels, "auroc");
  const auto ranks = mid_ranks(scores);
  double pos = 0.0, neg = 0.0, rank_sum = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i]) {
      pos += 1.0;
      rank_sum += ranks[i];
    } else {
      neg += 1.0;
    }
  }
  if (pos == 0.0 || neg == 0.0) throw ValidationError("AUROC undefined: labels contain a single class");
  return (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
}

double prauc(std::span<const double> scores, std::span<const int> labels) {
  check_scored(scores, labels, "prauc");
  const double total_pos = static_cast<double>(std::count_if(labels.begin(), labels.end(), [](int l) { return l != 0; }));
  if (total_pos == 0.0) throw ValidationError("PRAUC undefined: no positive labels");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double tp = 0.0, fp = 0.0, ap = 0.0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    double group_pos = 0.0;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
      (labels[idx[j]] ? group_pos : fp) += 1.0;
      ++j;
    }
    tp += group_pos;
    if (group_pos > 0.0) ap += (group_pos / total_pos) * (tp / (tp + fp));
    i = j;
  }
  return ap;
}

double volume_score(std::span<const double> scan_scores) {
  if (scan_scores.empty()) throw ValidationError("volume_score of an empty volume");
  return *std::max_element(scan_scores.begin(), scan_scores.end());
}

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ValidationError("spearman: length mismatch");
  if (a.size() < 2) throw ValidationError("spearman: need at least two points");
  const auto ra = mid_ranks(a), rb = mid_ranks(b);
  const Eigen::Map<const Vector> x(ra.data(), static_cast<Eigen::Index>(ra.size()));
  const Eigen::Map<const Vector> y(rb.data(), static_cast<Eigen::Index>(rb.size()));
  const Vector xc = x.array() - x.mean(), yc = y.array() - y.mean();
  const double den = std::sqrt(xc.squaredNorm() * yc.squaredNorm());
  if (den == 0.0) throw ValidationError("spearman: constant input");
  return xc.dot(yc) / den;
}

CollapseReport collapse_diagnostics(const Matrix& z) {
  if (z.rows() < 2) throw ValidationError("collapse_diagnostics needs at least two rows");
  CollapseReport r;
  const Matrix c = z.rowwise() - z.colwise().mean();
  const Eigen::RowVectorXd sd = (c.colwise().squaredNorm() / static_cast<double>(z.rows() - 1)).array().sqrt();
  r.per_dim_std.assign(sd.data(), sd.data() + sd.size());
  r.mean_std = sd.mean();
  const Vector s = Eigen::JacobiSVD<Matrix>(c).singularValues();
  const double smax = s.size() ? s.maxCoeff() : 0.0;
  // Rounding in the column means leaves ~1e-16 residue for identical rows.
  if (smax <= 1e-12 * std::max(1.0, z.cwiseAbs().maxCoeff())) return r;
  double total = 0.0;
  for (Eigen::Index i = 0; i < s.size(); ++i)
    if (s[i] > 1e-12 * smax) total += s[i];
  double h = 0.0;
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    if (s[i] <= 1e-12 * smax) continue;
    const double p = s[i] / total;
    h -= p * std::log(p);
  }
  r.effective_rank = std::clamp(std::exp(h), 1.0, static_cast<double>(z.cols()));
  return r;
}

nlohmann::json to_json(const CollapseReport& r) {
  return {{"per_dim_std", r.per_dim_std}, {"mean_std", r.mean_std}, {"effective_rank", r.effective_rank}};
}

LevelMetrics score_metrics(const std::vector<ScoredScan>& scans) {
  std::vector<double> s;
  std::vector<int> l;
  std::map<std::string, std::pair<std::vector<double>, bool>> volumes;
  for (const auto& x : scans) {
    s.push_back(x.score);
    l.push_back(x.label ? 1 : 0);
    auto& v = volumes[x.volume_id];
    v.first.push_back(x.score);
    v.second = x.label;
  }
  LevelMetrics m;
  m.scan_auroc = auroc(s, l);
  m.scan_prauc = prauc(s, l);
  std::vector<double> vs;
  std::vector<int> vl;
  for (const auto& [id, v] : volumes) {
    vs.push_back(volume_score(v.first));
    vl.push_back(v.second ? 1 : 0);
  }
  m.volume_auroc = auroc(vs, vl);
  m.volume_prauc = prauc(vs, vl);
  return m;
}

// ---------------------------------------------------------------------------

void ProbeConfig::validate() const {
  if (epochs < 0) throw ValidationError("probe epochs must be >= 0");
  if (!(lr >= 0.0) || !(weight_decay >= 0.0)) throw ValidationError("probe lr and weight_decay must be >= 0");
  if (batch_size < 1) throw ValidationError("probe batch_size must be >= 1");
  if (!(positive_weight > 0.0)) throw ValidationError("positive_weight must be > 0");
}

ProbeConfig default_finetune_config() {
  ProbeConfig c;
  c.epochs = 30;
  c.lr = 1e-4;
  c.weight_decay = 1e-6;
  return c;
}

nlohmann::json to_json(const ClassifierResult& r) {
  return {{"scan_auroc", r.test.scan_auroc},
          {"scan_prauc", r.test.scan_prauc},
          {"volume_auroc", r.test.volume_auroc},
          {"volume_prauc", r.test.volume_prauc},
          {"best_epoch", r.best_epoch},
          {"val_auroc", r.val_auroc}};
}

ClassifierResult train_linear_probe(const FeatureSet& train, const FeatureSet& val, const FeatureSet& test,
                                    const ProbeConfig& cfg) {
  cfg.validate();
  require_two_classes(val.scans, "validation");
  if (train.x.rows() != static_cast<Eigen::Index>(train.scans.size()) || train.x.rows() == 0)
    throw ValidationError("probe: empty or inconsistent training set");
  const Eigen::Index r = train.x.cols();
  Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(r), scale = Eigen::RowVectorXd::Ones(r);
  if (cfg.standardize) {
    mean = train.x.colwise().mean();
    const Matrix c = train.x.rowwise() - mean;
    scale = (c.colwise().squaredNorm() / static_cast<double>(std::max<Eigen::Index>(1, train.x.rows() - 1))).array().sqrt();
    for (Eigen::Index j = 0; j < r; ++j)
      if (!(scale[j] > 1e-12)) scale[j] = 1.0;
  }
  auto prep = [&](const Matrix& x) -> Matrix { return (x.rowwise() - mean).array().rowwise() / scale.array(); };
  const Matrix xtr = prep(train.x), xva = prep(val.x);

  Rng init = make_rng({cfg.seed, 0x9B0Eu});
  nn::Linear head("probe", static_cast<int>(r), 1, init);
  optim::AdamWState opt;
  const auto ytr = labels_of(train.scans);

  ClassifierResult res;
  double best = -1.0;
  Matrix best_w = head.weight().value, best_b = head.bias().value;
  auto score = [&](const Matrix& x) -> Vector {
    nn::Linear::Trace t;
    return head.forward(x, t).col(0);
  };
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng = make_rng({cfg.seed, static_cast<std::uint64_t>(epoch), 0x9B0Fu});
    const auto order = shuffled(ytr.size(), rng);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(start),
                                    order.begin() + static_cast<std::ptrdiff_t>(stop));
      Matrix xb(static_cast<Eigen::Index>(rows.size()), r);
      for (std::size_t i = 0; i < rows.size(); ++i) xb.row(static_cast<Eigen::Index>(i)) = xtr.row(static_cast<Eigen::Index>(rows[i]));
      nn::Linear::Trace t;
      const Vector logits = head.forward(xb, t).col(0);
      model::zero_grad(head.params());
      head.backward(weighted_bce_grad(logits, ytr, rows, cfg.positive_weight), t);
      optim::adamw_step(head.params(), opt, cfg.lr, cfg.weight_decay);
    }
    const double v = scan_auroc(val.scans, probs(score(xva)));
    res.val_auroc.push_back(v);
    if (v > best) {
      best = v;
      res.best_epoch = epoch;
      best_w = head.weight().value;
      best_b = head.bias().value;
    }
  }
  head.weight().value = best_w;
  head.bias().value = best_b;
  res.train_scores = [&] {
    const Vector p = probs(score(xtr));
    return std::vector<double>(p.data(), p.data() + p.size());
  }();
  res.test_scores = scored(test.scans, probs(score(prep(test.x))));
  res.test = score_metrics(res.test_scores);
  return res;
}

SplitScans split_scans(const cohort::CohortManifest& m, const cohort::SplitAssignment& split, int window_days) {
  return {cohort::supervised_scans(m, split.train, window_days), cohort::supervised_scans(m, split.val, window_days),
          cohort::supervised_scans(m, split.test, window_days)};
}

std::vector<augment::Image> load_images(const std::vector<cohort::LabeledScan>& scans, data::ScanStore& store,
                                        std::array<Eigen::Index, 2> size, int threads) {
  std::vector<augment::Image> out(scans.size());
  data::parallel_for(scans.size(), threads, [&](std::size_t i) { out[i] = store.plain(scans[i].path, size); });
  return out;
}

namespace {

std::array<Eigen::Index, 2> input_size(const model::SslModel& m) {
  return {m.config().input_size[0], m.config().input_size[1]};
}

}  // namespace

ClassifierResult linear_probe(const model::SslModel& model, const SplitScans& scans, data::ScanStore& store,
                              const ProbeConfig& cfg, int threads) {
  const auto size = input_size(model);
  auto features = [&](const std::vector<cohort::LabeledScan>& s) {
    return FeatureSet{model.represent(load_images(s, store, size, threads)), s};
  };
  const FeatureSet tr = features(scans.train), va = features(scans.val);
  // Test images are encoded only after the head is fixed.
  return train_linear_probe(tr, va, features(scans.test), cfg);
}

ClassifierResult finetune(model::SslModel& model, const SplitScans& scans, data::ScanStore& store,
                          const ProbeConfig& cfg, const augment::AugmentPolicy& policy, int threads) {
  cfg.validate();
  require_two_classes(scans.val, "validation");
  if (scans.train.empty()) throw ValidationError("finetune: empty training set");
  const auto size = input_size(model);
  augment::AugmentPolicy sup = policy;
  sup.mode = augment::AugmentMode::supervised;
  sup.target_size = size;

  Rng init = make_rng({cfg.seed, 0xF17Eu});
  nn::Linear head("finetune", model.config().representation_dim, 1, init);
  std::vector<nn::Param*> params = model.encoder().params();
  for (auto* p : head.params()) params.push_back(p);
  optim::AdamWState opt;
  const auto ytr = labels_of(scans.train);
  const auto val_images = load_images(scans.val, store, size, threads);

  auto score = [&](const std::vector<augment::Image>& images) -> Vector {
    nn::Linear::Trace t;
    return probs(head.forward(model.represent(images), t).col(0));
  };
  auto values = [&] {
    std::vector<Matrix> v;
    for (auto* p : params) v.push_back(p->value);
    return v;
  };

  ClassifierResult res;
  double best = -1.0;
  std::vector<Matrix> best_values = values();
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng = make_rng({cfg.seed, static_cast<std::uint64_t>(epoch), 0xF180u});
    const auto order = shuffled(ytr.size(), rng);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(start),
                                    order.begin() + static_cast<std::ptrdiff_t>(stop));
      std::vector<augment::Image> batch(rows.size());
      data::parallel_for(rows.size(), threads, [&](std::size_t i) {
        const auto img = store.get(scans.train[rows[i]].path);
        if (cfg.augment) {
          Rng arng = make_rng({cfg.seed, static_cast<std::uint64_t>(epoch), start + i, 0xF181u});
          batch[i] = augment::supervised_augment(img, sup, arng);
        } else {
          batch[i] = augment::resize_bilinear(img, size[0], size[1]);
        }
      });
      model::Encoder::Trace et;
      nn::Linear::Trace ht;
      const Matrix y = model.encoder().forward(nn::images_to_features(batch), et);
      const Vector logits = head.forward(y, ht).col(0);
      model::zero_grad(params);
      const Matrix dy = head.backward(weighted_bce_grad(logits, ytr, rows, cfg.positive_weight), ht);
      model.encoder().backward(dy, et);
      optim::adamw_step(params, opt, cfg.lr, cfg.weight_decay);
    }
    const double v = scan_auroc(scans.val, score(val_images));
    res.val_auroc.push_back(v);
    if (v > best) {
      best = v;
      res.best_epoch = epoch;
      best_values = values();
    }
  }
  for (std::size_t k = 0; k < params.size(); ++k) params[k]->value = best_values[k];
  {
    const Vector p = score(load_images(scans.train, store, size, threads));
    res.train_scores.assign(p.data(), p.data() + p.size());
  }
  res.test_scores = scored(scans.test, score(load_images(scans.test, store, size, threads)));
  res.test = score_metrics(res.test_scores);
  return res;
}

cohort::CohortManifest subset(const cohort::CohortManifest& m, const std::vector<std::string>& eyes) {
  const std::set<std::string> wanted(eyes.begin(), eyes.end());
  cohort::CohortManifest out;
  out.root = m.root;
  for (const auto& p : m.patients) {
    cohort::PatientRecord q{p.id, {}};
    for (const auto& e : p.eyes)
      if (wanted.count(cohort::eye_id(p, e))) q.eyes.push_back(e);
    if (!q.eyes.empty()) out.patients.push_back(std::move(q));
  }
  return out;
}

double dv_probe(model::SslModel& model, const cohort::CohortManifest& m, const std::vector<std::string>& eyes,
                data::ScanStore& store, std::size_t n_pairs, std::uint64_t seed,
                const cohort::SamplerConfig& sampler_cfg, int threads) {
  if (n_pairs < 10) throw ValidationError("dv_probe needs at least 10 pairs (got " + std::to_string(n_pairs) + ")");
  const auto sub = subset(m, eyes);
  const cohort::PairSampler sampler(sub, sampler_cfg);
  const auto specs = sampler.sample(n_pairs, n_pairs, seed, 0, 0);
  const auto size = input_size(model);
  std::vector<augment::Image> a(specs.size()), b(specs.size());
  data::parallel_for(2 * specs.size(), threads, [&](std::size_t k) {
    const auto& s = specs[k / 2];
    if (k % 2 == 0) a[k / 2] = store.plain(data::scan_path(sub, s.first), size);
    else b[k / 2] = store.plain(data::scan_path(sub, s.second), size);
  });
  const Matrix za = model.embed(a), zb = model.embed(b);
  std::vector<double> dist(specs.size()), dv(specs.size());
  for (std::size_t i = 0; i < specs.size(); ++i) {
    dist[i] = (za.row(static_cast<Eigen::Index>(i)) - zb.row(static_cast<Eigen::Index>(i))).squaredNorm();
    dv[i] = specs[i].dv;
  }
  return spearman(dist, dv);
}

}  // namespace tinc::eval
