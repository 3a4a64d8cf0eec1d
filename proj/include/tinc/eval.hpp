#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tinc/augment.hpp"
#include "tinc/cohort.hpp"
#include "tinc/dataset.hpp"
#include "tinc/model.hpp"

namespace tinc::eval {

// ---------------------------------------------------------------------------
// Metrics

/// P(score+ > score-) + 0.5 P(tie), from mid-ranks. Throws "AUROC undefined"
/// when only one class is present.
double auroc(std::span<const double> scores, std::span<const int> labels);

/// Average precision. Equal scores form one group whose precision is taken
/// after the whole group is admitted.
double prauc(std::span<const double> scores, std::span<const int> labels);

/// Max over the scans of one volume.
double volume_score(std::span<const double> scan_scores);

/// Spearman correlation with mid-ranks for ties.
double spearman(std::span<const double> a, std::span<const double> b);

struct CollapseReport {
  std::vector<double> per_dim_std;
  double mean_std = 0.0;
  // exp(entropy) of the normalized singular values of the centered batch
  double effective_rank = 1.0;
};

CollapseReport collapse_diagnostics(const Matrix& z);
nlohmann::json to_json(const CollapseReport& r);

struct ScoredScan {
  std::string eye_id;
  std::string volume_id;
  int scan_day = 0;
  double score = 0.0;
  bool label = false;
};

struct LevelMetrics {
  double scan_auroc = 0.0;
  double scan_prauc = 0.0;
  double volume_auroc = 0.0;
  double volume_prauc = 0.0;
};

/// Scan-level metrics plus volume-level ones with volume score = max over member scans.
LevelMetrics score_metrics(const std::vector<ScoredScan>& scans);

// ---------------------------------------------------------------------------
// Conversion classifiers

struct ProbeConfig {
  int epochs = 10;
  double lr = 1e-3;
  double weight_decay = 0.0;
  int batch_size = 64;
  // Cross-entropy weight of the converting class (the other class weighs 1).
  double positive_weight = 5.0;
  // Standardize frozen features with train-split mean and std.
  bool standardize = true;
  // Train-time supervised augmentation (fine-tuning only).
  bool augment = true;
  std::uint64_t seed = 0;

  void validate() const;
};

ProbeConfig default_finetune_config();

struct ClassifierResult {
  LevelMetrics test;
  int best_epoch = -1;
  std::vector<double> val_auroc;  // per epoch
  std::vector<ScoredScan> test_scores;
  std::vector<double> train_scores;  // final head on the train scans
};

nlohmann::json to_json(const ClassifierResult& r);

struct FeatureSet {
  Matrix x;  // n x r
  std::vector<cohort::LabeledScan> scans;
};

/// Weighted logistic regression (one linear layer, sigmoid output) trained
/// with AdamW; the epoch with the best validation AUROC is kept. Test labels
/// are read only to compute the final metrics.
ClassifierResult train_linear_probe(const FeatureSet& train, const FeatureSet& val, const FeatureSet& test,
                                    const ProbeConfig& cfg);

struct SplitScans {
  std::vector<cohort::LabeledScan> train, val, test;
};

SplitScans split_scans(const cohort::CohortManifest& m, const cohort::SplitAssignment& split,
                       int window_days = cohort::kDefaultWindowDays);

/// Preprocessed, resized scans (no augmentation).
std::vector<augment::Image> load_images(const std::vector<cohort::LabeledScan>& scans, data::ScanStore& store,
                                        std::array<Eigen::Index, 2> size, int threads = 1);

/// Frozen-encoder probe.
ClassifierResult linear_probe(const model::SslModel& model, const SplitScans& scans, data::ScanStore& store,
                              const ProbeConfig& cfg, int threads = 1);

/// Trains encoder and a fresh linear head together. The model is modified.
ClassifierResult finetune(model::SslModel& model, const SplitScans& scans, data::ScanStore& store,
                          const ProbeConfig& cfg, const augment::AugmentPolicy& policy, int threads = 1);

/// Spearman correlation between ||z1 - z2||^2 and dv over pairs drawn from `eyes`.
double dv_probe(model::SslModel& model, const cohort::CohortManifest& m, const std::vector<std::string>& eyes,
                data::ScanStore& store, std::size_t n_pairs, std::uint64_t seed,
                const cohort::SamplerConfig& sampler_cfg = {}, int threads = 1);

/// Manifest restricted to the listed eyes (patients without a listed eye are dropped).
cohort::CohortManifest subset(const cohort::CohortManifest& m, const std::vector<std::string>& eyes);

}  // namespace tinc::eval
