#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tinc/checkpoint.hpp"
#include "tinc/cohort.hpp"
#include "tinc/dataset.hpp"
#include "tinc/losses.hpp"
#include "tinc/model.hpp"
#include "tinc/optim.hpp"

namespace tinc::trainer {

enum class Method { vicreg, tinc, barlow_twins, vicreg_timehead };

std::string to_string(Method m);
/// Throws ValidationError listing the valid names.
Method method_from_string(const std::string& s);

struct TrainConfig {
  Method method = Method::tinc;
  int batch_size = 64;
  double base_lr = 2e-3;
  double weight_decay = 1e-6;
  int epochs = 60;
  int warmup_epochs = 10;
  std::uint64_t seed = 0;
  losses::LossConfig loss;
  cohort::PairMode pair_mode = cohort::PairMode::two_visits;
  int gap_min_days = 90;
  int gap_max_days = 540;
  // Feed dv = 0 to the TINC term (reduces it to the plain invariance term).
  bool force_zero_dv = false;
  double time_head_weight = 1.0;
  // Also write a checkpoint every k epochs; 0 writes only the final one.
  int checkpoint_every = 0;
  int threads = 1;

  void validate() const;
};

/// Loss value and embedding gradients of a method on one batch (time head excluded).
struct MethodLoss {
  losses::LossBreakdown parts;
  Matrix dz1, dz2;
};

MethodLoss method_loss(Method method, const losses::LossConfig& cfg, const Matrix& z1, const Matrix& z2,
                       const Vector& dv);

struct StepResult {
  long step = 0;
  int epoch = 0;
  int batch = 0;
  double lr = 0.0;
  losses::LossBreakdown loss;
  double z_std = 0.0;  // mean unbiased per-dimension std of the first view's embeddings
};

/// Per-epoch means of the unweighted terms.
struct EpochLog {
  int epoch = 0;
  losses::LossBreakdown mean;
  double lr = 0.0;
  double z_std = 0.0;
};

nlohmann::json to_json(const EpochLog& e);

class Trainer {
 public:
  Trainer(cohort::CohortManifest manifest, TrainConfig train, model::ModelConfig model,
          augment::AugmentPolicy policy = {}, augment::PreprocessConfig prep = {},
          std::shared_ptr<data::ScanStore> store = nullptr);
  // The sampler keeps a pointer to manifest_.
  Trainer(const Trainer&) = delete;
  Trainer& operator=(const Trainer&) = delete;

  /// One optimizer step on the next batch. Throws NumericalError on divergence.
  StepResult step();

  long steps_per_epoch() const { return steps_per_epoch_; }
  long total_steps() const { return steps_per_epoch_ * train_.epochs; }
  long global_step() const { return step_; }
  bool finished() const { return step_ >= total_steps(); }
  /// Pairs drawn by batch b of an epoch.
  std::size_t batch_pairs(long b) const;

  checkpoint::Contents snapshot();
  /// Loads weights, optimizer state and position. Config must match.
  void restore(const checkpoint::Contents& c);

  model::SslModel& model() { return *model_; }
  data::ScanStore& store() { return *store_; }
  const cohort::PairSampler& sampler() const { return *sampler_; }
  const cohort::CohortManifest& manifest() const { return manifest_; }
  const TrainConfig& train_config() const { return train_; }
  const model::ModelConfig& model_config() const { return model_cfg_; }
  const augment::AugmentPolicy& policy() const { return policy_; }
  const augment::PreprocessConfig& preprocess() const { return prep_; }

 private:
  cohort::CohortManifest manifest_;
  TrainConfig train_;
  model::ModelConfig model_cfg_;
  augment::AugmentPolicy policy_;
  augment::PreprocessConfig prep_;
  std::unique_ptr<model::SslModel> model_;
  std::unique_ptr<cohort::PairSampler> sampler_;
  std::shared_ptr<data::ScanStore> store_;
  optim::AdamWState opt_;
  long steps_per_epoch_ = 0;
  long step_ = 0;
};

/// The model, a loaded checkpoint's configuration and its weights.
struct LoadedModel {
  TrainConfig train;
  model::ModelConfig model_cfg;
  augment::AugmentPolicy policy;
  augment::PreprocessConfig prep;
  std::unique_ptr<model::SslModel> model;
  long step = 0;
};

LoadedModel load_model(const checkpoint::Contents& c);
void load_weights(model::SslModel& m, const checkpoint::Contents& c);

struct PretrainResult {
  std::vector<EpochLog> epochs;
  std::filesystem::path checkpoint;
};

struct PretrainHooks {
  std::function<void(const StepResult&)> on_step;
  std::function<void(const EpochLog&)> on_epoch;
};

/// Full pretraining run. Writes out_dir/checkpoint.bin (also every
/// checkpoint_every epochs) and out_dir/losses.jsonl. On divergence the last
/// epoch-boundary state is written as the checkpoint and the NumericalError is rethrown.
PretrainResult pretrain(const cohort::CohortManifest& manifest, const TrainConfig& train,
                        const model::ModelConfig& model, const augment::AugmentPolicy& policy,
                        const augment::PreprocessConfig& prep, const std::filesystem::path& out_dir,
                        const PretrainHooks& hooks = {}, std::shared_ptr<data::ScanStore> store = nullptr);

/// Continues a run from out_dir/checkpoint.bin, appending to losses.jsonl.
PretrainResult resume(const cohort::CohortManifest& manifest, const std::filesystem::path& out_dir,
                      const PretrainHooks& hooks = {});

// ---------------------------------------------------------------------------
// End-to-end gradient check on a tiny model

struct EndToEndReport {
  Method method;
  double embedding_rel_error = 0.0;  // gradient wrt projector output
  double param_rel_error = 0.0;      // gradient wrt every weight
  std::size_t checked = 0;
  std::size_t excluded = 0;
  bool passed = false;
};

/// Builds an mlp-encoder model with r=8, d=6 on n=8 random 4x4 images and
/// checks the analytic gradient of the method's total loss.
EndToEndReport end_to_end_gradcheck(Method method, std::uint64_t seed, double step = 1e-5, double tol = 1e-4);

}  // namespace tinc::trainer
