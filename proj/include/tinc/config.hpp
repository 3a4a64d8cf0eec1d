#pragma once

// JSON forms of every configuration struct. apply_* functions overlay a JSON
// object onto an existing value, so presets are expanded first and file or
// flag overrides land on top. Unknown keys are rejected.

#include <string>

#include <nlohmann/json.hpp>

#include "tinc/augment.hpp"
#include "tinc/cohort.hpp"
#include "tinc/eval.hpp"
#include "tinc/losses.hpp"
#include "tinc/model.hpp"
#include "tinc/synth.hpp"
#include "tinc/trainer.hpp"

namespace tinc::config {

using nlohmann::json;

json to_json(const losses::LossConfig& c);
void apply(const json& j, losses::LossConfig& c);

json to_json(const trainer::TrainConfig& c);
void apply(const json& j, trainer::TrainConfig& c);

json to_json(const augment::AugmentPolicy& c);
void apply(const json& j, augment::AugmentPolicy& c);

json to_json(const augment::PreprocessConfig& c);
void apply(const json& j, augment::PreprocessConfig& c);

json to_json(const synth::SynthConfig& c);
void apply(const json& j, synth::SynthConfig& c);

json to_json(const eval::ProbeConfig& c);
void apply(const json& j, eval::ProbeConfig& c);

void apply(const json& j, model::ModelConfig& c);

struct EvalSettings {
  std::uint64_t split_seed = 0;
  cohort::SplitRatios ratios;
  int window_days = cohort::kDefaultWindowDays;
  std::size_t dv_pairs = 500;
  std::uint64_t dv_seed = 1;
};

json to_json(const EvalSettings& c);
void apply(const json& j, EvalSettings& c);

struct RunConfig {
  std::string preset = "desk";
  synth::SynthConfig synth;
  trainer::TrainConfig train;
  model::ModelConfig model;
  augment::AugmentPolicy augment;
  augment::PreprocessConfig preprocess;
  eval::ProbeConfig probe;
  eval::ProbeConfig finetune = eval::default_finetune_config();
  EvalSettings eval;
  std::string manifest;
  std::string out_dir;

  void validate() const;
};

/// "desk" (small CPU runs) or "paper" (published optimizer and sizes).
RunConfig preset(const std::string& name);

json to_json(const RunConfig& c);
/// Keys: preset, synth, train, model, augment, preprocess, probe, finetune, eval, manifest, out_dir.
/// A "preset" key in `j` resets `c` to that preset before the remaining keys apply.
void apply(const json& j, RunConfig& c);

/// FNV-1a over the canonical dump, as 16 hex digits.
std::string config_hash(const json& j);

}  // namespace tinc::config
