#include "tinc/config.hpp"

#include <cstdio>

namespace tinc::config {

namespace {

template <typename F>
void for_keys(const json& j, const std::string& where, F&& f) {
  if (!j.is_object()) throw ValidationError(where + " config must be a JSON object");
  for (const auto& [key, v] : j.items()) {
    try {
      if (!f(key, v)) throw ValidationError("unknown key '" + key + "' in " + where + " config");
    } catch (const json::exception& e) {
      throw ValidationError("bad value for '" + key + "' in " + where + " config: " + e.what());
    }
  }
}

cohort::PairMode pair_mode_from_string(const std::string& s) {
  if (s == "two_visits") return cohort::PairMode::two_visits;
  if (s == "same_scan") return cohort::PairMode::same_scan;
  throw ValidationError("unknown pair_mode '" + s + "' (expected two_visits|same_scan)");
}

std::string to_string(cohort::PairMode m) { return m == cohort::PairMode::two_visits ? "two_visits" : "same_scan"; }

}  // namespace

json to_json(const losses::LossConfig& c) {
  return {{"lambda_inv", c.lambda_inv},
          {"mu_var", c.mu_var},
          {"nu_cov", c.nu_cov},
          {"gamma", c.gamma},
          {"epsilon", c.epsilon},
          {"lambda_bt", c.lambda_bt},
          {"bt_epsilon", c.bt_epsilon},
          {"similarity_variant", losses::to_string(c.similarity_variant)},
          {"dv_min_days", c.dv_min_days},
          {"dv_max_days", c.dv_max_days}};
}

void apply(const json& j, losses::LossConfig& c) {
  for_keys(j, "loss", [&](const std::string& k, const json& v) {
    if (k == "lambda_inv") c.lambda_inv = v.get<double>();
    else if (k == "mu_var") c.mu_var = v.get<double>();
    else if (k == "nu_cov") c.nu_cov = v.get<double>();
    else if (k == "gamma") c.gamma = v.get<double>();
    else if (k == "epsilon") c.epsilon = v.get<double>();
    else if (k == "lambda_bt") c.lambda_bt = v.get<double>();
    else if (k == "bt_epsilon") c.bt_epsilon = v.get<double>();
    else if (k == "similarity_variant") c.similarity_variant = losses::similarity_variant_from_string(v.get<std::string>());
    else if (k == "dv_min_days") c.dv_min_days = v.get<int>();
    else if (k == "dv_max_days") c.dv_max_days = v.get<int>();
    else return false;
    return true;
  });
}

json to_json(const trainer::TrainConfig& c) {
  return {{"method", trainer::to_string(c.method)},
          {"batch_size", c.batch_size},
          {"base_lr", c.base_lr},
          {"weight_decay", c.weight_decay},
          {"epochs", c.epochs},
          {"warmup_epochs", c.warmup_epochs},
          {"seed", c.seed},
          {"loss", to_json(c.loss)},
          {"pair_mode", to_string(c.pair_mode)},
          {"gap_min_days", c.gap_min_days},
          {"gap_max_days", c.gap_max_days},
          {"force_zero_dv", c.force_zero_dv},
          {"time_head_weight", c.time_head_weight},
          {"checkpoint_every", c.checkpoint_every},
          {"threads", c.threads}};
}

void apply(const json& j, trainer::TrainConfig& c) {
  for_keys(j, "train", [&](const std::string& k, const json& v) {
    if (k == "method") c.method = trainer::method_from_string(v.get<std::string>());
    else if (k == "batch_size") c.batch_size = v.get<int>();
    else if (k == "base_lr") c.base_lr = v.get<double>();
    else if (k == "weight_decay") c.weight_decay = v.get<double>();
    else if (k == "epochs") c.epochs = v.get<int>();
    else if (k == "warmup_epochs") c.warmup_epochs = v.get<int>();
    else if (k == "seed") c.seed = v.get<std::uint64_t>();
    else if (k == "loss") apply(v, c.loss);
    else if (k == "pair_mode") c.pair_mode = pair_mode_from_string(v.get<std::string>());
    else if (k == "gap_min_days") c.gap_min_days = v.get<int>();
    else if (k == "gap_max_days") c.gap_max_days = v.get<int>();
    else if (k == "force_zero_dv") c.force_zero_dv = v.get<bool>();
    else if (k == "time_head_weight") c.time_head_weight = v.get<double>();
    else if (k == "checkpoint_every") c.checkpoint_every = v.get<int>();
    else if (k == "threads") c.threads = v.get<int>();
    else return false;
    return true;
  });
}

json to_json(const augment::AugmentPolicy& c) {
  return {{"mode", c.mode == augment::AugmentMode::ssl ? "ssl" : "supervised"},
          {"crop_area_range", c.crop_area_range},
          {"aspect_range", c.aspect_range},
          {"target_size", c.target_size},
          {"max_rotation_deg", c.max_rotation_deg},
          {"max_translation_frac", c.max_translation_frac},
          {"hflip_prob", c.hflip_prob},
          {"jitter", c.jitter}};
}

void apply(const json& j, augment::AugmentPolicy& c) {
  for_keys(j, "augment", [&](const std::string& k, const json& v) {
    if (k == "mode") {
      const auto s = v.get<std::string>();
      if (s == "ssl") c.mode = augment::AugmentMode::ssl;
      else if (s == "supervised") c.mode = augment::AugmentMode::supervised;
      else throw ValidationError("unknown augment mode '" + s + "' (expected ssl|supervised)");
    } else if (k == "crop_area_range") c.crop_area_range = v.get<std::array<double, 2>>();
    else if (k == "aspect_range") c.aspect_range = v.get<std::array<double, 2>>();
    else if (k == "target_size") c.target_size = v.get<std::array<Eigen::Index, 2>>();
    else if (k == "max_rotation_deg") c.max_rotation_deg = v.get<double>();
    else if (k == "max_translation_frac") c.max_translation_frac = v.get<double>();
    else if (k == "hflip_prob") c.hflip_prob = v.get<double>();
    else if (k == "jitter") c.jitter = v.get<double>();
    else return false;
    return true;
  });
}

json to_json(const augment::PreprocessConfig& c) { return {{"rows_above", c.rows_above}, {"rows_below", c.rows_below}}; }

void apply(const json& j, augment::PreprocessConfig& c) {
  for_keys(j, "preprocess", [&](const std::string& k, const json& v) {
    if (k == "rows_above") c.rows_above = v.get<int>();
    else if (k == "rows_below") c.rows_below = v.get<int>();
    else return false;
    return true;
  });
}

json to_json(const synth::SynthConfig& c) {
  return {{"n_patients", c.n_patients},
          {"visits_per_eye", c.visits_per_eye},
          {"visit_interval_days", c.visit_interval_days},
          {"scans_per_visit", c.scans_per_visit},
          {"image_size", c.image_size},
          {"converter_fraction", c.converter_fraction},
          {"noise_sigma", c.noise_sigma},
          {"progression_rate_range", c.progression_rate_range},
          {"seed", c.seed}};
}

void apply(const json& j, synth::SynthConfig& c) {
  for_keys(j, "synth", [&](const std::string& k, const json& v) {
    if (k == "n_patients") c.n_patients = v.get<int>();
    else if (k == "visits_per_eye") c.visits_per_eye = v.get<int>();
    else if (k == "visit_interval_days") c.visit_interval_days = v.get<int>();
    else if (k == "scans_per_visit") c.scans_per_visit = v.get<int>();
    else if (k == "image_size") c.image_size = v.get<std::array<int, 2>>();
    else if (k == "converter_fraction") c.converter_fraction = v.get<double>();
    else if (k == "noise_sigma") c.noise_sigma = v.get<double>();
    else if (k == "progression_rate_range") c.progression_rate_range = v.get<std::array<double, 2>>();
    else if (k == "seed") c.seed = v.get<std::uint64_t>();
    else return false;
    return true;
  });
}

json to_json(const eval::ProbeConfig& c) {
  return {{"epochs", c.epochs},       {"lr", c.lr},
          {"weight_decay", c.weight_decay}, {"batch_size", c.batch_size},
          {"positive_weight", c.positive_weight}, {"standardize", c.standardize},
          {"augment", c.augment},     {"seed", c.seed}};
}

void apply(const json& j, eval::ProbeConfig& c) {
  for_keys(j, "probe", [&](const std::string& k, const json& v) {
    if (k == "epochs") c.epochs = v.get<int>();
    else if (k == "lr") c.lr = v.get<double>();
    else if (k == "weight_decay") c.weight_decay = v.get<double>();
    else if (k == "batch_size") c.batch_size = v.get<int>();
    else if (k == "positive_weight") c.positive_weight = v.get<double>();
    else if (k == "standardize") c.standardize = v.get<bool>();
    else if (k == "augment") c.augment = v.get<bool>();
    else if (k == "seed") c.seed = v.get<std::uint64_t>();
    else return false;
    return true;
  });
}

void apply(const json& j, model::ModelConfig& c) {
  if (!j.is_object()) throw ValidationError("model config must be a JSON object");
  json merged = model::to_json(c);
  for (const auto& [k, v] : j.items()) merged[k] = v;
  try {
    c = model::model_config_from_json(merged);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("bad value in model config: ") + e.what());
  }
}

json to_json(const EvalSettings& c) {
  return {{"split_seed", c.split_seed},
          {"ratios", {c.ratios.train, c.ratios.val, c.ratios.test}},
          {"window_days", c.window_days},
          {"dv_pairs", c.dv_pairs},
          {"dv_seed", c.dv_seed}};
}

void apply(const json& j, EvalSettings& c) {
  for_keys(j, "eval", [&](const std::string& k, const json& v) {
    if (k == "split_seed") c.split_seed = v.get<std::uint64_t>();
    else if (k == "ratios") {
      const auto r = v.get<std::array<double, 3>>();
      c.ratios = {r[0], r[1], r[2]};
    } else if (k == "window_days") c.window_days = v.get<int>();
    else if (k == "dv_pairs") c.dv_pairs = v.get<std::size_t>();
    else if (k == "dv_seed") c.dv_seed = v.get<std::uint64_t>();
    else return false;
    return true;
  });
}

void RunConfig::validate() const {
  if (preset != "desk" && preset != "paper") throw ValidationError("unknown preset '" + preset + "' (expected desk|paper)");
  synth.validate();
  train.validate();
  model.validate();
  augment.validate();
  probe.validate();
  finetune.validate();
  if (model.input_size[0] != augment.target_size[0] || model.input_size[1] != augment.target_size[1])
    throw ValidationError("augment target_size must equal model input_size");
  if (eval.dv_pairs < 10) throw ValidationError("eval.dv_pairs must be at least 10");
}

RunConfig preset(const std::string& name) {
  RunConfig c;
  c.preset = name;
  if (name == "desk") return c;
  if (name == "paper") {
    c.train.batch_size = 128;
    c.train.epochs = 400;
    c.train.warmup_epochs = 10;
    c.train.base_lr = 5e-4;
    c.train.weight_decay = 1e-6;
    c.model.projector_dims = {4096, 4096, 4096};
    c.finetune.epochs = 100;
    c.probe.lr = 1e-4;
    return c;
  }
  throw ValidationError("unknown preset '" + name + "' (expected desk|paper)");
}

json to_json(const RunConfig& c) {
  return {{"preset", c.preset},
          {"synth", to_json(c.synth)},
          {"train", to_json(c.train)},
          {"model", model::to_json(c.model)},
          {"augment", to_json(c.augment)},
          {"preprocess", to_json(c.preprocess)},
          {"probe", to_json(c.probe)},
          {"finetune", to_json(c.finetune)},
          {"eval", to_json(c.eval)},
          {"manifest", c.manifest},
          {"out_dir", c.out_dir}};
}

void apply(const json& j, RunConfig& c) {
  if (!j.is_object()) throw ValidationError("run config must be a JSON object");
  if (j.contains("preset")) c = preset(j.at("preset").get<std::string>());
  for_keys(j, "run", [&](const std::string& k, const json& v) {
    if (k == "preset") return true;
    if (k == "synth") apply(v, c.synth);
    else if (k == "train") apply(v, c.train);
    else if (k == "model") apply(v, c.model);
    else if (k == "augment") apply(v, c.augment);
    else if (k == "preprocess") apply(v, c.preprocess);
    else if (k == "probe") apply(v, c.probe);
    else if (k == "finetune") apply(v, c.finetune);
    else if (k == "eval") apply(v, c.eval);
    else if (k == "manifest") c.manifest = v.get<std::string>();
    else if (k == "out_dir") c.out_dir = v.get<std::string>();
    else return false;
    return true;
  });
}

std::string config_hash(const json& j) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 0x100000001B3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace tinc::config
