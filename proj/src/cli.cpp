#include "tinc/cli.hpp"

#include <glob.h>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "tinc/checkpoint.hpp"
#include "tinc/config.hpp"
#include "tinc/eval.hpp"
#include "tinc/gradcheck.hpp"
#include "tinc/report.hpp"
#include "tinc/synth.hpp"
#include "tinc/trainer.hpp"

namespace tinc::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Globals {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> preset;
  int threads = 1;
  bool force = false;
};

json read_json(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot read " + file.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError("invalid JSON in " + file.string() + ": " + e.what());
  }
}

void write_text(const fs::path& file, const std::string& text) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + file.string());
  out << text;
}

void write_json(const fs::path& file, const json& j) { write_text(file, j.dump(2) + "\n"); }

config::RunConfig resolve(const Globals& g) {
  json file = json::object();
  if (!g.config.empty()) file = read_json(g.config);
  if (!file.is_object()) throw ValidationError("config file must hold a JSON object");
  const std::string name = g.preset ? *g.preset : file.value("preset", std::string("desk"));
  config::RunConfig c = config::preset(name);
  file.erase("preset");
  config::apply(file, c);
  if (!g.out.empty()) c.out_dir = g.out;
  return c;
}

int threads_of(const Globals& g) {
  if (const char* env = std::getenv("TINC_THREADS"); env && *env) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (*end != '\0' || v < 1) throw ValidationError("TINC_THREADS must be a positive integer");
    return static_cast<int>(v);
  }
  if (g.threads < 1) throw ValidationError("--threads must be a positive integer");
  return g.threads;
}

fs::path require_out(const config::RunConfig& c) {
  if (c.out_dir.empty()) throw ValidationError("an output directory is required (--out)");
  return c.out_dir;
}

bool non_empty_dir(const fs::path& p) { return fs::is_directory(p) && !fs::is_empty(p); }

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::optional<int> patients, visits, scans, interval;
  std::optional<double> converter_fraction, noise;
};

int cmd_synth(const Globals& g, const SynthArgs& a) {
  auto c = resolve(g);
  if (a.patients) c.synth.n_patients = *a.patients;
  if (a.visits) c.synth.visits_per_eye = *a.visits;
  if (a.scans) c.synth.scans_per_visit = *a.scans;
  if (a.interval) c.synth.visit_interval_days = *a.interval;
  if (a.converter_fraction) c.synth.converter_fraction = *a.converter_fraction;
  if (a.noise) c.synth.noise_sigma = *a.noise;
  if (g.seed) c.synth.seed = *g.seed;
  c.synth.validate();
  const fs::path out = require_out(c);
  if (non_empty_dir(out)) {
    if (!g.force) throw ValidationError("output directory " + out.string() + " is not empty (use --force)");
    for (const char* name : {"images", "manifest.json", "truth.json", "synth.config.json"}) fs::remove_all(out / name);
  }
  const auto cohort = synth::generate_cohort(c.synth, out);
  write_json(out / "synth.config.json", config::to_json(c));
  std::size_t eyes = 0, visits = 0, scans = 0, converters = 0;
  for (const auto& p : cohort.manifest.patients)
    for (const auto& e : p.eyes) {
      ++eyes;
      if (e.conversion_day) ++converters;
      visits += e.visits.size();
      for (const auto& v : e.visits) scans += v.scans.size();
    }
  std::cout << "patients " << cohort.manifest.patients.size() << ", eyes " << eyes << ", visits " << visits
            << ", scans " << scans << ", converters " << converters << "\n";
  return ok;
}

// ---------------------------------------------------------------------------

struct PretrainArgs {
  std::optional<std::string> manifest, method, variant, pair_mode, encoder;
  std::optional<int> epochs, warmup_epochs, batch_size, checkpoint_every;
  std::optional<double> lr, weight_decay, lambda, mu, nu, gamma;
  bool force_zero_dv = false;
  bool resume = false;
};

int cmd_pretrain(const Globals& g, const PretrainArgs& a) {
  auto c = resolve(g);
  if (a.manifest) c.manifest = *a.manifest;
  if (a.method) c.train.method = trainer::method_from_string(*a.method);
  if (a.variant) c.train.loss.similarity_variant = losses::similarity_variant_from_string(*a.variant);
  if (a.pair_mode) config::apply(json{{"pair_mode", *a.pair_mode}}, c.train);
  if (a.encoder) c.model.encoder = model::encoder_kind_from_string(*a.encoder);
  if (a.epochs) c.train.epochs = *a.epochs;
  if (a.warmup_epochs) c.train.warmup_epochs = *a.warmup_epochs;
  if (a.batch_size) c.train.batch_size = *a.batch_size;
  if (a.checkpoint_every) c.train.checkpoint_every = *a.checkpoint_every;
  if (a.lr) c.train.base_lr = *a.lr;
  if (a.weight_decay) c.train.weight_decay = *a.weight_decay;
  if (a.lambda) c.train.loss.lambda_inv = *a.lambda;
  if (a.mu) c.train.loss.mu_var = *a.mu;
  if (a.nu) c.train.loss.nu_cov = *a.nu;
  if (a.gamma) c.train.loss.gamma = *a.gamma;
  if (a.force_zero_dv) c.train.force_zero_dv = true;
  if (g.seed) c.train.seed = *g.seed;
  c.train.threads = threads_of(g);
  // A short run cannot keep the default warmup; clamp it below the epoch count.
  if (c.train.epochs > 0 && c.train.warmup_epochs >= c.train.epochs && !a.warmup_epochs)
    c.train.warmup_epochs = c.train.epochs / 2;
  c.validate();
  if (c.manifest.empty()) throw ValidationError("a cohort manifest is required (--manifest)");
  const fs::path out = require_out(c);
  const auto manifest = cohort::load_manifest(c.manifest);

  trainer::PretrainHooks hooks;
  hooks.on_epoch = [](const trainer::EpochLog& e) {
    std::cout << "epoch " << e.epoch << " total " << e.mean.total << " inv " << e.mean.invariance << " var "
              << e.mean.variance << " cov " << e.mean.covariance << " z_std " << e.z_std << " lr " << e.lr << "\n";
  };
  try {
    if (a.resume) {
      trainer::resume(manifest, out, hooks);
    } else {
      if (fs::exists(out / "checkpoint.bin") && !g.force)
        throw ValidationError(out.string() + " already holds a checkpoint (use --force or --resume)");
      write_json(out / "pretrain.config.json", config::to_json(c));
      trainer::pretrain(manifest, c.train, c.model, c.augment, c.preprocess, out, hooks);
    }
  } catch (const NumericalError& e) {
    std::cerr << "error: " << e.what() << "; last good state written to " << (out / "checkpoint.bin").string() << "\n";
    return numerical;
  }
  return ok;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::optional<std::string> checkpoint, manifest;
  std::string mode = "probe";
  std::optional<std::uint64_t> split_seed;
  std::optional<std::size_t> dv_pairs;
  std::optional<int> probe_epochs, ft_epochs;
  std::optional<double> probe_lr, ft_lr;
  bool random_init = false;
};

int cmd_eval(const Globals& g, const EvalArgs& a) {
  auto c = resolve(g);
  if (a.manifest) c.manifest = *a.manifest;
  if (a.split_seed) c.eval.split_seed = *a.split_seed;
  if (a.dv_pairs) c.eval.dv_pairs = *a.dv_pairs;
  if (a.probe_epochs) c.probe.epochs = *a.probe_epochs;
  if (a.probe_lr) c.probe.lr = *a.probe_lr;
  if (a.ft_epochs) c.finetune.epochs = *a.ft_epochs;
  if (a.ft_lr) c.finetune.lr = *a.ft_lr;
  if (g.seed) {
    c.train.seed = *g.seed;
    c.probe.seed = *g.seed;
    c.finetune.seed = *g.seed;
  }
  c.validate();
  const bool do_probe = a.mode == "probe" || a.mode == "both";
  const bool do_ft = a.mode == "finetune" || a.mode == "both";
  if (!do_probe && !do_ft) throw ValidationError("--mode must be probe, finetune or both");
  if (c.manifest.empty()) throw ValidationError("a cohort manifest is required (--manifest)");
  const fs::path out = require_out(c);
  const int threads = threads_of(g);

  // Model to evaluate: a pretrained checkpoint or the untrained initialization.
  json model_source;
  auto load = [&]() -> trainer::LoadedModel {
    if (a.random_init) {
      trainer::LoadedModel lm;
      lm.train = c.train;
      lm.model_cfg = c.model;
      lm.policy = c.augment;
      lm.prep = c.preprocess;
      lm.model = std::make_unique<model::SslModel>(c.model, derive_seed({c.train.seed, 0x1A17u}));
      model_source = {{"random_init", true}, {"model", model::to_json(c.model)}, {"seed", c.train.seed}};
      return lm;
    }
    if (!a.checkpoint) throw ValidationError("--checkpoint is required (or --random-init)");
    const auto ck = checkpoint::load(*a.checkpoint);
    model_source = ck.meta.at("config");
    return trainer::load_model(ck);
  };
  auto lm = load();
  const std::string method = a.random_init ? "random_init" : trainer::to_string(lm.train.method);

  const auto manifest = cohort::load_manifest(c.manifest);
  const auto split = cohort::split_patients(manifest, c.eval.ratios, c.eval.split_seed);
  const auto scans = eval::split_scans(manifest, split, c.eval.window_days);
  data::ScanStore store(lm.prep);

  json settings = {{"model", model_source}, {"mode", a.mode}, {"eval", config::to_json(c.eval)}};
  if (do_probe) settings["probe"] = config::to_json(c.probe);
  if (do_ft) settings["finetune"] = config::to_json(c.finetune);

  json metrics;
  metrics["method"] = method;
  metrics["seed"] = lm.train.seed;
  metrics["config_hash"] = config::config_hash(settings);
  std::optional<eval::ClassifierResult> probe, ft;
  if (do_probe) probe = eval::linear_probe(*lm.model, scans, store, c.probe, threads);

  const auto test_images = eval::load_images(scans.test, store, {c.model.input_size[0], c.model.input_size[1]}, threads);
  metrics["collapse"] = eval::to_json(eval::collapse_diagnostics(lm.model->embed(test_images)));
  cohort::SamplerConfig sc;
  sc.gap_min_days = lm.train.gap_min_days;
  sc.gap_max_days = lm.train.gap_max_days;
  sc.dv_min_days = lm.train.loss.dv_min_days;
  sc.dv_max_days = lm.train.loss.dv_max_days;
  metrics["dv_spearman"] = eval::dv_probe(*lm.model, manifest, split.test, store, c.eval.dv_pairs, c.eval.dv_seed, sc, threads);

  if (do_ft) {
    auto fresh = load();
    ft = eval::finetune(*fresh.model, scans, store, c.finetune, c.augment, threads);
  }
  const auto& head = probe ? *probe : *ft;
  metrics["scan_auroc"] = head.test.scan_auroc;
  metrics["scan_prauc"] = head.test.scan_prauc;
  metrics["volume_auroc"] = head.test.volume_auroc;
  metrics["volume_prauc"] = head.test.volume_prauc;
  if (probe) metrics["probe"] = eval::to_json(*probe);
  if (ft) metrics["finetune"] = eval::to_json(*ft);

  write_json(out / "metrics.json", metrics);
  write_json(out / "eval.config.json", config::to_json(c));
  std::cout << "scan_auroc " << head.test.scan_auroc << " scan_prauc " << head.test.scan_prauc << " volume_auroc "
            << head.test.volume_auroc << " dv_spearman " << metrics["dv_spearman"].get<double>() << "\n";
  return ok;
}

// ---------------------------------------------------------------------------

struct GradcheckArgs {
  int seeds = 1;
  int instances = 10;
  double step = 1e-5;
  double tol = 1e-4;
  bool inject_fault = false;
};

int cmd_gradcheck(const Globals& g, const GradcheckArgs& a) {
  if (a.seeds < 1 || a.instances < 1) throw ValidationError("--seeds and --instances must be positive");
  const std::uint64_t base = g.seed.value_or(0);
  std::function<std::vector<Matrix>(losses::LossId, const losses::LossInputs&)> fault;
  if (a.inject_fault)
    fault = [](losses::LossId id, const losses::LossInputs& in) {
      auto gr = losses::loss_gradient(id, in);
      for (auto& m : gr) m *= 1.5;
      return gr;
    };
  bool all_ok = true;
  json rows = json::array();
  char line[128];
  std::snprintf(line, sizeof line, "%-18s %14s %9s %9s  %s\n", "check", "max_rel_error", "checked", "excluded", "status");
  std::cout << line;
  auto print = [&](const std::string& name, double err, std::size_t checked, std::size_t excluded, bool pass) {
    std::snprintf(line, sizeof line, "%-18s %14.3e %9zu %9zu  %s\n", name.c_str(), err, checked, excluded,
                  pass ? "PASS" : "FAIL");
    std::cout << line;
    rows.push_back({{"check", name}, {"max_rel_error", err}, {"checked", checked}, {"excluded", excluded}, {"passed", pass}});
    all_ok = all_ok && pass;
  };
  for (auto id : losses::all_loss_ids()) {
    double err = 0.0;
    std::size_t checked = 0, excluded = 0;
    for (int s = 0; s < a.seeds; ++s)
      for (int k = 0; k < a.instances; ++k) {
        const std::uint64_t seed = derive_seed({base + static_cast<std::uint64_t>(s), static_cast<std::uint64_t>(k)});
        Rng r = make_rng({seed, 0x512Eu});
        const int n = 4 + static_cast<int>(uniform_index(r, 9));
        const int d = 2 + static_cast<int>(uniform_index(r, 7));
        const auto rep = finite_difference_check(id, random_loss_inputs(seed, n, d), a.step, a.tol, fault);
        err = std::max(err, rep.max_rel_error);
        for (const auto& in : rep.inputs) {
          checked += in.stats.checked;
          excluded += in.stats.excluded;
        }
      }
    print(losses::to_string(id), err, checked, excluded, err <= a.tol);
  }
  for (auto m : {trainer::Method::vicreg, trainer::Method::tinc, trainer::Method::barlow_twins,
                 trainer::Method::vicreg_timehead}) {
    double err = 0.0;
    std::size_t checked = 0, excluded = 0;
    for (int s = 0; s < a.seeds; ++s) {
      const auto rep = trainer::end_to_end_gradcheck(m, base + static_cast<std::uint64_t>(s), a.step, a.tol);
      err = std::max({err, rep.embedding_rel_error, rep.param_rel_error});
      checked += rep.checked;
      excluded += rep.excluded;
    }
    print("e2e_" + trainer::to_string(m), err, checked, excluded, err <= a.tol);
  }
  if (!g.out.empty()) write_json(fs::path(g.out) / "gradcheck.json", {{"rows", rows}, {"passed", all_ok}});
  return all_ok ? ok : numerical;
}

// ---------------------------------------------------------------------------

struct ReportArgs {
  std::vector<std::string> inputs;
  std::vector<std::string> losses;
  bool svg = false;
};

int cmd_report(const Globals& g, const ReportArgs& a) {
  if (g.out.empty()) throw ValidationError("an output directory is required (--out)");
  if (a.inputs.empty()) throw ValidationError("no metrics files given");
  std::vector<report::RunMetrics> runs;
  for (const auto& f : report::expand_inputs(a.inputs)) runs.push_back(report::read_metrics(f));
  const auto rows = report::aggregate(runs);
  const fs::path out = g.out;
  write_text(out / "report.csv", report::to_csv(rows));
  const auto table = report::text_table(rows);
  write_text(out / "report.txt", table);
  std::cout << table;
  if (a.svg) {
    if (a.losses.empty()) throw ValidationError("--svg needs --losses files");
    std::vector<report::Series> total, zstd;
    for (const auto& p : a.losses) {
      glob_t gl{};
      std::vector<fs::path> files;
      if (::glob(p.c_str(), 0, nullptr, &gl) == 0)
        for (std::size_t i = 0; i < gl.gl_pathc; ++i) files.emplace_back(gl.gl_pathv[i]);
      ::globfree(&gl);
      for (const auto& f : files) {
        std::ifstream in(f);
        report::Series st{f.parent_path().filename().string(), {}}, sz{st.label, {}};
        std::string line;
        while (std::getline(in, line)) {
          if (line.empty()) continue;
          try {
            const auto j = json::parse(line);
            st.y.push_back(j.at("total").get<double>());
            sz.y.push_back(j.value("z_std", 0.0));
          } catch (const json::exception& e) {
            throw ValidationError("malformed loss log " + f.string() + ": " + e.what());
          }
        }
        total.push_back(std::move(st));
        zstd.push_back(std::move(sz));
      }
    }
    write_text(out / "loss_curves.svg", report::svg_lines("Pretraining loss", "total", total));
    write_text(out / "z_std.svg", report::svg_lines("Mean per-dimension embedding std", "z_std", zstd));
  }
  return ok;
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"Temporally informed self-supervised pretraining on longitudinal scan cohorts", "tinc"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "JSON run config")->check(CLI::ExistingFile);
  app.add_option("--out", g.out, "Output directory");
  app.add_option("--seed", g.seed, "Seed");
  app.add_option("--preset", g.preset, "Preset expanded before overrides")->check(CLI::IsMember({"desk", "paper"}));
  app.add_option("--threads", g.threads, "Worker threads (TINC_THREADS overrides)");
  app.add_flag("--force", g.force, "Overwrite existing outputs");

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic cohort")->fallthrough();
  synth->add_option("--patients", sa.patients);
  synth->add_option("--visits", sa.visits);
  synth->add_option("--scans", sa.scans, "Scans per visit");
  synth->add_option("--interval", sa.interval, "Days between visits");
  synth->add_option("--converter-fraction", sa.converter_fraction);
  synth->add_option("--noise", sa.noise);

  PretrainArgs pa;
  auto* pre = app.add_subcommand("pretrain", "Self-supervised pretraining")->fallthrough();
  pre->add_option("--manifest", pa.manifest);
  pre->add_option("--method", pa.method, "vicreg | tinc | barlow_twins | vicreg_timehead");
  pre->add_option("--variant", pa.variant, "TINC similarity: tinc | tinc_squared");
  pre->add_option("--pair-mode", pa.pair_mode, "two_visits | same_scan");
  pre->add_option("--encoder", pa.encoder, "small_cnn | mlp");
  pre->add_option("--epochs", pa.epochs);
  pre->add_option("--warmup-epochs", pa.warmup_epochs);
  pre->add_option("--batch-size", pa.batch_size);
  pre->add_option("--checkpoint-every", pa.checkpoint_every);
  pre->add_option("--lr", pa.lr);
  pre->add_option("--weight-decay", pa.weight_decay);
  pre->add_option("--lambda", pa.lambda, "Invariance weight");
  pre->add_option("--mu", pa.mu, "Variance weight");
  pre->add_option("--nu", pa.nu, "Covariance weight");
  pre->add_option("--gamma", pa.gamma, "Target std");
  pre->add_flag("--force-zero-dv", pa.force_zero_dv);
  pre->add_flag("--resume", pa.resume, "Continue from <out>/checkpoint.bin");

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "Linear probe / fine-tuning, dv probe and collapse diagnostics")->fallthrough();
  ev->add_option("--checkpoint", ea.checkpoint);
  ev->add_option("--manifest", ea.manifest);
  ev->add_option("--mode", ea.mode, "probe | finetune | both")->check(CLI::IsMember({"probe", "finetune", "both"}));
  ev->add_option("--split-seed", ea.split_seed);
  ev->add_option("--dv-pairs", ea.dv_pairs);
  ev->add_option("--probe-epochs", ea.probe_epochs);
  ev->add_option("--probe-lr", ea.probe_lr);
  ev->add_option("--ft-epochs", ea.ft_epochs);
  ev->add_option("--ft-lr", ea.ft_lr);
  ev->add_flag("--random-init", ea.random_init, "Evaluate the untrained encoder");

  GradcheckArgs ga;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every loss and the tiny model")->fallthrough();
  gc->add_option("--seeds", ga.seeds);
  gc->add_option("--instances", ga.instances, "Random instances per loss and seed");
  gc->add_option("--step", ga.step);
  gc->add_option("--tol", ga.tol);
  gc->add_flag("--inject-fault", ga.inject_fault, "Scale analytic gradients (negative control)");

  ReportArgs ra;
  auto* rep = app.add_subcommand("report", "Aggregate metrics.json files")->fallthrough();
  rep->add_option("inputs", ra.inputs, "metrics.json files, globs or directories");
  rep->add_option("--losses", ra.losses, "losses.jsonl files or globs for the plots");
  rep->add_flag("--svg", ra.svg);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? ok : usage;
  }
  try {
    if (synth->parsed()) return cmd_synth(g, sa);
    if (pre->parsed()) return cmd_pretrain(g, pa);
    if (ev->parsed()) return cmd_eval(g, ea);
    if (gc->parsed()) return cmd_gradcheck(g, ga);
    if (rep->parsed()) return cmd_report(g, ra);
  } catch (const NumericalError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return numerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return validation;
  }
  return usage;
}

int run(const std::vector<std::string>& args) {
  std::vector<const char*> argv{"tinc"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data());
}

}  // namespace tinc::cli
