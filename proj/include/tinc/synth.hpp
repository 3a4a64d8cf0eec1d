#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "tinc/augment.hpp"
#include "tinc/cohort.hpp"

namespace tinc::synth {

struct SynthConfig {
  int n_patients = 100;
  int visits_per_eye = 24;
  int visit_interval_days = 30;
  int scans_per_visit = 6;
  std::array<int, 2> image_size{128, 128};  // (H, W)
  double converter_fraction = 0.25;
  double noise_sigma = 0.05;
  // Progression per day; converters draw the post-knot rate from the upper half.
  std::array<double, 2> progression_rate_range{0.0005, 0.004};
  std::uint64_t seed = 0;

  void validate() const;
  int study_end_day() const { return (visits_per_eye - 1) * visit_interval_days; }
};

inline constexpr double kConversionThreshold = 0.8;

/// Fixed per-eye appearance: layer contour, band and lesion geometry, texture.
struct EyeAnatomy {
  augment::Quadratic contour;
  double base_thickness = 28.0;
  double base_intensity = 0.3;
  double lesion_x = 64.0;
  std::array<double, 3> texture_phase{};
  double texture_period = 7.0;
};

struct PatientState {
  std::string patient_id;
  std::uint64_t base_texture_seed = 0;
  std::vector<std::pair<int, double>> knots;  // piecewise-linear s(day), flat after the last knot
  bool converter = false;
  std::optional<int> conversion_day;
  EyeAnatomy anatomy;

  double progression(int day) const;
};

/// Integer vertical offset of the eye on a visit (positioning variability).
int visit_shift(const PatientState& state, int day);

/// Contour of the layer on `day`, including the visit offset.
augment::Quadratic visit_contour(const PatientState& state, int day);

struct RenderedScan {
  Matrix image;  // unquantized, in [0,1]
  augment::Quadratic contour;
};

RenderedScan render_scan(const PatientState& state, int day, int scan_index, const SynthConfig& cfg);

/// Mean of the fixed lesion window on `day` (window follows the visit offset).
double lesion_region_mean(const Matrix& image, const PatientState& state, int day);

/// Row/column mask of pixels the scan-index field may touch on `day`.
Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> band_mask(const PatientState& state, int day,
                                                             const SynthConfig& cfg);

/// Per-patient state; deterministic in (cfg.seed, patient index, converter flag).
PatientState make_patient(const SynthConfig& cfg, int patient_index, bool converter);

/// Indices of converter patients: exactly floor(n * f + 0.5) of them.
std::vector<bool> converter_flags(const SynthConfig& cfg);

struct Cohort {
  cohort::CohortManifest manifest;
  std::vector<PatientState> states;
};

/// Builds states and the manifest without touching the disk.
Cohort plan_cohort(const SynthConfig& cfg);

/// Writes images/, manifest.json and truth.json into `out_dir`.
Cohort generate_cohort(const SynthConfig& cfg, const std::filesystem::path& out_dir);

nlohmann::json truth_json(const std::vector<PatientState>& states);

}  // namespace tinc::synth
