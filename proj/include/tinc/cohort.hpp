#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tinc/common.hpp"

namespace tinc::cohort {

enum class Laterality { left, right };

struct VisitRecord {
  int day = 0;
  std::string volume_id;
  std::vector<std::string> scans;  // relative to the manifest directory
};

struct EyeRecord {
  Laterality laterality = Laterality::right;
  std::optional<int> conversion_day;
  std::vector<VisitRecord> visits;
};

struct PatientRecord {
  std::string id;
  std::vector<EyeRecord> eyes;
};

struct CohortManifest {
  std::vector<PatientRecord> patients;
  std::filesystem::path root;  // directory scan paths are resolved against

  /// Throws ValidationError naming the first violated invariant.
  void validate() const;
};

/// "<patient>/<L|R>".
std::string eye_id(const PatientRecord& p, const EyeRecord& e);

nlohmann::json to_json(const CohortManifest& m);
CohortManifest manifest_from_json(const nlohmann::json& j, std::filesystem::path root);
CohortManifest load_manifest(const std::filesystem::path& file);
void save_manifest(const CohortManifest& m, const std::filesystem::path& file);

/// Min-max scaling of an absolute gap, clamped to [0,1].
double scale_time_delta(int gap_days, int v_min, int v_max);
/// (v1 - v2) / v_max, in input order.
double scale_time_signed(int v1_day, int v2_day, int v_max);

inline constexpr int kDefaultWindowDays = 183;

/// True iff the eye converts strictly after the scan and within the window.
bool label_conversion(int scan_day, std::optional<int> conversion_day, int window_days = kDefaultWindowDays);

// ---------------------------------------------------------------------------
// Splits

struct SplitRatios {
  double train = 0.6;
  double val = 0.2;
  double test = 0.2;
};

struct SplitAssignment {
  std::vector<std::string> train, val, test;  // sorted eye ids
  SplitRatios ratios;

  /// "train" | "val" | "test" | "" when the eye is not assigned.
  std::string split_of(const std::string& eye) const;
};

/// Stratified by converter status. Patients are kept whole when
/// `group_by_patient` is set; class of a patient is "converter" if any eye converts.
SplitAssignment split_patients(const CohortManifest& m, SplitRatios ratios, std::uint64_t seed,
                               bool group_by_patient = true);

nlohmann::json to_json(const SplitAssignment& s);

// ---------------------------------------------------------------------------
// Supervised scan set

struct LabeledScan {
  std::string eye;
  std::string volume_id;
  std::string path;  // absolute
  int day = 0;
  bool label = false;
};

/// Scans of the given eyes before their conversion day, labelled by label_conversion.
std::vector<LabeledScan> supervised_scans(const CohortManifest& m, const std::vector<std::string>& eyes,
                                          int window_days = kDefaultWindowDays);

// ---------------------------------------------------------------------------
// Pair sampling

struct ScanRef {
  std::size_t patient = 0;
  std::size_t eye = 0;
  std::size_t visit = 0;
  std::size_t scan = 0;
};

/// One sampled pair before image loading.
struct PairSpec {
  ScanRef first;
  ScanRef second;
  int first_day = 0;
  int second_day = 0;
  double dv = 0.0;
  double delta_signed = 0.0;
  std::string patient_id;
};

enum class PairMode {
  two_visits,  // scans from different visits of one eye
  same_scan,   // both views from a single scan (dv = 0)
};

struct SamplerConfig {
  int gap_min_days = 90;
  int gap_max_days = 540;
  int dv_min_days = 0;
  int dv_max_days = 540;
  PairMode mode = PairMode::two_visits;
};

/// Seeded pair sampler over an immutable manifest. Every draw is a pure
/// function of (seed, epoch, batch index), so batches can be produced in any
/// order or in parallel.
class PairSampler {
 public:
  PairSampler(const CohortManifest& manifest, SamplerConfig cfg);

  std::size_t eligible_eye_count() const { return eyes_.size(); }
  const std::vector<std::string>& skipped_eyes() const { return skipped_; }

  /// Pairs for batch `batch` of `epoch`, where every batch holds `batch_size`
  /// slots of the epoch-wide eye sequence and this call returns `count` pairs.
  std::vector<PairSpec> sample(std::size_t count, std::size_t batch_size, std::uint64_t seed, std::uint64_t epoch,
                               std::uint64_t batch) const;

  /// Ordered visit pairs (i, j) of eligible eye `k` whose gap lies in range.
  const std::vector<std::array<std::size_t, 2>>& visit_pairs(std::size_t k) const { return eyes_[k].pairs; }

 private:
  struct EligibleEye {
    std::size_t patient;
    std::size_t eye;
    std::vector<std::array<std::size_t, 2>> pairs;
  };

  std::size_t eye_at(std::uint64_t seed, std::uint64_t epoch, std::uint64_t slot) const;

  const CohortManifest* manifest_;
  SamplerConfig cfg_;
  std::vector<EligibleEye> eyes_;
  std::vector<std::string> skipped_;
};

}  // namespace tinc::cohort
