#include "tinc/cohort.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <set>

namespace tinc::cohort {

using nlohmann::json;

namespace {

std::string laterality_str(Laterality l) { return l == Laterality::left ? "left" : "right"; }

Laterality laterality_from(const std::string& s) {
  if (s == "left") return Laterality::left;
  if (s == "right") return Laterality::right;
  throw ValidationError("laterality must be 'left' or 'right', got '" + s + "'");
}

void reject_unknown_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ValidationError(where + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }))
      throw ValidationError("unknown key '" + key + "' in " + where);
  }
}

template <typename T>
T required(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw ValidationError("missing key '" + std::string(key) + "' in " + where);
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ValidationError("bad value for '" + std::string(key) + "' in " + where + ": " + e.what());
  }
}

}  // namespace

std::string eye_id(const PatientRecord& p, const EyeRecord& e) {
  return p.id + (e.laterality == Laterality::left ? "/L" : "/R");
}

void CohortManifest::validate() const {
  std::set<std::string> patient_ids;
  std::set<std::string> scan_refs;
  for (const auto& p : patients) {
    if (p.id.empty()) throw ValidationError("patient with empty id");
    if (!patient_ids.insert(p.id).second) throw ValidationError("duplicate patient id " + p.id);
    std::set<Laterality> seen;
    for (const auto& e : p.eyes) {
      const auto eid = eye_id(p, e);
      if (!seen.insert(e.laterality).second) throw ValidationError("duplicate eye " + eid);
      if (e.visits.empty()) throw ValidationError("eye " + eid + " has no visits");
      for (std::size_t v = 0; v < e.visits.size(); ++v) {
        if (v > 0 && e.visits[v].day <= e.visits[v - 1].day)
          throw ValidationError("visit days not strictly increasing for eye " + eid);
        if (e.visits[v].scans.empty()) throw ValidationError("visit without scans for eye " + eid);
        for (const auto& s : e.visits[v].scans)
          if (!scan_refs.insert(s).second) throw ValidationError("duplicate scan reference " + s);
      }
      if (e.conversion_day && *e.conversion_day < e.visits.front().day)
        throw ValidationError("conversion_day before first visit for eye " + eid);
    }
  }
}

json to_json(const CohortManifest& m) {
  json patients = json::array();
  for (const auto& p : m.patients) {
    json eyes = json::array();
    for (const auto& e : p.eyes) {
      json visits = json::array();
      for (const auto& v : e.visits) visits.push_back({{"day", v.day}, {"volume_id", v.volume_id}, {"scans", v.scans}});
      json je = {{"laterality", laterality_str(e.laterality)}, {"visits", visits}};
      je["conversion_day"] = e.conversion_day ? json(*e.conversion_day) : json(nullptr);
      eyes.push_back(je);
    }
    patients.push_back({{"id", p.id}, {"eyes", eyes}});
  }
  return json{{"patients", patients}};
}

CohortManifest manifest_from_json(const json& j, std::filesystem::path root) {
  reject_unknown_keys(j, {"patients"}, "manifest");
  CohortManifest m;
  m.root = std::move(root);
  if (!j.contains("patients") || !j["patients"].is_array()) throw ValidationError("manifest.patients must be an array");
  for (const auto& jp : j["patients"]) {
    reject_unknown_keys(jp, {"id", "eyes"}, "patient");
    PatientRecord p;
    p.id = required<std::string>(jp, "id", "patient");
    const std::string where = "patient " + p.id;
    if (!jp.contains("eyes") || !jp["eyes"].is_array()) throw ValidationError(where + ": eyes must be an array");
    for (const auto& je : jp["eyes"]) {
      reject_unknown_keys(je, {"laterality", "conversion_day", "visits"}, where + " eye");
      EyeRecord e;
      e.laterality = laterality_from(required<std::string>(je, "laterality", where));
      if (je.contains("conversion_day") && !je["conversion_day"].is_null())
        e.conversion_day = required<int>(je, "conversion_day", where);
      if (!je.contains("visits") || !je["visits"].is_array()) throw ValidationError(where + ": visits must be an array");
      for (const auto& jv : je["visits"]) {
        reject_unknown_keys(jv, {"day", "volume_id", "scans"}, where + " visit");
        VisitRecord v;
        v.day = required<int>(jv, "day", where);
        v.volume_id = required<std::string>(jv, "volume_id", where);
        v.scans = required<std::vector<std::string>>(jv, "scans", where);
        e.visits.push_back(std::move(v));
      }
      p.eyes.push_back(std::move(e));
    }
    m.patients.push_back(std::move(p));
  }
  m.validate();
  return m;
}

CohortManifest load_manifest(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot open manifest " + file.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ValidationError("manifest " + file.string() + " is not valid JSON: " + e.what());
  }
  return manifest_from_json(j, file.parent_path());
}

void save_manifest(const CohortManifest& m, const std::filesystem::path& file) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw IoError("cannot write manifest " + file.string());
  out << to_json(m).dump(1) << '\n';
  if (!out) throw IoError("write failed for " + file.string());
}

double scale_time_delta(int gap_days, int v_min, int v_max) {
  if (v_min >= v_max) throw ValidationError("scaler bounds require v_min < v_max");
  const double s = static_cast<double>(gap_days - v_min) / static_cast<double>(v_max - v_min);
  return std::clamp(s, 0.0, 1.0);
}

double scale_time_signed(int v1_day, int v2_day, int v_max) {
  return static_cast<double>(v1_day - v2_day) / static_cast<double>(v_max);
}

bool label_conversion(int scan_day, std::optional<int> conversion_day, int window_days) {
  if (!conversion_day) return false;
  const int gap = *conversion_day - scan_day;
  return gap > 0 && gap <= window_days;
}

// ---------------------------------------------------------------------------

std::string SplitAssignment::split_of(const std::string& eye) const {
  auto in = [&](const std::vector<std::string>& v) { return std::binary_search(v.begin(), v.end(), eye); };
  if (in(train)) return "train";
  if (in(val)) return "val";
  if (in(test)) return "test";
  return "";
}

SplitAssignment split_patients(const CohortManifest& m, SplitRatios ratios, std::uint64_t seed, bool group_by_patient) {
  const double sum = ratios.train + ratios.val + ratios.test;
  if (ratios.train < 0 || ratios.val < 0 || ratios.test < 0 || std::abs(sum - 1.0) > 1e-9)
    throw ValidationError("split ratios must be non-negative and sum to 1");

  // A unit is a patient (grouped) or a single eye.
  struct Unit {
    std::vector<std::string> eyes;
    bool converter = false;
  };
  std::vector<Unit> units;
  for (const auto& p : m.patients) {
    if (group_by_patient) {
      Unit u;
      for (const auto& e : p.eyes) {
        u.eyes.push_back(eye_id(p, e));
        u.converter = u.converter || e.conversion_day.has_value();
      }
      if (!u.eyes.empty()) units.push_back(std::move(u));
    } else {
      for (const auto& e : p.eyes) units.push_back({{eye_id(p, e)}, e.conversion_day.has_value()});
    }
  }

  SplitAssignment out;
  out.ratios = ratios;
  for (bool cls : {true, false}) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < units.size(); ++i)
      if (units[i].converter == cls) idx.push_back(i);
    if (idx.empty()) throw ValidationError(std::string("no ") + (cls ? "converter" : "non-converter") + " eyes to stratify");
    Rng rng = make_rng({seed, cls ? 1u : 0u, 0x5917u});
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto n = static_cast<double>(idx.size());
    const auto n_train = static_cast<std::size_t>(std::llround(n * ratios.train));
    const auto n_val = std::min(idx.size() - n_train, static_cast<std::size_t>(std::llround(n * ratios.val)));
    for (std::size_t k = 0; k < idx.size(); ++k) {
      auto& dst = k < n_train ? out.train : (k < n_train + n_val ? out.val : out.test);
      for (const auto& e : units[idx[k]].eyes) dst.push_back(e);
    }
  }
  for (auto* v : {&out.train, &out.val, &out.test}) std::sort(v->begin(), v->end());
  return out;
}

json to_json(const SplitAssignment& s) {
  return json{{"train", s.train},
              {"val", s.val},
              {"test", s.test},
              {"ratios", {s.ratios.train, s.ratios.val, s.ratios.test}}};
}

std::vector<LabeledScan> supervised_scans(const CohortManifest& m, const std::vector<std::string>& eyes,
                                          int window_days) {
  std::set<std::string> wanted(eyes.begin(), eyes.end());
  std::vector<LabeledScan> out;
  for (const auto& p : m.patients) {
    for (const auto& e : p.eyes) {
      const auto eid = eye_id(p, e);
      if (!wanted.count(eid)) continue;
      for (const auto& v : e.visits) {
        // Post-conversion scans show late disease and are not part of the task.
        if (e.conversion_day && v.day >= *e.conversion_day) continue;
        const bool label = label_conversion(v.day, e.conversion_day, window_days);
        for (const auto& s : v.scans) out.push_back({eid, v.volume_id, (m.root / s).string(), v.day, label});
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

PairSampler::PairSampler(const CohortManifest& manifest, SamplerConfig cfg) : manifest_(&manifest), cfg_(cfg) {
  if (cfg_.gap_min_days > cfg_.gap_max_days) throw ValidationError("gap range is empty");
  if (cfg_.dv_min_days >= cfg_.dv_max_days) throw ValidationError("dv scaler bounds require v_min < v_max");
  for (std::size_t p = 0; p < manifest.patients.size(); ++p) {
    const auto& pr = manifest.patients[p];
    for (std::size_t e = 0; e < pr.eyes.size(); ++e) {
      const auto& visits = pr.eyes[e].visits;
      EligibleEye ee{p, e, {}};
      if (cfg_.mode == PairMode::same_scan) {
        for (std::size_t i = 0; i < visits.size(); ++i) ee.pairs.push_back({i, i});
      } else {
        for (std::size_t i = 0; i < visits.size(); ++i)
          for (std::size_t j = 0; j < visits.size(); ++j) {
            if (i == j) continue;
            const int gap = std::abs(visits[i].day - visits[j].day);
            if (gap >= cfg_.gap_min_days && gap <= cfg_.gap_max_days) ee.pairs.push_back({i, j});
          }
      }
      if (ee.pairs.empty()) {
        skipped_.push_back(eye_id(pr, pr.eyes[e]));
        std::cerr << "warning: eye " << skipped_.back() << " has no visit pair with gap in [" << cfg_.gap_min_days
                  << ", " << cfg_.gap_max_days << "] days; skipped\n";
        continue;
      }
      eyes_.push_back(std::move(ee));
    }
  }
  if (eyes_.empty()) throw ValidationError("no eye has an eligible visit pair");
}

std::size_t PairSampler::eye_at(std::uint64_t seed, std::uint64_t epoch, std::uint64_t slot) const {
  const std::size_t n = eyes_.size();
  const std::uint64_t cycle = slot / n;
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng = make_rng({seed, epoch, cycle, 0xE7Eu});
  std::shuffle(perm.begin(), perm.end(), rng);
  return perm[slot % n];
}

std::vector<PairSpec> PairSampler::sample(std::size_t count, std::size_t batch_size, std::uint64_t seed,
                                          std::uint64_t epoch, std::uint64_t batch) const {
  if (count > batch_size) throw ValidationError("pair count exceeds batch size");
  std::vector<PairSpec> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint64_t slot = batch * batch_size + i;
    const auto& ee = eyes_[eye_at(seed, epoch, slot)];
    Rng rng = make_rng({seed, epoch, batch, i, 0xFA1Bu});
    const auto& pr = manifest_->patients[ee.patient];
    const auto& eye = pr.eyes[ee.eye];
    const auto vp = ee.pairs[uniform_index(rng, ee.pairs.size())];
    const auto& v1 = eye.visits[vp[0]];
    const auto& v2 = eye.visits[vp[1]];
    PairSpec ps;
    ps.first = {ee.patient, ee.eye, vp[0], uniform_index(rng, v1.scans.size())};
    ps.second = {ee.patient, ee.eye, vp[1], cfg_.mode == PairMode::same_scan ? ps.first.scan : uniform_index(rng, v2.scans.size())};
    ps.first_day = v1.day;
    ps.second_day = v2.day;
    ps.dv = scale_time_delta(std::abs(v1.day - v2.day), cfg_.dv_min_days, cfg_.dv_max_days);
    ps.delta_signed = scale_time_signed(v1.day, v2.day, cfg_.dv_max_days);
    ps.patient_id = pr.id;
    out.push_back(std::move(ps));
  }
  return out;
}

}  // namespace tinc::cohort
