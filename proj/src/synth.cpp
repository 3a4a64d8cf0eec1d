#include "tinc/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>

namespace tinc::synth {

namespace {

constexpr double kLesionDepth = 6.0;  // lesion centre, rows above the layer
constexpr double kLesionAmplitude = 0.45;
constexpr double kThicknessGain = 10.0;

// Saturates to exactly 0 or 1 where the logistic is within rounding of it.
double soft_step(double u) {
  if (u > 20.0) return 1.0;
  if (u < -20.0) return 0.0;
  return 1.0 / (1.0 + std::exp(-2.0 * u));
}

double lesion_radius_x(int width) { return 8.0 * width / 128.0; }
double lesion_radius_y(int height) { return 2.5 * height / 128.0; }

// Lesion amplitude profile across the slices of one volume.
// Rows (relative to the layer) that the band, lesion and scan-index terms may touch.
bool in_band_region(double d, double thickness) { return d >= -thickness - 8.0 && d <= 4.0; }

double slice_profile(int scan_index, int scans_per_visit) {
  const double centre = (scans_per_visit - 1) / 2.0;
  return 1.0 - 0.08 * std::abs(scan_index - centre);
}

std::string zero_pad(int v, int width) {
  std::string s = std::to_string(v);
  return std::string(static_cast<std::size_t>(std::max(0, width - static_cast<int>(s.size()))), '0') + s;
}

}  // namespace

void SynthConfig::validate() const {
  if (n_patients < 1 || visits_per_eye < 1 || visit_interval_days < 1 || scans_per_visit < 1)
    throw ValidationError("synth counts must be positive");
  if (image_size[0] < 32 || image_size[1] < 32) throw ValidationError("synthetic images must be at least 32x32");
  if (converter_fraction < 0.0 || converter_fraction > 1.0) throw ValidationError("converter_fraction must be in [0,1]");
  if (noise_sigma < 0.0) throw ValidationError("noise_sigma must be non-negative");
  if (!(progression_rate_range[0] > 0.0 && progression_rate_range[0] < progression_rate_range[1]))
    throw ValidationError("progression_rate_range must satisfy 0 < lo < hi");
  if (converter_fraction > 0.0 && study_end_day() < 60)
    throw ValidationError("study window too short to place conversions");
}

double PatientState::progression(int day) const {
  if (knots.empty()) return 0.0;
  if (day <= knots.front().first) return knots.front().second;
  for (std::size_t k = 1; k < knots.size(); ++k) {
    const auto [d1, s1] = knots[k];
    if (day <= d1) {
      const auto [d0, s0] = knots[k - 1];
      return s0 + (s1 - s0) * static_cast<double>(day - d0) / static_cast<double>(d1 - d0);
    }
  }
  return knots.back().second;
}

int visit_shift(const PatientState& state, int day) {
  Rng rng = make_rng({state.base_texture_seed, static_cast<std::uint64_t>(day), 0x5A1Fu});
  return std::uniform_int_distribution<int>(-4, 4)(rng);
}

augment::Quadratic visit_contour(const PatientState& state, int day) {
  auto q = state.anatomy.contour;
  q.c += visit_shift(state, day);
  return q;
}

RenderedScan render_scan(const PatientState& state, int day, int scan_index, const SynthConfig& cfg) {
  const int h = cfg.image_size[0], w = cfg.image_size[1];
  const auto& an = state.anatomy;
  const double s = state.progression(day);
  const auto contour = visit_contour(state, day);
  const double thickness = an.base_thickness + kThicknessGain * s * h / 128.0;
  const double rx = lesion_radius_x(w), ry = lesion_radius_y(h);
  const double lesion_amp = kLesionAmplitude * s * slice_profile(scan_index, cfg.scans_per_visit);
  const double two_pi = 2.0 * std::numbers::pi;

  Rng noise_rng = make_rng({state.base_texture_seed, static_cast<std::uint64_t>(day),
                            static_cast<std::uint64_t>(scan_index), 0x901Eu});
  std::normal_distribution<double> noise(0.0, 1.0);

  // Terms that depend on the column only.
  std::vector<double> cy(static_cast<std::size_t>(w)), col_tex(cy.size()), lesion_x(cy.size());
  for (int x = 0; x < w; ++x) {
    const auto i = static_cast<std::size_t>(x);
    cy[i] = contour(x);
    col_tex[i] = 0.03 * std::sin(two_pi * x / (w / 3.0) + an.texture_phase[1]) +
                 0.02 * std::sin(two_pi * x / (w / 4.0) + 0.9 * scan_index + an.texture_phase[2]);
    const double dx = x - an.lesion_x;
    lesion_x[i] = lesion_amp * std::exp(-dx * dx / (2 * rx * rx));
  }

  Matrix img(h, w);
  for (int x = 0; x < w; ++x) {
    const auto i = static_cast<std::size_t>(x);
    for (int y = 0; y < h; ++y) {
      const double d = y - cy[i];  // positive below the layer
      const bool inside = in_band_region(d, thickness);
      const double band = inside ? soft_step(d + thickness) * soft_step(-d - 1.0) : 0.0;
      double retina = 0.0;
      if (band > 0.0) {
        const double texture = 0.05 * std::sin(two_pi * (-d) / an.texture_period + an.texture_phase[0]);
        retina = band * (an.base_intensity + texture + col_tex[i]);
      }
      if (inside && lesion_x[i] > 1e-12) {
        const double dy = d + kLesionDepth;
        retina += lesion_x[i] * std::exp(-dy * dy / (2 * ry * ry));
      }
      const double layer = std::abs(d) < 25.0 ? 0.95 * soft_step(d + 1.5) * soft_step(1.5 - d) : 0.0;
      const double below = d > 0.0 ? 0.15 * std::exp(-d / 10.0) * soft_step(d - 1.5) : 0.0;
      double v = std::max(retina, layer) + below + 0.05;
      if (cfg.noise_sigma > 0.0) v += cfg.noise_sigma * noise(noise_rng);
      img(y, x) = std::clamp(v, 0.0, 1.0);
    }
  }
  return {std::move(img), contour};
}

double lesion_region_mean(const Matrix& image, const PatientState& state, int day) {
  const auto contour = visit_contour(state, day);
  const auto& an = state.anatomy;
  const double rx = lesion_radius_x(static_cast<int>(image.cols()));
  const auto x0 = static_cast<Eigen::Index>(std::lround(an.lesion_x - rx / 2));
  const auto x1 = static_cast<Eigen::Index>(std::lround(an.lesion_x + rx / 2));
  double sum = 0.0;
  int count = 0;
  for (Eigen::Index x = std::max<Eigen::Index>(0, x0); x <= std::min(image.cols() - 1, x1); ++x) {
    const auto yc = static_cast<Eigen::Index>(std::lround(contour(static_cast<double>(x)) - kLesionDepth));
    for (Eigen::Index y = yc - 2; y <= yc + 2; ++y) {
      if (y < 0 || y >= image.rows()) continue;
      sum += image(y, x);
      ++count;
    }
  }
  return count ? sum / count : 0.0;
}

Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> band_mask(const PatientState& state, int day,
                                                             const SynthConfig& cfg) {
  const int h = cfg.image_size[0], w = cfg.image_size[1];
  const auto contour = visit_contour(state, day);
  const double thickness = state.anatomy.base_thickness + kThicknessGain * state.progression(day) * h / 128.0;
  Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> mask(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      mask(y, x) = in_band_region(y - contour(x), thickness);
    }
  return mask;
}

std::vector<bool> converter_flags(const SynthConfig& cfg) {
  const auto n = static_cast<std::size_t>(cfg.n_patients);
  const auto n_conv = static_cast<std::size_t>(std::floor(cfg.n_patients * cfg.converter_fraction + 0.5));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = make_rng({cfg.seed, 0xC0417u});
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<bool> flags(n, false);
  for (std::size_t k = 0; k < std::min(n_conv, n); ++k) flags[order[k]] = true;
  return flags;
}

PatientState make_patient(const SynthConfig& cfg, int patient_index, bool converter) {
  PatientState st;
  st.patient_id = "P" + zero_pad(patient_index + 1, 4);
  st.base_texture_seed = derive_seed({cfg.seed, static_cast<std::uint64_t>(patient_index), 0xA7u});
  st.converter = converter;
  Rng rng = make_rng({st.base_texture_seed, 1u});
  const int h = cfg.image_size[0], w = cfg.image_size[1];
  const double sx = w / 128.0, sy = h / 128.0;

  auto& an = st.anatomy;
  const double vertex_x = uniform(rng, 0.3, 0.7) * w;
  const double vertex_y = uniform(rng, 0.58, 0.68) * h;
  const double a = uniform(rng, 0.0008, 0.0025) * sy / (sx * sx) * (uniform(rng, 0.0, 1.0) < 0.5 ? -1.0 : 1.0);
  an.contour = {a, -2.0 * a * vertex_x, vertex_y + a * vertex_x * vertex_x};
  an.base_thickness = uniform(rng, 22.0, 30.0) * sy;
  an.base_intensity = uniform(rng, 0.25, 0.35);
  an.lesion_x = uniform(rng, 0.35, 0.65) * w;
  for (auto& p : an.texture_phase) p = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  an.texture_period = uniform(rng, 5.0, 9.0) * sy;

  const auto [lo, hi] = cfg.progression_rate_range;
  const double mid = 0.5 * (lo + hi);
  const int end = cfg.study_end_day();
  double s0 = uniform(rng, 0.05, 0.25);
  if (converter) {
    const int conv = static_cast<int>(std::lround(uniform(rng, 0.3, 0.9) * end));
    const double r_post = uniform(rng, mid, hi);
    const double r_pre = uniform(rng, 0.1, 0.25) * lo;
    // Knot k where s0 + r_pre k + r_post (conv - k) = threshold.
    double k = (kConversionThreshold - s0 - r_post * conv) / (r_pre - r_post);
    if (k < 0.0) {
      k = 0.0;
      s0 = std::max(0.0, kConversionThreshold - r_post * conv);
    }
    const int knot = std::min(conv - 1, static_cast<int>(std::floor(k)));
    const double s_knot = knot > 0 ? s0 + r_pre * knot : s0;
    const double slope = (kConversionThreshold - s_knot) / static_cast<double>(conv - knot);
    st.knots.push_back({0, s0});
    if (knot > 0) st.knots.push_back({knot, s_knot});
    st.knots.push_back({conv, kConversionThreshold});
    const int full_day = conv + static_cast<int>(std::ceil((1.0 - kConversionThreshold) / slope));
    if (full_day < end) {
      st.knots.push_back({full_day, 1.0});
    } else if (end > conv) {
      st.knots.push_back({end, kConversionThreshold + slope * (end - conv)});
    }
    st.conversion_day = conv;
  } else {
    double r_post = uniform(rng, lo, mid);
    double r_pre = 0.25 * r_post;
    const int knot = static_cast<int>(std::lround(uniform(rng, 0.0, 1.0) * end));
    const double rise = r_pre * knot + r_post * (end - knot);
    if (s0 + rise > 0.45) {
      const double f = (0.45 - s0) / rise;
      r_pre *= f;
      r_post *= f;
    }
    st.knots.push_back({0, s0});
    if (knot > 0 && knot < end) st.knots.push_back({knot, s0 + r_pre * knot});
    if (end > 0) st.knots.push_back({end, s0 + r_pre * knot + r_post * (end - knot)});
  }
  return st;
}

Cohort plan_cohort(const SynthConfig& cfg) {
  cfg.validate();
  Cohort c;
  const auto flags = converter_flags(cfg);
  for (int p = 0; p < cfg.n_patients; ++p) {
    auto st = make_patient(cfg, p, flags[static_cast<std::size_t>(p)]);
    cohort::PatientRecord pr;
    pr.id = st.patient_id;
    cohort::EyeRecord eye;
    eye.laterality = cohort::Laterality::right;
    eye.conversion_day = st.conversion_day;
    for (int v = 0; v < cfg.visits_per_eye; ++v) {
      cohort::VisitRecord vr;
      vr.day = v * cfg.visit_interval_days;
      vr.volume_id = st.patient_id + "_d" + zero_pad(vr.day, 4);
      for (int k = 0; k < cfg.scans_per_visit; ++k)
        vr.scans.push_back("images/" + st.patient_id + "/d" + zero_pad(vr.day, 4) + "_s" + std::to_string(k) + ".pgm");
      eye.visits.push_back(std::move(vr));
    }
    pr.eyes.push_back(std::move(eye));
    c.manifest.patients.push_back(std::move(pr));
    c.states.push_back(std::move(st));
  }
  c.manifest.validate();
  return c;
}

Cohort generate_cohort(const SynthConfig& cfg, const std::filesystem::path& out_dir) {
  Cohort c = plan_cohort(cfg);
  c.manifest.root = out_dir;
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "images", ec);
  if (ec) throw IoError("cannot create " + (out_dir / "images").string() + ": " + ec.message());
  for (std::size_t p = 0; p < c.states.size(); ++p) {
    const auto& st = c.states[p];
    const auto dir = out_dir / "images" / st.patient_id;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    for (const auto& visit : c.manifest.patients[p].eyes.front().visits)
      for (std::size_t k = 0; k < visit.scans.size(); ++k) {
        const auto scan = render_scan(st, visit.day, static_cast<int>(k), cfg);
        augment::write_pgm(out_dir / visit.scans[k], scan.image);
      }
  }
  cohort::save_manifest(c.manifest, out_dir / "manifest.json");
  std::ofstream truth(out_dir / "truth.json", std::ios::binary);
  if (!truth) throw IoError("cannot write " + (out_dir / "truth.json").string());
  truth << truth_json(c.states).dump(1) << '\n';
  return c;
}

nlohmann::json truth_json(const std::vector<PatientState>& states) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& st : states) {
    nlohmann::json knots = nlohmann::json::array();
    for (const auto& [d, s] : st.knots) knots.push_back({d, s});
    j[st.patient_id + "/R"] = {{"knots", knots},
                               {"conversion_day", st.conversion_day ? nlohmann::json(*st.conversion_day) : nlohmann::json(nullptr)}};
  }
  return j;
}

}  // namespace tinc::synth
