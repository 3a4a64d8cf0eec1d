#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "tinc/augment.hpp"
#include "tinc/synth.hpp"

using namespace tinc;
using namespace tinc::augment;

namespace {

Image ramp(Eigen::Index h, Eigen::Index w) {
  Image img;
  img.pixels.resize(h, w);
  for (Eigen::Index y = 0; y < h; ++y)
    for (Eigen::Index x = 0; x < w; ++x) img.pixels(y, x) = static_cast<double>((y * 7 + x * 3) % 23) / 22.0;
  return img;
}

/// Dark image with a bright 3-pixel line along `contour`.
Image curved_layer(Eigen::Index h, Eigen::Index w, const Quadratic& contour) {
  Image img;
  img.pixels = Matrix::Constant(h, w, 0.1);
  for (Eigen::Index x = 0; x < w; ++x) {
    const double r = contour(static_cast<double>(x));
    for (Eigen::Index y = 0; y < h; ++y) {
      const double d = static_cast<double>(y) - r;
      img.pixels(y, x) += 0.8 * std::exp(-d * d / 2.0);
    }
  }
  return img;
}

/// Least squares via the 3x3 normal equations, solved by Cramer's rule.
std::array<double, 3> normal_equations_fit(const std::vector<std::array<double, 2>>& pts) {
  double s[5] = {0, 0, 0, 0, 0}, t[3] = {0, 0, 0};
  for (const auto& p : pts) {
    double xp = 1.0;
    for (int k = 0; k < 5; ++k) {
      s[k] += xp;
      if (k < 3) t[k] += xp * p[1];
      xp *= p[0];
    }
  }
  // Unknowns ordered (c, b, a): M[i][j] = sum x^(i+j).
  const double m[3][3] = {{s[0], s[1], s[2]}, {s[1], s[2], s[3]}, {s[2], s[3], s[4]}};
  auto det3 = [](const double a[3][3]) {
    return a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0]) +
           a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
  };
  const double d = det3(m);
  std::array<double, 3> sol{};
  for (int c = 0; c < 3; ++c) {
    double mc[3][3];
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) mc[i][j] = j == c ? t[i] : m[i][j];
    sol[c] = det3(mc) / d;
  }
  return {sol[2], sol[1], sol[0]};
}

}  // namespace

TEST_CASE("flat contour is the identity") {
  const Image img = ramp(40, 36);
  CHECK(flatten(img, {0.0, 0.0, 5.0}).pixels == img.pixels);
}

TEST_CASE("flattening a known contour straightens the layer") {
  const Quadratic truth{0.004, -0.35, 30.0};
  const Image img = curved_layer(64, 64, truth);
  const Image flat = flatten(img, truth);
  const Quadratic refit = estimate_layer_contour(flat);
  CHECK(std::abs(refit.a) <= 1e-3);
  // The contour lands within one pixel of the centre-column row.
  const double c0 = truth(31.0);
  for (double r : detect_layer_rows(flat)) CHECK(std::abs(r - c0) <= 1.0);

  // Flattening again with the zero contour changes nothing.
  CHECK(flatten(flat, {}).pixels == flat.pixels);
}

TEST_CASE("flattening synthetic scans with the estimated contour") {
  synth::SynthConfig cfg;
  for (int p = 0; p < 5; ++p) {
    const auto st = synth::make_patient(cfg, p, p % 2 == 0);
    for (int day : {0, 240, 600}) {
      const auto scan = synth::render_scan(st, day, 1, cfg);
      Image img;
      img.pixels = scan.image;
      const Image flat = flatten(img, estimate_layer_contour(img));
      CAPTURE(p);
      CAPTURE(day);
      CHECK(std::abs(estimate_layer_contour(flat).a) <= 1e-3);
    }
  }
}

TEST_CASE("contour out of range") {
  const Image img = ramp(32, 32);
  CHECK_THROWS_WITH_AS(flatten(img, {1.0, 0.0, 0.0}), doctest::Contains("contour out of range"), ValidationError);
}

TEST_CASE("quadratic fit") {
  std::vector<std::array<double, 2>> pts;
  for (int x = -5; x <= 5; ++x) pts.push_back({static_cast<double>(x), 2.0 * x * x + 3.0});
  auto q = fit_quadratic(pts);
  CHECK(q.a == doctest::Approx(2.0).epsilon(1e-9));
  CHECK(std::abs(q.b) <= 1e-9);
  CHECK(q.c == doctest::Approx(3.0).epsilon(1e-9));

  pts.clear();
  for (int x = 0; x < 10; ++x) pts.push_back({static_cast<double>(x), -0.5 * x + 4.0});
  q = fit_quadratic(pts);
  CHECK(std::abs(q.a) <= 1e-9);
  CHECK(q.b == doctest::Approx(-0.5).epsilon(1e-9));
  CHECK(q.c == doctest::Approx(4.0).epsilon(1e-9));

  const std::vector<std::array<double, 2>> two{{1.0, 1.0}, {1.0, 2.0}, {3.0, 0.0}, {3.0, 1.0}};
  CHECK_THROWS_AS(fit_quadratic(two), ValidationError);
}

TEST_CASE("noisy quadratic fit matches the least-squares oracle") {
  const double sigma = 0.5;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng = make_rng({seed});
    std::normal_distribution<double> noise(0.0, sigma);
    std::vector<std::array<double, 2>> pts;
    for (int i = 0; i < 100; ++i) {
      const double x = i * 0.1 - 5.0;
      pts.push_back({x, 0.7 * x * x - 1.5 * x + 2.0 + noise(rng)});
    }
    const auto q = fit_quadratic(pts);
    const auto o = normal_equations_fit(pts);
    CHECK(q.a == doctest::Approx(o[0]).epsilon(1e-8));
    CHECK(q.b == doctest::Approx(o[1]).epsilon(1e-8));
    CHECK(q.c == doctest::Approx(o[2]).epsilon(1e-8));

    // Standard errors from sigma^2 (X^T X)^{-1}.
    Matrix x(100, 3);
    for (int i = 0; i < 100; ++i) x.row(i) << pts[i][0] * pts[i][0], pts[i][0], 1.0;
    const Matrix cov = sigma * sigma * (x.transpose() * x).inverse();
    CHECK(std::abs(q.a - 0.7) <= 3.0 * std::sqrt(cov(0, 0)));
    CHECK(std::abs(q.b + 1.5) <= 3.0 * std::sqrt(cov(1, 1)));
    CHECK(std::abs(q.c - 2.0) <= 3.0 * std::sqrt(cov(2, 2)));
  }
}

TEST_CASE("crop area ratios stay in range") {
  Rng rng = make_rng({42});
  for (int i = 0; i < 1000; ++i) {
    const auto r = sample_crop(128, 128, {0.4, 0.8}, {3.0 / 4.0, 4.0 / 3.0}, rng);
    CHECK(r.area_ratio >= 0.4);
    CHECK(r.area_ratio <= 0.8);
    CHECK(r.top + r.height <= 128);
    CHECK(r.left + r.width <= 128);
    CHECK(r.area_ratio == static_cast<double>(r.height * r.width) / (128.0 * 128.0));
  }
  // Non-square source with an aspect range that often misses: the fallback must stay in range too.
  for (int i = 0; i < 200; ++i) {
    const auto r = sample_crop(64, 40, {0.5, 0.55}, {2.0, 3.0}, rng);
    CHECK(r.area_ratio >= 0.5);
    CHECK(r.area_ratio <= 0.55);
  }
  CHECK_THROWS_AS(sample_crop(32, 32, {0.0, 0.5}, {1.0, 1.0}, rng), ValidationError);
  CHECK_THROWS_AS(sample_crop(32, 32, {0.5, 0.4}, {1.0, 1.0}, rng), ValidationError);
}

TEST_CASE("full-area crop is a plain resize") {
  const Image img = ramp(48, 48);
  Rng rng = make_rng({1});
  const Image out = random_resized_crop(img, {1.0, 1.0}, {1.0, 1.0}, {32, 32}, rng);
  CHECK(out.crop_area_ratio == 1.0);
  CHECK(out.pixels == resize_bilinear(img, 32, 32).pixels);
  // Same size resize returns the input.
  CHECK(resize_bilinear(img, 48, 48).pixels.isApprox(img.pixels, 1e-15));
}

TEST_CASE("crops are deterministic in the seed") {
  Rng a = make_rng({9, 1}), b = make_rng({9, 1}), c = make_rng({9, 2});
  const auto ra = sample_crop(100, 80, {0.4, 0.8}, {0.75, 4.0 / 3.0}, a);
  const auto rb = sample_crop(100, 80, {0.4, 0.8}, {0.75, 4.0 / 3.0}, b);
  CHECK(ra.top == rb.top);
  CHECK(ra.left == rb.left);
  CHECK(ra.height == rb.height);
  CHECK(ra.width == rb.width);
  int differs = 0;
  for (int i = 0; i < 10; ++i) {
    const auto x = sample_crop(100, 80, {0.4, 0.8}, {0.75, 4.0 / 3.0}, a);
    const auto y = sample_crop(100, 80, {0.4, 0.8}, {0.75, 4.0 / 3.0}, c);
    differs += x.top != y.top || x.height != y.height;
  }
  CHECK(differs > 0);
}

TEST_CASE("ssl augmentation contract") {
  synth::SynthConfig cfg;
  const auto st = synth::make_patient(cfg, 0, true);
  Image img;
  img.pixels = synth::render_scan(st, 300, 0, cfg).image;
  AugmentPolicy pol;
  CHECK_NOTHROW(pol.validate());
  for (std::uint64_t s = 0; s < 1000; ++s) {
    Rng rng = make_rng({s});
    const Image out = ssl_augment(img, pol, rng);
    REQUIRE(out.height() == 32);
    REQUIRE(out.width() == 32);
    CHECK(out.pixels.minCoeff() >= 0.0);
    CHECK(out.pixels.maxCoeff() <= 1.0);
    CHECK(out.crop_area_ratio >= 0.4);
    CHECK(out.crop_area_ratio <= 0.8);
  }
  Rng r1 = make_rng({5}), r2 = make_rng({5});
  CHECK(ssl_augment(img, pol, r1).pixels == ssl_augment(img, pol, r2).pixels);

  AugmentPolicy plain = pol;
  plain.crop_area_range = {1.0, 1.0};
  plain.aspect_range = {1.0, 1.0};
  plain.hflip_prob = 0.0;
  plain.jitter = 0.0;
  Rng r3 = make_rng({6});
  CHECK(ssl_augment(img, plain, r3).pixels == resize_bilinear(img, 32, 32).pixels);

  AugmentPolicy bad = pol;
  bad.crop_area_range = {0.0, 0.5};
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  bad = pol;
  bad.hflip_prob = 1.5;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("supervised augmentation contract") {
  const Image img = ramp(64, 64);
  AugmentPolicy pol;
  pol.mode = AugmentMode::supervised;
  for (std::uint64_t s = 0; s < 1000; ++s) {
    Rng rng = make_rng({s, 7});
    const Image out = supervised_augment(img, pol, rng);
    CHECK(out.rotation_deg >= -10.0);
    CHECK(out.rotation_deg <= 10.0);
    CHECK(out.height() == 32);
    CHECK(out.pixels.minCoeff() >= 0.0);
    CHECK(out.pixels.maxCoeff() <= 1.0);
  }
  AugmentPolicy none = pol;
  none.max_rotation_deg = 0.0;
  none.max_translation_frac = 0.0;
  none.hflip_prob = 0.0;
  Rng rng = make_rng({3});
  CHECK(supervised_augment(img, none, rng).pixels.isApprox(resize_bilinear(img, 32, 32).pixels, 1e-12));

  Rng a = make_rng({11}), b = make_rng({11});
  CHECK(supervised_augment(img, pol, a).pixels == supervised_augment(img, pol, b).pixels);
}

TEST_CASE("double horizontal flip is the identity") {
  const Image img = ramp(33, 47);
  CHECK(hflip(hflip(img)).pixels == img.pixels);
  CHECK(hflip(img).pixels(3, 0) == img.pixels(3, 46));
}

TEST_CASE("histograms") {
  Image c;
  c.pixels = Matrix::Constant(32, 32, 0.37);
  const auto h = histogram(c, 10);
  CHECK(h[3] == 1024);
  CHECK(std::count(h.begin(), h.end(), 0u) == 9);

  Image half;
  half.pixels = Matrix::Zero(32, 32);
  half.pixels.rightCols(16).setOnes();
  const auto h2 = histogram(half, 2);
  CHECK(h2[0] == 512);
  CHECK(h2[1] == 512);

  const auto hr = histogram(ramp(40, 40), 16);
  CHECK(std::accumulate(hr.begin(), hr.end(), std::size_t{0}) == 1600);
  CHECK(chi2_distance(hr, hr) == 0.0);
  CHECK_THROWS_AS(histogram(c, 1), ValidationError);
}

TEST_CASE("large crops agree in histogram more than small crops") {
  synth::SynthConfig cfg;
  const auto st = synth::make_patient(cfg, 2, false);
  Image img;
  img.pixels = synth::render_scan(st, 0, 0, cfg).image;
  Rng rng = make_rng({77});
  const std::array<double, 2> aspect{3.0 / 4.0, 4.0 / 3.0};
  double big = 0.0, small = 0.0;
  for (int i = 0; i < 100; ++i) {
    auto crop_hist = [&](std::array<double, 2> area) {
      return histogram(random_resized_crop(img, area, aspect, {64, 64}, rng), 32);
    };
    big += chi2_distance(crop_hist({0.4, 0.8}), crop_hist({0.4, 0.8}));
    small += chi2_distance(crop_hist({0.075, 0.085}), crop_hist({0.075, 0.085}));
  }
  CHECK(big / 100 < small / 100);
}

TEST_CASE("pgm round trip") {
  const auto file = std::filesystem::temp_directory_path() / "tinc_augment_rt.pgm";
  const Image img = ramp(37, 41);
  write_pgm(file, img.pixels);
  const Image back = read_pgm(file);
  CHECK(back.height() == 37);
  CHECK(back.width() == 41);
  CHECK((back.pixels - img.pixels).cwiseAbs().maxCoeff() <= 0.5 / 255.0 + 1e-12);
  std::filesystem::remove(file);
  CHECK_THROWS_AS(read_pgm(file), IoError);
}

TEST_CASE("preprocessing output shape") {
  synth::SynthConfig cfg;
  const auto st = synth::make_patient(cfg, 4, true);
  Image img;
  img.pixels = synth::render_scan(st, 120, 2, cfg).image;
  const Image out = preprocess_scan(img, {});
  CHECK(out.height() == 64);
  CHECK(out.width() == img.width());
}
