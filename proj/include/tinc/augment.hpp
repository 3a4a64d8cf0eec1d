#pragma once

#include <array>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "tinc/common.hpp"

namespace tinc::augment {

/// Grayscale image, pixels(y, x) in [0,1].
struct Image {
  Matrix pixels;
  std::string source;
  // Filled by the augmentations that realize them.
  double crop_area_ratio = 1.0;
  double rotation_deg = 0.0;

  Eigen::Index height() const { return pixels.rows(); }
  Eigen::Index width() const { return pixels.cols(); }
};

/// Binary PGM (P5, maxval 255). Pixels are divided by 255 on read.
Image read_pgm(const std::filesystem::path& file);
/// Quantizes round(255 * clamp(p, 0, 1)).
void write_pgm(const std::filesystem::path& file, const Matrix& pixels);

/// y = a x^2 + b x + c over column index x.
struct Quadratic {
  double a = 0.0;
  double b = 0.0;
  double c = 0.0;
  double operator()(double x) const { return (a * x + b) * x + c; }
};

/// Least-squares quadratic through (x, y) points; needs >= 3 distinct x.
Quadratic fit_quadratic(std::span<const std::array<double, 2>> points);

/// Shifts every column so the contour lands on the row it has at the centre
/// column. Rows past the border repeat the nearest edge row.
Image flatten(const Image& image, const Quadratic& contour);

/// Row of the brightest (3-row smoothed) response in every column.
std::vector<double> detect_layer_rows(const Image& image);
Quadratic estimate_layer_contour(const Image& image);

/// Rows [centre - above, centre + below) with edge padding.
Image row_window(const Image& image, int centre_row, int above, int below);

Image resize_bilinear(const Image& image, Eigen::Index height, Eigen::Index width);
Image hflip(const Image& image);

struct CropRect {
  Eigen::Index top = 0;
  Eigen::Index left = 0;
  Eigen::Index height = 0;
  Eigen::Index width = 0;
  double area_ratio = 0.0;
};

/// Area ratio ~ U(area_range), log-aspect (w/h) ~ U(log aspect_range); up to
/// 10 attempts, then the centred crop of largest feasible area in range.
CropRect sample_crop(Eigen::Index height, Eigen::Index width, std::array<double, 2> area_range,
                     std::array<double, 2> aspect_range, Rng& rng);

Image random_resized_crop(const Image& image, std::array<double, 2> area_range, std::array<double, 2> aspect_range,
                          std::array<Eigen::Index, 2> target_size, Rng& rng);

enum class AugmentMode { ssl, supervised };

struct AugmentPolicy {
  AugmentMode mode = AugmentMode::ssl;
  std::array<double, 2> crop_area_range{0.4, 0.8};
  std::array<double, 2> aspect_range{3.0 / 4.0, 4.0 / 3.0};
  std::array<Eigen::Index, 2> target_size{32, 32};
  double max_rotation_deg = 10.0;
  double max_translation_frac = 0.1;
  double hflip_prob = 0.5;
  // Brightness and contrast factors drawn from [1 - jitter, 1 + jitter].
  double jitter = 0.2;

  void validate() const;
};

/// Random resized crop -> horizontal flip -> brightness/contrast jitter.
Image ssl_augment(const Image& image, const AugmentPolicy& policy, Rng& rng);

/// Translation, rotation and horizontal flip (edge padded), then resize.
Image supervised_augment(const Image& image, const AugmentPolicy& policy, Rng& rng);

/// Equal-width bins over [0,1]; the value 1 falls in the last bin.
std::vector<std::size_t> histogram(const Image& image, int bins);

/// Symmetric chi-squared distance between normalized histograms.
double chi2_distance(const std::vector<std::size_t>& h1, const std::vector<std::size_t>& h2);

// Scan preprocessing: layer flattening followed by a fixed row window.
struct PreprocessConfig {
  int rows_above = 56;
  int rows_below = 8;
};

Image preprocess_scan(const Image& raw, const PreprocessConfig& cfg);

}  // namespace tinc::augment
