#include "tinc/augment.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>

namespace tinc::augment {

namespace {

// Reads the next whitespace-delimited header token, skipping '#' comments.
std::string pgm_token(std::istream& in) {
  std::string tok;
  char ch;
  while (in.get(ch)) {
    if (ch == '#') {
      std::string discard;
      std::getline(in, discard);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(ch);
  }
  return tok;
}

double sample_bilinear(const Matrix& px, double y, double x) {
  const Eigen::Index h = px.rows(), w = px.cols();
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  const auto y0 = static_cast<Eigen::Index>(std::floor(y));
  const auto x0 = static_cast<Eigen::Index>(std::floor(x));
  const Eigen::Index y1 = std::min(y0 + 1, h - 1);
  const Eigen::Index x1 = std::min(x0 + 1, w - 1);
  const double fy = y - static_cast<double>(y0);
  const double fx = x - static_cast<double>(x0);
  const double top = px(y0, x0) * (1.0 - fx) + px(y0, x1) * fx;
  const double bottom = px(y1, x0) * (1.0 - fx) + px(y1, x1) * fx;
  return top * (1.0 - fy) + bottom * fy;
}

// Half-pixel-centre source coordinate for output index `o` when scaling
// `src` samples onto `dst` samples.
double source_coord(Eigen::Index o, Eigen::Index src, Eigen::Index dst) {
  return (static_cast<double>(o) + 0.5) * static_cast<double>(src) / static_cast<double>(dst) - 0.5;
}

Image with_pixels(const Image& like, Matrix px) {
  Image out = like;
  out.pixels = std::move(px);
  return out;
}

}  // namespace

Image read_pgm(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IoError("cannot open image " + file.string());
  if (pgm_token(in) != "P5") throw ValidationError(file.string() + " is not a binary PGM (P5)");
  const int w = std::stoi(pgm_token(in));
  const int h = std::stoi(pgm_token(in));
  const int maxval = std::stoi(pgm_token(in));
  if (w <= 0 || h <= 0 || maxval != 255) throw ValidationError(file.string() + ": unsupported PGM header");
  std::vector<unsigned char> buf(static_cast<std::size_t>(w) * static_cast<std::size_t>(h));
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (in.gcount() != static_cast<std::streamsize>(buf.size())) throw IoError(file.string() + ": truncated pixel data");
  Image img;
  img.source = file.string();
  img.pixels.resize(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) img.pixels(y, x) = buf[static_cast<std::size_t>(y) * w + x] / 255.0;
  return img;
}

void write_pgm(const std::filesystem::path& file, const Matrix& pixels) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw IoError("cannot write image " + file.string());
  out << "P5\n" << pixels.cols() << ' ' << pixels.rows() << "\n255\n";
  std::vector<unsigned char> buf(static_cast<std::size_t>(pixels.size()));
  std::size_t k = 0;
  for (Eigen::Index y = 0; y < pixels.rows(); ++y)
    for (Eigen::Index x = 0; x < pixels.cols(); ++x)
      buf[k++] = static_cast<unsigned char>(std::lround(255.0 * std::clamp(pixels(y, x), 0.0, 1.0)));
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("write failed for " + file.string());
}

Quadratic fit_quadratic(std::span<const std::array<double, 2>> points) {
  std::set<double> xs;
  for (const auto& p : points) xs.insert(p[0]);
  if (xs.size() < 3) throw ValidationError("quadratic fit needs at least 3 distinct x values");
  // Centre and scale x for conditioning, then map coefficients back.
  double mean = 0.0;
  for (const auto& p : points) mean += p[0];
  mean /= static_cast<double>(points.size());
  double scale = 0.0;
  for (const auto& p : points) scale = std::max(scale, std::abs(p[0] - mean));
  const auto n = static_cast<Eigen::Index>(points.size());
  Matrix design(n, 3);
  Vector y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double t = (points[i][0] - mean) / scale;
    design(i, 0) = t * t;
    design(i, 1) = t;
    design(i, 2) = 1.0;
    y[i] = points[i][1];
  }
  const Vector q = design.colPivHouseholderQr().solve(y);
  // y = q0 ((x-m)/s)^2 + q1 (x-m)/s + q2
  const double a = q[0] / (scale * scale);
  const double b = q[1] / scale - 2.0 * a * mean;
  const double c = a * mean * mean - q[1] * mean / scale + q[2];
  return {a, b, c};
}

Image flatten(const Image& image, const Quadratic& contour) {
  const Eigen::Index h = image.height(), w = image.width();
  const double c0 = contour(static_cast<double>((w - 1) / 2));
  Matrix out(h, w);
  for (Eigen::Index x = 0; x < w; ++x) {
    const double raw = contour(static_cast<double>(x)) - c0;
    if (!std::isfinite(raw) || std::abs(raw) >= static_cast<double>(h))
      throw ValidationError("contour out of range at column " + std::to_string(x));
    const auto shift = static_cast<Eigen::Index>(std::lround(raw));
    for (Eigen::Index y = 0; y < h; ++y) out(y, x) = image.pixels(std::clamp<Eigen::Index>(y + shift, 0, h - 1), x);
  }
  return with_pixels(image, std::move(out));
}

std::vector<double> detect_layer_rows(const Image& image) {
  const Eigen::Index h = image.height(), w = image.width();
  std::vector<double> rows(static_cast<std::size_t>(w));
  for (Eigen::Index x = 0; x < w; ++x) {
    double best = -1.0;
    Eigen::Index arg = 0;
    for (Eigen::Index y = 1; y + 1 < h; ++y) {
      const double s = image.pixels(y - 1, x) + image.pixels(y, x) + image.pixels(y + 1, x);
      if (s > best) {
        best = s;
        arg = y;
      }
    }
    rows[static_cast<std::size_t>(x)] = static_cast<double>(arg);
  }
  return rows;
}

Quadratic estimate_layer_contour(const Image& image) {
  const auto rows = detect_layer_rows(image);
  std::vector<std::array<double, 2>> pts;
  for (std::size_t x = 0; x < rows.size(); ++x) pts.push_back({static_cast<double>(x), rows[x]});
  Quadratic q = fit_quadratic(pts);
  // One pass of outlier rejection against the first fit.
  std::vector<std::array<double, 2>> kept;
  for (const auto& p : pts)
    if (std::abs(p[1] - q(p[0])) <= 3.0) kept.push_back(p);
  std::set<double> xs;
  for (const auto& p : kept) xs.insert(p[0]);
  if (xs.size() >= 3) q = fit_quadratic(kept);
  return q;
}

Image row_window(const Image& image, int centre_row, int above, int below) {
  const Eigen::Index h = image.height(), w = image.width();
  Matrix out(above + below, w);
  for (int r = 0; r < above + below; ++r) {
    const Eigen::Index src = std::clamp<Eigen::Index>(centre_row - above + r, 0, h - 1);
    out.row(r) = image.pixels.row(src);
  }
  return with_pixels(image, std::move(out));
}

Image resize_bilinear(const Image& image, Eigen::Index height, Eigen::Index width) {
  if (height < 1 || width < 1) throw ValidationError("resize target must be positive");
  Matrix out(height, width);
  for (Eigen::Index y = 0; y < height; ++y) {
    const double sy = source_coord(y, image.height(), height);
    for (Eigen::Index x = 0; x < width; ++x)
      out(y, x) = sample_bilinear(image.pixels, sy, source_coord(x, image.width(), width));
  }
  return with_pixels(image, std::move(out));
}

Image hflip(const Image& image) { return with_pixels(image, image.pixels.rowwise().reverse()); }

CropRect sample_crop(Eigen::Index height, Eigen::Index width, std::array<double, 2> area_range,
                     std::array<double, 2> aspect_range, Rng& rng) {
  const auto [lo, hi] = area_range;
  if (!(lo > 0.0 && lo <= hi && hi <= 1.0)) throw ValidationError("crop area range must satisfy 0 < lo <= hi <= 1");
  if (!(aspect_range[0] > 0.0 && aspect_range[0] <= aspect_range[1])) throw ValidationError("invalid aspect range");
  const double area = static_cast<double>(height * width);
  auto in_range = [&](Eigen::Index h, Eigen::Index w) {
    const double r = static_cast<double>(h * w) / area;
    return r >= lo && r <= hi;
  };
  const double log_lo = std::log(aspect_range[0]), log_hi = std::log(aspect_range[1]);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * (lo == hi ? lo : uniform(rng, lo, hi));
    const double aspect = std::exp(log_lo == log_hi ? log_lo : uniform(rng, log_lo, log_hi));
    const auto w = static_cast<Eigen::Index>(std::lround(std::sqrt(target * aspect)));
    const auto h = static_cast<Eigen::Index>(std::lround(std::sqrt(target / aspect)));
    if (w < 1 || h < 1 || w > width || h > height || !in_range(h, w)) continue;
    CropRect r;
    r.height = h;
    r.width = w;
    r.top = static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::size_t>(height - h + 1)));
    r.left = static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::size_t>(width - w + 1)));
    r.area_ratio = static_cast<double>(h * w) / area;
    return r;
  }
  // Fallback: centred crop with the largest area not exceeding hi.
  CropRect best;
  for (Eigen::Index h = height; h >= 1; --h) {
    const auto w = std::min(width, static_cast<Eigen::Index>(std::floor(hi * area / static_cast<double>(h))));
    if (w >= 1 && in_range(h, w) && h * w > best.height * best.width) {
      best.height = h;
      best.width = w;
    }
  }
  if (best.height == 0) throw ValidationError("no crop with area ratio in range for this image size");
  best.top = (height - best.height) / 2;
  best.left = (width - best.width) / 2;
  best.area_ratio = static_cast<double>(best.height * best.width) / area;
  return best;
}

Image random_resized_crop(const Image& image, std::array<double, 2> area_range, std::array<double, 2> aspect_range,
                          std::array<Eigen::Index, 2> target_size, Rng& rng) {
  const CropRect r = sample_crop(image.height(), image.width(), area_range, aspect_range, rng);
  Image crop = with_pixels(image, image.pixels.block(r.top, r.left, r.height, r.width));
  Image out = resize_bilinear(crop, target_size[0], target_size[1]);
  out.crop_area_ratio = r.area_ratio;
  return out;
}

void AugmentPolicy::validate() const {
  if (!(crop_area_range[0] > 0.0 && crop_area_range[0] <= crop_area_range[1] && crop_area_range[1] <= 1.0))
    throw ValidationError("crop_area_range must lie in (0,1] with lo <= hi");
  if (target_size[0] < 1 || target_size[1] < 1) throw ValidationError("target_size must be positive");
  if (max_rotation_deg < 0 || max_translation_frac < 0 || jitter < 0 || jitter >= 1)
    throw ValidationError("augmentation magnitudes out of range");
  if (hflip_prob < 0 || hflip_prob > 1) throw ValidationError("hflip_prob must be in [0,1]");
}

Image ssl_augment(const Image& image, const AugmentPolicy& policy, Rng& rng) {
  Image out = random_resized_crop(image, policy.crop_area_range, policy.aspect_range, policy.target_size, rng);
  if (policy.hflip_prob > 0.0 && uniform(rng, 0.0, 1.0) < policy.hflip_prob) out = hflip(out);
  if (policy.jitter > 0.0) {
    const double brightness = uniform(rng, 1.0 - policy.jitter, 1.0 + policy.jitter);
    const double contrast = uniform(rng, 1.0 - policy.jitter, 1.0 + policy.jitter);
    Matrix px = (out.pixels * brightness).cwiseMin(1.0);
    const double mean = px.mean();
    px = ((px.array() - mean) * contrast + mean).cwiseMax(0.0).cwiseMin(1.0).matrix();
    out.pixels = std::move(px);
  }
  return out;
}

Image supervised_augment(const Image& image, const AugmentPolicy& policy, Rng& rng) {
  const auto [th, tw] = policy.target_size;
  const Eigen::Index h = image.height(), w = image.width();
  auto sym = [&](double m) { return m > 0.0 ? uniform(rng, -m, m) : 0.0; };
  const double ty = sym(policy.max_translation_frac) * static_cast<double>(h);
  const double tx = sym(policy.max_translation_frac) * static_cast<double>(w);
  const double deg = sym(policy.max_rotation_deg);
  const bool flip = policy.hflip_prob > 0.0 && uniform(rng, 0.0, 1.0) < policy.hflip_prob;
  const double rad = deg * std::numbers::pi / 180.0;
  const double cs = std::cos(rad), sn = std::sin(rad);
  const double cy = static_cast<double>(h - 1) / 2.0, cx = static_cast<double>(w - 1) / 2.0;
  Matrix out(th, tw);
  for (Eigen::Index y = 0; y < th; ++y) {
    for (Eigen::Index x = 0; x < tw; ++x) {
      const double dy = source_coord(y, h, th) - cy - ty;
      const double dx = source_coord(x, w, tw) - cx - tx;
      double sx = cs * dx + sn * dy + cx;
      const double sy = -sn * dx + cs * dy + cy;
      if (flip) sx = static_cast<double>(w - 1) - sx;
      out(y, x) = sample_bilinear(image.pixels, sy, sx);
    }
  }
  Image res = with_pixels(image, out.cwiseMax(0.0).cwiseMin(1.0));
  res.rotation_deg = deg;
  return res;
}

std::vector<std::size_t> histogram(const Image& image, int bins) {
  if (bins < 2) throw ValidationError("histogram needs at least 2 bins");
  std::vector<std::size_t> counts(static_cast<std::size_t>(bins), 0);
  for (Eigen::Index k = 0; k < image.pixels.size(); ++k) {
    const double v = std::clamp(image.pixels.data()[k], 0.0, 1.0);
    const auto b = std::min(bins - 1, static_cast<int>(std::floor(v * bins)));
    ++counts[static_cast<std::size_t>(b)];
  }
  return counts;
}

double chi2_distance(const std::vector<std::size_t>& h1, const std::vector<std::size_t>& h2) {
  if (h1.size() != h2.size()) throw ValidationError("histogram bin counts differ");
  double n1 = 0, n2 = 0;
  for (std::size_t i = 0; i < h1.size(); ++i) {
    n1 += static_cast<double>(h1[i]);
    n2 += static_cast<double>(h2[i]);
  }
  double d = 0.0;
  for (std::size_t i = 0; i < h1.size(); ++i) {
    const double p = static_cast<double>(h1[i]) / n1, q = static_cast<double>(h2[i]) / n2;
    if (p + q > 0.0) d += (p - q) * (p - q) / (p + q);
  }
  return 0.5 * d;
}

Image preprocess_scan(const Image& raw, const PreprocessConfig& cfg) {
  const Quadratic contour = estimate_layer_contour(raw);
  const Image flat = flatten(raw, contour);
  const int centre = static_cast<int>(std::lround(contour(static_cast<double>((raw.width() - 1) / 2))));
  return row_window(flat, centre, cfg.rows_above, cfg.rows_below);
}

}  // namespace tinc::augment
