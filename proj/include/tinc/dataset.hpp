#pragma once

#include <functional>
#include <mutex>
#include <string>
#include <unordered_map>
#include <vector>

#include "tinc/augment.hpp"
#include "tinc/cohort.hpp"

namespace tinc::data {

/// Loads scans from disk once, preprocesses them (layer flattening and row
/// window) and keeps the 8-bit result in memory. Thread-safe.
class ScanStore {
 public:
  explicit ScanStore(augment::PreprocessConfig cfg = {}) : cfg_(cfg) {}

  augment::Image get(const std::string& path);
  /// Preprocessed scan resized to the network input, no augmentation.
  augment::Image plain(const std::string& path, std::array<Eigen::Index, 2> size);

  const augment::PreprocessConfig& config() const { return cfg_; }

 private:
  using Pixels = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>;
  augment::PreprocessConfig cfg_;
  std::mutex mu_;
  std::unordered_map<std::string, Pixels> cache_;
};

std::string scan_path(const cohort::CohortManifest& m, const cohort::ScanRef& ref);

struct PairBatch {
  std::vector<augment::Image> x1;
  std::vector<augment::Image> x2;
  Vector dv;
  Vector delta_signed;
  std::vector<std::string> patient_ids;
  std::vector<cohort::PairSpec> specs;
};

using Augmenter = std::function<augment::Image(const augment::Image&, Rng&)>;

/// Draws `count` pairs for (seed, epoch, batch) and augments each view with
/// its own stream (seed, epoch, batch, pair, view). `threads` > 1 spreads the
/// per-image work; the result does not depend on it.
PairBatch sample_pair_batch(const cohort::CohortManifest& m, const cohort::PairSampler& sampler, ScanStore& store,
                            std::size_t count, std::size_t batch_size, std::uint64_t seed, std::uint64_t epoch,
                            std::uint64_t batch, const Augmenter& augmenter, int threads = 1);

/// Runs fn(i) for i in [0, n) on up to `threads` workers.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn);

}  // namespace tinc::data
