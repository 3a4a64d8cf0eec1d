#include "tinc/dataset.hpp"

#include <cmath>
#include <exception>
#include <thread>

namespace tinc::data {

augment::Image ScanStore::get(const std::string& path) {
  {
    std::lock_guard lock(mu_);
    auto it = cache_.find(path);
    if (it != cache_.end()) {
      augment::Image img;
      img.source = path;
      img.pixels = it->second.cast<double>() / 255.0;
      return img;
    }
  }
  augment::Image img = augment::preprocess_scan(augment::read_pgm(path), cfg_);
  // Flattening and windowing only move pixels, so the 8-bit values survive.
  Pixels px = (img.pixels * 255.0).array().round().cast<std::uint8_t>().matrix();
  std::lock_guard lock(mu_);
  cache_.emplace(path, std::move(px));
  return img;
}

augment::Image ScanStore::plain(const std::string& path, std::array<Eigen::Index, 2> size) {
  return augment::resize_bilinear(get(path), size[0], size[1]);
}

std::string scan_path(const cohort::CohortManifest& m, const cohort::ScanRef& ref) {
  const auto& rel = m.patients[ref.patient].eyes[ref.eye].visits[ref.visit].scans[ref.scan];
  return (m.root / rel).string();
}

void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  if (threads <= 1 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const auto workers = std::min<std::size_t>(static_cast<std::size_t>(threads), n);
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

PairBatch sample_pair_batch(const cohort::CohortManifest& m, const cohort::PairSampler& sampler, ScanStore& store,
                            std::size_t count, std::size_t batch_size, std::uint64_t seed, std::uint64_t epoch,
                            std::uint64_t batch, const Augmenter& augmenter, int threads) {
  PairBatch pb;
  pb.specs = sampler.sample(count, batch_size, seed, epoch, batch);
  const std::size_t n = pb.specs.size();
  pb.x1.resize(n);
  pb.x2.resize(n);
  pb.dv.resize(static_cast<Eigen::Index>(n));
  pb.delta_signed.resize(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    pb.dv[static_cast<Eigen::Index>(i)] = pb.specs[i].dv;
    pb.delta_signed[static_cast<Eigen::Index>(i)] = pb.specs[i].delta_signed;
    pb.patient_ids.push_back(pb.specs[i].patient_id);
  }
  parallel_for(2 * n, threads, [&](std::size_t k) {
    const std::size_t i = k / 2;
    const std::size_t view = k % 2;
    const auto& ref = view == 0 ? pb.specs[i].first : pb.specs[i].second;
    Rng rng = make_rng({seed, epoch, batch, i, view, 0xA06u});
    auto img = augmenter(store.get(scan_path(m, ref)), rng);
    (view == 0 ? pb.x1 : pb.x2)[i] = std::move(img);
  });
  return pb;
}

}  // namespace tinc::data
