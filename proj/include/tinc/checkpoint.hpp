#pragma once

// Checkpoint container:
//   8 bytes  magic "TINCCKPT"
//   u32      format version
//   u64      header length
//   header   JSON: {"format_version", "meta": {...}, "tensors": [{"name", "dtype", "shape", "offset"}]}
//   blobs    little-endian f64, row-major, offsets relative to the end of the header

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tinc/common.hpp"

namespace tinc::checkpoint {

inline constexpr std::uint32_t kFormatVersion = 1;

struct NamedTensor {
  std::string name;
  Matrix value;
};

struct Contents {
  nlohmann::json meta;
  std::vector<NamedTensor> tensors;

  const Matrix& tensor(const std::string& name) const;
  bool has(const std::string& name) const;
};

std::string serialize(const Contents& c);
Contents deserialize(const std::string& bytes, const std::string& origin = "<memory>");

void save(const std::filesystem::path& file, const Contents& c);
void write_bytes(const std::filesystem::path& file, const std::string& bytes);
Contents load(const std::filesystem::path& file);

}  // namespace tinc::checkpoint
