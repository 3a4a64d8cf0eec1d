#include "tinc/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace tinc::checkpoint {

static_assert(std::endian::native == std::endian::little, "checkpoint blobs are written in host order");

namespace {

constexpr char kMagic[8] = {'T', 'I', 'N', 'C', 'C', 'K', 'P', 'T'};

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T take(const std::string& in, std::size_t& pos, const std::string& origin) {
  if (pos + sizeof(T) > in.size()) throw IoError(origin + ": truncated checkpoint");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace

const Matrix& Contents::tensor(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return t.value;
  throw ValidationError("checkpoint has no tensor '" + name + "'");
}

bool Contents::has(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return true;
  return false;
}

std::string serialize(const Contents& c) {
  nlohmann::json header;
  header["format_version"] = kFormatVersion;
  header["meta"] = c.meta;
  header["tensors"] = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& t : c.tensors) {
    header["tensors"].push_back({{"name", t.name},
                                 {"dtype", "f64"},
                                 {"shape", {t.value.rows(), t.value.cols()}},
                                 {"offset", offset}});
    offset += static_cast<std::size_t>(t.value.size()) * sizeof(double);
  }
  const std::string head = header.dump();
  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kFormatVersion);
  put<std::uint64_t>(out, head.size());
  out += head;
  out.reserve(out.size() + offset);
  for (const auto& t : c.tensors)
    for (Eigen::Index r = 0; r < t.value.rows(); ++r)
      for (Eigen::Index col = 0; col < t.value.cols(); ++col) put<double>(out, t.value(r, col));
  return out;
}

Contents deserialize(const std::string& bytes, const std::string& origin) {
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
    throw ValidationError(origin + ": not a checkpoint file");
  std::size_t pos = sizeof(kMagic);
  const auto version = take<std::uint32_t>(bytes, pos, origin);
  if (version != kFormatVersion)
    throw ValidationError(origin + ": unsupported checkpoint version " + std::to_string(version));
  const auto head_len = take<std::uint64_t>(bytes, pos, origin);
  if (pos + head_len > bytes.size()) throw IoError(origin + ": truncated checkpoint header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(pos, head_len));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(origin + ": bad checkpoint header: " + e.what());
  }
  pos += head_len;
  const std::size_t data_start = pos;

  Contents c;
  c.meta = header.at("meta");
  for (const auto& t : header.at("tensors")) {
    if (t.at("dtype") != "f64") throw ValidationError(origin + ": unsupported dtype " + t.at("dtype").dump());
    const auto rows = t.at("shape").at(0).get<Eigen::Index>();
    const auto cols = t.at("shape").at(1).get<Eigen::Index>();
    std::size_t p = data_start + t.at("offset").get<std::size_t>();
    Matrix m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index col = 0; col < cols; ++col) m(r, col) = take<double>(bytes, p, origin);
    c.tensors.push_back({t.at("name").get<std::string>(), std::move(m)});
  }
  return c;
}

void write_bytes(const std::filesystem::path& file, const std::string& bytes) {
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + file.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + file.string());
}

void save(const std::filesystem::path& file, const Contents& c) { write_bytes(file, serialize(c)); }

Contents load(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IoError("checkpoint not found: " + file.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize(ss.str(), file.string());
}

}  // namespace tinc::checkpoint
