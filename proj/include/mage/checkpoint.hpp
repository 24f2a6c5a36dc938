#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mage/errors.hpp"
#include "mage/tensor.hpp"

namespace mage {

struct CheckpointError : Error {
  explicit CheckpointError(const std::string& msg) : Error(msg) {}
};

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<double> data;
};

// All training state needed for a bit-exact resume: parameters, optimizer
// moments (as additional named tensors), step counter, RNG state and an echo
// of the config that produced the run.
struct Checkpoint {
  nlohmann::json config = nlohmann::json::object();
  uint64_t rng_seed = 0;
  uint64_t rng_counter = 0;
  int64_t step = 0;
  std::vector<CheckpointEntry> entries;

  const CheckpointEntry* find(const std::string& name) const {
    for (const CheckpointEntry& e : entries)
      if (e.name == name) return &e;
    return nullptr;
  }
};

namespace detail {

inline void put_u32_le(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline uint32_t get_u32_le(const unsigned char* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
         (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}

inline void put_f64_le(std::string& out, double d) {
  uint64_t bits;
  std::memcpy(&bits, &d, sizeof(bits));
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

inline double get_f64_le(const unsigned char* p) {
  uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<uint64_t>(p[i]) << (8 * i);
  double d;
  std::memcpy(&d, &bits, sizeof(d));
  return d;
}

}  // namespace detail

inline constexpr char kCheckpointMagic[9] = "MAGECKPT";

// File layout: 8-byte magic, u32 little-endian manifest length, UTF-8 JSON
// manifest, raw little-endian f64 blob. Offsets in the manifest are relative
// to the blob start.
inline std::string checkpoint_to_bytes(const Checkpoint& ckpt) {
  nlohmann::json manifest;
  manifest["config"] = ckpt.config;
  manifest["rng"] = {{"seed", ckpt.rng_seed}, {"counter", ckpt.rng_counter}};
  manifest["step"] = ckpt.step;
  manifest["tensors"] = nlohmann::json::array();
  uint64_t offset = 0;
  for (const CheckpointEntry& e : ckpt.entries) {
    const uint64_t bytes = e.data.size() * sizeof(double);
    manifest["tensors"].push_back({{"name", e.name},
                                   {"shape", e.shape},
                                   {"dtype", "f64"},
                                   {"byte_offset", offset},
                                   {"byte_length", bytes}});
    offset += bytes;
  }
  const std::string manifest_str = manifest.dump();
  if (manifest_str.size() > 0xffffffffull) throw CheckpointError("manifest too large");

  std::string out;
  out.reserve(8 + 4 + manifest_str.size() + offset);
  out.append(kCheckpointMagic, 8);
  detail::put_u32_le(out, static_cast<uint32_t>(manifest_str.size()));
  out += manifest_str;
  for (const CheckpointEntry& e : ckpt.entries)
    for (double d : e.data) detail::put_f64_le(out, d);
  return out;
}

inline Checkpoint checkpoint_from_bytes(const std::string& bytes) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
    throw CheckpointError("bad checkpoint magic; expected MAGECKPT");
  const uint32_t manifest_len = detail::get_u32_le(p + 8);
  if (bytes.size() < 12ull + manifest_len)
    throw CheckpointError("truncated manifest: header claims " + std::to_string(manifest_len) +
                          " bytes");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + manifest_len);
  } catch (const nlohmann::json::parse_error& e) {
    throw CheckpointError(std::string("corrupt manifest: ") + e.what());
  }

  Checkpoint ckpt;
  try {
    ckpt.config = manifest.at("config");
    ckpt.rng_seed = manifest.at("rng").at("seed").get<uint64_t>();
    ckpt.rng_counter = manifest.at("rng").at("counter").get<uint64_t>();
    ckpt.step = manifest.at("step").get<int64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("corrupt manifest: ") + e.what());
  }

  const size_t blob_begin = 12ull + manifest_len;
  const size_t blob_size = bytes.size() - blob_begin;
  uint64_t expected_offset = 0;
  for (const nlohmann::json& jt : manifest.at("tensors")) {
    CheckpointEntry e;
    uint64_t offset = 0, length = 0;
    try {
      e.name = jt.at("name").get<std::string>();
      e.shape = jt.at("shape").get<Shape>();
      offset = jt.at("byte_offset").get<uint64_t>();
      length = jt.at("byte_length").get<uint64_t>();
      if (jt.at("dtype").get<std::string>() != "f64")
        throw CheckpointError("dtype mismatch for tensor '" + e.name + "': expected f64, got " +
                              jt.at("dtype").get<std::string>());
    } catch (const nlohmann::json::exception& ex) {
      throw CheckpointError(std::string("corrupt tensor record: ") + ex.what());
    }
    if (offset != expected_offset)
      throw CheckpointError("tensor '" + e.name + "': byte_offset " + std::to_string(offset) +
                            " overlaps or skips; expected " + std::to_string(expected_offset));
    if (length != shape_numel(e.shape) * sizeof(double))
      throw CheckpointError("tensor '" + e.name + "': byte_length " + std::to_string(length) +
                            " does not match shape " + shape_str(e.shape));
    if (offset + length > blob_size)
      throw CheckpointError("truncated blob: tensor '" + e.name + "' needs bytes up to " +
                            std::to_string(offset + length) + " but blob has " +
                            std::to_string(blob_size));
    e.data.resize(length / sizeof(double));
    const unsigned char* src = p + blob_begin + offset;
    for (size_t i = 0; i < e.data.size(); ++i) e.data[i] = detail::get_f64_le(src + i * 8);
    expected_offset = offset + length;
    ckpt.entries.push_back(std::move(e));
  }
  if (expected_offset != blob_size)
    throw CheckpointError("blob has " + std::to_string(blob_size - expected_offset) +
                          " trailing bytes beyond the manifest");
  return ckpt;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write checkpoint to '" + path + "'");
  const std::string bytes = checkpoint_to_bytes(ckpt);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("short write to '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read checkpoint from '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return checkpoint_from_bytes(bytes);
}

}  // namespace mage
