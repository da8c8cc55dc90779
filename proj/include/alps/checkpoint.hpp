#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "alps/tensor.hpp"

namespace alps {

// Container layout (little-endian):
//   0..3   magic "ALPS"
//   4..7   u32 version (1)
//   8..15  u64 header length H
//   16..   UTF-8 JSON header {"meta": {...}, "tensors": {name: {dtype, shape, offset, nbytes}}}
//   rest   data blob; offsets relative to blob start, 8-byte aligned, zero padded
inline constexpr char kCheckpointMagic[4] = {'A', 'L', 'P', 'S'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::size_t kCheckpointAlign = 8;

struct TensorEntry {
  DType dtype = DType::F32;
  Shape shape;
  std::uint64_t offset = 0;
  std::uint64_t nbytes = 0;
};

struct CheckpointManifest {
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, TensorEntry> tensors;
};

using TensorMap = std::map<std::string, Tensor>;

// A loaded container. Tensors are decoded from the in-memory blob on request.
class Checkpoint {
 public:
  Checkpoint() = default;

  const CheckpointManifest& manifest() const noexcept { return manifest_; }
  const nlohmann::json& meta() const noexcept { return manifest_.meta; }
  bool contains(const std::string& name) const { return manifest_.tensors.count(name) != 0; }
  std::vector<std::string> names() const;

  // Throws MissingTensorError for unknown names.
  Tensor tensor(const std::string& name) const;
  std::vector<double> tensor_f64(const std::string& name) const;
  const TensorEntry& entry(const std::string& name) const;

  TensorMap all_tensors() const;

  // Lowercase hex SHA-256 of the serialized container bytes.
  const std::string& fingerprint() const noexcept { return fingerprint_; }

  static Checkpoint from_bytes(std::string bytes);

 private:
  CheckpointManifest manifest_;
  std::string blob_;
  std::string fingerprint_;
};

// Builds a manifest for `tensors` with sorted, aligned offsets.
CheckpointManifest make_manifest(const TensorMap& tensors, nlohmann::json meta = nlohmann::json::object());

// Serializes to the container byte layout. Throws ValueError when the
// manifest disagrees with the tensors (names, dtype, shape).
std::string serialize_checkpoint(const CheckpointManifest& manifest, const TensorMap& tensors);
std::string serialize_checkpoint(const TensorMap& tensors, nlohmann::json meta = nlohmann::json::object());

void write_checkpoint(const CheckpointManifest& manifest, const TensorMap& tensors,
                      const std::filesystem::path& path);
void write_checkpoint(const TensorMap& tensors, const nlohmann::json& meta, const std::filesystem::path& path);

Checkpoint read_checkpoint(const std::filesystem::path& path);

std::string sha256_hex(std::string_view bytes);

// Writes to a sibling temporary file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);
std::string read_file(const std::filesystem::path& path);

}  // namespace alps
