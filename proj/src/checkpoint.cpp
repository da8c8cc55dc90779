#include "alps/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include <openssl/evp.h>

#include "alps/errors.hpp"
#include "alps/geometry.hpp"

namespace alps {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

namespace {

constexpr std::size_t kPreambleSize = 16;

std::uint64_t align_up(std::uint64_t n) { return (n + kCheckpointAlign - 1) / kCheckpointAlign * kCheckpointAlign; }

template <typename T>
void put_le(std::string& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T get_le(std::string_view in, std::size_t at) {
  T value;
  std::memcpy(&value, in.data() + at, sizeof(T));
  return value;
}

nlohmann::json header_json(const CheckpointManifest& manifest) {
  nlohmann::json tensors = nlohmann::json::object();
  for (const auto& [name, e] : manifest.tensors) {
    tensors[name] = {{"dtype", dtype_name(e.dtype)}, {"shape", e.shape}, {"offset", e.offset}, {"nbytes", e.nbytes}};
  }
  return {{"meta", manifest.meta}, {"tensors", std::move(tensors)}};
}

TensorEntry parse_entry(const std::string& name, const nlohmann::json& j) {
  try {
    TensorEntry e;
    e.dtype = parse_dtype(j.at("dtype").get<std::string>());
    e.shape = j.at("shape").get<Shape>();
    e.offset = j.at("offset").get<std::uint64_t>();
    e.nbytes = j.at("nbytes").get<std::uint64_t>();
    return e;
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError("bad header entry for '" + name + "': " + ex.what());
  }
}

void validate_layout(const CheckpointManifest& manifest, std::uint64_t blob_size) {
  std::vector<std::pair<std::uint64_t, std::uint64_t>> spans;
  for (const auto& [name, e] : manifest.tensors) {
    for (auto extent : e.shape) {
      if (extent <= 0) throw CorruptError("tensor '" + name + "' has non-positive extent");
    }
    const auto expected = static_cast<std::uint64_t>(shape_numel(e.shape)) * dtype_size(e.dtype);
    if (e.nbytes != expected) {
      throw CorruptError("tensor '" + name + "' declares " + std::to_string(e.nbytes) + " bytes, shape needs " +
                         std::to_string(expected));
    }
    if (e.offset % kCheckpointAlign != 0) throw CorruptError("tensor '" + name + "' offset is not 8-byte aligned");
    if (e.offset > blob_size || e.nbytes > blob_size - e.offset) {
      throw CorruptError("tensor '" + name + "' spans [" + std::to_string(e.offset) + ", " +
                         std::to_string(e.offset + e.nbytes) + ") beyond blob of " + std::to_string(blob_size) +
                         " bytes");
    }
    spans.emplace_back(e.offset, e.offset + e.nbytes);
  }
  std::sort(spans.begin(), spans.end());
  for (std::size_t i = 1; i < spans.size(); ++i) {
    if (spans[i].first < spans[i - 1].second) throw CorruptError("overlapping tensor offsets");
  }
}

void validate_required_names(const CheckpointManifest& manifest) {
  if (!manifest.meta.is_object() || !manifest.meta.contains("geometry")) return;
  const auto geometry = geometry_from_json(manifest.meta.at("geometry"));
  for (const auto& name : required_tensor_names(geometry)) {
    if (!manifest.tensors.count(name)) throw MissingTensorError("geometry requires '" + name + "'");
  }
}

template <typename T>
void check_finite(const std::string& name, const char* data, std::size_t nbytes) {
  const std::size_t n = nbytes / sizeof(T);
  for (std::size_t i = 0; i < n; ++i) {
    T v;
    std::memcpy(&v, data + i * sizeof(T), sizeof(T));
    if (!std::isfinite(v)) throw NonFiniteError("tensor '" + name + "' element " + std::to_string(i));
  }
}

}  // namespace

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("SHA-256 digest failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0xF]);
  }
  return out;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  return std::string(std::istreambuf_iterator<char>(in), {});
}

void write_file_atomic(const std::filesystem::path& path, std::string_view contents) {
  std::random_device rd;
  auto tmp = path;
  tmp += ".tmp" + std::to_string(rd());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + tmp.string() + "'");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) {
      std::filesystem::remove(tmp);
      throw IoError("short write to '" + tmp.string() + "'");
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw IoError("cannot rename onto '" + path.string() + "': " + ec.message());
  }
}

CheckpointManifest make_manifest(const TensorMap& tensors, nlohmann::json meta) {
  CheckpointManifest manifest;
  manifest.meta = std::move(meta);
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {  // std::map iterates in sorted order
    TensorEntry e{t.dtype(), t.shape(), offset, t.nbytes()};
    manifest.tensors.emplace(name, e);
    offset = align_up(offset + e.nbytes);
  }
  return manifest;
}

std::string serialize_checkpoint(const CheckpointManifest& manifest, const TensorMap& tensors) {
  if (manifest.tensors.size() != tensors.size()) throw ValueError("manifest and tensor map list different names");
  std::uint64_t blob_size = 0;
  for (const auto& [name, e] : manifest.tensors) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ValueError("manifest names '" + name + "' but no tensor was given");
    if (it->second.dtype() != e.dtype || it->second.shape() != e.shape) {
      throw ValueError("tensor '" + name + "' is " + std::string(dtype_name(it->second.dtype())) +
                       shape_to_string(it->second.shape()) + ", manifest says " + std::string(dtype_name(e.dtype)) +
                       shape_to_string(e.shape));
    }
    blob_size = std::max(blob_size, align_up(e.offset + e.nbytes));
  }
  try {
    validate_layout(manifest, blob_size);
  } catch (const CorruptError& ex) {
    throw ValueError(ex.what());
  }

  std::string header = header_json(manifest).dump();
  header.append((kCheckpointAlign - (kPreambleSize + header.size()) % kCheckpointAlign) % kCheckpointAlign, ' ');

  std::string out;
  out.reserve(kPreambleSize + header.size() + blob_size);
  out.append(kCheckpointMagic, 4);
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint64_t>(out, header.size());
  out += header;
  const std::size_t blob_start = out.size();
  out.resize(blob_start + blob_size, '\0');
  for (const auto& [name, e] : manifest.tensors) {
    auto bytes = tensors.at(name).bytes();
    if (!bytes.empty()) std::memcpy(out.data() + blob_start + e.offset, bytes.data(), bytes.size());
  }
  return out;
}

std::string serialize_checkpoint(const TensorMap& tensors, nlohmann::json meta) {
  return serialize_checkpoint(make_manifest(tensors, std::move(meta)), tensors);
}

void write_checkpoint(const CheckpointManifest& manifest, const TensorMap& tensors,
                      const std::filesystem::path& path) {
  write_file_atomic(path, serialize_checkpoint(manifest, tensors));
}

void write_checkpoint(const TensorMap& tensors, const nlohmann::json& meta, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_checkpoint(tensors, meta));
}

Checkpoint Checkpoint::from_bytes(std::string bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw FormatError("bad magic (expected \"ALPS\")");
  }
  if (bytes.size() < kPreambleSize) throw CorruptError("truncated preamble");
  const auto version = get_le<std::uint32_t>(bytes, 4);
  if (version != kCheckpointVersion) throw VersionError("unsupported container version " + std::to_string(version));
  const auto header_len = get_le<std::uint64_t>(bytes, 8);
  if (header_len > bytes.size() - kPreambleSize) throw CorruptError("header length exceeds file size");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(std::string_view(bytes).substr(kPreambleSize, header_len));
  } catch (const nlohmann::json::parse_error& ex) {
    throw FormatError(std::string("header is not valid JSON: ") + ex.what());
  }
  if (!header.is_object() || !header.contains("tensors") || !header.at("tensors").is_object()) {
    throw FormatError("header lacks a \"tensors\" object");
  }

  Checkpoint ckpt;
  ckpt.manifest_.meta = header.value("meta", nlohmann::json::object());
  for (const auto& [name, j] : header.at("tensors").items()) {
    ckpt.manifest_.tensors.emplace(name, parse_entry(name, j));
  }
  const std::size_t blob_start = kPreambleSize + header_len;
  validate_layout(ckpt.manifest_, bytes.size() - blob_start);
  validate_required_names(ckpt.manifest_);
  for (const auto& [name, e] : ckpt.manifest_.tensors) {
    const char* p = bytes.data() + blob_start + e.offset;
    if (e.dtype == DType::F32) check_finite<float>(name, p, e.nbytes);
    else check_finite<double>(name, p, e.nbytes);
  }

  ckpt.fingerprint_ = sha256_hex(bytes);
  ckpt.blob_ = bytes.substr(blob_start);
  return ckpt;
}

Checkpoint read_checkpoint(const std::filesystem::path& path) { return Checkpoint::from_bytes(read_file(path)); }

std::vector<std::string> Checkpoint::names() const {
  std::vector<std::string> out;
  out.reserve(manifest_.tensors.size());
  for (const auto& [name, e] : manifest_.tensors) out.push_back(name);
  return out;
}

const TensorEntry& Checkpoint::entry(const std::string& name) const {
  auto it = manifest_.tensors.find(name);
  if (it == manifest_.tensors.end()) throw MissingTensorError("no tensor named '" + name + "'");
  return it->second;
}

Tensor Checkpoint::tensor(const std::string& name) const {
  const auto& e = entry(name);
  const char* p = blob_.data() + e.offset;
  const auto n = static_cast<std::size_t>(shape_numel(e.shape));
  if (e.dtype == DType::F32) {
    std::vector<float> v(n);
    std::memcpy(v.data(), p, e.nbytes);
    return Tensor(e.shape, std::move(v));
  }
  std::vector<double> v(n);
  std::memcpy(v.data(), p, e.nbytes);
  return Tensor(e.shape, std::move(v));
}

std::vector<double> Checkpoint::tensor_f64(const std::string& name) const { return tensor(name).to_f64(); }

TensorMap Checkpoint::all_tensors() const {
  TensorMap out;
  for (const auto& [name, e] : manifest_.tensors) out.emplace(name, tensor(name));
  return out;
}

}  // namespace alps
