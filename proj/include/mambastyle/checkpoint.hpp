#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mambastyle/errors.hpp"
#include "mambastyle/params.hpp"
#include "mambastyle/tensor.hpp"

namespace mambastyle::checkpoint {

// File layout (little endian):
//   magic "MSTYCKPT" | u32 version | u64 manifest bytes | manifest JSON |
//   f32 blob | u64 FNV-1a of manifest + blob
inline constexpr char kMagic[8] = {'M', 'S', 'T', 'Y', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kVersion = 1;

struct Entry {
  std::string name;
  Tensor value;
};

struct Checkpoint {
  std::vector<Entry> tensors;
  std::string config;  // key=value text, may be empty
  nlohmann::json meta = nlohmann::json::object();

  [[nodiscard]] std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& e : tensors) n += e.value.size();
    return n;
  }
  [[nodiscard]] const Tensor& get(const std::string& name) const {
    for (const auto& e : tensors) {
      if (e.name == name) return e.value;
    }
    throw ConfigError("checkpoint: no tensor named '" + name + "'");
  }
};

inline std::uint64_t fnv1a(const char* p, std::size_t n, std::uint64_t h = 14695981039346656037ull) {
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(p[i]);
    h *= 1099511628211ull;
  }
  return h;
}

namespace detail {

template <typename U>
void put(std::string& out, U v) {
  char buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  out.append(buf, sizeof(U));
}

template <typename U>
U take(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(U) > in.size()) throw CorruptionError("checkpoint: truncated file");
  U v;
  std::memcpy(&v, in.data() + pos, sizeof(U));
  pos += sizeof(U);
  return v;
}

}  // namespace detail

inline std::string serialize(const Checkpoint& ck) {
  nlohmann::json manifest;
  manifest["version"] = kVersion;
  manifest["dtype"] = "f32";
  manifest["config"] = ck.config;
  manifest["meta"] = ck.meta;
  manifest["tensors"] = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& e : ck.tensors) {
    manifest["tensors"].push_back({{"name", e.name}, {"shape", e.value.shape()}, {"offset", offset}});
    offset += e.value.size();
  }
  const std::string text = manifest.dump();
  std::string out(kMagic, sizeof(kMagic));
  detail::put<std::uint32_t>(out, kVersion);
  detail::put<std::uint64_t>(out, text.size());
  const std::size_t body = out.size();
  out += text;
  for (const auto& e : ck.tensors) {
    out.append(reinterpret_cast<const char*>(e.value.data().data()), e.value.size() * sizeof(float));
  }
  detail::put<std::uint64_t>(out, fnv1a(out.data() + body, out.size() - body));
  return out;
}

inline Checkpoint deserialize(const std::string& bytes) {
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw CorruptionError("checkpoint: bad magic");
  }
  std::size_t pos = sizeof(kMagic);
  const auto version = detail::take<std::uint32_t>(bytes, pos);
  if (version != kVersion) {
    throw VersionError("checkpoint: version " + std::to_string(version) + ", expected " + std::to_string(kVersion));
  }
  const auto manifest_len = detail::take<std::uint64_t>(bytes, pos);
  if (manifest_len > bytes.size() - pos) throw CorruptionError("checkpoint: truncated manifest");
  const std::size_t body = pos;
  if (bytes.size() - body < manifest_len + sizeof(std::uint64_t)) throw CorruptionError("checkpoint: truncated file");
  const std::size_t end = bytes.size() - sizeof(std::uint64_t);
  std::size_t tail = end;
  if (detail::take<std::uint64_t>(bytes, tail) != fnv1a(bytes.data() + body, end - body)) {
    throw CorruptionError("checkpoint: checksum mismatch");
  }

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(body),
                                     bytes.begin() + static_cast<std::ptrdiff_t>(body + manifest_len));
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError(std::string("checkpoint: unreadable manifest: ") + e.what());
  }
  const std::size_t blob = body + manifest_len;
  const std::size_t blob_floats = (end - blob) / sizeof(float);
  if ((end - blob) % sizeof(float) != 0) throw CorruptionError("checkpoint: blob size is not a multiple of 4");

  Checkpoint ck;
  try {
    if (manifest.at("version").get<std::uint32_t>() != version) throw CorruptionError("checkpoint: version mismatch");
    if (manifest.at("dtype").get<std::string>() != "f32") throw CorruptionError("checkpoint: unsupported dtype");
    ck.config = manifest.at("config").get<std::string>();
    ck.meta = manifest.at("meta");
    std::size_t expected = 0;
    for (const auto& t : manifest.at("tensors")) {
      const auto name = t.at("name").get<std::string>();
      const auto shape = t.at("shape").get<Shape>();
      const auto offset = t.at("offset").get<std::size_t>();
      if (offset != expected) throw CorruptionError("checkpoint: tensor '" + name + "' is not contiguous");
      if (shape.empty()) throw CorruptionError("checkpoint: tensor '" + name + "' has an empty shape");
      std::size_t n = 1;
      for (auto d : shape) {
        if (d == 0) throw CorruptionError("checkpoint: tensor '" + name + "' has a zero extent");
        n *= d;
      }
      if (offset + n > blob_floats) throw CorruptionError("checkpoint: tensor '" + name + "' runs past the data");
      std::vector<float> v(n);
      std::memcpy(v.data(), bytes.data() + blob + offset * sizeof(float), n * sizeof(float));
      ck.tensors.push_back({name, Tensor(shape, std::move(v))});
      expected = offset + n;
    }
    if (expected != blob_floats) throw CorruptionError("checkpoint: manifest does not cover the data");
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError(std::string("checkpoint: malformed manifest: ") + e.what());
  }
  return ck;
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open '" + path + "' for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw ConfigError("write to '" + path + "' failed");
}

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline void save(const std::string& path, const Checkpoint& ck) { write_file(path, serialize(ck)); }
inline Checkpoint load(const std::string& path) { return deserialize(read_file(path)); }

/// Snapshot of named float parameters.
inline Checkpoint capture(const std::vector<std::pair<std::string, Var>>& params, std::string config = {}) {
  Checkpoint ck;
  ck.config = std::move(config);
  for (const auto& [name, v] : params) ck.tensors.push_back({name, v.value()});
  return ck;
}

/// Copies checkpoint tensors into `params`; every parameter must be present
/// with its exact shape.
inline void restore(const Checkpoint& ck, const std::vector<std::pair<std::string, Var>>& params) {
  for (const auto& [name, v] : params) {
    const auto& t = ck.get(name);
    if (t.shape() != v.shape()) {
      throw ShapeError("checkpoint: '" + name + "' is " + shape_str(t.shape()) + ", model expects " +
                       shape_str(v.shape()));
    }
    auto handle = v;
    handle.mutable_value() = t;
  }
}

}  // namespace mambastyle::checkpoint
