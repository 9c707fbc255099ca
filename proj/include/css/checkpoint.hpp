#pragma once

// Flat binary checkpoints:
//
//   "CSSCKPT1" | u32 version | u64 count |
//   count x { u32 name_len | name | u32 ndim | ndim x u64 dim | numel x f64 }
//
// All integers and floats little-endian. A text manifest with one
// "name shape" line per array is written next to it.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "css/error.hpp"
#include "css/layers.hpp"

namespace css {

inline constexpr char kCheckpointMagic[8] = {'C', 'S', 'S', 'C', 'K', 'P', 'T', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

namespace detail {
template <typename T>
void put(std::ofstream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T take(std::ifstream& is, const std::string& path) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw IoError("truncated checkpoint " + path);
  return v;
}
}  // namespace detail

inline void write_checkpoint(const std::string& path, const std::vector<NamedArray>& arrays) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write checkpoint " + path);
  os.write(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put<std::uint32_t>(os, kCheckpointVersion);
  detail::put<std::uint64_t>(os, arrays.size());
  for (const auto& a : arrays) {
    if (numel(a.shape) != a.values.size()) throw ShapeError("checkpoint array " + a.name + " inconsistent");
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(a.name.size()));
    os.write(a.name.data(), static_cast<std::streamsize>(a.name.size()));
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(a.shape.size()));
    for (auto d : a.shape) detail::put<std::uint64_t>(os, d);
    os.write(reinterpret_cast<const char*>(a.values.data()),
             static_cast<std::streamsize>(a.values.size() * sizeof(double)));
  }
  if (!os) throw IoError("failed writing checkpoint " + path);

  std::ofstream man(path + ".manifest.txt");
  if (!man) throw IoError("cannot write checkpoint manifest for " + path);
  for (const auto& a : arrays) man << a.name << ' ' << shape_str(a.shape) << '\n';
}

inline std::vector<NamedArray> read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path);
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
    throw IoError("not a checkpoint file: " + path);
  }
  const auto version = detail::take<std::uint32_t>(is, path);
  if (version != kCheckpointVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(version) + " in " + path);
  }
  const auto count = detail::take<std::uint64_t>(is, path);
  std::vector<NamedArray> out;
  for (std::uint64_t i = 0; i < count; ++i) {
    NamedArray a;
    const auto len = detail::take<std::uint32_t>(is, path);
    a.name.resize(len);
    if (!is.read(a.name.data(), len)) throw IoError("truncated checkpoint " + path);
    const auto nd = detail::take<std::uint32_t>(is, path);
    for (std::uint32_t d = 0; d < nd; ++d) a.shape.push_back(detail::take<std::uint64_t>(is, path));
    a.values.resize(numel(a.shape));
    if (!is.read(reinterpret_cast<char*>(a.values.data()),
                 static_cast<std::streamsize>(a.values.size() * sizeof(double)))) {
      throw IoError("truncated checkpoint " + path);
    }
    out.push_back(std::move(a));
  }
  return out;
}

inline std::vector<NamedArray> snapshot(const ParamStore& ps, const std::string& prefix = "") {
  std::vector<NamedArray> out;
  for (const auto& [name, t] : ps.entries()) {
    out.push_back({prefix + name, t.shape(), {t.data().begin(), t.data().end()}});
  }
  return out;
}

/// Copies arrays into the store by name. Every parameter must be present
/// with a matching shape; arrays with other prefixes are ignored.
inline void restore(ParamStore& ps, const std::vector<NamedArray>& arrays, const std::string& prefix = "") {
  std::map<std::string, const NamedArray*> by_name;
  for (const auto& a : arrays) by_name[a.name] = &a;
  for (const auto& [name, t] : ps.entries()) {
    auto it = by_name.find(prefix + name);
    if (it == by_name.end()) throw ConfigError("checkpoint is missing parameter " + name);
    if (it->second->shape != t.shape()) {
      throw ConfigError("checkpoint parameter " + name + " has shape " + shape_str(it->second->shape) +
                        ", model expects " + shape_str(t.shape()));
    }
    Tensor dst = t;
    std::copy(it->second->values.begin(), it->second->values.end(), dst.mutable_data().begin());
  }
}

}  // namespace css
