#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vqseg/errors.hpp"
#include "vqseg/model.hpp"

namespace vqseg {

// Checkpoint container (little-endian throughout; byte layout documented in
// the README):
//   magic "VQSG" | u32 format version | u64 manifest length | manifest JSON
//   then one record per parameter, in declaration order:
//     u32 name length | name bytes | u8 dtype (0=f32, 1=f64) | 4x u32 shape |
//     raw values
//   then one record per batch-norm buffer:
//     u32 name length | name bytes | u8 dtype | u32 channels |
//     running_mean values | running_var values

namespace detail {

constexpr char kCkptMagic[4] = {'V', 'Q', 'S', 'G'};
constexpr uint32_t kCkptVersion = 1;

template <typename V>
void put(std::ostream& os, V v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename V>
V get(std::istream& is) {
  V v{};
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!is) throw DataError("checkpoint: truncated file");
  return v;
}

inline void put_str(std::ostream& os, const std::string& s) {
  put<uint32_t>(os, uint32_t(s.size()));
  os.write(s.data(), std::streamsize(s.size()));
}

inline std::string get_str(std::istream& is) {
  const uint32_t n = get<uint32_t>(is);
  if (n > (1u << 20)) throw DataError("checkpoint: implausible string length");
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw DataError("checkpoint: truncated file");
  return s;
}

template <typename T>
constexpr uint8_t dtype_tag() {
  return sizeof(T) == 4 ? 0 : 1;
}

}  // namespace detail

template <typename T>
void save_checkpoint(const std::string& path, const SegModel<T>& m,
                     const nlohmann::json& config_echo, uint64_t seed,
                     int64_t iteration) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("checkpoint: cannot create " + path);

  nlohmann::json manifest{
      {"format_version", detail::kCkptVersion},
      {"iteration", iteration},
      {"seed", seed},
      {"dtype", sizeof(T) == 4 ? "f32" : "f64"},
      {"config", config_echo},
      {"params", m.ps.params().size()},
      {"buffers", m.ps.buffers().size()},
  };
  const std::string mjson = manifest.dump();

  os.write(detail::kCkptMagic, 4);
  detail::put<uint32_t>(os, detail::kCkptVersion);
  detail::put<uint64_t>(os, uint64_t(mjson.size()));
  os.write(mjson.data(), std::streamsize(mjson.size()));

  for (const auto& [name, t] : m.ps.params()) {
    detail::put_str(os, name);
    detail::put<uint8_t>(os, detail::dtype_tag<T>());
    detail::put<uint32_t>(os, uint32_t(t->shape.n));
    detail::put<uint32_t>(os, uint32_t(t->shape.c));
    detail::put<uint32_t>(os, uint32_t(t->shape.h));
    detail::put<uint32_t>(os, uint32_t(t->shape.w));
    os.write(reinterpret_cast<const char*>(t->v.data()),
             std::streamsize(t->v.size() * sizeof(T)));
  }
  for (const auto& [name, st] : m.ps.buffers()) {
    detail::put_str(os, name);
    detail::put<uint8_t>(os, detail::dtype_tag<T>());
    detail::put<uint32_t>(os, uint32_t(st->running_mean.size()));
    os.write(reinterpret_cast<const char*>(st->running_mean.data()),
             std::streamsize(st->running_mean.size() * sizeof(T)));
    os.write(reinterpret_cast<const char*>(st->running_var.data()),
             std::streamsize(st->running_var.size() * sizeof(T)));
  }
  if (!os) throw DataError("checkpoint: write failed for " + path);
}

/// Loads parameters and buffers into an already-built model. Names, order,
/// shapes and dtype must all match the model exactly; the parsed manifest is
/// returned so callers can compare the config echo.
template <typename T>
nlohmann::json load_checkpoint(const std::string& path, SegModel<T>& m) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("checkpoint: cannot open " + path);

  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, detail::kCkptMagic, 4) != 0)
    throw DataError("checkpoint: " + path + " is not a checkpoint file");
  const uint32_t version = detail::get<uint32_t>(is);
  if (version != detail::kCkptVersion)
    throw ConfigError("checkpoint: unsupported format version " +
                      std::to_string(version));
  const uint64_t mlen = detail::get<uint64_t>(is);
  if (mlen > (1u << 26)) throw DataError("checkpoint: implausible manifest");
  std::string mjson(mlen, '\0');
  is.read(mjson.data(), std::streamsize(mlen));
  if (!is) throw DataError("checkpoint: truncated manifest");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(mjson);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint: bad manifest JSON: ") + e.what());
  }
  const std::string want_dtype = sizeof(T) == 4 ? "f32" : "f64";
  if (manifest.value("dtype", "") != want_dtype)
    throw ConfigError("checkpoint/config mismatch in fields: dtype (file " +
                      manifest.value("dtype", "?") + ", model " + want_dtype +
                      ")");
  if (manifest.value("params", size_t(0)) != m.ps.params().size() ||
      manifest.value("buffers", size_t(0)) != m.ps.buffers().size())
    throw ConfigError(
        "checkpoint/config mismatch in fields: params/buffers counts");

  for (const auto& [name, t] : m.ps.params()) {
    const std::string fname = detail::get_str(is);
    if (fname != name)
      throw ConfigError("checkpoint: expected parameter '" + name +
                        "', file has '" + fname + "'");
    const uint8_t tag = detail::get<uint8_t>(is);
    if (tag != detail::dtype_tag<T>())
      throw ConfigError("checkpoint: dtype mismatch for parameter '" + name +
                        "'");
    Shape4 s{int(detail::get<uint32_t>(is)), int(detail::get<uint32_t>(is)),
             int(detail::get<uint32_t>(is)), int(detail::get<uint32_t>(is))};
    if (!(s == t->shape))
      throw ConfigError("checkpoint: shape mismatch for parameter '" + name +
                        "': file " + s.str() + ", model " + t->shape.str());
    is.read(reinterpret_cast<char*>(t->v.data()),
            std::streamsize(t->v.size() * sizeof(T)));
    if (!is) throw DataError("checkpoint: truncated parameter '" + name + "'");
  }
  for (const auto& [name, st] : m.ps.buffers()) {
    const std::string fname = detail::get_str(is);
    if (fname != name)
      throw ConfigError("checkpoint: expected buffer '" + name +
                        "', file has '" + fname + "'");
    const uint8_t tag = detail::get<uint8_t>(is);
    if (tag != detail::dtype_tag<T>())
      throw ConfigError("checkpoint: dtype mismatch for buffer '" + name +
                        "'");
    const uint32_t ch = detail::get<uint32_t>(is);
    if (ch != st->running_mean.size())
      throw ConfigError("checkpoint: channel mismatch for buffer '" + name +
                        "'");
    is.read(reinterpret_cast<char*>(st->running_mean.data()),
            std::streamsize(ch * sizeof(T)));
    is.read(reinterpret_cast<char*>(st->running_var.data()),
            std::streamsize(ch * sizeof(T)));
    if (!is) throw DataError("checkpoint: truncated buffer '" + name + "'");
  }
  return manifest;
}

/// Dot-path names of leaves that differ between two JSON trees (used to
/// report config/checkpoint mismatches).
inline void json_diff_fields(const nlohmann::json& a, const nlohmann::json& b,
                             const std::string& prefix,
                             std::vector<std::string>& out) {
  if (a.is_object() && b.is_object()) {
    for (auto it = a.begin(); it != a.end(); ++it) {
      const std::string p = prefix.empty() ? it.key() : prefix + "." + it.key();
      if (!b.contains(it.key()))
        out.push_back(p);
      else
        json_diff_fields(it.value(), b.at(it.key()), p, out);
    }
    for (auto it = b.begin(); it != b.end(); ++it)
      if (!a.contains(it.key()))
        out.push_back(prefix.empty() ? it.key() : prefix + "." + it.key());
    return;
  }
  if (a != b) out.push_back(prefix.empty() ? "(root)" : prefix);
}

}  // namespace vqseg
