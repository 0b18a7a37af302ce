#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>
#include <zlib.h>

#include "bandvq/data/binary.hpp"
#include "bandvq/engine/optim.hpp"
#include "bandvq/engine/tensor.hpp"
#include "bandvq/error.hpp"
#include "bandvq/vq.hpp"

namespace bandvq::data {

inline constexpr std::string_view kCheckpointMagic = "BVQC";
inline constexpr std::uint16_t kCheckpointVersion = 1;

inline std::uint32_t crc32_of(const Bytes& b) {
  return static_cast<std::uint32_t>(::crc32(0L, b.data(), static_cast<uInt>(b.size())));
}

/// 64-bit FNV-1a; used for config fingerprints.
inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Fingerprint of a JSON value; nlohmann dumps object keys sorted, so the
/// dump is canonical.
inline std::uint64_t fingerprint_of(const nlohmann::json& j) { return fnv1a64(j.dump()); }

/// Named, independently checksummed sections plus a config fingerprint.
class Checkpoint {
 public:
  Checkpoint() = default;
  explicit Checkpoint(std::uint64_t fingerprint) : fingerprint_(fingerprint) {}

  std::uint64_t fingerprint() const { return fingerprint_; }
  const std::vector<std::pair<std::string, Bytes>>& sections() const { return sections_; }

  bool has(std::string_view name) const { return find(name) != nullptr; }

  void put(std::string name, Bytes payload) {
    for (auto& [n, b] : sections_)
      if (n == name) {
        b = std::move(payload);
        return;
      }
    sections_.emplace_back(std::move(name), std::move(payload));
  }

  const Bytes& get(std::string_view name) const {
    const Bytes* b = find(name);
    if (!b) throw MissingInputError("checkpoint: no section '" + std::string(name) + "'");
    return *b;
  }

  // -- typed helpers -------------------------------------------------------

  void put_json(std::string name, const nlohmann::json& j) {
    const std::string s = j.dump();
    put(std::move(name), Bytes(s.begin(), s.end()));
  }

  nlohmann::json get_json(std::string_view name) const {
    const auto& b = get(name);
    try {
      return nlohmann::json::parse(b.begin(), b.end());
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError("checkpoint section '" + std::string(name) + "': " + e.what());
    }
  }

  void put_params(std::string name, const engine::ParamList<float>& params) {
    ByteWriter w;
    w.u32(static_cast<std::uint32_t>(params.size()));
    for (const auto& p : params) {
      w.str16(p.name);
      const auto& shape = p.tensor.shape();
      w.u8(static_cast<std::uint8_t>(shape.size()));
      for (auto d : shape) w.u64(d);
      for (float v : p.tensor.data()) w.f32(v);
    }
    put(std::move(name), w.take());
  }

  /// Fills `params` in place; names, order and shapes must match exactly.
  void get_params(std::string_view name, engine::ParamList<float>& params) const {
    const std::string what = "checkpoint section '" + std::string(name) + "'";
    ByteReader r(get(name), what);
    const std::size_t n = r.u32();
    if (n != params.size())
      throw FormatError(what + ": " + std::to_string(n) + " tensors, model has " + std::to_string(params.size()));
    for (auto& p : params) {
      const std::string pname = r.str16();
      if (pname != p.name) throw FormatError(what + ": expected tensor '" + p.name + "', found '" + pname + "'");
      engine::Shape shape(r.u8());
      for (auto& d : shape) d = r.u64();
      if (shape != p.tensor.shape())
        throw ShapeError(what + ": tensor '" + p.name + "' has shape " + engine::shape_str(shape) +
                         ", model expects " + engine::shape_str(p.tensor.shape()));
      for (float& v : p.tensor.mutable_data()) v = r.f32();
    }
    if (r.remaining()) throw FormatError(what + ": trailing bytes");
  }

  void put_optimizer(std::string name, const engine::OptimizerState<float>& st) {
    ByteWriter w;
    w.u64(st.step);
    w.u32(static_cast<std::uint32_t>(st.m.size()));
    for (std::size_t i = 0; i < st.m.size(); ++i) {
      w.u64(st.m[i].size());
      for (float v : st.m[i]) w.f32(v);
      for (float v : st.v[i]) w.f32(v);
    }
    put(std::move(name), w.take());
  }

  engine::OptimizerState<float> get_optimizer(std::string_view name) const {
    const std::string what = "checkpoint section '" + std::string(name) + "'";
    ByteReader r(get(name), what);
    engine::OptimizerState<float> st;
    st.step = r.u64();
    const std::size_t n = r.u32();
    st.m.resize(n);
    st.v.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t len = r.u64();
      r.need(len * 8);
      st.m[i].resize(len);
      st.v[i].resize(len);
      for (float& v : st.m[i]) v = r.f32();
      for (float& v : st.v[i]) v = r.f32();
    }
    if (r.remaining()) throw FormatError(what + ": trailing bytes");
    return st;
  }

  void put_codebook(std::string name, const vq::Codebook& cb) {
    ByteWriter w;
    w.u8(static_cast<std::uint8_t>(band_index(cb.band)));
    w.u32(static_cast<std::uint32_t>(cb.size));
    w.u32(static_cast<std::uint32_t>(cb.dim));
    w.f64(cb.decay);
    w.f64(cb.smoothing);
    for (float v : cb.vectors) w.f32(v);
    for (double v : cb.ema_count) w.f64(v);
    for (double v : cb.ema_sum) w.f64(v);
    put(std::move(name), w.take());
  }

  vq::Codebook get_codebook(std::string_view name) const {
    const std::string what = "checkpoint section '" + std::string(name) + "'";
    ByteReader r(get(name), what);
    vq::Codebook cb;
    const auto b = r.u8();
    if (b >= kBandCount) throw FormatError(what + ": band id out of range");
    cb.band = band_from_index(b);
    cb.size = r.u32();
    cb.dim = r.u32();
    cb.decay = r.f64();
    cb.smoothing = r.f64();
    r.need(cb.size * cb.dim * 4 + cb.size * 8 + cb.size * cb.dim * 8);
    cb.vectors.resize(cb.size * cb.dim);
    cb.ema_count.resize(cb.size);
    cb.ema_sum.resize(cb.size * cb.dim);
    for (float& v : cb.vectors) v = r.f32();
    for (double& v : cb.ema_count) v = r.f64();
    for (double& v : cb.ema_sum) v = r.f64();
    if (r.remaining()) throw FormatError(what + ": trailing bytes");
    return cb;
  }

 private:
  const Bytes* find(std::string_view name) const {
    for (const auto& [n, b] : sections_)
      if (n == name) return &b;
    return nullptr;
  }

  std::uint64_t fingerprint_ = 0;
  std::vector<std::pair<std::string, Bytes>> sections_;
};

inline Bytes encode_checkpoint(const Checkpoint& ck) {
  ByteWriter w;
  w.raw(kCheckpointMagic);
  w.u16(kCheckpointVersion);
  w.u16(0);
  w.u64(ck.fingerprint());
  w.u32(static_cast<std::uint32_t>(ck.sections().size()));
  for (const auto& [name, payload] : ck.sections()) {
    w.str16(name);
    w.u64(payload.size());
    w.u32(crc32_of(payload));
    w.raw(payload);
  }
  return w.take();
}

/// Parses and verifies every section checksum. When `expected_fingerprint`
/// is given, a different stored fingerprint throws FingerprintError.
inline Checkpoint decode_checkpoint(const Bytes& bytes, const std::string& what = "checkpoint",
                                    std::optional<std::uint64_t> expected_fingerprint = std::nullopt) {
  ByteReader r(bytes, what);
  expect_magic(r, kCheckpointMagic, what);
  const auto version = r.u16();
  if (version != kCheckpointVersion)
    throw VersionError(what + ": unsupported version " + std::to_string(version));
  if (r.u16() != 0) throw FormatError(what + ": reserved header field is not zero");
  Checkpoint ck(r.u64());
  if (expected_fingerprint && *expected_fingerprint != ck.fingerprint())
    throw FingerprintError(what + ": config fingerprint " + std::to_string(ck.fingerprint()) +
                           " does not match the current config (" + std::to_string(*expected_fingerprint) + ")");
  const std::size_t n = r.u32();
  for (std::size_t i = 0; i < n; ++i) {
    std::string name = r.str16();
    const std::uint64_t len = r.u64();
    const std::uint32_t crc = r.u32();
    const auto* p = r.span(len);
    Bytes payload(p, p + len);
    if (crc32_of(payload) != crc) throw ChecksumError(what + ": checksum mismatch in section '" + name + "'");
    if (ck.has(name)) throw FormatError(what + ": duplicate section '" + name + "'");
    ck.put(std::move(name), std::move(payload));
  }
  if (r.remaining()) throw FormatError(what + ": trailing bytes after last section");
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  write_file(tmp, encode_checkpoint(ck));
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path,
                                  std::optional<std::uint64_t> expected_fingerprint = std::nullopt) {
  if (!std::filesystem::exists(path)) throw MissingInputError("checkpoint not found: " + path.string());
  return decode_checkpoint(read_file(path), path.string(), expected_fingerprint);
}

// -- tokenizer bundles ------------------------------------------------------

inline nlohmann::json tokenizer_arch(const vq::Tokenizer& tk) {
  return {{"band", std::string(band_name(tk.band))},
          {"token_length", tk.net.token_len()},
          {"latent_dim", tk.net.latent_dim()},
          {"codebook_size", tk.codebook.size}};
}

inline Checkpoint tokenizer_checkpoint(const vq::Tokenizer& tk) {
  const auto arch = tokenizer_arch(tk);
  Checkpoint ck(fingerprint_of(arch));
  ck.put_json("tokenizer.arch", arch);
  ck.put_params("tokenizer.net", tk.net.params());
  ck.put_codebook("tokenizer.codebook", tk.codebook);
  return ck;
}

inline vq::Tokenizer tokenizer_from_checkpoint(const Checkpoint& ck) {
  const auto arch = ck.get_json("tokenizer.arch");
  if (fingerprint_of(arch) != ck.fingerprint())
    throw FingerprintError("tokenizer checkpoint: stored architecture does not match its fingerprint");
  vq::Tokenizer tk;
  try {
    tk.band = parse_band(arch.at("band").get<std::string>());
    tk.net = vq::TokenizerNet<float>(arch.at("token_length").get<std::size_t>(),
                                     arch.at("latent_dim").get<std::size_t>(), 0);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("tokenizer checkpoint: ") + e.what());
  }
  ck.get_params("tokenizer.net", tk.net.params());
  tk.codebook = ck.get_codebook("tokenizer.codebook");
  if (tk.codebook.band != tk.band || tk.codebook.dim != tk.net.latent_dim())
    throw FormatError("tokenizer checkpoint: codebook does not match the network");
  return tk;
}

}  // namespace bandvq::data
