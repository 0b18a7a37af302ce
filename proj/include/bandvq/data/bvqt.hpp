#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "bandvq/data/binary.hpp"
#include "bandvq/error.hpp"
#include "bandvq/tokens.hpp"

namespace bandvq::data {

inline constexpr std::string_view kBvqtMagic = "BVQT";
inline constexpr std::uint16_t kBvqtVersion = 1;

inline Bytes encode_bvqt(const tokens::TokenStream& s) {
  s.validate();
  ByteWriter w;
  w.raw(kBvqtMagic);
  w.u16(kBvqtVersion);
  w.u8(static_cast<std::uint8_t>(band_index(s.band)));
  w.u16(s.channels);
  w.u32(s.times);
  for (auto c : s.codes) w.u32(c);
  for (auto p : s.powers) w.u16(p);
  for (auto id : s.channel_ids) w.u16(id);
  w.u16(s.meta.reference);
  w.u16(s.meta.band);
  w.u16(s.meta.task_family);
  w.u16(s.meta.phase);
  return w.take();
}

inline tokens::TokenStream decode_bvqt(const Bytes& bytes, const std::string& what = "BVQT") {
  using namespace tokens;
  ByteReader r(bytes, what);
  expect_magic(r, kBvqtMagic, what);
  const auto version = r.u16();
  if (version != kBvqtVersion)
    throw VersionError(what + ": unsupported version " + std::to_string(version));
  TokenStream s;
  const auto band = r.u8();
  if (band >= kBandCount) throw FormatError(what + ": band id " + std::to_string(band) + " out of range");
  s.band = band_from_index(band);
  s.channels = r.u16();
  s.times = r.u32();
  const std::uint64_t n = static_cast<std::uint64_t>(s.channels) * s.times;
  const std::uint64_t body = n * 4 + n * 2 + std::uint64_t{s.channels} * 2 + 8;
  if (r.remaining() < body) throw TruncationError(what, r.position() + body, bytes.size());
  if (r.remaining() > body) throw FormatError(what + ": trailing bytes after token stream");
  s.codes.resize(n);
  s.powers.resize(n);
  for (auto& c : s.codes) {
    c = r.u32();
    if (c > kMaskCode) throw FormatError(what + ": code index " + std::to_string(c) + " out of range");
  }
  for (auto& p : s.powers) {
    p = r.u16();
    if (p > kMaskPower) throw FormatError(what + ": power bin " + std::to_string(p) + " out of range");
  }
  s.channel_ids.resize(s.channels);
  for (auto& id : s.channel_ids) {
    id = r.u16();
    if (id >= kChannelVocab) throw FormatError(what + ": channel id " + std::to_string(id) + " out of range");
  }
  s.meta.reference = r.u16();
  s.meta.band = r.u16();
  s.meta.task_family = r.u16();
  s.meta.phase = r.u16();
  if (s.meta.reference >= kReferenceNames.size() || s.meta.band >= kBandIdCount ||
      s.meta.task_family >= kTaskFamilyCount || s.meta.phase >= kPhaseNames.size())
    throw FormatError(what + ": metadata id out of range");
  return s;
}

inline void write_bvqt(const std::filesystem::path& path, const tokens::TokenStream& s) {
  write_file(path, encode_bvqt(s));
}

inline tokens::TokenStream read_bvqt(const std::filesystem::path& path) {
  return decode_bvqt(read_file(path), path.string());
}

}  // namespace bandvq::data
