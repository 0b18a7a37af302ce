#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "bandvq/data/binary.hpp"
#include "bandvq/error.hpp"
#include "bandvq/signal.hpp"

namespace bandvq::data {

inline constexpr std::string_view kEegbMagic = "EEGB";
inline constexpr std::uint16_t kEegbVersion = 1;

inline nlohmann::json meta_to_json(const RecordingMeta& m) {
  return {{"subject", m.subject},
          {"reference", m.reference},
          {"task", m.task},
          {"phase", m.phase},
          {"line_freq", m.line_freq}};
}

inline RecordingMeta meta_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw FormatError("EEGB metadata: expected an object");
  RecordingMeta m;
  try {
    m.subject = j.at("subject").get<std::string>();
    m.reference = j.at("reference").get<std::string>();
    m.task = j.at("task").get<std::string>();
    m.phase = j.at("phase").get<std::string>();
    m.line_freq = j.at("line_freq").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("EEGB metadata: ") + e.what());
  }
  return m;
}

inline Bytes encode_eegb(const EegSegment& seg) {
  seg.validate();
  if (seg.channels() > 0xffff) throw ArgumentError("write_eegb: more than 65535 channels");
  ByteWriter w;
  w.raw(kEegbMagic);
  w.u16(kEegbVersion);
  w.u16(static_cast<std::uint16_t>(seg.channels()));
  w.f32(static_cast<float>(seg.sample_rate));
  w.u64(seg.length());
  for (const auto& name : seg.channel_names) w.str16(name);
  w.str32(meta_to_json(seg.meta).dump());
  for (const auto& row : seg.samples)
    for (float v : row) {
      if (!std::isfinite(v)) throw NumericalError("write_eegb: non-finite sample");
      w.f32(v);
    }
  return w.take();
}

inline EegSegment decode_eegb(const Bytes& bytes, const std::string& what = "EEGB") {
  ByteReader r(bytes, what);
  expect_magic(r, kEegbMagic, what);
  const auto version = r.u16();
  if (version != kEegbVersion)
    throw VersionError(what + ": unsupported version " + std::to_string(version) + " (reader supports " +
                       std::to_string(kEegbVersion) + ")");
  const std::size_t channels = r.u16();
  EegSegment seg;
  seg.sample_rate = r.f32();
  const std::uint64_t n = r.u64();
  for (std::size_t c = 0; c < channels; ++c) seg.channel_names.push_back(r.str16());
  const std::string meta = r.str32();
  try {
    seg.meta = meta_from_json(nlohmann::json::parse(meta));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(what + ": metadata is not valid JSON: " + e.what());
  }
  const std::uint64_t payload = static_cast<std::uint64_t>(channels) * n * 4;
  if (r.remaining() < payload) throw TruncationError(what, r.position() + payload, bytes.size());
  if (r.remaining() > payload)
    throw FormatError(what + ": " + std::to_string(r.remaining() - payload) + " trailing bytes after payload");
  seg.samples.assign(channels, std::vector<float>(n));
  for (auto& row : seg.samples)
    for (auto& v : row) v = r.f32();
  if (!(seg.sample_rate > 0.0f) || !std::isfinite(seg.sample_rate))
    throw FormatError(what + ": sample rate must be positive");
  return seg;
}

inline void write_eegb(const std::filesystem::path& path, const EegSegment& seg) {
  write_file(path, encode_eegb(seg));
}

inline EegSegment read_eegb(const std::filesystem::path& path) {
  return decode_eegb(read_file(path), path.string());
}

}  // namespace bandvq::data
