#pragma once

#include <array>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "bandvq/error.hpp"
#include "bandvq/signal.hpp"
#include "bandvq/vq.hpp"

namespace bandvq::tokens {

// ---------------------------------------------------------------------------
// Global code vocabulary
// ---------------------------------------------------------------------------

inline constexpr std::array<std::uint32_t, kBandCount> kBandOffsets{0, 512, 1024, 1536, 2304};
inline constexpr std::uint32_t kVocabSize = 3328;
inline constexpr std::uint32_t kMaskCode = kVocabSize;
inline constexpr std::uint32_t kCodeEmbeddings = kVocabSize + 1;

static_assert(kBandOffsets[4] + 1024 == kVocabSize);

inline std::uint32_t band_offset(Band b) { return kBandOffsets[band_index(b)]; }

inline std::uint32_t to_global(Band b, std::size_t local) {
  if (local >= vq::codebook_size(b))
    throw ArgumentError("to_global: local index " + std::to_string(local) + " out of range for " +
                        std::string(band_name(b)));
  return band_offset(b) + static_cast<std::uint32_t>(local);
}

inline std::pair<Band, std::size_t> split_global(std::uint32_t global) {
  if (global >= kVocabSize)
    throw ArgumentError("split_global: global index " + std::to_string(global) + " out of range");
  for (std::size_t b = kBandCount; b-- > 0;)
    if (global >= kBandOffsets[b]) return {band_from_index(b), global - kBandOffsets[b]};
  throw ArgumentError("split_global: unreachable");
}

// ---------------------------------------------------------------------------
// Log-power tokens
// ---------------------------------------------------------------------------

inline constexpr std::uint16_t kPowerBins = 128;
inline constexpr std::uint16_t kMaskPower = kPowerBins;
inline constexpr double kPowerEps = 1e-8;
inline constexpr double kLogPowerMin = -0.1;
inline constexpr double kLogPowerMax = 4.0;

/// Clipped log10 mean-square amplitude, uniformly binned into kPowerBins.
/// This is the only power quantizer; pretraining and downstream both call it.
inline std::uint16_t power_token(std::span<const float> raw_token) {
  if (raw_token.empty()) throw ArgumentError("power_token: empty token");
  double p = 0.0;
  for (float v : raw_token) {
    if (!std::isfinite(v)) throw NumericalError("power_token: non-finite sample");
    p += static_cast<double>(v) * v;
  }
  p /= static_cast<double>(raw_token.size());
  double a = std::log10(std::max(p, kPowerEps));
  a = std::clamp(a, kLogPowerMin, kLogPowerMax);
  const double pos = (a - kLogPowerMin) / (kLogPowerMax - kLogPowerMin) * kPowerBins;
  const auto bin = static_cast<std::uint16_t>(std::floor(pos));
  return std::min<std::uint16_t>(kPowerBins - 1, bin);
}

// ---------------------------------------------------------------------------
// Metadata vocabularies
// ---------------------------------------------------------------------------

inline constexpr std::array<std::string_view, 8> kReferenceNames{
    "common_average", "linked_mastoids", "mastoid_single", "cz",
    "earlobe",        "nose",            "bipolar",        "unknown"};
inline constexpr std::uint16_t kReferenceUnknown = 7;

// Band ids 0..4 follow Band; 5 is the dropout/unknown id.
inline constexpr std::uint16_t kBandIdCount = kBandCount + 1;
inline constexpr std::uint16_t kBandUnknown = kBandCount;

enum class TaskFamily : std::uint16_t {
  resting = 0,
  cognitive,
  language,
  sensorimotor,
  bci,
  sensory,
  affective,
  mobility,
  clinical,
  artifact,
  sleep,
  unknown,
  reserved0,
  reserved1,
  reserved2,
  reserved3,
};
inline constexpr std::uint16_t kTaskFamilyCount = 16;
inline constexpr std::uint16_t kTaskUnknown = static_cast<std::uint16_t>(TaskFamily::unknown);

inline constexpr std::array<std::string_view, kTaskFamilyCount> kTaskFamilyNames{
    "resting",  "cognitive", "language", "sensorimotor", "bci",       "sensory",
    "affective", "mobility", "clinical", "artifact",     "sleep",     "unknown",
    "reserved0", "reserved1", "reserved2", "reserved3"};

inline constexpr std::array<std::string_view, 6> kPhaseNames{"baseline", "cue",  "task",
                                                             "feedback", "rest", "unknown"};
inline constexpr std::uint16_t kPhaseUnknown = 5;

struct MetadataIds {
  std::uint16_t reference = kReferenceUnknown;
  std::uint16_t band = kBandUnknown;
  std::uint16_t task_family = kTaskUnknown;
  std::uint16_t phase = kPhaseUnknown;

  static MetadataIds unknown() { return {}; }
  bool operator==(const MetadataIds&) const = default;
};

inline std::string lowercase(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

template <std::size_t N>
std::uint16_t lookup_or(const std::array<std::string_view, N>& names, std::string_view value,
                        std::uint16_t fallback) {
  const std::string v = lowercase(value);
  for (std::size_t i = 0; i < N; ++i)
    if (names[i] == v) return static_cast<std::uint16_t>(i);
  return fallback;
}

inline std::uint16_t reference_id(std::string_view name) {
  return lookup_or(kReferenceNames, name, kReferenceUnknown);
}

inline std::uint16_t phase_id(std::string_view name) {
  return lookup_or(kPhaseNames, name, kPhaseUnknown);
}

inline std::uint16_t task_family_id(std::string_view family_name) {
  return lookup_or(kTaskFamilyNames, family_name, kTaskUnknown);
}

// ---------------------------------------------------------------------------
// Task-family rule table
// ---------------------------------------------------------------------------

/// Default rules, identical to share/task_family_rules.txt.
inline constexpr std::string_view kDefaultTaskRules = R"(# Task-family rules, first match wins.
# Each line: <keyword> <family>. A rule matches when the keyword occurs
# as a substring of the lowercased event label.
version 1
artifact artifact
blink artifact
eog artifact
emg artifact
muscle artifact
jaw artifact
sleep sleep
nrem sleep
spindle sleep
slow_wave sleep
rest resting
baseline resting
eyes_closed resting
eyes_open resting
fixation resting
imagery bci
imagine bci
ssvep bci
p300 bci
speller bci
bci bci
word language
language language
speech language
reading language
sentence language
semantic language
n-back cognitive
nback cognitive
memory cognitive
arithmetic cognitive
mental cognitive
attention cognitive
oddball cognitive
stroop cognitive
flanker cognitive
discrimination cognitive
selection cognitive
decision cognitive
cognitive cognitive
movement sensorimotor
motor sensorimotor
hand sensorimotor
foot sensorimotor
finger sensorimotor
grasp sensorimotor
reach sensorimotor
tapping sensorimotor
visual sensory
auditory sensory
tone sensory
stimul sensory
flash sensory
tactile sensory
sensory sensory
emotion affective
affect affective
music affective
face affective
social affective
valence affective
arousal affective
walk mobility
gait mobility
driving mobility
cycling mobility
mobility mobility
seizure clinical
epilep clinical
clinical clinical
patient clinical
stroke clinical
)";

struct TaskRule {
  std::string keyword;
  std::uint16_t family = kTaskUnknown;
};

class TaskRuleTable {
 public:
  TaskRuleTable() : TaskRuleTable(parse(kDefaultTaskRules)) {}

  static TaskRuleTable parse(std::string_view text) {
    TaskRuleTable t(0);
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty() || line[0] == '#') continue;
      std::istringstream ls(line);
      std::string key, fam, extra;
      ls >> key >> fam;
      if (key.empty()) continue;
      if (fam.empty() || (ls >> extra))
        throw FormatError("task rules line " + std::to_string(lineno) + ": expected '<keyword> <family>'");
      if (key == "version") {
        t.version_ = std::stoi(fam);
        continue;
      }
      const std::uint16_t id = task_family_id(fam);
      if (id == kTaskUnknown && fam != "unknown")
        throw FormatError("task rules line " + std::to_string(lineno) + ": unknown family '" + fam + "'");
      t.rules_.push_back({lowercase(key), id});
    }
    if (t.version_ != 1) throw VersionError("task rules: unsupported version " + std::to_string(t.version_));
    return t;
  }

  static TaskRuleTable load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw MissingInputError("task rules file not found: " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse(ss.str());
  }

  std::uint16_t map(std::string_view label) const {
    if (label.empty()) return kTaskUnknown;
    const std::string l = lowercase(label);
    for (const auto& r : rules_)
      if (l.find(r.keyword) != std::string::npos) return r.family;
    return kTaskUnknown;
  }

  const std::vector<TaskRule>& rules() const { return rules_; }
  int version() const { return version_; }

 private:
  explicit TaskRuleTable(int) {}
  std::vector<TaskRule> rules_;
  int version_ = 0;
};

inline std::uint16_t map_task_family(std::string_view label) {
  static const TaskRuleTable table;
  return table.map(label);
}

// ---------------------------------------------------------------------------
// Channel registry
// ---------------------------------------------------------------------------

inline constexpr std::array<std::string_view, 74> kChannelNames{
    "Fp1", "Fpz", "Fp2", "AF7", "AF3", "AFz", "AF4", "AF8", "F9",  "F7",  "F5",  "F3",  "F1",
    "Fz",  "F2",  "F4",  "F6",  "F8",  "F10", "FT9", "FT7", "FC5", "FC3", "FC1", "FCz", "FC2",
    "FC4", "FC6", "FT8", "FT10", "T7", "C5",  "C3",  "C1",  "Cz",  "C2",  "C4",  "C6",  "T8",
    "TP9", "TP7", "CP5", "CP3", "CP1", "CPz", "CP2", "CP4", "CP6", "TP8", "TP10", "P9", "P7",
    "P5",  "P3",  "P1",  "Pz",  "P2",  "P4",  "P6",  "P8",  "P10", "PO7", "PO3", "POz", "PO4",
    "PO8", "O1",  "Oz",  "O2",  "Iz",  "T3",  "T4",  "T5",  "T6"};
inline constexpr std::uint16_t kChannelUnknown = 74;
inline constexpr std::uint16_t kChannelVocab = 75;

inline std::uint16_t channel_id(std::string_view name) {
  const std::string n = lowercase(name);
  for (std::size_t i = 0; i < kChannelNames.size(); ++i)
    if (lowercase(kChannelNames[i]) == n) return static_cast<std::uint16_t>(i);
  return kChannelUnknown;
}

inline std::string_view channel_name(std::uint16_t id) {
  return id < kChannelNames.size() ? kChannelNames[id] : std::string_view("unknown");
}

inline MetadataIds metadata_for(const RecordingMeta& meta, Band band) {
  MetadataIds ids;
  ids.reference = reference_id(meta.reference);
  ids.band = static_cast<std::uint16_t>(band_index(band));
  ids.task_family = map_task_family(meta.task);
  ids.phase = phase_id(meta.phase);
  return ids;
}

// ---------------------------------------------------------------------------
// Token streams
// ---------------------------------------------------------------------------

/// One band's discrete sequence, flattened time-major: index = t * C + c.
struct TokenStream {
  Band band = Band::alpha;
  std::uint16_t channels = 0;
  std::uint32_t times = 0;
  std::vector<std::uint32_t> codes;
  std::vector<std::uint16_t> powers;
  std::vector<std::uint16_t> channel_ids;
  MetadataIds meta;

  std::size_t size() const { return static_cast<std::size_t>(channels) * times; }
  std::size_t index(std::size_t c, std::size_t t) const { return t * channels + c; }

  void validate() const {
    if (codes.size() != size() || powers.size() != size() || channel_ids.size() != channels)
      throw ShapeError("TokenStream: field lengths disagree with C=" + std::to_string(channels) +
                       ", T=" + std::to_string(times));
  }

  bool operator==(const TokenStream&) const = default;
};

struct StreamOptions {
  std::size_t token_len = vq::kTokenLength;
  double microvolt_scale = 100.0;  // power is measured on band tokens in microvolts
  std::size_t pad_samples = 0;     // reflect pad for band decomposition, 0 -> 1 s
  double rms_eps = vq::kRmsEps;
  double rms_floor = vq::kRmsFloor;
};

using TokenizerSet = std::array<const vq::Tokenizer*, kBandCount>;

/// Builds one band's stream from already-decomposed waveforms.
inline TokenStream stream_from_band(const BandWaveform& wave, const vq::Tokenizer& tokenizer,
                                    const std::vector<std::string>& channel_names,
                                    const RecordingMeta& meta, const StreamOptions& opt = {}) {
  if (tokenizer.band != wave.band)
    throw ArgumentError("build_token_stream: tokenizer band " + std::string(band_name(tokenizer.band)) +
                        " used for " + std::string(band_name(wave.band)));
  const std::size_t len = opt.token_len;
  BandWaveform cropped{wave.band, center_crop(wave.samples, len), wave.sample_rate};
  const std::size_t n = cropped.samples.empty() ? 0 : cropped.samples.front().size();
  if (n < len) throw ArgumentError("build_token_stream: segment shorter than one token");
  const auto toks = vq::tokenize(cropped, len, opt.rms_eps, opt.rms_floor);
  TokenStream s;
  s.band = wave.band;
  s.channels = static_cast<std::uint16_t>(cropped.samples.size());
  s.times = static_cast<std::uint32_t>(n / len);
  s.codes.assign(s.size(), 0);
  s.powers.assign(s.size(), 0);
  for (const auto& name : channel_names) s.channel_ids.push_back(channel_id(name));
  s.meta = metadata_for(meta, wave.band);

  std::vector<std::vector<float>> normalized;
  normalized.reserve(toks.size());
  for (const auto& t : toks) normalized.emplace_back(t.values.begin(), t.values.end());
  const auto local = tokenizer.encode(normalized);
  std::vector<float> raw(len);
  const float uv = static_cast<float>(opt.microvolt_scale);
  for (std::size_t i = 0; i < toks.size(); ++i) {
    const auto& t = toks[i];
    const std::size_t pos = s.index(t.channel_index, t.time_index);
    s.codes[pos] = to_global(wave.band, local[i]);
    const float* src = cropped.samples[t.channel_index].data() + t.time_index * len;
    for (std::size_t j = 0; j < len; ++j) raw[j] = src[j] * uv;
    s.powers[pos] = power_token(raw);
  }
  return s;
}

/// Decomposes a preprocessed segment once and builds all five band streams.
inline std::array<TokenStream, kBandCount> build_token_streams(const EegSegment& seg,
                                                               const TokenizerSet& tokenizers,
                                                               const StreamOptions& opt = {}) {
  const auto bands = band_decompose(seg, opt.pad_samples);
  std::array<TokenStream, kBandCount> out;
  for (Band b : kAllBands) {
    const auto* tk = tokenizers[band_index(b)];
    if (!tk) throw MissingInputError("build_token_streams: no tokenizer for band " + std::string(band_name(b)));
    out[band_index(b)] = stream_from_band(bands[band_index(b)], *tk, seg.channel_names, seg.meta, opt);
  }
  return out;
}

inline TokenStream build_token_stream(const EegSegment& seg, Band band, const vq::Tokenizer& tokenizer,
                                      const StreamOptions& opt = {}) {
  const auto bands = band_decompose(seg, opt.pad_samples);
  return stream_from_band(bands[band_index(band)], tokenizer, seg.channel_names, seg.meta, opt);
}

}  // namespace bandvq::tokens
