#pragma once

#include <array>
#include <cmath>
#include <complex>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "bandvq/data/eegb.hpp"
#include "bandvq/data/manifest.hpp"
#include "bandvq/error.hpp"
#include "bandvq/fft.hpp"
#include "bandvq/rng.hpp"
#include "bandvq/signal.hpp"
#include "bandvq/tokens.hpp"
#include "bandvq/trial.hpp"
#include "bandvq/vq.hpp"

namespace bandvq::data {

struct SynthConfig {
  std::size_t subjects = 8;
  std::size_t trials_per_subject = 24;
  std::size_t classes = 2;
  std::vector<std::string> channel_names{"C3", "C4", "Pz", "Oz"};
  double duration_s = 4.0;
  double sample_rate = 256.0;
  // RMS amplitude per band in microvolts, order delta..gamma.
  std::array<double, kBandCount> band_rms_uv{20.0, 10.0, 10.0, 5.0, 2.0};
  Band class_band = Band::alpha;
  double class_ratio = 2.0;  // amplitude of class k is ratio^k times class 0
  double subject_gain_min = 0.8;
  double subject_gain_max = 1.25;
  double trial_jitter = 0.05;  // per-trial, per-band amplitude factor in [1-j, 1+j]
  double white_noise_uv = 0.5;
  double burst_uv = 0.0;       // optional 10 Hz bursts, peak amplitude
  double line_noise_uv = 0.0;  // optional mains interference
  double line_freq = 50.0;
  std::string reference = "common_average";
  std::string task = "motor imagery";
  std::string phase = "task";
  bool phase_codes_class = false;  // phase "rest" for class 0, "task" otherwise
  std::uint64_t seed = 0;

  void validate() const {
    if (subjects == 0 || trials_per_subject == 0) throw ArgumentError("SynthConfig: need subjects and trials");
    if (classes < 2) throw ArgumentError("SynthConfig: need at least 2 classes");
    if (channel_names.empty() || channel_names.size() > 0xffff) throw ArgumentError("SynthConfig: bad channel list");
    if (!(duration_s > 0.0) || !(sample_rate > 0.0)) throw ArgumentError("SynthConfig: duration and rate must be > 0");
    if (!(class_ratio > 0.0)) throw ArgumentError("SynthConfig: class_ratio must be > 0");
    if (!(subject_gain_min > 0.0) || subject_gain_max < subject_gain_min)
      throw ArgumentError("SynthConfig: need 0 < subject_gain_min <= subject_gain_max");
    if (trial_jitter < 0.0 || trial_jitter >= 1.0) throw ArgumentError("SynthConfig: trial_jitter must be in [0, 1)");
    for (double a : band_rms_uv)
      if (a < 0.0) throw ArgumentError("SynthConfig: negative band amplitude");
  }

  std::size_t samples() const { return static_cast<std::size_t>(std::llround(duration_s * sample_rate)); }
};

/// Unit-RMS Gaussian noise whose spectrum is confined to [lo, hi] Hz.
inline std::vector<double> band_limited_noise(std::size_t n, double rate, double lo, double hi, Rng& rng) {
  const std::size_t bins = n / 2 + 1;
  std::vector<std::complex<double>> spec(bins);
  bool any = false;
  for (std::size_t k = 1; k < bins; ++k) {
    const double f = static_cast<double>(k) * rate / static_cast<double>(n);
    if (f < lo || f > hi) continue;
    const double re = normal(rng), im = normal(rng);
    spec[k] = {re, (n % 2 == 0 && k == bins - 1) ? 0.0 : im};
    any = true;
  }
  if (!any) throw ArgumentError("band_limited_noise: no frequency bins in [" + std::to_string(lo) + ", " +
                                std::to_string(hi) + "] Hz at this length");
  auto x = fft::irfft<double>(spec, n);
  double ms = 0.0;
  for (double v : x) ms += v * v;
  const double inv = 1.0 / std::sqrt(ms / static_cast<double>(n));
  for (double& v : x) v *= inv;
  return x;
}

/// Interior of a canonical band, clear of the filter transition regions.
inline std::pair<double, double> band_interior(Band b) {
  const auto spec = canonical_band(b);
  return {spec.lo + 0.5 * spec.lo_taper + 0.05, spec.hi - 0.5 * spec.hi_taper - 0.05};
}

inline double subject_gain(const SynthConfig& cfg, std::size_t subject) {
  Rng rng(derive_seed(cfg.seed, 0x5b1ec7ULL + subject));
  return uniform(rng, cfg.subject_gain_min, cfg.subject_gain_max);
}

inline std::string subject_name(std::size_t s) {
  std::ostringstream os;
  os << "sub" << std::setw(2) << std::setfill('0') << s + 1;
  return os.str();
}

inline Trial synth_trial(const SynthConfig& cfg, std::size_t subject, std::size_t index) {
  const std::size_t n = cfg.samples();
  const std::size_t label = index % cfg.classes;
  const double gain = subject_gain(cfg, subject);
  Rng rng(derive_seed(derive_seed(cfg.seed, subject + 1), index));
  Trial t;
  t.label = label;
  t.subject = subject_name(subject);
  t.segment.sample_rate = cfg.sample_rate;
  t.segment.channel_names = cfg.channel_names;
  t.segment.meta = {t.subject, cfg.reference, cfg.task,
                    cfg.phase_codes_class ? (label == 0 ? "rest" : "task") : cfg.phase, cfg.line_freq};
  std::array<double, kBandCount> amp{};
  for (Band b : kAllBands) {
    const std::size_t i = band_index(b);
    const double jitter = 1.0 + cfg.trial_jitter * (2.0 * uniform01(rng) - 1.0);
    amp[i] = cfg.band_rms_uv[i] * gain * jitter;
    if (b == cfg.class_band) amp[i] *= std::pow(cfg.class_ratio, static_cast<double>(label));
  }
  const double dt = 1.0 / cfg.sample_rate;
  for (std::size_t c = 0; c < cfg.channel_names.size(); ++c) {
    std::vector<double> x(n, 0.0);
    for (Band b : kAllBands) {
      const auto [lo, hi] = band_interior(b);
      const auto noise = band_limited_noise(n, cfg.sample_rate, lo, hi, rng);
      for (std::size_t i = 0; i < n; ++i) x[i] += amp[band_index(b)] * noise[i];
    }
    if (cfg.burst_uv > 0.0) {
      const double centre = uniform(rng, 0.0, cfg.duration_s), width = 0.3, phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
      for (std::size_t i = 0; i < n; ++i) {
        const double tt = static_cast<double>(i) * dt, g = (tt - centre) / width;
        x[i] += cfg.burst_uv * std::exp(-0.5 * g * g) * std::sin(2.0 * std::numbers::pi * 10.0 * tt + phase);
      }
    }
    if (cfg.line_noise_uv > 0.0) {
      const double phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
      for (std::size_t i = 0; i < n; ++i)
        x[i] += cfg.line_noise_uv * std::sin(2.0 * std::numbers::pi * cfg.line_freq * static_cast<double>(i) * dt + phase);
    }
    std::vector<float> row(n);
    for (std::size_t i = 0; i < n; ++i) row[i] = static_cast<float>(x[i] + cfg.white_noise_uv * normal(rng));
    t.segment.samples.push_back(std::move(row));
  }
  return t;
}

/// Deterministic corpus, subject-major.
inline std::vector<Trial> synth_corpus(const SynthConfig& cfg) {
  cfg.validate();
  std::vector<Trial> out;
  out.reserve(cfg.subjects * cfg.trials_per_subject);
  for (std::size_t s = 0; s < cfg.subjects; ++s)
    for (std::size_t i = 0; i < cfg.trials_per_subject; ++i) out.push_back(synth_trial(cfg, s, i));
  return out;
}

/// Writes trials/<subject>_<index>.eegb plus manifest.jsonl under `dir`.
inline std::vector<ManifestEntry> write_dataset(const std::filesystem::path& dir, const std::vector<Trial>& trials) {
  std::vector<ManifestEntry> entries;
  std::size_t i = 0;
  for (const auto& t : trials) {
    std::ostringstream name;
    name << "trials/" << t.subject << "_" << std::setw(4) << std::setfill('0') << i++ << ".eegb";
    write_eegb(dir / name.str(), t.segment);
    entries.push_back({name.str(), t.subject, t.label, t.segment.meta.task, t.segment.meta.phase, t.segment.meta.reference});
  }
  write_manifest(dir / "manifest.jsonl", entries);
  return entries;
}

/// Loads every trial named by a manifest. Non-empty manifest metadata fields
/// override the EEGB header.
inline std::vector<Trial> read_dataset(const std::filesystem::path& manifest_path) {
  const auto entries = read_manifest(manifest_path);
  const auto base = manifest_path.parent_path();
  std::vector<Trial> out;
  out.reserve(entries.size());
  for (const auto& e : entries) {
    const auto p = base / e.path;
    if (!std::filesystem::exists(p)) throw MissingInputError("trial file not found: " + p.string());
    Trial t{read_eegb(p), e.label, e.subject};
    if (!e.task.empty()) t.segment.meta.task = e.task;
    if (!e.phase.empty()) t.segment.meta.phase = e.phase;
    if (!e.reference.empty()) t.segment.meta.reference = e.reference;
    t.segment.meta.subject = e.subject;
    out.push_back(std::move(t));
  }
  return out;
}

/// Token streams in which every channel carries the same code at each time
/// index, drawn uniformly from the first `codes` entries of `band`. A masked
/// position is therefore predictable from any unmasked channel at that time.
inline std::vector<tokens::TokenStream> spatial_rule_streams(std::size_t count,
                                                             const std::vector<std::string>& channels,
                                                             std::size_t times, Band band, std::size_t codes,
                                                             std::uint64_t seed) {
  if (codes == 0 || codes > vq::codebook_size(band)) throw ArgumentError("spatial_rule_streams: bad code count");
  Rng rng(seed);
  std::vector<tokens::TokenStream> out;
  for (std::size_t k = 0; k < count; ++k) {
    tokens::TokenStream s;
    s.band = band;
    s.channels = static_cast<std::uint16_t>(channels.size());
    s.times = static_cast<std::uint32_t>(times);
    for (const auto& c : channels) s.channel_ids.push_back(tokens::channel_id(c));
    s.meta = tokens::MetadataIds{tokens::reference_id("common_average"),
                                 static_cast<std::uint16_t>(band_index(band)), tokens::kTaskUnknown,
                                 tokens::phase_id("task")};
    for (std::size_t t = 0; t < times; ++t) {
      const auto code = tokens::to_global(band, uniform_index(rng, codes));
      for (std::size_t c = 0; c < channels.size(); ++c) {
        s.codes.push_back(code);
        s.powers.push_back(static_cast<std::uint16_t>(uniform_index(rng, tokens::kPowerBins)));
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace bandvq::data
