#pragma once

#include <array>
#include <cmath>
#include <complex>
#include <cstddef>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bandvq/error.hpp"
#include "bandvq/fft.hpp"

namespace bandvq {

enum class Band : std::uint8_t { delta = 0, theta = 1, alpha = 2, beta = 3, gamma = 4 };

inline constexpr std::size_t kBandCount = 5;
inline constexpr std::array<Band, kBandCount> kAllBands{Band::delta, Band::theta, Band::alpha,
                                                        Band::beta, Band::gamma};

inline constexpr std::size_t band_index(Band b) { return static_cast<std::size_t>(b); }

inline std::string_view band_name(Band b) {
  constexpr std::array<std::string_view, kBandCount> names{"delta", "theta", "alpha", "beta",
                                                           "gamma"};
  return names[band_index(b)];
}

inline Band band_from_index(std::size_t i) {
  if (i >= kBandCount) throw ArgumentError("band index " + std::to_string(i) + " out of range");
  return static_cast<Band>(i);
}

inline Band parse_band(std::string_view name) {
  for (Band b : kAllBands)
    if (band_name(b) == name) return b;
  throw ArgumentError("unknown band '" + std::string(name) + "'");
}

/// Recording context carried alongside the samples.
struct RecordingMeta {
  std::string subject;
  std::string reference;
  std::string task;   // free-form event/task label, mapped to a task family later
  std::string phase;  // baseline | cue | task | feedback | rest | (anything else -> unknown)
  double line_freq = 50.0;

  bool operator==(const RecordingMeta&) const = default;
};

using ChannelMatrix = std::vector<std::vector<float>>;

struct EegSegment {
  ChannelMatrix samples;  // channels x time
  double sample_rate = 0.0;
  std::vector<std::string> channel_names;
  RecordingMeta meta;

  std::size_t channels() const { return samples.size(); }
  std::size_t length() const { return samples.empty() ? 0 : samples.front().size(); }

  void validate() const {
    if (!(sample_rate > 0.0)) throw ArgumentError("EegSegment: sample_rate must be > 0");
    if (channel_names.size() != samples.size())
      throw ArgumentError("EegSegment: " + std::to_string(channel_names.size()) +
                          " channel names for " + std::to_string(samples.size()) + " rows");
    for (const auto& row : samples)
      if (row.size() != length()) throw ArgumentError("EegSegment: ragged channel rows");
  }

  bool operator==(const EegSegment&) const = default;
};

struct BandSpec {
  Band band = Band::alpha;
  double lo = 8.0;
  double hi = 13.0;
  double lo_taper = 1.0;  // width of the raised-cosine ramp centred on lo
  double hi_taper = 1.0;  // width of the ramp centred on hi

  void validate() const {
    if (!(lo > 0.0) || !(hi > lo)) throw ArgumentError("BandSpec: need 0 < lo < hi");
    if (lo_taper < 0.0 || hi_taper < 0.0) throw ArgumentError("BandSpec: negative taper width");
    if (0.5 * (lo_taper + hi_taper) >= hi - lo)
      throw ArgumentError("BandSpec: taper width must be smaller than the band width");
  }
};

inline constexpr double kPassbandLo = 0.5;
inline constexpr double kPassbandHi = 45.0;
inline constexpr double kDefaultTaper = 1.0;
inline constexpr double kLowEdgeTaper = 0.5;

inline BandSpec canonical_band(Band b) {
  switch (b) {
    case Band::delta: return {b, 0.5, 4.0, kLowEdgeTaper, kDefaultTaper};
    case Band::theta: return {b, 4.0, 8.0, kDefaultTaper, kDefaultTaper};
    case Band::alpha: return {b, 8.0, 13.0, kDefaultTaper, kDefaultTaper};
    case Band::beta: return {b, 13.0, 30.0, kDefaultTaper, kDefaultTaper};
    case Band::gamma: return {b, 30.0, 45.0, kDefaultTaper, kDefaultTaper};
  }
  throw ArgumentError("canonical_band: bad band");
}

/// Rising raised-cosine ramp: 0 below centre - width/2, 1 above centre + width/2,
/// exactly 0.5 at the centre.
inline double cosine_ramp(double f, double centre, double width) {
  if (width <= 0.0) return f >= centre ? 1.0 : 0.0;
  const double start = centre - 0.5 * width;
  if (f <= start) return 0.0;
  if (f >= centre + 0.5 * width) return 1.0;
  return 0.5 - 0.5 * std::cos(std::numbers::pi * (f - start) / width);
}

inline double band_gain(double f, const BandSpec& spec) {
  return cosine_ramp(f, spec.lo, spec.lo_taper) * (1.0 - cosine_ramp(f, spec.hi, spec.hi_taper));
}

/// Frequency mask sampled at bins k * bin_hz, k in [0, num_bins).
inline std::vector<double> band_mask(std::size_t num_bins, double bin_hz, const BandSpec& spec) {
  spec.validate();
  std::vector<double> m(num_bins);
  for (std::size_t k = 0; k < num_bins; ++k) m[k] = band_gain(static_cast<double>(k) * bin_hz, spec);
  return m;
}

/// The 0.5-45 Hz passband, equal to the sum of the five canonical band masks.
inline BandSpec passband_spec() {
  return {Band::delta, kPassbandLo, kPassbandHi, kLowEdgeTaper, kDefaultTaper};
}

/// Cosine-tapered notch: 0 at line_freq, back to 1 at +-half_width.
inline double notch_gain(double f, double line_freq, double half_width = 1.0) {
  const double d = std::abs(f - line_freq);
  if (d >= half_width) return 1.0;
  return 0.5 - 0.5 * std::cos(std::numbers::pi * d / half_width);
}

/// numpy-style "reflect" padding (edge sample not repeated). Requires pad < size.
inline std::vector<double> reflect_pad(std::span<const float> x, std::size_t pad) {
  const std::size_t n = x.size();
  if (pad >= n)
    throw ArgumentError("reflect_pad: channel of " + std::to_string(n) +
                        " samples is too short for a pad of " + std::to_string(pad));
  std::vector<double> out(n + 2 * pad);
  for (std::size_t i = 0; i < pad; ++i) out[i] = x[pad - i];
  for (std::size_t i = 0; i < n; ++i) out[pad + i] = x[i];
  for (std::size_t i = 0; i < pad; ++i) out[pad + n + i] = x[n - 2 - i];
  return out;
}

/// Pads, transforms, scales each bin by gain(freq_hz), inverts and crops.
template <class GainFn>
std::vector<float> spectral_filter(std::span<const float> x, double sample_rate, std::size_t pad,
                                   GainFn&& gain) {
  const auto padded = reflect_pad(x, pad);
  const std::size_t n = padded.size();
  auto spec = fft::rfft<double>(padded);
  const double bin_hz = sample_rate / static_cast<double>(n);
  for (std::size_t k = 0; k < spec.size(); ++k) spec[k] *= gain(static_cast<double>(k) * bin_hz);
  const auto back = fft::irfft<double>(spec, n);
  std::vector<float> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<float>(back[pad + i]);
  return out;
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

struct Ratio {
  std::uint64_t up = 1;
  std::uint64_t down = 1;
};

/// Best rational approximation up/down of to/from with down <= max_den.
inline Ratio rational_ratio(double from_rate, double to_rate, std::uint64_t max_den = 1000) {
  const double r = to_rate / from_rate;
  Ratio best{1, 1};
  double best_err = INFINITY;
  for (std::uint64_t q = 1; q <= max_den; ++q) {
    const double p = std::round(r * static_cast<double>(q));
    if (p < 1.0) continue;
    const double err = std::abs(p / static_cast<double>(q) - r);
    if (err < best_err - 1e-15) {
      best_err = err;
      best = {static_cast<std::uint64_t>(p), q};
    }
  }
  const std::uint64_t g = std::gcd(best.up, best.down);
  return {best.up / g, best.down / g};
}

/// Kaiser-windowed sinc resampler. At unit ratio each output phase uses 64
/// input taps; when decimating the kernel stretches by down/up so the
/// transition band stays fixed relative to the output rate.
inline std::vector<float> resample(std::span<const float> x, double from_rate, double to_rate) {
  const Ratio ratio = rational_ratio(from_rate, to_rate);
  if (ratio.up == ratio.down) return {x.begin(), x.end()};
  const std::size_t n = x.size();
  if (n == 0) return {};
  const double up = static_cast<double>(ratio.up);
  const double down = static_cast<double>(ratio.down);
  const double stretch = std::max(1.0, down / up);
  const double cutoff = 0.5 / stretch;  // cycles per input sample
  const double half_support = 32.0 * stretch;
  constexpr double beta = 8.6;
  const double i0_beta = std::cyl_bessel_i(0.0, beta);
  const std::size_t out_len = static_cast<std::size_t>((n * ratio.up) / ratio.down);

  auto reflect_index = [n](std::ptrdiff_t i) {
    const std::ptrdiff_t period = 2 * static_cast<std::ptrdiff_t>(n) - 2;
    if (period <= 0) return std::size_t{0};
    i %= period;
    if (i < 0) i += period;
    if (i >= static_cast<std::ptrdiff_t>(n)) i = period - i;
    return static_cast<std::size_t>(i);
  };

  std::vector<float> out(out_len);
  std::vector<double> taps;
  for (std::size_t m = 0; m < out_len; ++m) {
    const double t = static_cast<double>(m) * down / up;
    const auto first = static_cast<std::ptrdiff_t>(std::ceil(t - half_support));
    const auto last = static_cast<std::ptrdiff_t>(std::floor(t + half_support));
    double acc = 0.0, wsum = 0.0;
    for (std::ptrdiff_t i = first; i <= last; ++i) {
      const double d = t - static_cast<double>(i);
      const double u = d / half_support;
      if (std::abs(u) >= 1.0) continue;
      const double arg = 2.0 * cutoff * d;
      const double sinc = arg == 0.0 ? 1.0 : std::sin(std::numbers::pi * arg) / (std::numbers::pi * arg);
      const double win = std::cyl_bessel_i(0.0, beta * std::sqrt(1.0 - u * u)) / i0_beta;
      const double w = sinc * win;
      acc += w * x[reflect_index(i)];
      wsum += w;
    }
    out[m] = static_cast<float>(wsum != 0.0 ? acc / wsum : 0.0);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pipeline stages
// ---------------------------------------------------------------------------

struct PreprocessConfig {
  double line_freq = 50.0;
  double target_rate = 128.0;
  double scale = 100.0;
};

/// Notch + 0.5-45 Hz bandpass (one FFT pass at the native rate), resample to
/// the target rate, then divide by the scale factor.
inline EegSegment preprocess(const EegSegment& raw, const PreprocessConfig& cfg) {
  raw.validate();
  if (cfg.line_freq != 50.0 && cfg.line_freq != 60.0)
    throw ArgumentError("preprocess: line frequency must be 50 or 60 Hz");
  if (raw.sample_rate < 2.0 * kPassbandHi)
    throw ArgumentError("preprocess: sample rate " + std::to_string(raw.sample_rate) +
                        " Hz is below the Nyquist rate for 45 Hz");
  if (!(cfg.scale > 0.0)) throw ArgumentError("preprocess: scale must be > 0");
  for (const auto& row : raw.samples)
    for (float v : row)
      if (!std::isfinite(v)) throw NumericalError("preprocess: non-finite sample");

  const BandSpec pass = passband_spec();
  const std::size_t n = raw.length();
  std::size_t pad = static_cast<std::size_t>(std::llround(raw.sample_rate));
  if (n > 0 && pad >= n) pad = n - 1;

  EegSegment out;
  out.channel_names = raw.channel_names;
  out.meta = raw.meta;
  out.meta.line_freq = cfg.line_freq;
  out.sample_rate = cfg.target_rate;
  const float inv_scale = static_cast<float>(1.0 / cfg.scale);
  for (const auto& row : raw.samples) {
    auto filtered = spectral_filter(row, raw.sample_rate, pad, [&](double f) {
      return band_gain(f, pass) * notch_gain(f, cfg.line_freq);
    });
    auto res = resample(filtered, raw.sample_rate, cfg.target_rate);
    for (auto& v : res) v *= inv_scale;
    out.samples.push_back(std::move(res));
  }
  return out;
}

struct BandWaveform {
  Band band = Band::alpha;
  ChannelMatrix samples;
  double sample_rate = 0.0;
};

using BandSet = std::array<BandWaveform, kBandCount>;

/// Splits every channel into the five canonical bands. `pad_samples` == 0
/// selects a one-second reflect pad.
inline BandSet band_decompose(const EegSegment& seg, std::size_t pad_samples = 0) {
  seg.validate();
  const std::size_t pad =
      pad_samples ? pad_samples : static_cast<std::size_t>(std::llround(seg.sample_rate));
  const std::size_t n = seg.length();
  if (n <= pad)
    throw ArgumentError("band_decompose: channel of " + std::to_string(n) +
                        " samples is shorter than the reflect pad (" + std::to_string(pad) + ")");
  const std::size_t padded_len = n + 2 * pad;
  const double bin_hz = seg.sample_rate / static_cast<double>(padded_len);
  const std::size_t bins = padded_len / 2 + 1;

  std::array<std::vector<double>, kBandCount> masks;
  for (Band b : kAllBands) masks[band_index(b)] = band_mask(bins, bin_hz, canonical_band(b));

  BandSet out;
  for (Band b : kAllBands) {
    out[band_index(b)].band = b;
    out[band_index(b)].sample_rate = seg.sample_rate;
    out[band_index(b)].samples.reserve(seg.channels());
  }
  for (const auto& row : seg.samples) {
    const auto padded = reflect_pad(row, pad);
    const auto spec = fft::rfft<double>(padded);
    for (Band b : kAllBands) {
      auto masked = spec;
      const auto& m = masks[band_index(b)];
      for (std::size_t k = 0; k < bins; ++k) masked[k] *= m[k];
      const auto back = fft::irfft<double>(masked, padded_len);
      std::vector<float> crop(n);
      for (std::size_t i = 0; i < n; ++i) crop[i] = static_cast<float>(back[pad + i]);
      out[band_index(b)].samples.push_back(std::move(crop));
    }
  }
  return out;
}

/// Keeps the centred multiple of `token_len` samples of every row.
inline ChannelMatrix center_crop(const ChannelMatrix& rows, std::size_t token_len) {
  ChannelMatrix out;
  for (const auto& r : rows) {
    const std::size_t keep = (r.size() / token_len) * token_len;
    const std::size_t off = (r.size() - keep) / 2;
    out.emplace_back(r.begin() + static_cast<std::ptrdiff_t>(off),
                     r.begin() + static_cast<std::ptrdiff_t>(off + keep));
  }
  return out;
}

}  // namespace bandvq
