#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "bandvq/fft.hpp"
#include "bandvq/signal.hpp"
#include "test_util.hpp"

using namespace bandvq;

namespace {

EegSegment sinusoid_segment(double freq, double rate, double seconds, double amp = 1.0, double phase = 0.3) {
  EegSegment s;
  s.sample_rate = rate;
  s.channel_names = {"Cz"};
  const auto n = static_cast<std::size_t>(std::llround(rate * seconds));
  std::vector<float> row(n);
  for (std::size_t i = 0; i < n; ++i)
    row[i] = static_cast<float>(amp * std::sin(2.0 * std::numbers::pi * freq * static_cast<double>(i) / rate + phase));
  s.samples.push_back(std::move(row));
  return s;
}

double energy(const std::vector<float>& x) {
  double e = 0.0;
  for (float v : x) e += static_cast<double>(v) * v;
  return e;
}

}  // namespace

TEST(Signal, CosineRampEndpoints) {
  EXPECT_DOUBLE_EQ(cosine_ramp(8.0, 8.0, 1.0), 0.5);
  EXPECT_DOUBLE_EQ(cosine_ramp(7.5, 8.0, 1.0), 0.0);
  EXPECT_DOUBLE_EQ(cosine_ramp(8.5, 8.0, 1.0), 1.0);
  EXPECT_NEAR(cosine_ramp(7.75, 8.0, 1.0), 0.5 - 0.5 * std::cos(std::numbers::pi * 0.25), 1e-15);
}

TEST(Signal, BandGainShape) {
  const auto alpha = canonical_band(Band::alpha);
  EXPECT_DOUBLE_EQ(band_gain(10.5, alpha), 1.0);
  EXPECT_DOUBLE_EQ(band_gain(8.0, alpha), 0.5);
  EXPECT_DOUBLE_EQ(band_gain(13.0, alpha), 0.5);
  EXPECT_DOUBLE_EQ(band_gain(5.0, alpha), 0.0);
  EXPECT_DOUBLE_EQ(band_gain(20.0, alpha), 0.0);
}

TEST(Signal, CanonicalBandEdges) {
  EXPECT_EQ(canonical_band(Band::delta).lo, 0.5);
  EXPECT_EQ(canonical_band(Band::delta).hi, 4.0);
  EXPECT_EQ(canonical_band(Band::theta).hi, 8.0);
  EXPECT_EQ(canonical_band(Band::alpha).hi, 13.0);
  EXPECT_EQ(canonical_band(Band::beta).hi, 30.0);
  EXPECT_EQ(canonical_band(Band::gamma).hi, 45.0);
}

TEST(Signal, MasksPartitionPassband) {
  const auto pass = passband_spec();
  double worst = 0.0;
  for (int i = 0; i <= 640000; ++i) {
    const double f = i * 1e-4;
    double s = 0.0;
    for (Band b : kAllBands) s += band_gain(f, canonical_band(b));
    worst = std::max(worst, std::abs(s - band_gain(f, pass)));
  }
  EXPECT_LE(worst, 1e-15);
}

TEST(Signal, BandSpecValidation) {
  EXPECT_THROW((BandSpec{Band::alpha, 8.0, 8.0, 1.0, 1.0}.validate()), ArgumentError);
  EXPECT_THROW((BandSpec{Band::alpha, 8.0, 9.0, 1.0, 1.0}.validate()), ArgumentError);
  EXPECT_NO_THROW(canonical_band(Band::delta).validate());
}

TEST(Signal, ReflectPadOracle) {
  const std::vector<float> x{1, 2, 3, 4};
  const auto p = reflect_pad(x, 2);
  const std::vector<double> want{3, 2, 1, 2, 3, 4, 3, 2};
  EXPECT_EQ(p, want);
}

TEST(Signal, RationalRatio) {
  auto r = rational_ratio(256.0, 128.0);
  EXPECT_EQ(r.up, 1u);
  EXPECT_EQ(r.down, 2u);
  r = rational_ratio(250.0, 128.0);
  EXPECT_EQ(r.up, 64u);
  EXPECT_EQ(r.down, 125u);
}

TEST(Signal, ResampleKeepsInBandSinusoid) {
  const auto seg = sinusoid_segment(10.0, 256.0, 4.0);
  const auto y = resample(seg.samples[0], 256.0, 128.0);
  ASSERT_EQ(y.size(), 512u);
  double worst = 0.0;
  for (std::size_t i = 64; i < 448; ++i) {
    const double want = std::sin(2.0 * std::numbers::pi * 10.0 * static_cast<double>(i) / 128.0 + 0.3);
    worst = std::max(worst, std::abs(y[i] - want));
  }
  EXPECT_LT(worst, 1e-3);
}

TEST(Signal, ResampleIdentityWhenRatesMatch) {
  const auto seg = sinusoid_segment(7.0, 128.0, 1.0);
  EXPECT_EQ(resample(seg.samples[0], 128.0, 128.0), seg.samples[0]);
}

TEST(Signal, TenHertzLandsInAlpha) {
  // unit sin(2 pi 10 t), 4 s at 128 Hz
  const auto seg = sinusoid_segment(10.0, 128.0, 4.0, 1.0, 0.0);
  const auto bands = band_decompose(seg);
  double total = 0.0;
  for (Band b : kAllBands) total += energy(bands[band_index(b)].samples[0]);
  for (Band b : kAllBands) {
    const double share = energy(bands[band_index(b)].samples[0]) / total;
    if (b == Band::alpha)
      EXPECT_GE(share, 0.99);
    else
      EXPECT_LE(share, 0.01) << band_name(b);
  }
}

TEST(Signal, SumOfBandsEqualsPassband) {
  EegSegment seg;
  seg.sample_rate = 128.0;
  seg.channel_names = {"C3", "C4"};
  for (int c = 0; c < 2; ++c) {
    const auto v = testutil::random_values(1024, 40 + c);
    seg.samples.emplace_back(v.begin(), v.end());
  }
  const auto bands = band_decompose(seg);
  const auto pass = passband_spec();
  for (std::size_t c = 0; c < 2; ++c) {
    const auto ref = spectral_filter(seg.samples[c], 128.0, 128, [&](double f) { return band_gain(f, pass); });
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < ref.size(); ++i) {
      double s = 0.0;
      for (Band b : kAllBands) s += bands[band_index(b)].samples[c][i];
      num += (s - ref[i]) * (s - ref[i]);
      den += static_cast<double>(ref[i]) * ref[i];
    }
    EXPECT_LE(std::sqrt(num / den), 1e-3);
  }
}

TEST(Signal, PreprocessRemovesDc) {
  EegSegment seg;
  seg.sample_rate = 256.0;
  seg.channel_names = {"Cz"};
  seg.samples = {std::vector<float>(1024, 50.0f)};
  const auto out = preprocess(seg, {50.0, 128.0, 1.0});
  for (float v : out.samples[0]) EXPECT_LT(std::abs(v), 0.5);  // 1% of the input level
}

TEST(Signal, PreprocessRemovesLineNoise) {
  for (double line : {50.0, 60.0}) {
    const auto seg = sinusoid_segment(line, 256.0, 4.0, 1.0, 0.0);
    const auto out = preprocess(seg, {line, 128.0, 1.0});
    const double in_rms = std::sqrt(energy(seg.samples[0]) / seg.length());
    const double out_rms = std::sqrt(energy(out.samples[0]) / out.length());
    EXPECT_LE(out_rms, 0.05 * in_rms) << line;
  }
}

TEST(Signal, PreprocessScalesPassband) {
  const auto seg = sinusoid_segment(10.0, 256.0, 4.0, 200.0);
  const auto out = preprocess(seg, {50.0, 128.0, 100.0});
  EXPECT_EQ(out.sample_rate, 128.0);
  ASSERT_EQ(out.length(), 512u);
  // away from the reflect-pad boundaries
  float peak = 0.0f;
  for (std::size_t i = 128; i < 384; ++i) peak = std::max(peak, std::abs(out.samples[0][i]));
  EXPECT_NEAR(peak, 2.0, 0.02);
}

TEST(Signal, PreprocessRejectsBadInput) {
  auto seg = sinusoid_segment(10.0, 256.0, 2.0);
  EXPECT_THROW(preprocess(seg, {55.0, 128.0, 100.0}), ArgumentError);
  seg.samples[0][3] = std::nanf("");
  EXPECT_THROW(preprocess(seg, {}), NumericalError);
  auto slow = sinusoid_segment(10.0, 64.0, 2.0);
  EXPECT_THROW(preprocess(slow, {}), ArgumentError);
}

TEST(Signal, CenterCropKeepsMiddle) {
  ChannelMatrix rows{std::vector<float>(300)};
  for (std::size_t i = 0; i < 300; ++i) rows[0][i] = static_cast<float>(i);
  const auto c = center_crop(rows, 128);
  ASSERT_EQ(c[0].size(), 256u);
  EXPECT_EQ(c[0].front(), 22.0f);
}

TEST(Signal, DecomposeNeedsMoreThanPad) {
  const auto seg = sinusoid_segment(10.0, 128.0, 0.5);
  EXPECT_THROW(band_decompose(seg), ArgumentError);
}

TEST(Fft, RoundTripAndParseval) {
  const auto x = testutil::random_values(200, 50);
  const auto X = fft::rfft<double>(x);
  ASSERT_EQ(X.size(), 101u);
  const auto y = fft::irfft<double>(X, 200);
  for (std::size_t i = 0; i < 200; ++i) EXPECT_NEAR(x[i], y[i], 1e-12);
  const auto w = fft::hann_periodic<double>(8);
  EXPECT_DOUBLE_EQ(w[0], 0.0);
  EXPECT_NEAR(w[4], 1.0, 1e-15);
}
