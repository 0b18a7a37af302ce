#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "bandvq/tokens.hpp"
#include "test_util.hpp"

using namespace bandvq;
using namespace bandvq::tokens;

namespace {

// Direct evaluation of the clipped, binned log-power formula.
std::uint16_t power_formula(const std::vector<float>& x) {
  long double p = 0;
  for (float v : x) p += static_cast<long double>(v) * v;
  p /= x.size();
  double a = std::log10(std::max(static_cast<double>(p), 1e-8));
  if (a < -0.1) a = -0.1;
  if (a > 4.0) a = 4.0;
  const double bin = std::floor((a + 0.1) / 4.1 * 128.0);
  return static_cast<std::uint16_t>(std::min(127.0, bin));
}

vq::Tokenizer random_tokenizer(Band b, std::uint64_t seed) {
  vq::Tokenizer tk;
  tk.band = b;
  tk.net = vq::TokenizerNet<float>(128, 32, seed);
  const auto v = testutil::random_values(vq::codebook_size(b) * 32, seed + 1, 0.5);
  tk.codebook = vq::Codebook::from_entries(b, 32, std::vector<float>(v.begin(), v.end()));
  return tk;
}

}  // namespace

TEST(Tokens, GlobalVocabularyConstants) {
  EXPECT_EQ(kBandOffsets, (std::array<std::uint32_t, 5>{0, 512, 1024, 1536, 2304}));
  EXPECT_EQ(kVocabSize, 3328u);
  EXPECT_EQ(kMaskCode, 3328u);
  EXPECT_EQ(kPowerBins, 128u);
  EXPECT_EQ(kMaskPower, 128u);
  std::uint32_t sum = 0;
  for (Band b : kAllBands) {
    EXPECT_EQ(band_offset(b), sum);
    sum += static_cast<std::uint32_t>(vq::codebook_size(b));
  }
  EXPECT_EQ(sum, kVocabSize);
}

TEST(Tokens, GlobalIndexBijection) {
  std::set<std::uint32_t> seen;
  for (Band b : kAllBands)
    for (std::size_t k = 0; k < vq::codebook_size(b); ++k) {
      const auto g = to_global(b, k);
      ASSERT_LT(g, kVocabSize);
      EXPECT_TRUE(seen.insert(g).second);
      const auto [bb, kk] = split_global(g);
      EXPECT_EQ(bb, b);
      EXPECT_EQ(kk, k);
    }
  EXPECT_EQ(seen.size(), 3328u);
  for (std::uint32_t g = 0; g < kVocabSize; ++g) {
    const auto [b, k] = split_global(g);
    EXPECT_EQ(to_global(b, k), g);
  }
  EXPECT_THROW(split_global(kMaskCode), ArgumentError);
  EXPECT_THROW(to_global(Band::beta, 768), ArgumentError);
}

TEST(Tokens, PowerTokenMatchesFormula) {
  Rng rng(7);
  std::size_t low_clip = 0, high_clip = 0;
  for (int i = 0; i < 5000; ++i) {
    const double amp = std::pow(10.0, uniform(rng, -6.0, 3.0));
    std::vector<float> x(128);
    for (auto& v : x) v = static_cast<float>(amp * normal(rng));
    const auto got = power_token(x);
    EXPECT_EQ(got, power_formula(x));
    low_clip += got == 0;
    high_clip += got == 127;
  }
  EXPECT_GT(low_clip, 0u);
  EXPECT_GT(high_clip, 0u);
  EXPECT_EQ(power_token(std::vector<float>(128, 0.0f)), 0);
  EXPECT_EQ(power_token(std::vector<float>(128, 1000.0f)), 127);  // log10 p = 6 clips to 4
  EXPECT_EQ(power_token(std::vector<float>(128, 100.0f)), 127);   // exactly the upper edge
  EXPECT_EQ(power_token(std::vector<float>(128, 1.0f)), 3);       // (0 + 0.1) / 4.1 * 128 = 3.12
  EXPECT_THROW(power_token(std::vector<float>{}), ArgumentError);
}

TEST(Tokens, MetadataIds) {
  EXPECT_EQ(reference_id("Common_Average"), 0);
  EXPECT_EQ(reference_id("nonsense"), kReferenceUnknown);
  EXPECT_EQ(phase_id("baseline"), 0);
  EXPECT_EQ(phase_id("TASK"), 2);
  EXPECT_EQ(phase_id("warmup"), kPhaseUnknown);
  const auto ids = metadata_for({"s1", "common_average", "motor imagery", "task", 50.0}, Band::beta);
  EXPECT_EQ(ids.band, 3);
  EXPECT_EQ(ids.task_family, static_cast<std::uint16_t>(TaskFamily::bci));
  EXPECT_EQ(MetadataIds::unknown().band, kBandUnknown);
  EXPECT_EQ(kTaskFamilyCount, 16);
}

TEST(Tokens, TaskFamilyRules) {
  EXPECT_EQ(map_task_family("Eyes_Closed"), static_cast<std::uint16_t>(TaskFamily::resting));
  EXPECT_EQ(map_task_family("n-back 2"), static_cast<std::uint16_t>(TaskFamily::cognitive));
  EXPECT_EQ(map_task_family("left hand movement"), static_cast<std::uint16_t>(TaskFamily::sensorimotor));
  EXPECT_EQ(map_task_family("blink during rest"), static_cast<std::uint16_t>(TaskFamily::artifact));
  EXPECT_EQ(map_task_family("qwerty"), kTaskUnknown);
  EXPECT_EQ(map_task_family(""), kTaskUnknown);
}

TEST(Tokens, RuleFileMatchesBuiltIn) {
  std::ifstream f(std::string(BANDVQ_SOURCE_DIR) + "/share/task_family_rules.txt");
  ASSERT_TRUE(f.good());
  std::stringstream ss;
  ss << f.rdbuf();
  EXPECT_EQ(ss.str(), std::string(kDefaultTaskRules));
  const auto t = TaskRuleTable::load(std::string(BANDVQ_SOURCE_DIR) + "/share/task_family_rules.txt");
  EXPECT_EQ(t.version(), 1);
  std::set<std::string> keys;
  for (const auto& r : t.rules()) EXPECT_TRUE(keys.insert(r.keyword).second) << "duplicate " << r.keyword;
}

TEST(Tokens, RuleParserErrors) {
  EXPECT_THROW(TaskRuleTable::parse("version 2\n"), VersionError);
  EXPECT_THROW(TaskRuleTable::parse("version 1\nfoo notafamily\n"), FormatError);
  EXPECT_THROW(TaskRuleTable::parse("version 1\nfoo bci extra\n"), FormatError);
  EXPECT_THROW(TaskRuleTable::load("/nonexistent/rules.txt"), MissingInputError);
  const auto t = TaskRuleTable::parse("version 1\nZap sleep\n");
  EXPECT_EQ(t.map("big zap"), static_cast<std::uint16_t>(TaskFamily::sleep));
}

TEST(Tokens, ChannelRegistry) {
  EXPECT_EQ(kChannelNames.size(), 74u);
  EXPECT_EQ(channel_id("cz"), channel_id("Cz"));
  EXPECT_EQ(channel_name(channel_id("Pz")), "Pz");
  EXPECT_EQ(channel_id("X9"), kChannelUnknown);
  std::set<std::string> names;
  for (auto n : kChannelNames) EXPECT_TRUE(names.insert(lowercase(n)).second);
}

TEST(Tokens, StreamLayoutIsTimeMajor) {
  TokenStream s;
  s.channels = 3;
  s.times = 4;
  EXPECT_EQ(s.index(0, 0), 0u);
  EXPECT_EQ(s.index(2, 0), 2u);
  EXPECT_EQ(s.index(0, 1), 3u);
  EXPECT_EQ(s.index(1, 3), 10u);
  s.codes.resize(12);
  s.powers.resize(12);
  s.channel_ids.resize(2);
  EXPECT_THROW(s.validate(), ShapeError);
}

TEST(Tokens, StreamFromBandUsesMicrovoltPower) {
  const auto tk = random_tokenizer(Band::alpha, 3);
  BandWaveform w{Band::alpha, {}, 128.0};
  Rng rng(4);
  for (int c = 0; c < 2; ++c) {
    std::vector<float> row(3 * 128 + 10);
    for (auto& v : row) v = static_cast<float>(0.2 * normal(rng));
    w.samples.push_back(row);
  }
  const RecordingMeta meta{"s", "linked_ears", "rest", "baseline", 50.0};
  const auto s = stream_from_band(w, tk, {"C3", "C4"}, meta);
  EXPECT_EQ(s.channels, 2);
  EXPECT_EQ(s.times, 3u);
  s.validate();
  const auto crop = center_crop(w.samples, 128);
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t c = 0; c < 2; ++c) {
      const auto pos = s.index(c, t);
      const auto [b, local] = split_global(s.codes[pos]);
      EXPECT_EQ(b, Band::alpha);
      std::vector<float> raw(crop[c].begin() + t * 128, crop[c].begin() + (t + 1) * 128);
      for (auto& v : raw) v *= 100.0f;
      EXPECT_EQ(s.powers[pos], power_token(raw));
      // the code is the tokenizer's choice for the normalized token
      std::vector<float> norm(128);
      const double rms = vq::token_rms(std::span<const float>(crop[c].data() + t * 128, 128));
      for (std::size_t j = 0; j < 128; ++j) norm[j] = static_cast<float>(crop[c][t * 128 + j] / rms);
      EXPECT_EQ(local, tk.encode({norm})[0]);
    }
  EXPECT_EQ(s.meta.phase, 0);
  EXPECT_EQ(s.meta.band, 2);
  EXPECT_EQ(s.channel_ids[1], channel_id("C4"));
  EXPECT_THROW(stream_from_band(w, random_tokenizer(Band::theta, 5), {"C3", "C4"}, meta), ArgumentError);
}
