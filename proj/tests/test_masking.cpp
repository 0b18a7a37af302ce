#include <gtest/gtest.h>

#include <cmath>

#include "bandvq/masking.hpp"
#include "test_util.hpp"

using namespace bandvq;
using namespace bandvq::masking;

namespace {

const std::vector<std::string> k1020{"Fp1", "Fp2", "F7", "F3", "Fz", "F4", "F8", "T7", "C3", "Cz",
                                    "C4",  "T8",  "P7", "P3", "Pz", "P4", "P8", "O1", "O2"};

// Exactly n lateral groups of `size` channels each, built from annotations.
std::vector<ChannelAnnotation> lateral_groups(std::size_t n, std::size_t size = 1) {
  std::vector<ChannelAnnotation> ann;
  for (std::size_t g = 0; g < n; ++g)
    for (std::size_t i = 0; i < size; ++i)
      ann.push_back({"g" + std::to_string(g), static_cast<Region>(g / 2), g % 2 ? Laterality::right : Laterality::left});
  return ann;
}

tokens::TokenStream random_stream(const std::vector<std::string>& names, std::size_t T, std::uint64_t seed) {
  Rng rng(seed);
  tokens::TokenStream s;
  s.band = Band::beta;
  s.channels = static_cast<std::uint16_t>(names.size());
  s.times = static_cast<std::uint32_t>(T);
  for (const auto& n : names) s.channel_ids.push_back(tokens::channel_id(n));
  for (std::size_t i = 0; i < s.size(); ++i) {
    s.codes.push_back(tokens::to_global(Band::beta, uniform_index(rng, 768)));
    s.powers.push_back(static_cast<std::uint16_t>(uniform_index(rng, 128)));
  }
  return s;
}

}  // namespace

TEST(Masking, AnnotationOracle) {
  auto a = annotate_channel("Fp1");
  EXPECT_EQ(a.region, Region::frontal);
  EXPECT_EQ(a.laterality, Laterality::left);
  a = annotate_channel("FC2");
  EXPECT_EQ(a.region, Region::central);
  EXPECT_EQ(a.laterality, Laterality::right);
  a = annotate_channel("Cz");
  EXPECT_EQ(a.region, Region::central);
  EXPECT_EQ(a.laterality, Laterality::midline);
  a = annotate_channel("TP10");
  EXPECT_EQ(a.region, Region::temporal);
  EXPECT_EQ(a.laterality, Laterality::right);
  a = annotate_channel("PO7");
  EXPECT_EQ(a.region, Region::occipital);
  EXPECT_EQ(a.laterality, Laterality::left);
  a = annotate_channel("CPz");
  EXPECT_EQ(a.region, Region::parietal);
  EXPECT_EQ(a.laterality, Laterality::midline);
  a = annotate_channel("T3");
  EXPECT_EQ(a.region, Region::temporal);
  EXPECT_EQ(a.laterality, Laterality::left);
  a = annotate_channel("EKG");
  EXPECT_EQ(a.region, Region::unknown);
  EXPECT_EQ(a.laterality, Laterality::unknown);
}

TEST(Masking, GroupingOf1020) {
  const auto g = group_channels(annotate(k1020));
  // lateral: frontal L/R, central L/R, temporal L/R, parietal L/R, occipital L/R
  EXPECT_EQ(g.groups[0].size(), 10u);
  // midline: Fz, Cz, Pz
  EXPECT_EQ(g.groups[1].size(), 3u);
  EXPECT_TRUE(g.groups[2].empty());
  std::size_t members = 0;
  for (const auto& cls : g.groups)
    for (const auto& grp : cls) members += grp.size();
  EXPECT_EQ(members, k1020.size());
}

TEST(Masking, CeilingCountsMatchIntegerOracle) {
  const int quarters[] = {0, 1, 2, 4};  // p = 0, 0.25, 0.5, 1
  for (std::size_t n = 1; n <= 12; ++n)
    for (int q : quarters) {
      const double p = q / 4.0;
      const std::size_t want = (q * n + 3) / 4;  // ceil(q n / 4) in integers
      EXPECT_EQ(groups_to_sample(p, n), want) << "p=" << p << " |G|=" << n;
      // and what sample_mask actually masks
      const auto ann = lateral_groups(n);
      const auto plan = sample_mask(ann, 3, p, std::uint64_t{n * 10 + q});
      for (std::size_t t = 0; t < 3; ++t) {
        std::size_t masked = 0;
        for (std::size_t c = 0; c < ann.size(); ++c) masked += plan.at(c, t);
        EXPECT_EQ(masked, want) << "p=" << p << " |G|=" << n;
      }
    }
}

TEST(Masking, MidlineAndLateralSampledSeparately) {
  const auto ann = annotate(k1020);
  const auto g = group_channels(ann);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto plan = sample_mask(ann, 2, 0.5, seed);
    for (std::size_t t = 0; t < 2; ++t) {
      std::size_t lat = 0, mid = 0;
      for (const auto& grp : g.groups[0]) lat += plan.at(grp[0], t);
      for (const auto& grp : g.groups[1]) mid += plan.at(grp[0], t);
      EXPECT_EQ(lat, 5u);
      EXPECT_EQ(mid, 2u);
      // groups are masked whole
      for (const auto& cls : g.groups)
        for (const auto& grp : cls)
          for (std::size_t c : grp) EXPECT_EQ(plan.at(c, t), plan.at(grp[0], t));
    }
  }
}

TEST(Masking, EmpiricalFractionMatchesAnalytic) {
  const auto ann = annotate(k1020);
  for (double p : {0.25, 0.5, 1.0}) {
    const double analytic = expected_mask_fraction(ann, p);
    double masked = 0.0, total = 0.0;
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
      const auto plan = sample_mask(ann, 4, p, seed);
      masked += static_cast<double>(plan.count());
      total += static_cast<double>(plan.mask.size());
    }
    EXPECT_NEAR(masked / total, analytic, 0.02 * analytic) << "p=" << p;
  }
  EXPECT_EQ(expected_mask_fraction(ann, 0.0), 0.0);
  EXPECT_EQ(expected_mask_fraction(ann, 1.0), 1.0);
}

TEST(Masking, PlanIsDeterministicPerSeed) {
  const auto ann = annotate(k1020);
  EXPECT_EQ(sample_mask(ann, 5, 0.5, std::uint64_t{9}), sample_mask(ann, 5, 0.5, std::uint64_t{9}));
  EXPECT_NE(sample_mask(ann, 5, 0.5, std::uint64_t{9}).mask, sample_mask(ann, 5, 0.5, std::uint64_t{10}).mask);
  EXPECT_THROW(sample_mask(ann, 5, 1.5, std::uint64_t{1}), ArgumentError);
}

TEST(Masking, ApplyRestoreRoundTrip) {
  const auto s = random_stream(k1020, 6, 3);
  const auto ann = annotate(k1020);
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto plan = sample_mask(ann, 6, 0.5, seed);
    const auto m = apply_mask(s, plan);
    EXPECT_EQ(m.targets.positions.size(), plan.count());
    for (std::size_t c = 0; c < s.channels; ++c)
      for (std::size_t t = 0; t < s.times; ++t) {
        const auto i = s.index(c, t);
        if (plan.at(c, t)) {
          EXPECT_EQ(m.stream.codes[i], tokens::kMaskCode);
          EXPECT_EQ(m.stream.powers[i], tokens::kMaskPower);
        } else {
          EXPECT_EQ(m.stream.codes[i], s.codes[i]);
          EXPECT_EQ(m.stream.powers[i], s.powers[i]);
        }
      }
    EXPECT_EQ(restore(m), s);
  }
  auto bad = sample_mask(ann, 5, 0.5, std::uint64_t{0});
  EXPECT_THROW(apply_mask(s, bad), ShapeError);
}

TEST(Masking, UnknownChannelsStillMaskable) {
  const std::vector<std::string> names{"EKG", "X1", "A2"};
  const auto plan = sample_mask(annotate(names), 1, 0.5, std::uint64_t{2});
  EXPECT_GT(plan.count(), 0u);
}
