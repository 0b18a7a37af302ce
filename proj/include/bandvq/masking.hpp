#pragma once

#include <array>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "bandvq/error.hpp"
#include "bandvq/rng.hpp"
#include "bandvq/tokens.hpp"

namespace bandvq::masking {

enum class Region : std::uint8_t { frontal, central, temporal, parietal, occipital, unknown };
enum class Laterality : std::uint8_t { left, right, midline, unknown };

struct ChannelAnnotation {
  std::string name;
  Region region = Region::unknown;
  Laterality laterality = Laterality::unknown;

  bool operator==(const ChannelAnnotation&) const = default;
};

namespace detail {

struct PrefixRule {
  std::string_view prefix;
  Region region;
};

// Longest matching prefix wins, so "FC" beats "F" and "TP" beats "T".
inline constexpr std::array<PrefixRule, 12> kPrefixes{{
    {"fp", Region::frontal},
    {"af", Region::frontal},
    {"f", Region::frontal},
    {"fc", Region::central},
    {"c", Region::central},
    {"ft", Region::temporal},
    {"t", Region::temporal},
    {"tp", Region::temporal},
    {"cp", Region::parietal},
    {"p", Region::parietal},
    {"po", Region::occipital},
    {"o", Region::occipital},
}};

}  // namespace detail

inline ChannelAnnotation annotate_channel(std::string_view name) {
  ChannelAnnotation a;
  a.name = std::string(name);
  const std::string lower = tokens::lowercase(name);
  std::size_t best = 0;
  for (const auto& r : detail::kPrefixes) {
    if (r.prefix.size() > best && lower.starts_with(r.prefix)) {
      best = r.prefix.size();
      a.region = r.region;
    }
  }
  if (!lower.empty() && lower.back() == 'z') {
    a.laterality = Laterality::midline;
  } else {
    std::size_t i = lower.size();
    while (i > 0 && std::isdigit(static_cast<unsigned char>(lower[i - 1]))) --i;
    if (i < lower.size()) {
      const int digit = lower.back() - '0';
      a.laterality = digit % 2 == 1 ? Laterality::left : Laterality::right;
    }
  }
  return a;
}

inline std::vector<ChannelAnnotation> annotate(const std::vector<std::string>& names) {
  std::vector<ChannelAnnotation> out;
  out.reserve(names.size());
  for (const auto& n : names) out.push_back(annotate_channel(n));
  return out;
}

inline std::vector<ChannelAnnotation> annotate_ids(const std::vector<std::uint16_t>& ids) {
  std::vector<ChannelAnnotation> out;
  out.reserve(ids.size());
  for (auto id : ids) out.push_back(annotate_channel(tokens::channel_name(id)));
  return out;
}

/// Lateral groups are (region, left|right), midline groups (region, midline);
/// channels with unknown laterality form a third class sampled the same way.
enum class GroupClass : std::uint8_t { lateral = 0, midline = 1, other = 2 };

inline GroupClass group_class(Laterality l) {
  switch (l) {
    case Laterality::left:
    case Laterality::right: return GroupClass::lateral;
    case Laterality::midline: return GroupClass::midline;
    default: return GroupClass::other;
  }
}

struct Grouping {
  // groups[class] = list of groups; each group lists member channel indices.
  std::array<std::vector<std::vector<std::size_t>>, 3> groups;
};

inline Grouping group_channels(const std::vector<ChannelAnnotation>& ann) {
  Grouping g;
  std::array<std::map<std::pair<Region, Laterality>, std::size_t>, 3> slot;
  for (std::size_t c = 0; c < ann.size(); ++c) {
    const auto cls = static_cast<std::size_t>(group_class(ann[c].laterality));
    const auto key = std::make_pair(ann[c].region, ann[c].laterality);
    auto it = slot[cls].find(key);
    if (it == slot[cls].end()) {
      it = slot[cls].emplace(key, g.groups[cls].size()).first;
      g.groups[cls].emplace_back();
    }
    g.groups[cls][it->second].push_back(c);
  }
  return g;
}

/// ceil(p * n) computed so that exact products are not pushed up by rounding.
inline std::size_t groups_to_sample(double p_mask, std::size_t n_groups) {
  const double x = p_mask * static_cast<double>(n_groups);
  const double r = std::round(x);
  const double k = std::abs(x - r) < 1e-9 ? r : std::ceil(x);
  return std::min(n_groups, static_cast<std::size_t>(k));
}

struct MaskPlan {
  std::size_t channels = 0;
  std::size_t times = 0;
  std::vector<std::uint8_t> mask;  // mask[c * times + t]
  double p_mask = 0.5;
  std::uint64_t seed = 0;

  bool at(std::size_t c, std::size_t t) const { return mask[c * times + t] != 0; }
  std::size_t count() const {
    std::size_t n = 0;
    for (auto m : mask) n += m;
    return n;
  }
  bool operator==(const MaskPlan&) const = default;
};

/// Samples, independently at every time index, ceil(p * |G|) groups of each
/// class without replacement and masks all their channels.
inline MaskPlan sample_mask(const std::vector<ChannelAnnotation>& ann, std::size_t times,
                            double p_mask, Rng& rng) {
  if (!(p_mask >= 0.0 && p_mask <= 1.0)) throw ArgumentError("sample_mask: p_mask must be in [0, 1]");
  MaskPlan plan;
  plan.channels = ann.size();
  plan.times = times;
  plan.p_mask = p_mask;
  plan.mask.assign(ann.size() * times, 0);
  const Grouping g = group_channels(ann);
  for (std::size_t t = 0; t < times; ++t) {
    for (const auto& cls : g.groups) {
      const std::size_t k = groups_to_sample(p_mask, cls.size());
      for (std::size_t gi : sample_without_replacement(rng, cls.size(), k))
        for (std::size_t c : cls[gi]) plan.mask[c * times + t] = 1;
    }
  }
  return plan;
}

inline MaskPlan sample_mask(const std::vector<ChannelAnnotation>& ann, std::size_t times,
                            double p_mask, std::uint64_t seed) {
  Rng rng(seed);
  auto plan = sample_mask(ann, times, p_mask, rng);
  plan.seed = seed;
  return plan;
}

/// Expected fraction of masked channel-time positions implied by the groups.
inline double expected_mask_fraction(const std::vector<ChannelAnnotation>& ann, double p_mask) {
  if (ann.empty()) return 0.0;
  const Grouping g = group_channels(ann);
  double masked = 0.0;
  for (const auto& cls : g.groups) {
    if (cls.empty()) continue;
    const double frac = static_cast<double>(groups_to_sample(p_mask, cls.size())) /
                        static_cast<double>(cls.size());
    for (const auto& grp : cls) masked += frac * static_cast<double>(grp.size());
  }
  return masked / static_cast<double>(ann.size());
}

/// Original values at the masked positions (flattened time-major indices).
struct MaskTargets {
  std::vector<std::size_t> positions;
  std::vector<std::uint32_t> codes;
  std::vector<std::uint16_t> powers;

  bool empty() const { return positions.empty(); }
};

struct MaskedStream {
  tokens::TokenStream stream;
  MaskTargets targets;
};

inline MaskedStream apply_mask(const tokens::TokenStream& stream, const MaskPlan& plan) {
  stream.validate();
  if (plan.channels != stream.channels || plan.times != stream.times)
    throw ShapeError("apply_mask: plan " + std::to_string(plan.channels) + "x" +
                     std::to_string(plan.times) + " vs stream " + std::to_string(stream.channels) +
                     "x" + std::to_string(stream.times));
  MaskedStream out{stream, {}};
  for (std::size_t t = 0; t < stream.times; ++t)
    for (std::size_t c = 0; c < stream.channels; ++c) {
      if (!plan.at(c, t)) continue;
      const std::size_t i = stream.index(c, t);
      out.targets.positions.push_back(i);
      out.targets.codes.push_back(stream.codes[i]);
      out.targets.powers.push_back(stream.powers[i]);
      out.stream.codes[i] = tokens::kMaskCode;
      out.stream.powers[i] = tokens::kMaskPower;
    }
  return out;
}

inline tokens::TokenStream restore(const MaskedStream& masked) {
  tokens::TokenStream s = masked.stream;
  const auto& t = masked.targets;
  for (std::size_t k = 0; k < t.positions.size(); ++k) {
    s.codes.at(t.positions[k]) = t.codes[k];
    s.powers.at(t.positions[k]) = t.powers[k];
  }
  return s;
}

}  // namespace bandvq::masking
