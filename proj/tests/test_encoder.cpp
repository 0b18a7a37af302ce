#include <gtest/gtest.h>

#include <cmath>

#include "bandvq/data/synth.hpp"
#include "bandvq/encoder.hpp"
#include "test_util.hpp"

using namespace bandvq;
using namespace bandvq::encoder;
using engine::Tensor;

namespace {

EncoderConfig tiny(std::size_t layers = 2, std::size_t d = 8, std::size_t heads = 2) {
  EncoderConfig c;
  c.layers = layers;
  c.d = d;
  c.heads = heads;
  c.max_T = 8;
  c.init_std = 0.3;
  c.seed = 17;
  return c;
}

tokens::TokenStream stream(Band b, std::vector<std::string> names, std::size_t T, std::uint64_t seed) {
  Rng rng(seed);
  tokens::TokenStream s;
  s.band = b;
  s.channels = static_cast<std::uint16_t>(names.size());
  s.times = static_cast<std::uint32_t>(T);
  for (const auto& n : names) s.channel_ids.push_back(tokens::channel_id(n));
  for (std::size_t i = 0; i < s.size(); ++i) {
    s.codes.push_back(tokens::to_global(b, uniform_index(rng, vq::codebook_size(b))));
    s.powers.push_back(static_cast<std::uint16_t>(uniform_index(rng, 128)));
  }
  s.meta = {0, static_cast<std::uint16_t>(band_index(b)), 4, 2};
  return s;
}

void zero_param(engine::ParamList<double>& ps, const std::string& suffix) {
  for (auto& p : ps)
    if (p.name.size() >= suffix.size() && p.name.compare(p.name.size() - suffix.size(), suffix.size(), suffix) == 0)
      for (auto& v : p.tensor.mutable_data()) v = 0.0;
}

}  // namespace

TEST(Encoder, ReferenceDefaults) {
  EncoderConfig c;
  EXPECT_EQ(c.layers, 12u);
  EXPECT_EQ(c.d, 256u);
  EXPECT_EQ(c.heads, 8u);
  EXPECT_EQ(c.code_vocab, 3329u);
  EXPECT_EQ(c.power_vocab, 129u);
  EXPECT_EQ(c.p_meta, 0.1);
  PretrainConfig p;
  EXPECT_EQ(p.batch_size, 16u);
  EXPECT_EQ(p.schedule.peak_lr, 3e-4);
  EXPECT_EQ(p.schedule.min_lr, 3e-5);
  EXPECT_EQ(p.schedule.warmup_steps, 10000u);
  EXPECT_EQ(p.adamw.weight_decay, 1e-2);
  EXPECT_EQ(p.adamw.clip_norm, 1.0);
  EXPECT_EQ(p.p_mask, 0.5);
  EXPECT_THROW((EncoderConfig{1, 10, 3}.validate()), ArgumentError);
}

TEST(Encoder, ParameterLayout) {
  TransformerEncoder<float> e(tiny(3));
  EXPECT_EQ(e.params().size(), 8u + 3u * 12u + 2u);
  EXPECT_EQ(e.params()[0].name, "emb.code");
  EXPECT_EQ(e.params()[0].tensor.shape(), (engine::Shape{3329, 8}));
  EXPECT_EQ(e.params().back().name, "final_ln.b");
}

TEST(Encoder, ZeroedResidualBranchesGiveIdentity) {
  auto e = TransformerEncoder<float>(tiny()).cast<double>();
  zero_param(e.params(), "attn.out.w");
  zero_param(e.params(), "attn.out.b");
  zero_param(e.params(), "ffn.w2");
  zero_param(e.params(), "ffn.b2");
  auto x = testutil::random_tensor({2 * 9, 8}, 3, 1.0, false);
  auto y = e.encode(x, 2, false);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(y.at(i), x.at(i));
}

TEST(Encoder, LayerStackIsPermutationEquivariant) {
  auto e = TransformerEncoder<float>(tiny()).cast<double>();
  const std::size_t N = 7, d = 8;
  auto x = testutil::random_tensor({N, d}, 4, 1.0, false);
  const std::vector<std::size_t> perm{3, 0, 6, 1, 5, 2, 4};
  auto px = engine::gather_rows(x, perm);
  auto y = e.encode(x, 1), py = e.encode(px, 1);
  for (std::size_t r = 0; r < N; ++r)
    for (std::size_t c = 0; c < d; ++c) EXPECT_NEAR(py.at(r * d + c), y.at(perm[r] * d + c), 1e-12);
}

TEST(Encoder, SequencesInABatchDoNotInteract) {
  auto e = TransformerEncoder<float>(tiny()).cast<double>();
  auto x = testutil::random_tensor({12, 8}, 5, 1.0, false);
  auto both = e.encode(x, 2);
  auto first = e.encode(engine::slice_rows(x, 0, 6), 1);
  auto second = e.encode(engine::slice_rows(x, 6, 6), 1);
  for (std::size_t i = 0; i < 48; ++i) {
    EXPECT_NEAR(both.at(i), first.at(i), 1e-12);
    EXPECT_NEAR(both.at(48 + i), second.at(i), 1e-12);
  }
}

TEST(Encoder, EmbeddingLayoutOracle) {
  TransformerEncoder<double> e = TransformerEncoder<float>(tiny()).cast<double>();
  const auto s = stream(Band::theta, {"C3", "Cz", "C4"}, 2, 6);
  const tokens::MetadataIds meta{1, 1, 3, 4};
  auto x = e.embed({&s}, {meta});
  ASSERT_EQ(x.shape(), (engine::Shape{10, 8}));
  const auto& P = e.params();
  auto row = [](const Tensor<double>& t, std::size_t r, std::size_t c) { return t.at(r * 8 + c); };
  for (std::size_t c = 0; c < 8; ++c) {
    EXPECT_DOUBLE_EQ(row(x, 0, c), row(P[4].tensor, 1, c));  // reference
    EXPECT_DOUBLE_EQ(row(x, 1, c), row(P[5].tensor, 1, c));  // band
    EXPECT_DOUBLE_EQ(row(x, 2, c), row(P[6].tensor, 3, c));  // task
    EXPECT_DOUBLE_EQ(row(x, 3, c), row(P[7].tensor, 4, c));  // phase
    for (std::size_t i = 0; i < 6; ++i) {
      const double want = (row(P[0].tensor, s.codes[i], c) + row(P[1].tensor, s.powers[i], c)) +
                          (row(P[2].tensor, s.channel_ids[i % 3], c) + row(P[3].tensor, i / 3, c));
      EXPECT_DOUBLE_EQ(row(x, 4 + i, c), want);
    }
  }
}

TEST(Encoder, EmbedRejectsBadInput) {
  TransformerEncoder<float> e(tiny());
  auto s = stream(Band::alpha, {"C3"}, 9, 7);
  EXPECT_THROW(e.embed({&s}, {s.meta}), ArgumentError);  // T > max_T
  auto a = stream(Band::alpha, {"C3"}, 2, 8), b = stream(Band::alpha, {"C3", "C4"}, 2, 9);
  EXPECT_THROW(e.embed({&a, &b}, {a.meta, b.meta}), ShapeError);
  EXPECT_THROW(e.embed({&a}, {}), ShapeError);
  a.codes[0] = tokens::kMaskCode + 1;
  EXPECT_THROW(e.embed({&a}, {a.meta}), ArgumentError);
}

TEST(Encoder, StripPrefixDropsFourRowsPerSequence) {
  auto h = testutil::random_tensor({2 * 7, 3}, 10, 1.0, false);
  std::size_t kept = 0, dropped = 0;
  strip_observer() = [&](std::size_t k, std::size_t d) {
    kept = k;
    dropped = d;
  };
  auto s = strip_prefix(h, 2);
  strip_observer() = nullptr;
  EXPECT_EQ(kept, 6u);
  EXPECT_EQ(dropped, 8u);
  ASSERT_EQ(s.shape(), (engine::Shape{6, 3}));
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_EQ(s.at(c), h.at(4 * 3 + c));
    EXPECT_EQ(s.at(3 * 3 + c), h.at(11 * 3 + c));
  }
  EXPECT_THROW(strip_prefix(testutil::random_tensor({8, 3}, 1, 1.0, false), 2), ShapeError);
}

TEST(Encoder, MetadataPrefixInfluencesPositions) {
  TransformerEncoder<float> e(tiny());
  const auto s = stream(Band::alpha, {"C3", "C4"}, 2, 11);
  auto meta2 = s.meta;
  meta2.phase = tokens::kPhaseUnknown;
  auto a = strip_prefix(e.forward({&s}, {s.meta}), 1);
  auto b = strip_prefix(e.forward({&s}, {meta2}), 1);
  double diff = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) diff += std::abs(a.at(i) - b.at(i));
  EXPECT_GT(diff, 1e-4);
}

TEST(Encoder, UniformHeadGivesLogK) {
  BandHeads<double> heads(8, 1, 0.0);
  auto h = testutil::random_tensor({5, 8}, 12, 1.0, false);
  auto r = mcp_loss(h, heads, Band::alpha, {0, 3}, {7, 500});
  EXPECT_NEAR(r.loss.item(), std::log(512.0), 1e-12);
  auto g = mcp_loss(h, heads, Band::gamma, {1}, {1023});
  EXPECT_NEAR(g.loss.item(), std::log(1024.0), 1e-12);
  EXPECT_EQ(heads.width(Band::beta), 768u);
  EXPECT_THROW(mcp_loss(h, heads, Band::alpha, {}, {}), ArgumentError);
  EXPECT_THROW(mcp_loss(h, heads, Band::alpha, {0}, {512}), ArgumentError);
}

TEST(Encoder, MetaDropoutRates) {
  Rng rng(3);
  const tokens::MetadataIds m{0, 2, 4, 2};
  EXPECT_EQ(meta_dropout(m, 0.0, rng), m);
  EXPECT_EQ(meta_dropout(m, 1.0, rng), tokens::MetadataIds::unknown());
  std::size_t dropped = 0;
  for (int i = 0; i < 20000; ++i) dropped += meta_dropout(m, 0.1, rng).phase == tokens::kPhaseUnknown;
  EXPECT_NEAR(dropped / 20000.0, 0.1, 0.01);
}

TEST(Encoder, MicroModelGradients) {
  auto cfg = tiny(2, 4, 2);
  auto enc = TransformerEncoder<float>(cfg).cast<double>();
  auto heads = BandHeads<float>(4, 2, 0.3).cast<double>();
  const auto s = stream(Band::alpha, {"C3", "C4", "Cz"}, 2, 13);
  Rng rng(1);
  const auto plan = masking::sample_mask(masking::annotate_ids(s.channel_ids), s.times, 0.5, rng);
  const auto masked = masking::apply_mask(s, plan);
  std::vector<std::size_t> targets;
  for (auto c : masked.targets.codes) targets.push_back(tokens::split_global(c).second);
  ASSERT_FALSE(targets.empty());
  engine::ParamList<double> params = enc.params();
  for (auto& p : heads.band_params(Band::alpha)) params.push_back(p);
  const tokens::MetadataIds meta{0, 2, 4, 2};
  auto f = [&] {
    auto hidden = strip_prefix(enc.forward({&masked.stream}, {meta}), 1);
    return mcp_loss(hidden, heads, Band::alpha, masked.targets.positions, targets).loss;
  };
  const auto r = testutil::grad_check(params, f);
  EXPECT_LE(r.max_rel_error, 1e-5) << r.worst;
}

TEST(Pretrain, StepIsDeterministicAndLearns) {
  auto cfg = tiny(1, 16, 2);
  cfg.init_std = 0.02;
  const auto corpus = data::spatial_rule_streams(64, {"F3", "F4", "C3", "C4"}, 3, Band::alpha, 4, 5);
  PretrainConfig pc;
  pc.batch_size = 4;
  pc.steps = 30;
  pc.schedule = {3e-3, 3e-4, 5, 30};
  pc.seed = 9;
  auto a = PretrainState::fresh(cfg), b = PretrainState::fresh(cfg);
  std::vector<double> la, lb;
  pretrain(a, corpus, pc, [&](const StepRecord& r) { la.push_back(r.loss); });
  pretrain(b, corpus, pc, [&](const StepRecord& r) { lb.push_back(r.loss); });
  EXPECT_EQ(la, lb);
  ASSERT_EQ(la.size(), 30u);
  EXPECT_EQ(a.step, 30u);
  EXPECT_LT(la.back(), la.front());
}

TEST(Pretrain, NoMaskedPositionsSkipsStep) {
  auto cfg = tiny(1, 8, 2);
  const auto corpus = data::spatial_rule_streams(4, {"C3", "C4"}, 2, Band::theta, 4, 1);
  PretrainConfig pc;
  pc.batch_size = 2;
  pc.steps = 3;
  pc.schedule = {1e-3, 1e-4, 1, 3};
  pc.p_mask = 0.0;
  auto st = PretrainState::fresh(cfg);
  const auto before = st.encoder.params()[0].tensor.values();
  std::size_t skipped = 0;
  pretrain(st, corpus, pc, [&](const StepRecord& r) { skipped += r.skipped; });
  EXPECT_EQ(skipped, 3u);
  EXPECT_EQ(st.step, 3u);
  EXPECT_EQ(st.encoder.params()[0].tensor.values(), before);
}

TEST(Pretrain, BucketsNeverMixShapes) {
  std::vector<tokens::TokenStream> corpus;
  for (int i = 0; i < 6; ++i) corpus.push_back(stream(Band::alpha, {"C3", "C4"}, 2, i));
  for (int i = 0; i < 6; ++i) corpus.push_back(stream(Band::alpha, {"C3", "C4", "Cz"}, 2, 10 + i));
  for (int i = 0; i < 6; ++i) corpus.push_back(stream(Band::beta, {"C3", "C4"}, 2, 20 + i));
  BucketedCorpus b(corpus);
  EXPECT_EQ(b.bucket_count(), 3u);
  Rng rng(1);
  for (int k = 0; k < 200; ++k) {
    const auto ids = b.sample(rng, 5);
    for (auto i : ids) {
      EXPECT_EQ(corpus[i].band, corpus[ids[0]].band);
      EXPECT_EQ(corpus[i].channels, corpus[ids[0]].channels);
    }
  }
}
