#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

#include "bandvq/engine/ops.hpp"
#include "bandvq/vq.hpp"
#include "test_util.hpp"

using namespace bandvq;
using namespace bandvq::vq;

namespace {

Codebook random_codebook(std::size_t k, std::size_t d, std::uint64_t seed) {
  const auto v = testutil::random_values(k * d, seed);
  return Codebook::from_entries(Band::alpha, d, std::vector<float>(v.begin(), v.end()));
}

std::size_t brute_force_nearest(std::span<const float> q, const Codebook& cb) {
  std::size_t best = 0;
  double best_d = INFINITY;
  for (std::size_t k = 0; k < cb.size; ++k) {
    double d = 0.0;
    for (std::size_t j = 0; j < cb.dim; ++j) {
      const double diff = double(q[j]) - double(cb.vectors[k * cb.dim + j]);
      d += diff * diff;
    }
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

}  // namespace

TEST(Vq, ReferenceCodebookSizes) {
  EXPECT_EQ(codebook_size(Band::delta), 512u);
  EXPECT_EQ(codebook_size(Band::theta), 512u);
  EXPECT_EQ(codebook_size(Band::alpha), 512u);
  EXPECT_EQ(codebook_size(Band::beta), 768u);
  EXPECT_EQ(codebook_size(Band::gamma), 1024u);
  EXPECT_EQ(kLatentDim, 32u);
  EXPECT_EQ(kTokenLength, 128u);
}

TEST(Vq, QuantizeMatchesExhaustiveScan) {
  const auto cb = random_codebook(512, 32, 1);
  const auto q = testutil::random_values(10000 * 32, 2, 1.2);
  const std::vector<float> qf(q.begin(), q.end());
  std::size_t mismatches = 0;
  for (std::size_t i = 0; i < 10000; ++i) {
    std::span<const float> row(qf.data() + i * 32, 32);
    const auto got = quantize(row, cb);
    mismatches += got.index != brute_force_nearest(row, cb);
    const auto e = cb.entry(got.index);
    EXPECT_TRUE(std::equal(e.begin(), e.end(), got.z_q.begin()));
  }
  EXPECT_EQ(mismatches, 0u);
}

TEST(Vq, QuantizeTiesGoToLowestIndex) {
  auto cb = Codebook::from_entries(Band::alpha, 2, {1, 0, -1, 0, 1, 0});
  const std::vector<float> z{0, 0};
  EXPECT_EQ(nearest_code(z, cb).index, 0u);
  const std::vector<float> z2{1, 0};
  EXPECT_EQ(nearest_code(z2, cb).index, 0u);
  const std::vector<float> bad{1, 0, 0};
  EXPECT_THROW(nearest_code(bad, cb), ShapeError);
}

TEST(Vq, EmaUpdateOracle) {
  auto cb = Codebook::from_entries(Band::alpha, 1, {0.0f, 10.0f, 5.0f});
  cb.decay = 0.5;
  cb.smoothing = 0.0;
  const std::vector<float> z{1.0f, 2.0f, 9.0f};
  const std::vector<std::size_t> a{0, 0, 1};
  ema_update(cb, z, a);
  EXPECT_DOUBLE_EQ(cb.ema_count[0], 1.5);
  EXPECT_DOUBLE_EQ(cb.ema_count[1], 1.0);
  EXPECT_DOUBLE_EQ(cb.ema_count[2], 0.5);
  EXPECT_FLOAT_EQ(cb.vectors[0], 1.0f);
  EXPECT_FLOAT_EQ(cb.vectors[1], 9.5f);
  EXPECT_FLOAT_EQ(cb.vectors[2], 5.0f);  // unused entries keep their mean
  ema_update(cb, {}, {});
  EXPECT_FLOAT_EQ(cb.vectors[1], 9.5f);
}

TEST(Vq, EmaLaplaceSmoothingKeepsDeadEntriesFinite) {
  auto cb = Codebook::from_entries(Band::alpha, 1, {0.0f, 1.0f});
  cb.decay = 0.0;
  const std::vector<float> z{2.0f};
  ema_update(cb, z, std::vector<std::size_t>{0});
  EXPECT_TRUE(std::isfinite(cb.vectors[1]));
  EXPECT_NEAR(cb.vectors[0], 2.0 / ((1.0 + 1e-5) / (1.0 + 2e-5)), 1e-6);
}

TEST(Vq, TokenRmsNormalizationOracle) {
  BandWaveform w{Band::alpha, {std::vector<float>(256)}, 128.0};
  for (std::size_t i = 0; i < 256; ++i) w.samples[0][i] = (i < 128 ? 2.0f : 0.0f) * ((i % 2) ? 1.0f : -1.0f);
  const auto toks = tokenize(w, 128);
  ASSERT_EQ(toks.size(), 2u);
  EXPECT_DOUBLE_EQ(toks[0].rms, std::sqrt(4.0 + 0.01));
  EXPECT_DOUBLE_EQ(toks[1].rms, std::sqrt(0.01));  // silent token: rms = sqrt(eps) > floor
  EXPECT_DOUBLE_EQ(toks[0].values[1], 2.0 / std::sqrt(4.01));
  const auto back = detokenize(toks);
  for (std::size_t i = 0; i < 256; ++i) EXPECT_FLOAT_EQ(back[0][i], w.samples[0][i]);
  EXPECT_DOUBLE_EQ(token_rms(std::vector<float>(4, 0.0f), 0.0, 0.01), 0.01);
  BandWaveform odd{Band::alpha, {std::vector<float>(100)}, 128.0};
  EXPECT_THROW(tokenize(odd, 128), ArgumentError);
}

TEST(Vq, TokenizerNetShapes) {
  TokenizerNet<float> net(128, 32, 3);
  EXPECT_EQ(net.params().size(), 24u);  // 5 conv + 2 dense + 5 deconv, weight and bias each
  auto x = engine::Tensor<float>::zeros({4, 1, 128});
  auto z = net.encode(x);
  EXPECT_EQ(z.shape(), (engine::Shape{4, 32}));
  auto y = net.decode(z);
  EXPECT_EQ(y.shape(), (engine::Shape{4, 1, 128}));
  EXPECT_THROW(net.encode(engine::Tensor<float>::zeros({4, 1, 100})), ShapeError);
  EXPECT_THROW(TokenizerNet<float>(100, 32, 0), ArgumentError);
}

TEST(Vq, TokenizerMicroModelGradients) {
  // encode -> decode with the full weighted objective; the quantized latent is
  // a fixed target for the commitment term.
  TokenizerNet<double> net(32, 4, 11);
  auto x = testutil::random_tensor({3, 1, 32}, 12, 1.0, false);
  auto z_q = testutil::random_tensor({3, 4}, 13, 0.5, false);
  StftScales scales{{16, 32}, 0.25};
  auto f = [&] {
    auto z_e = net.encode(x);
    auto recon = net.decode(z_e);
    return tokenizer_loss<double>(x, recon, z_e, z_q, {2, 1}, LossWeights{}, scales).total;
  };
  const auto r = testutil::grad_check(net.params(), f);
  EXPECT_LE(r.max_rel_error, 1e-5) << r.worst;
}

TEST(Vq, StraightThroughDecoderGradientReachesEncoder) {
  TokenizerNet<double> net(32, 4, 14);
  auto x = testutil::random_tensor({2, 1, 32}, 15, 1.0, false);
  auto z_q = testutil::random_tensor({2, 4}, 16, 0.5, false);
  auto z_e = net.encode(x);
  auto leaf_ze = z_e.clone(true);
  auto st = engine::straight_through(leaf_ze, z_q);
  engine::mean(engine::square(engine::sub(net.decode(st), x))).backward();
  auto leaf_zq = z_q.clone(true);
  engine::mean(engine::square(engine::sub(net.decode(leaf_zq), x))).backward();
  for (std::size_t i = 0; i < leaf_ze.numel(); ++i) EXPECT_DOUBLE_EQ(leaf_ze.grad()[i], leaf_zq.grad()[i]);
}

TEST(Vq, LossWeightsAreReferenceValues) {
  LossWeights w;
  EXPECT_EQ(w.mae, 1.25);
  EXPECT_EQ(w.mse, 0.5);
  EXPECT_EQ(w.stft, 0.25);
  EXPECT_EQ(w.commit, 1.0);
  StftScales s;
  EXPECT_EQ(s.n_ffts, (std::vector<std::size_t>{256, 512, 1024}));
}

TEST(Vq, LossTermsOracle) {
  engine::Tensor<double> target({1, 1, 4}, {1, 2, 3, 4});
  engine::Tensor<double> recon({1, 1, 4}, {1, 1, 1, 1}, true);
  engine::Tensor<double> z_e({1, 2}, {1, 1}, true), z_q({1, 2}, {0, 3});
  auto parts = tokenizer_loss<double>(target, recon, z_e, z_q, {1}, LossWeights{}, StftScales{{8}, 0.25});
  EXPECT_DOUBLE_EQ(parts.mae, (0 + 1 + 2 + 3) / 4.0);
  EXPECT_DOUBLE_EQ(parts.mse, (0 + 1 + 4 + 9) / 4.0);
  EXPECT_DOUBLE_EQ(parts.commit, (1 + 4) / 2.0);
  EXPECT_DOUBLE_EQ(parts.stft, 0.0);  // no scale fits a 4-sample signal
  EXPECT_DOUBLE_EQ(parts.total.item(), 1.25 * 1.5 + 0.5 * 3.5 + 1.0 * 2.5);
}

TEST(Vq, SmallTrainingRunIsFiniteAndCountsUsage) {
  TokenCorpus corpus;
  corpus.band = Band::alpha;
  Rng rng(5);
  for (int s = 0; s < 20; ++s) {
    std::vector<float> seq(2 * 128);
    const double f = uniform(rng, 8.0, 13.0), ph = uniform(rng, 0.0, 6.28);
    for (std::size_t i = 0; i < seq.size(); ++i)
      seq[i] = static_cast<float>(std::sin(2 * std::numbers::pi * f * double(i) / 128.0 + ph) * std::sqrt(2.0));
    corpus.sequences.push_back(seq);
  }
  TrainTokenizerConfig cfg;
  cfg.epochs = 2;
  cfg.batch_tokens = 8;
  cfg.codebook_size = 16;
  cfg.scales.n_ffts = {64, 128};
  const auto tr = train_tokenizer(corpus, cfg);
  ASSERT_EQ(tr.report.epochs.size(), 2u);
  for (double l : tr.report.step_losses) EXPECT_TRUE(std::isfinite(l));
  std::size_t total = 0;
  for (auto u : tr.report.usage) total += u;
  EXPECT_EQ(total, 18u * 2u);  // training split: 18 of 20 sequences, 2 tokens each
  EXPECT_EQ(tr.tokenizer.codebook.size, 16u);
  // determinism
  const auto tr2 = train_tokenizer(corpus, cfg);
  EXPECT_EQ(tr.report.step_losses, tr2.report.step_losses);
}

TEST(Vq, TrainingRejectsBadCorpus) {
  TokenCorpus corpus;
  EXPECT_THROW(train_tokenizer(corpus, {}), ArgumentError);
  corpus.sequences.push_back(std::vector<float>(100));
  EXPECT_THROW(train_tokenizer(corpus, {}), ArgumentError);
}

TEST(Vq, IdenticalTokensReconstructAlmostExactly) {
  TokenCorpus corpus;
  corpus.band = Band::alpha;
  std::vector<float> tok(128);
  for (std::size_t i = 0; i < 128; ++i)
    tok[i] = static_cast<float>(std::sqrt(2.0) * std::sin(2 * std::numbers::pi * 10.0 * double(i) / 128.0 + 0.4));
  for (int s = 0; s < 32; ++s) corpus.sequences.push_back(tok);
  TrainTokenizerConfig cfg;
  cfg.epochs = 100;
  cfg.batch_tokens = 8;
  cfg.codebook_size = 16;
  cfg.lr = 1e-3;
  cfg.scales.n_ffts = {64, 128};
  const auto tr = train_tokenizer(corpus, cfg);
  EXPECT_LT(tr.report.epochs.back().heldout_mse, 0.01 * tr.report.epochs.front().heldout_mse);
  EXPECT_LT(tr.report.epochs.back().heldout_mse, 1e-2);
  // the assigned entry sits on the token's latent
  const auto z = tr.tokenizer.encode_latents({tok});
  const auto e = tr.tokenizer.codebook.entry(tr.tokenizer.encode({tok})[0]);
  double d2 = 0.0, n2 = 0.0;
  for (std::size_t j = 0; j < e.size(); ++j) {
    d2 += (z[j] - e[j]) * (z[j] - e[j]);
    n2 += z[j] * z[j];
  }
  EXPECT_LT(std::sqrt(d2 / n2), 0.05);
}

TEST(Vq, DeadCodeRestartRaisesUsage) {
  TokenCorpus corpus;
  corpus.band = Band::alpha;
  Rng rng(9);
  for (int s = 0; s < 200; ++s) {
    std::vector<float> seq(128);
    const double f = uniform(rng, 8.0, 13.0), ph = uniform(rng, 0.0, 6.28);
    for (std::size_t i = 0; i < seq.size(); ++i)
      seq[i] = static_cast<float>(std::sin(2 * std::numbers::pi * f * double(i) / 128.0 + ph));
    corpus.sequences.push_back(seq);
  }
  TrainTokenizerConfig cfg;
  cfg.epochs = 6;
  cfg.batch_tokens = 32;
  cfg.codebook_size = 64;
  cfg.scales.n_ffts = {64, 128};
  const auto plain = train_tokenizer(corpus, cfg);
  cfg.dead_code_restart = true;
  const auto restarted = train_tokenizer(corpus, cfg);
  auto used = [](const TrainedTokenizer& t) {
    return static_cast<std::size_t>(std::count_if(t.report.usage.begin(), t.report.usage.end(),
                                                  [](std::size_t c) { return c > 0; }));
  };
  EXPECT_EQ(plain.report.epochs.back().codes_used, used(plain));
  EXPECT_EQ(restarted.report.epochs.back().codes_used, used(restarted));
  EXPECT_GT(used(restarted), used(plain));
}
