#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "bandvq/downstream.hpp"
#include "test_util.hpp"

using namespace bandvq;
using namespace bandvq::downstream;

namespace {

encoder::EncoderConfig tiny() {
  encoder::EncoderConfig c;
  c.layers = 1;
  c.d = 8;
  c.heads = 2;
  c.max_T = 4;
  c.init_std = 0.2;
  c.seed = 3;
  return c;
}

// Trials whose delta-band power bin encodes the label; everything else random.
std::vector<TokenizedTrial> toy_trials(std::size_t subjects, std::size_t per_subject, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<TokenizedTrial> out;
  for (std::size_t s = 0; s < subjects; ++s)
    for (std::size_t i = 0; i < per_subject; ++i) {
      TokenizedTrial t;
      t.label = i % 2;
      t.subject = "s" + std::to_string(s);
      t.id = out.size();
      for (Band b : kAllBands) {
        auto& st = t.streams[band_index(b)];
        st.band = b;
        st.channels = 2;
        st.times = 1;
        st.channel_ids = {tokens::channel_id("C3"), tokens::channel_id("C4")};
        for (int k = 0; k < 2; ++k) {
          st.codes.push_back(tokens::to_global(b, uniform_index(rng, 16)));
          st.powers.push_back(b == Band::delta ? static_cast<std::uint16_t>(t.label ? 100 : 20)
                                               : static_cast<std::uint16_t>(uniform_index(rng, 128)));
        }
        st.meta = {0, static_cast<std::uint16_t>(band_index(b)), 4, 2};
      }
      out.push_back(std::move(t));
    }
  return out;
}

}  // namespace

TEST(Metrics, AccuracyAndMacroF1Oracle) {
  // class 0: tp=2 fp=1 fn=1 -> f1 = 4/6; class 1: tp=1 fp=1 fn=1 -> 2/4
  const auto m = metrics({0, 0, 1, 0, 1}, {0, 0, 1, 1, 0}, 2);
  EXPECT_DOUBLE_EQ(m.accuracy, 3.0 / 5.0);
  EXPECT_DOUBLE_EQ(m.macro_f1, (4.0 / 6.0 + 0.5) / 2.0);
  const auto perfect = metrics({1, 0, 1}, {1, 0, 1}, 2);
  EXPECT_DOUBLE_EQ(perfect.accuracy, 1.0);
  EXPECT_DOUBLE_EQ(perfect.macro_f1, 1.0);
  // absent class 2 scores 0 in the macro average
  EXPECT_DOUBLE_EQ(metrics({0, 1}, {0, 1}, 3).macro_f1, 2.0 / 3.0);
  EXPECT_THROW(metrics({0}, {0, 1}, 2), ShapeError);
  EXPECT_THROW(metrics({2}, {0}, 2), ArgumentError);
}

TEST(Downstream, AblationForcesPowerAndMetadata) {
  auto trials = toy_trials(1, 1, 1);
  auto s = trials[0].streams[0];
  apply_ablation(s, {true, false});
  for (auto p : s.powers) EXPECT_EQ(p, 0);
  EXPECT_EQ(s.meta.band, 0);
  apply_ablation(s, {false, true});
  EXPECT_EQ(s.meta, tokens::MetadataIds::unknown());
}

TEST(Downstream, EncodeTrialsLayout) {
  auto trials = toy_trials(1, 2, 2);
  encoder::TransformerEncoder<float> enc(tiny());
  auto v = encode_trials<float>({&trials[0], &trials[1]}, enc);
  ASSERT_EQ(v.shape(), (engine::Shape{2, 5 * 2 * 8}));
  // each band block equals that band's stripped encoder output
  for (Band b : kAllBands) {
    const auto& s = trials[1].streams[band_index(b)];
    auto h = encoder::strip_prefix(enc.forward({&s}, {s.meta}), 1);
    for (std::size_t j = 0; j < 16; ++j) EXPECT_NEAR(v.at(80 + band_index(b) * 16 + j), h.at(j), 1e-5);
  }
}

TEST(Downstream, FineTuneMicroModelGradients) {
  auto trials = toy_trials(1, 3, 4);
  auto enc = encoder::TransformerEncoder<float>(tiny()).cast<double>();
  ClassifierHead<double> head(5 * 2 * 8, 6, 2, 0.2, 5);
  engine::ParamList<double> params = enc.params();
  for (auto& p : head.params()) params.push_back(p);
  std::vector<const TokenizedTrial*> batch{&trials[0], &trials[1], &trials[2]};
  auto f = [&] {
    Rng rng(77);
    return engine::cross_entropy(head.forward(encode_trials<double>(batch, enc), rng, true), {0, 1, 0});
  };
  const auto r = testutil::grad_check(params, f);
  EXPECT_LE(r.max_rel_error, 1e-5) << r.worst;
}

TEST(Downstream, FinetuneRejectsSubjectLeak) {
  auto trials = toy_trials(2, 4, 5);
  encoder::TransformerEncoder<float> enc(tiny());
  std::vector<const TokenizedTrial*> train, val;
  for (auto& t : trials) (t.subject == "s0" ? train : val).push_back(&t);
  val.push_back(train.front());
  FinetuneConfig fc;
  fc.max_epochs = 1;
  fc.min_epochs = 1;
  EXPECT_THROW(finetune(enc, train, val, 2, fc), ArgumentError);
}

TEST(Downstream, LosoFoldsAreSubjectDisjoint) {
  auto trials = toy_trials(5, 6, 6);
  encoder::TransformerEncoder<float> enc(tiny());
  LosoConfig lc;
  lc.finetune.max_epochs = 3;
  lc.finetune.min_epochs = 1;
  lc.finetune.hidden = 8;
  lc.finetune.head_lr = 3e-3;
  lc.seed = 11;
  const auto rep = loso_evaluate(enc, trials, lc);
  ASSERT_EQ(rep.folds.size(), 5u);
  std::set<std::string> tested;
  for (const auto& f : rep.folds) {
    EXPECT_TRUE(tested.insert(f.test_subject).second);
    EXPECT_EQ(f.val_subjects.size(), 1u);  // ceil(0.2 * 4)
    EXPECT_EQ(f.train_subjects.size(), 3u);
    std::set<std::size_t> ids;
    for (auto v : {f.train_ids, f.val_ids, f.test_ids})
      for (auto i : v) EXPECT_TRUE(ids.insert(i).second) << "trial in two splits";
    EXPECT_EQ(ids.size(), trials.size());
    for (auto i : f.test_ids) EXPECT_EQ(trials[i].subject, f.test_subject);
    for (auto i : f.train_ids) EXPECT_NE(trials[i].subject, f.test_subject);
    for (auto i : f.val_ids)
      EXPECT_TRUE(std::count(f.val_subjects.begin(), f.val_subjects.end(), trials[i].subject));
    EXPECT_GE(f.best_epoch, 1u);
  }
  // parallel folds give the same report
  lc.jobs = 3;
  const auto par = loso_evaluate(enc, trials, lc);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(par.folds[i].accuracy, rep.folds[i].accuracy);
    EXPECT_EQ(par.folds[i].test_ids, rep.folds[i].test_ids);
  }
}

TEST(Downstream, LosoErrors) {
  encoder::TransformerEncoder<float> enc(tiny());
  auto two = toy_trials(2, 4, 7);
  EXPECT_THROW(loso_evaluate(enc, two, {}), ArgumentError);
  auto three = toy_trials(3, 4, 8);
  EXPECT_THROW(loso_evaluate(enc, three, {}, {"s0", "s9"}), ArgumentError);
  auto single = toy_trials(3, 4, 9);
  for (auto& t : single) t.label = 0;
  LosoConfig lc;
  lc.finetune.num_classes = 2;
  EXPECT_THROW(loso_evaluate(enc, single, lc), ArgumentError);
}

TEST(Downstream, PermuteLabelsKeepsMultiset) {
  auto trials = toy_trials(3, 10, 10);
  std::vector<std::size_t> before;
  for (auto& t : trials) before.push_back(t.label);
  permute_labels(trials, 3);
  std::vector<std::size_t> after;
  for (auto& t : trials) after.push_back(t.label);
  EXPECT_NE(before, after);
  std::sort(before.begin(), before.end());
  std::sort(after.begin(), after.end());
  EXPECT_EQ(before, after);
}

TEST(Downstream, FinetuneDefaultsAreReferenceValues) {
  FinetuneConfig c;
  EXPECT_EQ(c.encoder_lr, 3e-5);
  EXPECT_EQ(c.head_lr, 1e-3);
  EXPECT_EQ(c.hidden, 256u);
  EXPECT_EQ(c.dropout, 0.2);
  EXPECT_EQ(c.max_epochs, 30u);
  EXPECT_EQ(c.min_epochs, 6u);
  EXPECT_EQ(c.patience, 8u);
  EXPECT_EQ(c.val_fraction, 0.2);
}
