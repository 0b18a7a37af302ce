#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <functional>
#include <map>
#include <mutex>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "bandvq/encoder.hpp"
#include "bandvq/engine/ops.hpp"
#include "bandvq/engine/optim.hpp"
#include "bandvq/error.hpp"
#include "bandvq/rng.hpp"
#include "bandvq/signal.hpp"
#include "bandvq/tokens.hpp"
#include "bandvq/trial.hpp"

namespace bandvq::downstream {

/// A trial after preprocessing and frozen tokenization.
struct TokenizedTrial {
  std::array<tokens::TokenStream, kBandCount> streams;
  std::size_t label = 0;
  std::string subject;
  std::size_t id = 0;  // position in the dataset, used for audits
};

struct Ablation {
  bool no_power = false;     // every power bin forced to 0
  bool no_metadata = false;  // every metadata id forced to UNKNOWN
};

inline void apply_ablation(tokens::TokenStream& s, const Ablation& a) {
  if (a.no_power) std::fill(s.powers.begin(), s.powers.end(), std::uint16_t{0});
  if (a.no_metadata) s.meta = tokens::MetadataIds::unknown();
}

struct TrialPipeline {
  PreprocessConfig preprocess{};
  tokens::StreamOptions streams{};
  Ablation ablation{};
};

inline TokenizedTrial tokenize_trial(const Trial& trial, const tokens::TokenizerSet& tokenizers,
                                     const TrialPipeline& pipe, std::size_t id = 0) {
  const auto pre = bandvq::preprocess(trial.segment, pipe.preprocess);
  if (pre.length() < pipe.streams.token_len)
    throw ArgumentError("encode_trial: trial of " + std::to_string(pre.length()) +
                        " samples is shorter than one token");
  TokenizedTrial out{tokens::build_token_streams(pre, tokenizers, pipe.streams), trial.label, trial.subject, id};
  for (auto& s : out.streams) apply_ablation(s, pipe.ablation);
  return out;
}

inline std::vector<TokenizedTrial> tokenize_trials(const std::vector<Trial>& trials,
                                                   const tokens::TokenizerSet& tokenizers,
                                                   const TrialPipeline& pipe) {
  std::vector<TokenizedTrial> out;
  out.reserve(trials.size());
  for (std::size_t i = 0; i < trials.size(); ++i) out.push_back(tokenize_trial(trials[i], tokenizers, pipe, i));
  return out;
}

/// Encodes a batch of trials: per band the streams share one encoder pass,
/// prefixes are stripped, and each trial's rows are laid out δ,θ,α,β,γ and
/// flattened to one 5·S·d row.
template <class T>
engine::Tensor<T> encode_trials(const std::vector<const TokenizedTrial*>& batch,
                                const encoder::TransformerEncoder<T>& enc) {
  using namespace engine;
  if (batch.empty()) throw ArgumentError("encode_trials: empty batch");
  const std::size_t B = batch.size();
  const std::size_t S = batch.front()->streams[0].size();
  const std::size_t d = enc.config().d;
  std::vector<Tensor<T>> per_band;
  for (Band b : kAllBands) {
    std::vector<const tokens::TokenStream*> ptrs;
    std::vector<tokens::MetadataIds> meta;
    for (const auto* t : batch) {
      const auto& s = t->streams[band_index(b)];
      if (s.size() != S) throw ShapeError("encode_trials: trials differ in C*T; (C, T) must be fixed per dataset");
      ptrs.push_back(&s);
      meta.push_back(s.meta);
    }
    per_band.push_back(encoder::strip_prefix(enc.forward(ptrs, meta), B));
  }
  // stacked rows: band-major [band][trial][S]
  Tensor<T> stacked = concat_rows(per_band);
  std::vector<std::size_t> order;
  order.reserve(kBandCount * B * S);
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t b = 0; b < kBandCount; ++b)
      for (std::size_t r = 0; r < S; ++r) order.push_back((b * B + i) * S + r);
  return reshape(gather_rows(stacked, order), {B, kBandCount * S * d});
}

/// Trial vector of length 5·C·T·d in eval mode.
inline std::vector<float> encode_trial(const Trial& trial, const tokens::TokenizerSet& tokenizers,
                                       const encoder::TransformerEncoder<float>& enc,
                                       const TrialPipeline& pipe = {}) {
  engine::NoGradGuard no_grad;
  const auto tt = tokenize_trial(trial, tokenizers, pipe);
  const auto v = encode_trials<float>({&tt}, enc);
  return v.values();
}

template <class T>
class ClassifierHead {
 public:
  ClassifierHead() = default;

  ClassifierHead(std::size_t in, std::size_t hidden, std::size_t classes, double dropout, std::uint64_t seed)
      : dropout_(dropout) {
    if (in == 0 || hidden == 0 || classes < 2) throw ArgumentError("ClassifierHead: need in, hidden > 0 and >= 2 classes");
    Rng rng(seed);
    auto uniform_param = [&](std::string name, engine::Shape shape, std::size_t fan_in) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      std::vector<T> v(engine::numel_of(shape));
      for (auto& x : v) x = static_cast<T>(uniform(rng, -bound, bound));
      params_.push_back({std::move(name), engine::Tensor<T>(std::move(shape), std::move(v), true)});
    };
    uniform_param("cls.fc1.w", {hidden, in}, in);
    uniform_param("cls.fc1.b", {hidden}, in);
    uniform_param("cls.fc2.w", {classes, hidden}, hidden);
    uniform_param("cls.fc2.b", {classes}, hidden);
  }

  std::size_t in_features() const { return params_[0].tensor.dim(1); }
  std::size_t classes() const { return params_[2].tensor.dim(0); }
  engine::ParamList<T>& params() { return params_; }
  const engine::ParamList<T>& params() const { return params_; }

  engine::Tensor<T> forward(const engine::Tensor<T>& x, Rng& rng, bool training) const {
    using namespace engine;
    if (x.rank() != 2 || x.dim(1) != in_features())
      shape_fail("ClassifierHead", x.shape(), "width must be " + std::to_string(in_features()));
    auto h = dropout(gelu(linear(x, params_[0].tensor, params_[1].tensor)), dropout_, rng, training);
    return linear(h, params_[2].tensor, params_[3].tensor);
  }

  ClassifierHead clone() const {
    ClassifierHead out;
    out.dropout_ = dropout_;
    for (const auto& np : params_) out.params_.push_back({np.name, np.tensor.clone(true)});
    return out;
  }

 private:
  double dropout_ = 0.2;
  engine::ParamList<T> params_;
};

inline encoder::TransformerEncoder<float> clone_encoder(const encoder::TransformerEncoder<float>& e) {
  return e.cast<float>();
}

struct FinetuneConfig {
  double encoder_lr = 3e-5;
  double head_lr = 1e-3;
  std::size_t batch_size = 16;
  std::size_t hidden = 256;
  double dropout = 0.2;
  std::size_t max_epochs = 30;
  std::size_t min_epochs = 6;
  std::size_t patience = 8;
  double weight_decay = 1e-2;
  double clip_norm = 1.0;
  double val_fraction = 0.2;
  std::size_t num_classes = 0;  // 0 -> max label + 1
  std::uint64_t seed = 0;

  void validate() const {
    if (batch_size == 0 || hidden == 0) throw ArgumentError("FinetuneConfig: batch_size and hidden must be > 0");
    if (max_epochs == 0 || min_epochs > max_epochs) throw ArgumentError("FinetuneConfig: need 0 < min_epochs <= max_epochs");
    if (!(encoder_lr >= 0.0) || !(head_lr > 0.0)) throw ArgumentError("FinetuneConfig: bad learning rates");
    if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ArgumentError("FinetuneConfig: val_fraction must be in (0, 1)");
  }
};

struct ClassifierModel {
  encoder::TransformerEncoder<float> encoder;
  ClassifierHead<float> head;
};

struct FinetuneResult {
  ClassifierModel model;          // parameters at the best validation epoch
  std::size_t best_epoch = 0;     // 1-based
  std::size_t epochs_run = 0;
  std::vector<double> val_accuracy;
  std::vector<double> train_loss;
};

inline std::size_t infer_classes(const std::vector<TokenizedTrial>& trials, std::size_t configured) {
  std::size_t mx = 0;
  for (const auto& t : trials) mx = std::max(mx, t.label);
  const std::size_t n = configured ? configured : mx + 1;
  if (mx >= n) throw ArgumentError("finetune: label " + std::to_string(mx) + " >= num_classes " + std::to_string(n));
  return std::max<std::size_t>(n, 2);
}

inline std::vector<std::size_t> predict(const ClassifierModel& m, const std::vector<const TokenizedTrial*>& trials,
                                        std::size_t batch_size = 16) {
  engine::NoGradGuard no_grad;
  std::vector<std::size_t> out;
  Rng unused(0);
  for (std::size_t s = 0; s < trials.size(); s += batch_size) {
    std::vector<const TokenizedTrial*> b(trials.begin() + static_cast<std::ptrdiff_t>(s),
                                         trials.begin() + static_cast<std::ptrdiff_t>(std::min(trials.size(), s + batch_size)));
    const auto logits = m.head.forward(encode_trials<float>(b, m.encoder), unused, false);
    const std::size_t K = logits.dim(1);
    for (std::size_t i = 0; i < b.size(); ++i) {
      const auto row = logits.values().begin() + static_cast<std::ptrdiff_t>(i * K);
      out.push_back(static_cast<std::size_t>(std::max_element(row, row + static_cast<std::ptrdiff_t>(K)) - row));
    }
  }
  return out;
}

struct Metrics {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
};

inline Metrics metrics(const std::vector<std::size_t>& pred, const std::vector<std::size_t>& labels,
                       std::size_t num_classes) {
  if (pred.size() != labels.size()) throw ShapeError("metrics: predictions and labels differ in length");
  if (pred.empty()) throw ArgumentError("metrics: empty input");
  std::vector<std::size_t> tp(num_classes, 0), fp(num_classes, 0), fn(num_classes, 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] >= num_classes || labels[i] >= num_classes) throw ArgumentError("metrics: class id out of range");
    if (pred[i] == labels[i]) {
      ++correct;
      ++tp[pred[i]];
    } else {
      ++fp[pred[i]];
      ++fn[labels[i]];
    }
  }
  double f1 = 0.0;
  for (std::size_t k = 0; k < num_classes; ++k) {
    const double denom = 2.0 * tp[k] + fp[k] + fn[k];
    f1 += denom > 0 ? 2.0 * tp[k] / denom : 0.0;
  }
  return {static_cast<double>(correct) / static_cast<double>(pred.size()), f1 / static_cast<double>(num_classes)};
}

namespace detail {

inline void snapshot(const engine::ParamList<float>& from, std::vector<std::vector<float>>& to) {
  to.resize(from.size());
  for (std::size_t i = 0; i < from.size(); ++i) to[i].assign(from[i].tensor.data().begin(), from[i].tensor.data().end());
}

inline void restore(engine::ParamList<float>& to, const std::vector<std::vector<float>>& from) {
  for (std::size_t i = 0; i < to.size(); ++i) std::copy(from[i].begin(), from[i].end(), to[i].tensor.mutable_data().begin());
}

/// One epoch of joint training; returns mean training loss.
inline double train_epoch(ClassifierModel& m, engine::OptimizerState<float>& opt,
                          const std::vector<const TokenizedTrial*>& train, const FinetuneConfig& cfg,
                          std::uint64_t epoch_seed) {
  using namespace engine;
  ParamList<float> params = m.encoder.params();
  const std::size_t n_enc = params.size();
  params.insert(params.end(), m.head.params().begin(), m.head.params().end());
  std::vector<double> lr_scale(params.size(), cfg.encoder_lr / cfg.head_lr);
  std::fill(lr_scale.begin() + static_cast<std::ptrdiff_t>(n_enc), lr_scale.end(), 1.0);
  const AdamWConfig acfg{0.9, 0.999, 1e-8, cfg.weight_decay, cfg.clip_norm};

  Rng rng(epoch_seed);
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  shuffle(order, rng);
  double total = 0.0;
  std::size_t batches = 0;
  for (std::size_t s = 0; s < order.size(); s += cfg.batch_size) {
    std::vector<const TokenizedTrial*> b;
    std::vector<std::size_t> y;
    for (std::size_t i = s; i < std::min(order.size(), s + cfg.batch_size); ++i) {
      b.push_back(train[order[i]]);
      y.push_back(train[order[i]]->label);
    }
    zero_grads(params);
    auto loss = cross_entropy(m.head.forward(encode_trials<float>(b, m.encoder), rng, true), y);
    if (!std::isfinite(loss.item())) throw NumericalError("finetune: non-finite loss");
    loss.backward();
    adamw_step(params, opt, cfg.head_lr, acfg, lr_scale);
    total += loss.item();
    ++batches;
  }
  return total / static_cast<double>(batches);
}

inline void require_two_classes(const std::vector<const TokenizedTrial*>& train) {
  std::set<std::size_t> labels;
  for (const auto* t : train) labels.insert(t->label);
  if (labels.size() < 2) throw ArgumentError("finetune: training set contains a single class");
}

}  // namespace detail

/// Joint fine-tuning with early stopping on validation accuracy.
inline FinetuneResult finetune(const encoder::TransformerEncoder<float>& pretrained,
                               const std::vector<const TokenizedTrial*>& train,
                               const std::vector<const TokenizedTrial*>& val, std::size_t num_classes,
                               const FinetuneConfig& cfg) {
  cfg.validate();
  if (train.empty() || val.empty()) throw ArgumentError("finetune: empty train or validation set");
  detail::require_two_classes(train);
  std::set<std::string> train_subjects;
  for (const auto* t : train) train_subjects.insert(t->subject);
  for (const auto* t : val)
    if (train_subjects.count(t->subject))
      throw ArgumentError("finetune: subject '" + t->subject + "' in both train and validation sets");

  const std::size_t in = kBandCount * train.front()->streams[0].size() * pretrained.config().d;
  ClassifierModel m{clone_encoder(pretrained),
                    ClassifierHead<float>(in, cfg.hidden, num_classes, cfg.dropout, derive_seed(cfg.seed, 1))};
  engine::OptimizerState<float> opt;
  std::vector<std::size_t> val_y;
  for (const auto* t : val) val_y.push_back(t->label);

  FinetuneResult r;
  double best = -1.0;
  std::vector<std::vector<float>> best_enc, best_head;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    r.train_loss.push_back(detail::train_epoch(m, opt, train, cfg, derive_seed(cfg.seed, 100 + epoch)));
    const double acc = metrics(predict(m, val, cfg.batch_size), val_y, num_classes).accuracy;
    r.val_accuracy.push_back(acc);
    r.epochs_run = epoch;
    if (acc > best) {
      best = acc;
      r.best_epoch = epoch;
      detail::snapshot(m.encoder.params(), best_enc);
      detail::snapshot(m.head.params(), best_head);
    }
    if (epoch >= cfg.min_epochs && epoch - r.best_epoch >= cfg.patience) break;
  }
  detail::restore(m.encoder.params(), best_enc);
  detail::restore(m.head.params(), best_head);
  r.model = std::move(m);
  return r;
}

/// Trains for exactly `epochs` epochs without validation (fresh head).
inline ClassifierModel train_for_epochs(const encoder::TransformerEncoder<float>& pretrained,
                                        const std::vector<const TokenizedTrial*>& train, std::size_t num_classes,
                                        std::size_t epochs, const FinetuneConfig& cfg) {
  cfg.validate();
  if (train.empty()) throw ArgumentError("train_for_epochs: empty training set");
  detail::require_two_classes(train);
  const std::size_t in = kBandCount * train.front()->streams[0].size() * pretrained.config().d;
  ClassifierModel m{clone_encoder(pretrained),
                    ClassifierHead<float>(in, cfg.hidden, num_classes, cfg.dropout, derive_seed(cfg.seed, 2))};
  engine::OptimizerState<float> opt;
  for (std::size_t epoch = 1; epoch <= epochs; ++epoch)
    detail::train_epoch(m, opt, train, cfg, derive_seed(cfg.seed, 200 + epoch));
  return m;
}

struct FoldReport {
  std::string test_subject;
  std::vector<std::string> train_subjects;
  std::vector<std::string> val_subjects;
  std::size_t best_epoch = 0;
  std::size_t test_trials = 0;
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  std::vector<std::size_t> train_ids, val_ids, test_ids;  // audit trail
};

struct LosoReport {
  std::vector<FoldReport> folds;
  double mean_accuracy = 0.0;
  double mean_macro_f1 = 0.0;
  std::string fingerprint;
  std::uint64_t seed = 0;
};

struct LosoConfig {
  FinetuneConfig finetune{};
  std::size_t jobs = 1;
  std::uint64_t seed = 0;
};

/// Sorted distinct subject ids.
inline std::vector<std::string> subjects_of(const std::vector<TokenizedTrial>& trials) {
  std::set<std::string> s;
  for (const auto& t : trials) s.insert(t.subject);
  return {s.begin(), s.end()};
}

inline FoldReport run_fold(const encoder::TransformerEncoder<float>& pretrained, const std::vector<TokenizedTrial>& trials,
                           const std::vector<std::string>& subjects, std::size_t fold, std::size_t num_classes,
                           const LosoConfig& cfg) {
  FoldReport f;
  f.test_subject = subjects[fold];
  std::vector<std::string> rest;
  for (const auto& s : subjects)
    if (s != f.test_subject) rest.push_back(s);
  Rng rng(derive_seed(cfg.seed, 1000 + fold));
  shuffle(rest, rng);
  const std::size_t n_val = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::ceil(cfg.finetune.val_fraction * static_cast<double>(rest.size()) - 1e-9)));
  f.val_subjects.assign(rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(n_val));
  f.train_subjects.assign(rest.begin() + static_cast<std::ptrdiff_t>(n_val), rest.end());
  std::sort(f.val_subjects.begin(), f.val_subjects.end());
  std::sort(f.train_subjects.begin(), f.train_subjects.end());
  const std::set<std::string> val_set(f.val_subjects.begin(), f.val_subjects.end());

  std::vector<const TokenizedTrial*> train, val, full, test;
  for (const auto& t : trials) {
    if (t.subject == f.test_subject) {
      test.push_back(&t);
      f.test_ids.push_back(t.id);
    } else {
      full.push_back(&t);
      if (val_set.count(t.subject)) {
        val.push_back(&t);
        f.val_ids.push_back(t.id);
      } else {
        train.push_back(&t);
        f.train_ids.push_back(t.id);
      }
    }
  }
  FinetuneConfig fc = cfg.finetune;
  fc.seed = derive_seed(cfg.seed, 2000 + fold);
  const auto inner = finetune(pretrained, train, val, num_classes, fc);
  f.best_epoch = inner.best_epoch;
  fc.seed = derive_seed(cfg.seed, 3000 + fold);
  const auto model = train_for_epochs(pretrained, full, num_classes, f.best_epoch, fc);
  std::vector<std::size_t> y;
  for (const auto* t : test) y.push_back(t->label);
  const auto m = metrics(predict(model, test, fc.batch_size), y, num_classes);
  f.test_trials = test.size();
  f.accuracy = m.accuracy;
  f.macro_f1 = m.macro_f1;
  return f;
}

/// Leave-one-subject-out evaluation. Folds are independent and may run on
/// `cfg.jobs` threads; results do not depend on the thread count.
inline LosoReport loso_evaluate(const encoder::TransformerEncoder<float>& pretrained,
                                const std::vector<TokenizedTrial>& trials, const LosoConfig& cfg,
                                const std::vector<std::string>& declared_subjects = {},
                                const std::function<void(const FoldReport&)>& on_fold = {}) {
  const auto subjects = subjects_of(trials);
  for (const auto& s : declared_subjects)
    if (!std::binary_search(subjects.begin(), subjects.end(), s))
      throw ArgumentError("loso_evaluate: subject '" + s + "' has zero trials");
  if (subjects.size() < 3) throw ArgumentError("loso_evaluate: need at least 3 subjects, got " + std::to_string(subjects.size()));
  const std::size_t num_classes = infer_classes(trials, cfg.finetune.num_classes);

  LosoReport rep;
  rep.seed = cfg.seed;
  rep.folds.resize(subjects.size());
  std::mutex mu;
  std::exception_ptr failure;
  std::size_t next = 0;
  auto worker = [&] {
    for (;;) {
      std::size_t fold;
      {
        std::lock_guard lock(mu);
        if (next >= subjects.size() || failure) return;
        fold = next++;
      }
      try {
        auto f = run_fold(pretrained, trials, subjects, fold, num_classes, cfg);
        std::lock_guard lock(mu);
        rep.folds[fold] = std::move(f);
        if (on_fold) on_fold(rep.folds[fold]);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) failure = std::current_exception();
        return;
      }
    }
  };
  const std::size_t jobs = std::max<std::size_t>(1, std::min(cfg.jobs, subjects.size()));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
  for (const auto& f : rep.folds) {
    rep.mean_accuracy += f.accuracy;
    rep.mean_macro_f1 += f.macro_f1;
  }
  rep.mean_accuracy /= static_cast<double>(rep.folds.size());
  rep.mean_macro_f1 /= static_cast<double>(rep.folds.size());
  return rep;
}

/// Labels shuffled across all trials (null-task control).
inline void permute_labels(std::vector<TokenizedTrial>& trials, std::uint64_t seed) {
  std::vector<std::size_t> labels;
  for (const auto& t : trials) labels.push_back(t.label);
  Rng rng(seed);
  shuffle(labels, rng);
  for (std::size_t i = 0; i < trials.size(); ++i) trials[i].label = labels[i];
}

}  // namespace bandvq::downstream
