#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "bandvq/engine/ops.hpp"
#include "bandvq/engine/optim.hpp"
#include "bandvq/engine/tensor.hpp"
#include "bandvq/error.hpp"
#include "bandvq/masking.hpp"
#include "bandvq/rng.hpp"
#include "bandvq/tokens.hpp"
#include "bandvq/vq.hpp"

namespace bandvq::encoder {

inline constexpr std::size_t kPrefixRows = 4;

struct EncoderConfig {
  std::size_t layers = 12;
  std::size_t d = 256;
  std::size_t heads = 8;
  std::size_t ffn_mult = 4;
  std::size_t max_T = 256;
  std::size_t code_vocab = tokens::kCodeEmbeddings;
  std::size_t power_vocab = tokens::kPowerBins + 1;
  std::size_t channel_vocab = tokens::kChannelVocab;
  double p_meta = 0.1;
  double init_std = 0.02;
  std::uint64_t seed = 0;

  void validate() const {
    if (layers == 0 || d == 0 || heads == 0) throw ArgumentError("EncoderConfig: layers, d, heads must be > 0");
    if (d % heads != 0)
      throw ArgumentError("EncoderConfig: d=" + std::to_string(d) + " not divisible by heads=" +
                          std::to_string(heads));
    if (max_T == 0 || ffn_mult == 0) throw ArgumentError("EncoderConfig: max_T and ffn_mult must be > 0");
    if (!(p_meta >= 0.0 && p_meta <= 1.0)) throw ArgumentError("EncoderConfig: p_meta must be in [0, 1]");
  }
};

/// Each field independently replaced by its UNKNOWN id with probability p.
inline tokens::MetadataIds meta_dropout(const tokens::MetadataIds& meta, double p, Rng& rng) {
  if (!(p >= 0.0 && p <= 1.0)) throw ArgumentError("meta_dropout: p must be in [0, 1]");
  tokens::MetadataIds out = meta;
  if (bernoulli(rng, p)) out.reference = tokens::kReferenceUnknown;
  if (bernoulli(rng, p)) out.band = tokens::kBandUnknown;
  if (bernoulli(rng, p)) out.task_family = tokens::kTaskUnknown;
  if (bernoulli(rng, p)) out.phase = tokens::kPhaseUnknown;
  return out;
}

// Observer for strip_prefix: (rows kept, prefix rows dropped). Test hook.
using StripObserver = std::function<void(std::size_t, std::size_t)>;

inline StripObserver& strip_observer() {
  thread_local StripObserver obs;
  return obs;
}

template <class T>
class TransformerEncoder {
 public:
  TransformerEncoder() = default;

  explicit TransformerEncoder(const EncoderConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    const std::size_t d = cfg.d, f = cfg.ffn_mult * cfg.d;
    auto normal_param = [&](std::string name, engine::Shape shape) {
      std::vector<T> v(engine::numel_of(shape));
      for (auto& x : v) x = static_cast<T>(cfg.init_std * normal(rng));
      add_param(std::move(name), std::move(shape), std::move(v));
    };
    auto const_param = [&](std::string name, engine::Shape shape, T c) {
      add_param(std::move(name), shape, std::vector<T>(engine::numel_of(shape), c));
    };
    normal_param("emb.code", {cfg.code_vocab, d});
    normal_param("emb.power", {cfg.power_vocab, d});
    normal_param("emb.channel", {cfg.channel_vocab, d});
    normal_param("emb.time", {cfg.max_T, d});
    normal_param("emb.reference", {tokens::kReferenceNames.size(), d});
    normal_param("emb.band", {tokens::kBandIdCount, d});
    normal_param("emb.task", {tokens::kTaskFamilyCount, d});
    normal_param("emb.phase", {tokens::kPhaseNames.size(), d});
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      const_param(p + "ln1.g", {d}, T(1));
      const_param(p + "ln1.b", {d}, T(0));
      normal_param(p + "attn.qkv.w", {3 * d, d});
      const_param(p + "attn.qkv.b", {3 * d}, T(0));
      normal_param(p + "attn.out.w", {d, d});
      const_param(p + "attn.out.b", {d}, T(0));
      const_param(p + "ln2.g", {d}, T(1));
      const_param(p + "ln2.b", {d}, T(0));
      normal_param(p + "ffn.w1", {f, d});
      const_param(p + "ffn.b1", {f}, T(0));
      normal_param(p + "ffn.w2", {d, f});
      const_param(p + "ffn.b2", {d}, T(0));
    }
    const_param("final_ln.g", {d}, T(1));
    const_param("final_ln.b", {d}, T(0));
  }

  const EncoderConfig& config() const { return cfg_; }
  engine::ParamList<T>& params() { return params_; }
  const engine::ParamList<T>& params() const { return params_; }

  /// Summed embeddings for a bucket of streams sharing (C, T): rows are laid
  /// out per sequence as [reference, band, task, phase, S positions].
  engine::Tensor<T> embed(const std::vector<const tokens::TokenStream*>& batch,
                          const std::vector<tokens::MetadataIds>& meta) const {
    using namespace engine;
    if (batch.empty()) throw ArgumentError("embed: empty batch");
    if (meta.size() != batch.size()) throw ShapeError("embed: one MetadataIds per stream required");
    const std::size_t C = batch.front()->channels, Tn = batch.front()->times, S = C * Tn;
    if (S == 0) throw ShapeError("embed: stream has no positions");
    if (Tn > cfg_.max_T)
      throw ArgumentError("embed: time index " + std::to_string(Tn - 1) + " >= max_T " +
                          std::to_string(cfg_.max_T));
    std::vector<std::size_t> code, power, chan, time;
    code.reserve(batch.size() * S);
    power.reserve(batch.size() * S);
    chan.reserve(batch.size() * S);
    time.reserve(batch.size() * S);
    std::array<std::vector<std::size_t>, kPrefixRows> pre;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const auto& s = *batch[b];
      s.validate();
      if (s.channels != C || s.times != Tn) throw ShapeError("embed: batch mixes (C, T) shapes");
      for (std::size_t i = 0; i < S; ++i) {
        if (s.codes[i] > tokens::kMaskCode || s.powers[i] > tokens::kMaskPower)
          throw ArgumentError("embed: code/power id out of range at position " + std::to_string(i));
        code.push_back(s.codes[i]);
        power.push_back(s.powers[i]);
        chan.push_back(s.channel_ids[i % C]);
        time.push_back(i / C);
      }
      pre[0].push_back(meta[b].reference);
      pre[1].push_back(meta[b].band);
      pre[2].push_back(meta[b].task_family);
      pre[3].push_back(meta[b].phase);
    }
    Tensor<T> body = add(add(embedding(p(kCode), code), embedding(p(kPower), power)),
                         add(embedding(p(kChannel), chan), embedding(p(kTime), time)));
    std::vector<Tensor<T>> parts;
    for (std::size_t k = 0; k < kPrefixRows; ++k) parts.push_back(embedding(p(kReference + k), pre[k]));
    parts.push_back(body);
    Tensor<T> stacked = concat_rows(parts);
    // stacked rows: [ref x B, band x B, task x B, phase x B, body B*S]
    const std::size_t B = batch.size(), N = S + kPrefixRows;
    std::vector<std::size_t> order;
    order.reserve(B * N);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t k = 0; k < kPrefixRows; ++k) order.push_back(k * B + b);
      for (std::size_t i = 0; i < S; ++i) order.push_back(kPrefixRows * B + b * S + i);
    }
    return gather_rows(stacked, order);
  }

  /// Runs the layer stack on [B*N, d] rows, attention within each sequence.
  engine::Tensor<T> encode(const engine::Tensor<T>& x, std::size_t batch,
                           bool final_norm = true) const {
    using namespace engine;
    const std::size_t d = cfg_.d;
    if (x.rank() != 2 || x.dim(1) != d || batch == 0 || x.dim(0) % batch != 0)
      shape_fail("encode", x.shape(), "must be [batch * rows, d]");
    const std::size_t N = x.dim(0) / batch;
    if (N < kPrefixRows + 1) shape_fail("encode", x.shape(), "needs at least 5 rows per sequence");
    const std::size_t H = cfg_.heads, dh = d / H;
    const T inv_sqrt_dh = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
    Tensor<T> h = x;
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      const std::size_t base = kLayerBase + l * kPerLayer;
      Tensor<T> a = layer_norm(h, p(base + 0), p(base + 1));
      Tensor<T> qkv = linear(a, p(base + 2), p(base + 3));
      std::vector<Tensor<T>> seqs;
      seqs.reserve(batch);
      for (std::size_t b = 0; b < batch; ++b) {
        Tensor<T> rows = slice_rows(qkv, b * N, N);
        std::vector<Tensor<T>> heads;
        heads.reserve(H);
        for (std::size_t k = 0; k < H; ++k) {
          Tensor<T> q = slice_cols(rows, k * dh, dh);
          Tensor<T> kk = slice_cols(rows, d + k * dh, dh);
          Tensor<T> v = slice_cols(rows, 2 * d + k * dh, dh);
          heads.push_back(matmul(softmax(scale(matmul_nt(q, kk), inv_sqrt_dh)), v));
        }
        seqs.push_back(H == 1 ? heads.front() : concat_cols(heads));
      }
      Tensor<T> attn = batch == 1 ? seqs.front() : concat_rows(seqs);
      h = add(h, linear(attn, p(base + 4), p(base + 5)));
      Tensor<T> f = layer_norm(h, p(base + 6), p(base + 7));
      h = add(h, linear(gelu(linear(f, p(base + 8), p(base + 9))), p(base + 10), p(base + 11)));
      for (T v : h.data())
        if (!std::isfinite(v))
          throw NumericalError("encode: non-finite activation after layer " + std::to_string(l));
    }
    if (!final_norm) return h;
    const std::size_t fin = kLayerBase + cfg_.layers * kPerLayer;
    return layer_norm(h, p(fin), p(fin + 1));
  }

  engine::Tensor<T> forward(const std::vector<const tokens::TokenStream*>& batch,
                            const std::vector<tokens::MetadataIds>& meta) const {
    return encode(embed(batch, meta), batch.size());
  }

  template <class U>
  TransformerEncoder<U> cast() const {
    TransformerEncoder<U> out;
    out.cfg_ = cfg_;
    for (const auto& np : params_) {
      std::vector<U> v(np.tensor.data().begin(), np.tensor.data().end());
      out.params_.push_back({np.name, engine::Tensor<U>(np.tensor.shape(), std::move(v), true)});
    }
    return out;
  }

 private:
  template <class>
  friend class TransformerEncoder;

  enum : std::size_t { kCode, kPower, kChannel, kTime, kReference, kBandEmb, kTask, kPhase, kLayerBase };
  static constexpr std::size_t kPerLayer = 12;

  void add_param(std::string name, engine::Shape shape, std::vector<T> v) {
    params_.push_back({std::move(name), engine::Tensor<T>(std::move(shape), std::move(v), true)});
  }
  const engine::Tensor<T>& p(std::size_t i) const { return params_[i].tensor; }

  EncoderConfig cfg_;
  engine::ParamList<T> params_;
};

/// Drops the four prefix rows of every sequence: [B*(S+4), d] -> [B*S, d].
template <class T>
engine::Tensor<T> strip_prefix(const engine::Tensor<T>& hidden, std::size_t batch) {
  if (hidden.rank() != 2 || batch == 0 || hidden.dim(0) % batch != 0)
    engine::shape_fail("strip_prefix", hidden.shape(), "must be [batch * rows, d]");
  const std::size_t N = hidden.dim(0) / batch;
  if (N <= kPrefixRows) engine::shape_fail("strip_prefix", hidden.shape(), "has no EEG rows");
  std::vector<std::size_t> keep;
  keep.reserve(batch * (N - kPrefixRows));
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = kPrefixRows; i < N; ++i) keep.push_back(b * N + i);
  if (strip_observer()) strip_observer()(keep.size(), batch * kPrefixRows);
  return engine::gather_rows(hidden, keep);
}

/// One linear head per band producing logits over that band's local codes.
template <class T>
class BandHeads {
 public:
  BandHeads() = default;

  BandHeads(std::size_t d, std::uint64_t seed, double init_std = 0.02) : d_(d) {
    Rng rng(seed);
    for (Band b : kAllBands) {
      const std::size_t K = vq::codebook_size(b);
      std::vector<T> w(K * d);
      for (auto& x : w) x = static_cast<T>(init_std * normal(rng));
      const std::string p = std::string("head.") + std::string(band_name(b)) + ".";
      params_.push_back({p + "w", engine::Tensor<T>({K, d}, std::move(w), true)});
      params_.push_back({p + "b", engine::Tensor<T>({K}, std::vector<T>(K, T(0)), true)});
    }
  }

  std::size_t width(Band b) const { return params_[2 * band_index(b)].tensor.dim(0); }
  engine::ParamList<T>& params() { return params_; }
  const engine::ParamList<T>& params() const { return params_; }

  /// The two parameters of one band's head.
  engine::ParamList<T> band_params(Band b) const {
    return {params_[2 * band_index(b)], params_[2 * band_index(b) + 1]};
  }

  engine::Tensor<T> logits(const engine::Tensor<T>& hidden, Band b) const {
    return engine::linear(hidden, params_[2 * band_index(b)].tensor, params_[2 * band_index(b) + 1].tensor);
  }

  template <class U>
  BandHeads<U> cast() const {
    BandHeads<U> out;
    out.d_ = d_;
    for (const auto& np : params_) {
      std::vector<U> v(np.tensor.data().begin(), np.tensor.data().end());
      out.params_.push_back({np.name, engine::Tensor<U>(np.tensor.shape(), std::move(v), true)});
    }
    return out;
  }

 private:
  template <class>
  friend class BandHeads;
  std::size_t d_ = 0;
  engine::ParamList<T> params_;
};

template <class T>
struct McpResult {
  engine::Tensor<T> loss;
  std::size_t masked = 0;
  std::size_t correct = 0;
};

/// Mean cross-entropy of band-b head logits at `positions` (rows of the
/// stripped hidden states) against local code targets.
template <class T>
McpResult<T> mcp_loss(const engine::Tensor<T>& hidden, const BandHeads<T>& heads, Band band,
                      const std::vector<std::size_t>& positions,
                      const std::vector<std::size_t>& local_targets) {
  if (positions.empty()) throw ArgumentError("mcp_loss: no masked positions");
  if (positions.size() != local_targets.size()) throw ShapeError("mcp_loss: positions/targets length mismatch");
  const std::size_t K = heads.width(band);
  for (auto t : local_targets)
    if (t >= K)
      throw ArgumentError("mcp_loss: target " + std::to_string(t) + " outside band " +
                          std::string(band_name(band)) + " vocabulary of " + std::to_string(K));
  auto logits = heads.logits(engine::gather_rows(hidden, positions), band);
  McpResult<T> r{engine::cross_entropy(logits, local_targets), positions.size(), 0};
  const auto& v = logits.values();
  for (std::size_t i = 0; i < positions.size(); ++i) {
    const auto row = v.begin() + static_cast<std::ptrdiff_t>(i * K);
    const auto best = static_cast<std::size_t>(std::max_element(row, row + static_cast<std::ptrdiff_t>(K)) - row);
    r.correct += best == local_targets[i];
  }
  return r;
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

struct PretrainConfig {
  std::size_t batch_size = 16;
  std::uint64_t steps = 30000;
  engine::LrSchedule schedule{};
  engine::AdamWConfig adamw{0.9, 0.999, 1e-8, 1e-2, 1.0};
  double p_mask = 0.5;
  double p_meta = 0.1;
  std::uint64_t seed = 0;
  std::uint64_t checkpoint_every = 0;  // 0 = never

  void validate() const {
    if (batch_size == 0) throw ArgumentError("PretrainConfig: batch_size must be > 0");
    if (!(p_mask >= 0.0 && p_mask <= 1.0)) throw ArgumentError("PretrainConfig: p_mask must be in [0, 1]");
    if (!(p_meta >= 0.0 && p_meta <= 1.0)) throw ArgumentError("PretrainConfig: p_meta must be in [0, 1]");
    schedule.validate();
  }
};

struct StepRecord {
  std::uint64_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double masked_accuracy = 0.0;
  std::size_t masked = 0;
  bool skipped = false;
};

/// Everything needed to resume pretraining exactly.
struct PretrainState {
  TransformerEncoder<float> encoder;
  BandHeads<float> heads;
  engine::OptimizerState<float> encoder_opt;
  std::array<engine::OptimizerState<float>, kBandCount> head_opt;
  std::uint64_t step = 0;

  static PretrainState fresh(const EncoderConfig& cfg) {
    PretrainState s;
    s.encoder = TransformerEncoder<float>(cfg);
    s.heads = BandHeads<float>(cfg.d, derive_seed(cfg.seed, 0x4eadULL), cfg.init_std);
    return s;
  }
};

/// Streams grouped by (band, C, T) so a batch never needs padding.
class BucketedCorpus {
 public:
  explicit BucketedCorpus(const std::vector<tokens::TokenStream>& streams) : streams_(&streams) {
    if (streams.empty()) throw ArgumentError("pretrain: empty corpus");
    std::map<std::tuple<int, std::size_t, std::size_t>, std::size_t> slot;
    for (std::size_t i = 0; i < streams.size(); ++i) {
      streams[i].validate();
      const auto key = std::make_tuple(static_cast<int>(streams[i].band), std::size_t{streams[i].channels},
                                       std::size_t{streams[i].times});
      auto it = slot.find(key);
      if (it == slot.end()) {
        it = slot.emplace(key, buckets_.size()).first;
        buckets_.emplace_back();
      }
      buckets_[it->second].push_back(i);
      bucket_of_.push_back(it->second);
    }
  }

  /// Anchor sequence uniform over the corpus, the rest of the batch uniform
  /// (with replacement) from the anchor's bucket.
  std::vector<std::size_t> sample(Rng& rng, std::size_t batch) const {
    const std::size_t anchor = uniform_index(rng, streams_->size());
    const auto& bucket = buckets_[bucket_of_[anchor]];
    std::vector<std::size_t> out{anchor};
    while (out.size() < batch) out.push_back(bucket[uniform_index(rng, bucket.size())]);
    return out;
  }

  const tokens::TokenStream& operator[](std::size_t i) const { return (*streams_)[i]; }
  std::size_t bucket_count() const { return buckets_.size(); }

 private:
  const std::vector<tokens::TokenStream>* streams_;
  std::vector<std::vector<std::size_t>> buckets_;
  std::vector<std::size_t> bucket_of_;
};

/// One optimizer step; all randomness derives from (seed, step, batch slot).
inline StepRecord pretrain_step(PretrainState& st, const BucketedCorpus& corpus, const PretrainConfig& cfg) {
  using namespace engine;
  const std::uint64_t step = st.step + 1;
  const std::uint64_t step_seed = derive_seed(cfg.seed, step);
  Rng batch_rng(derive_seed(step_seed, 0));
  const auto ids = corpus.sample(batch_rng, cfg.batch_size);
  const Band band = corpus[ids.front()].band;

  std::vector<masking::MaskedStream> masked;
  std::vector<tokens::MetadataIds> meta;
  std::vector<std::size_t> positions, targets;
  masked.reserve(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto& s = corpus[ids[i]];
    Rng mask_rng(derive_seed(step_seed, 2 * i + 1));
    Rng meta_rng(derive_seed(step_seed, 2 * i + 2));
    meta.push_back(meta_dropout(s.meta, cfg.p_meta, meta_rng));
    const auto plan = masking::sample_mask(masking::annotate_ids(s.channel_ids), s.times, cfg.p_mask, mask_rng);
    masked.push_back(masking::apply_mask(s, plan));
    const auto& t = masked.back().targets;
    for (std::size_t k = 0; k < t.positions.size(); ++k) {
      positions.push_back(i * s.size() + t.positions[k]);
      const auto [b, local] = tokens::split_global(t.codes[k]);
      if (b != band) throw ArgumentError("pretrain: stream code from band " + std::string(band_name(b)) +
                                         " in a " + std::string(band_name(band)) + " stream");
      targets.push_back(local);
    }
  }

  StepRecord rec;
  rec.step = step;
  rec.lr = cosine_lr(step, cfg.schedule);
  if (positions.empty()) {
    rec.skipped = true;
    st.step = step;
    return rec;
  }
  std::vector<const tokens::TokenStream*> ptrs;
  for (const auto& m : masked) ptrs.push_back(&m.stream);

  ParamList<float> enc_params = st.encoder.params();
  ParamList<float> head_params = st.heads.band_params(band);
  zero_grads(enc_params);
  zero_grads(head_params);
  auto hidden = strip_prefix(st.encoder.forward(ptrs, meta), ptrs.size());
  auto r = mcp_loss(hidden, st.heads, band, positions, targets);
  rec.loss = r.loss.item();
  rec.masked = r.masked;
  rec.masked_accuracy = static_cast<double>(r.correct) / static_cast<double>(r.masked);
  if (!std::isfinite(rec.loss))
    throw NumericalError("pretrain: non-finite loss at step " + std::to_string(step));
  r.loss.backward();

  ParamList<float> all = enc_params;
  all.insert(all.end(), head_params.begin(), head_params.end());
  check_finite_grads(all);
  clip_grad_norm(all, cfg.adamw.clip_norm);
  adamw_update(enc_params, st.encoder_opt, rec.lr, cfg.adamw);
  adamw_update(head_params, st.head_opt[band_index(band)], rec.lr, cfg.adamw);
  st.step = step;
  return rec;
}

using StepCallback = std::function<void(const StepRecord&)>;
using CheckpointCallback = std::function<void(const PretrainState&)>;

/// Runs steps until st.step == cfg.steps. Skipped batches are reported
/// through on_step with `skipped` set.
inline void pretrain(PretrainState& st, const std::vector<tokens::TokenStream>& corpus,
                     const PretrainConfig& cfg, const StepCallback& on_step = {},
                     const CheckpointCallback& on_checkpoint = {}) {
  cfg.validate();
  const BucketedCorpus buckets(corpus);
  while (st.step < cfg.steps) {
    const auto rec = pretrain_step(st, buckets, cfg);
    if (on_step) on_step(rec);
    if (on_checkpoint && cfg.checkpoint_every > 0 && st.step % cfg.checkpoint_every == 0) on_checkpoint(st);
  }
}

}  // namespace bandvq::encoder
