#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "bandvq/engine/ops.hpp"
#include "bandvq/engine/optim.hpp"
#include "bandvq/engine/tensor.hpp"
#include "bandvq/error.hpp"
#include "bandvq/rng.hpp"
#include "bandvq/signal.hpp"

namespace bandvq::vq {

inline constexpr std::size_t kTokenLength = 128;
inline constexpr double kRmsEps = 0.01;
inline constexpr double kRmsFloor = 0.01;
inline constexpr std::size_t kLatentDim = 32;
inline constexpr double kEmaDecay = 0.99;
inline constexpr double kLaplaceSmoothing = 1e-5;
inline constexpr std::array<std::size_t, kBandCount> kCodebookSizes{512, 512, 512, 768, 1024};

inline std::size_t codebook_size(Band b) { return kCodebookSizes[band_index(b)]; }

// ---------------------------------------------------------------------------
// Token construction
// ---------------------------------------------------------------------------

/// One RMS-normalized waveform token. Values and rms are kept in double so
/// that values * rms reproduces the float input exactly.
struct WaveToken {
  std::vector<double> values;
  double rms = 1.0;
  std::size_t channel_index = 0;
  std::size_t time_index = 0;
  Band band = Band::alpha;
};

inline double token_rms(std::span<const float> x, double eps = kRmsEps, double floor = kRmsFloor) {
  double ms = 0.0;
  for (float v : x) ms += static_cast<double>(v) * v;
  ms /= static_cast<double>(x.size());
  return std::max(std::sqrt(ms + eps), floor);
}

/// Cuts every channel into non-overlapping tokens of `token_len` samples,
/// ordered channel-major (all times of channel 0, then channel 1, ...).
inline std::vector<WaveToken> tokenize(const BandWaveform& wave, std::size_t token_len = kTokenLength,
                                       double eps = kRmsEps, double floor = kRmsFloor) {
  if (token_len == 0) throw ArgumentError("tokenize: token length must be > 0");
  std::vector<WaveToken> out;
  for (std::size_t c = 0; c < wave.samples.size(); ++c) {
    const auto& row = wave.samples[c];
    if (row.size() % token_len != 0)
      throw ArgumentError("tokenize: channel length " + std::to_string(row.size()) +
                          " is not divisible by the token length " + std::to_string(token_len));
    for (std::size_t t = 0; t < row.size() / token_len; ++t) {
      std::span<const float> x(row.data() + t * token_len, token_len);
      WaveToken tok;
      tok.rms = token_rms(x, eps, floor);
      tok.values.resize(token_len);
      for (std::size_t i = 0; i < token_len; ++i) tok.values[i] = static_cast<double>(x[i]) / tok.rms;
      tok.channel_index = c;
      tok.time_index = t;
      tok.band = wave.band;
      out.push_back(std::move(tok));
    }
  }
  return out;
}

/// Inverse of tokenize: values * rms, concatenated per channel.
inline ChannelMatrix detokenize(const std::vector<WaveToken>& tokens) {
  ChannelMatrix out;
  for (const auto& tok : tokens) {
    if (tok.channel_index >= out.size()) out.resize(tok.channel_index + 1);
    auto& row = out[tok.channel_index];
    const std::size_t len = tok.values.size();
    if (row.size() < (tok.time_index + 1) * len) row.resize((tok.time_index + 1) * len);
    for (std::size_t i = 0; i < len; ++i)
      row[tok.time_index * len + i] = static_cast<float>(tok.values[i] * tok.rms);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Codebook
// ---------------------------------------------------------------------------

struct Codebook {
  Band band = Band::alpha;
  std::size_t size = 0;  // K
  std::size_t dim = kLatentDim;
  std::vector<float> vectors;     // K x D
  std::vector<double> ema_count;  // K
  std::vector<double> ema_sum;    // K x D
  double decay = kEmaDecay;
  double smoothing = kLaplaceSmoothing;

  std::span<const float> entry(std::size_t k) const { return {vectors.data() + k * dim, dim}; }

  /// Entries copied from `latents` rows; EMA state set to count 1, sum = entry.
  static Codebook from_entries(Band band, std::size_t dim, const std::vector<float>& latents) {
    Codebook cb;
    cb.band = band;
    cb.dim = dim;
    cb.size = latents.size() / dim;
    cb.vectors = latents;
    cb.ema_count.assign(cb.size, 1.0);
    cb.ema_sum.assign(latents.begin(), latents.end());
    return cb;
  }
};

struct Assignment {
  std::size_t index = 0;
  double distance = 0.0;
};

/// Nearest entry by squared Euclidean distance; ties go to the lowest index.
inline Assignment nearest_code(std::span<const float> z_e, const Codebook& cb) {
  if (cb.size == 0) throw ArgumentError("quantize: empty codebook");
  if (z_e.size() != cb.dim)
    throw ShapeError("quantize: latent of size " + std::to_string(z_e.size()) +
                     " for codebook dimension " + std::to_string(cb.dim));
  Assignment best{0, std::numeric_limits<double>::infinity()};
  for (std::size_t k = 0; k < cb.size; ++k) {
    const float* e = cb.vectors.data() + k * cb.dim;
    double d = 0.0;
    for (std::size_t j = 0; j < cb.dim; ++j) {
      const double diff = static_cast<double>(z_e[j]) - static_cast<double>(e[j]);
      d += diff * diff;
    }
    if (d < best.distance) best = {k, d};
  }
  return best;
}

struct Quantized {
  std::size_t index = 0;
  std::vector<float> z_q;
};

inline Quantized quantize(std::span<const float> z_e, const Codebook& cb) {
  const auto a = nearest_code(z_e, cb);
  const auto e = cb.entry(a.index);
  return {a.index, std::vector<float>(e.begin(), e.end())};
}

/// EMA codebook update from a batch of latents (rows of `batch_z_e`) and their
/// assignments. An empty batch leaves the codebook untouched.
inline void ema_update(Codebook& cb, std::span<const float> batch_z_e,
                       std::span<const std::size_t> assignments) {
  if (assignments.empty()) return;
  if (batch_z_e.size() != assignments.size() * cb.dim)
    throw ShapeError("ema_update: " + std::to_string(batch_z_e.size()) + " latent values for " +
                     std::to_string(assignments.size()) + " assignments of dimension " +
                     std::to_string(cb.dim));
  std::vector<double> counts(cb.size, 0.0), sums(cb.size * cb.dim, 0.0);
  for (std::size_t i = 0; i < assignments.size(); ++i) {
    const std::size_t k = assignments[i];
    if (k >= cb.size)
      throw ArgumentError("ema_update: assignment " + std::to_string(k) + " out of range for K=" +
                          std::to_string(cb.size));
    counts[k] += 1.0;
    for (std::size_t j = 0; j < cb.dim; ++j) sums[k * cb.dim + j] += batch_z_e[i * cb.dim + j];
  }
  const double d = cb.decay;
  double total = 0.0;
  for (std::size_t k = 0; k < cb.size; ++k) {
    cb.ema_count[k] = d * cb.ema_count[k] + (1.0 - d) * counts[k];
    total += cb.ema_count[k];
    for (std::size_t j = 0; j < cb.dim; ++j)
      cb.ema_sum[k * cb.dim + j] = d * cb.ema_sum[k * cb.dim + j] + (1.0 - d) * sums[k * cb.dim + j];
  }
  if (!(total > 0.0)) return;
  const double denom = total + static_cast<double>(cb.size) * cb.smoothing;
  for (std::size_t k = 0; k < cb.size; ++k) {
    const double smoothed = (cb.ema_count[k] + cb.smoothing) / denom * total;
    for (std::size_t j = 0; j < cb.dim; ++j)
      cb.vectors[k * cb.dim + j] = static_cast<float>(cb.ema_sum[k * cb.dim + j] / smoothed);
  }
}

// ---------------------------------------------------------------------------
// Convolutional encoder / decoder
// ---------------------------------------------------------------------------

/// Five stride-2 conv blocks (1->32->64->64->64->64, kernel 5, GELU), flatten,
/// dense to the latent. The decoder mirrors it with transposed convolutions.
template <class T>
class TokenizerNet {
 public:
  static constexpr std::array<std::size_t, 6> kWidths{1, 32, 64, 64, 64, 64};
  static constexpr std::size_t kKernel = 5;
  static constexpr std::size_t kBlocks = 5;

  TokenizerNet() = default;

  TokenizerNet(std::size_t token_len, std::size_t latent_dim, std::uint64_t seed)
      : token_len_(token_len), latent_dim_(latent_dim) {
    if (token_len % (1u << kBlocks) != 0)
      throw ArgumentError("TokenizerNet: token length must be divisible by 32");
    tail_len_ = token_len >> kBlocks;
    Rng rng(seed);
    // He-uniform weights (gain 2 ahead of a GELU, 1 on linear outputs), zero
    // biases; the default 1/sqrt(fan_in) bound stalls twelve layers deep.
    // A stride-2 transposed conv sums cin * kernel / 2 inputs per output.
    auto add_layer = [&](const std::string& name, engine::Shape wshape, std::size_t bias_len, double fan_in,
                         double gain) {
      const double bound = std::sqrt(3.0 * gain / fan_in);
      std::vector<T> w(engine::numel_of(wshape));
      for (auto& x : w) x = static_cast<T>(uniform(rng, -bound, bound));
      params_.push_back({name + ".w", engine::Tensor<T>(std::move(wshape), std::move(w), true)});
      params_.push_back({name + ".b", engine::Tensor<T>({bias_len}, std::vector<T>(bias_len, T(0)), true)});
    };
    for (std::size_t i = 0; i < kBlocks; ++i) {
      const std::size_t cin = kWidths[i], cout = kWidths[i + 1];
      add_layer("enc.conv" + std::to_string(i), {cout, cin, kKernel}, cout, double(cin * kKernel), 2.0);
    }
    const std::size_t flat = kWidths.back() * tail_len_;
    add_layer("enc.dense", {latent_dim, flat}, latent_dim, double(flat), 1.0);
    add_layer("dec.dense", {flat, latent_dim}, flat, double(latent_dim), 2.0);
    for (std::size_t i = 0; i < kBlocks; ++i) {
      const std::size_t cin = kWidths[kBlocks - i], cout = kWidths[kBlocks - i - 1];
      add_layer("dec.deconv" + std::to_string(i), {cin, cout, kKernel}, cout, double(cin * kKernel) / 2.0,
                i + 1 < kBlocks ? 2.0 : 1.0);
    }
  }

  std::size_t token_len() const { return token_len_; }
  std::size_t latent_dim() const { return latent_dim_; }
  engine::ParamList<T>& params() { return params_; }
  const engine::ParamList<T>& params() const { return params_; }

  /// [B, 1, L] -> [B, D]
  engine::Tensor<T> encode(const engine::Tensor<T>& x) const {
    using namespace engine;
    if (x.rank() != 3 || x.dim(1) != 1 || x.dim(2) != token_len_)
      shape_fail("TokenizerNet::encode", x.shape(), "must be [batch, 1, token_len]");
    Tensor<T> h = x;
    for (std::size_t i = 0; i < kBlocks; ++i)
      h = gelu(conv1d(h, p(2 * i), p(2 * i + 1), {2, 2, 0}));
    h = reshape(h, {x.dim(0), kWidths.back() * tail_len_});
    return linear(h, p(2 * kBlocks), p(2 * kBlocks + 1));
  }

  /// [B, D] -> [B, 1, L]
  engine::Tensor<T> decode(const engine::Tensor<T>& z) const {
    using namespace engine;
    if (z.rank() != 2 || z.dim(1) != latent_dim_)
      shape_fail("TokenizerNet::decode", z.shape(), "must be [batch, latent_dim]");
    const std::size_t base = 2 * kBlocks + 2;
    Tensor<T> h = gelu(linear(z, p(base), p(base + 1)));
    h = reshape(h, {z.dim(0), kWidths.back(), tail_len_});
    for (std::size_t i = 0; i < kBlocks; ++i) {
      h = conv_transpose1d(h, p(base + 2 + 2 * i), p(base + 3 + 2 * i), {2, 2, 1});
      if (i + 1 < kBlocks) h = gelu(h);
    }
    return h;
  }

  template <class U>
  TokenizerNet<U> cast() const {
    TokenizerNet<U> out;
    out.token_len_ = token_len_;
    out.latent_dim_ = latent_dim_;
    out.tail_len_ = tail_len_;
    for (const auto& np : params_) {
      std::vector<U> v(np.tensor.data().begin(), np.tensor.data().end());
      out.params_.push_back({np.name, engine::Tensor<U>(np.tensor.shape(), std::move(v), true)});
    }
    return out;
  }

 private:
  template <class>
  friend class TokenizerNet;

  const engine::Tensor<T>& p(std::size_t i) const { return params_[i].tensor; }

  std::size_t token_len_ = kTokenLength;
  std::size_t latent_dim_ = kLatentDim;
  std::size_t tail_len_ = kTokenLength >> kBlocks;
  engine::ParamList<T> params_;
};

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

struct LossWeights {
  double mae = 1.25;
  double mse = 0.5;
  double stft = 0.25;
  double commit = 1.0;
};

struct StftScales {
  std::vector<std::size_t> n_ffts{256, 512, 1024};
  double hop_fraction = 0.25;
};

template <class T>
struct LossParts {
  engine::Tensor<T> total;
  double mae = 0.0;
  double mse = 0.0;
  double stft = 0.0;
  double commit = 0.0;
};

/// Multi-scale STFT magnitude loss over one contiguous waveform: mean over
/// scales of the mean L1 magnitude distance. Scales longer than the signal are
/// skipped; if none fits the result is a constant 0.
template <class T>
engine::Tensor<T> multi_scale_stft_loss(const engine::Tensor<T>& recon, std::span<const T> target,
                                        const StftScales& scales) {
  std::vector<engine::Tensor<T>> terms;
  for (std::size_t n_fft : scales.n_ffts) {
    if (n_fft > recon.numel()) continue;
    const std::size_t hop = std::max<std::size_t>(1, static_cast<std::size_t>(
                                                         std::llround(scales.hop_fraction * static_cast<double>(n_fft))));
    terms.push_back(engine::stft_magnitude_l1(recon, target, n_fft, hop));
  }
  if (terms.empty()) return engine::Tensor<T>::scalar(T(0));
  return engine::add_scalars(terms, std::vector<T>(terms.size(), T(1) / static_cast<T>(terms.size())));
}

/// Weighted tokenizer objective. `recon`/`target` are [B, 1, L] with tokens of
/// each sequence stored contiguously; `sequence_tokens` lists how many tokens
/// each sequence holds (sum == B). STFT terms are averaged over sequences.
template <class T>
LossParts<T> tokenizer_loss(const engine::Tensor<T>& target, const engine::Tensor<T>& recon,
                            const engine::Tensor<T>& z_e, const engine::Tensor<T>& z_q,
                            const std::vector<std::size_t>& sequence_tokens,
                            const LossWeights& w = {}, const StftScales& scales = {}) {
  using namespace engine;
  if (target.shape() != recon.shape()) shape_fail("tokenizer_loss", target.shape(), recon.shape());
  if (z_e.shape() != z_q.shape()) shape_fail("tokenizer_loss", z_e.shape(), z_q.shape());
  const std::size_t total_tokens =
      std::accumulate(sequence_tokens.begin(), sequence_tokens.end(), std::size_t{0});
  if (recon.rank() != 3 || total_tokens != recon.dim(0))
    throw ShapeError("tokenizer_loss: sequence token counts sum to " + std::to_string(total_tokens) +
                     " but the batch holds " + shape_str(recon.shape()));
  const std::size_t len = recon.dim(2);
  auto diff = sub(recon, target);
  auto mae = mean(abs(diff));
  auto mse = mean(square(diff));
  auto commit = mean(square(sub(z_e, stop_gradient(z_q))));

  const auto flat = reshape(recon, {total_tokens * len});
  std::vector<Tensor<T>> stft_terms;
  std::size_t offset = 0;
  for (std::size_t n_tok : sequence_tokens) {
    const std::size_t n = n_tok * len;
    auto seq = slice_rows(flat, offset, n);
    stft_terms.push_back(multi_scale_stft_loss<T>(
        seq, std::span<const T>(target.data().data() + offset, n), scales));
    offset += n;
  }
  auto stft = add_scalars(stft_terms, std::vector<T>(stft_terms.size(),
                                                     T(1) / static_cast<T>(stft_terms.size())));
  LossParts<T> parts;
  parts.mae = mae.item();
  parts.mse = mse.item();
  parts.stft = stft.item();
  parts.commit = commit.item();
  parts.total = add_scalars<T>({mae, mse, stft, commit},
                               {static_cast<T>(w.mae), static_cast<T>(w.mse),
                                static_cast<T>(w.stft), static_cast<T>(w.commit)});
  return parts;
}

// ---------------------------------------------------------------------------
// Frozen tokenizer
// ---------------------------------------------------------------------------

struct Tokenizer {
  Band band = Band::alpha;
  TokenizerNet<float> net;
  Codebook codebook;

  /// Latents for normalized tokens (each of token_len values), no graph.
  std::vector<float> encode_latents(const std::vector<std::vector<float>>& tokens) const {
    engine::NoGradGuard no_grad;
    const std::size_t len = net.token_len();
    std::vector<float> flat;
    flat.reserve(tokens.size() * len);
    for (const auto& t : tokens) {
      if (t.size() != len) throw ShapeError("Tokenizer: token of wrong length");
      flat.insert(flat.end(), t.begin(), t.end());
    }
    std::vector<float> out;
    constexpr std::size_t chunk = 512;
    for (std::size_t s = 0; s < tokens.size(); s += chunk) {
      const std::size_t b = std::min(chunk, tokens.size() - s);
      std::vector<float> part(flat.begin() + static_cast<std::ptrdiff_t>(s * len),
                              flat.begin() + static_cast<std::ptrdiff_t>((s + b) * len));
      auto z = net.encode(engine::Tensor<float>({b, 1, len}, std::move(part)));
      out.insert(out.end(), z.data().begin(), z.data().end());
    }
    return out;
  }

  std::vector<std::size_t> encode(const std::vector<std::vector<float>>& tokens) const {
    const auto z = encode_latents(tokens);
    const std::size_t d = codebook.dim;
    std::vector<std::size_t> idx(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i)
      idx[i] = nearest_code(std::span<const float>(z.data() + i * d, d), codebook).index;
    return idx;
  }

  /// Reconstructs normalized tokens from local code indices.
  std::vector<std::vector<float>> decode(const std::vector<std::size_t>& codes) const {
    engine::NoGradGuard no_grad;
    const std::size_t d = codebook.dim, len = net.token_len();
    std::vector<float> zq;
    for (std::size_t k : codes) {
      if (k >= codebook.size) throw ArgumentError("Tokenizer::decode: code out of range");
      const auto e = codebook.entry(k);
      zq.insert(zq.end(), e.begin(), e.end());
    }
    auto rec = net.decode(engine::Tensor<float>({codes.size(), d}, std::move(zq)));
    std::vector<std::vector<float>> out(codes.size());
    for (std::size_t i = 0; i < codes.size(); ++i)
      out[i].assign(rec.data().begin() + static_cast<std::ptrdiff_t>(i * len),
                    rec.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * len));
    return out;
  }
};

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Normalized token sequences of one band; each sequence is one
/// segment-channel with tokens concatenated in temporal order.
struct TokenCorpus {
  Band band = Band::alpha;
  std::size_t token_len = kTokenLength;
  std::vector<std::vector<float>> sequences;
  double rms_eps = kRmsEps;
  double rms_floor = kRmsFloor;

  std::size_t token_count() const {
    std::size_t n = 0;
    for (const auto& s : sequences) n += s.size() / token_len;
    return n;
  }

  /// Appends every channel of a band waveform (length divisible by token_len).
  void append(const BandWaveform& wave) {
    const auto toks = tokenize(wave, token_len, rms_eps, rms_floor);
    std::vector<std::vector<float>> rows(wave.samples.size());
    for (const auto& t : toks)
      for (double v : t.values) rows[t.channel_index].push_back(static_cast<float>(v));
    for (auto& r : rows)
      if (!r.empty()) sequences.push_back(std::move(r));
  }
};

struct TrainTokenizerConfig {
  std::size_t epochs = 20;
  std::size_t batch_tokens = 512;
  double lr = 3e-4;
  double weight_decay = 1e-5;
  double clip_norm = 1.0;
  std::size_t codebook_size = 0;  // 0 -> the band's reference size
  std::size_t latent_dim = kLatentDim;
  double ema_decay = kEmaDecay;
  LossWeights weights;
  StftScales scales;
  double holdout_fraction = 0.1;
  bool dead_code_restart = false;
  std::uint64_t seed = 0;
  std::size_t max_steps = 0;  // 0 -> unlimited
};

struct EpochStats {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double train_mse = 0.0;
  double heldout_mse = 0.0;  // through the quantizer, normalized units
  std::size_t codes_used = 0;
};

struct TokenizerReport {
  std::vector<double> step_losses;
  std::vector<EpochStats> epochs;
  std::vector<std::size_t> usage;  // assignment histogram on the training split
};

struct TrainedTokenizer {
  Tokenizer tokenizer;
  TokenizerReport report;
};

namespace detail {

inline std::vector<std::vector<float>> split_tokens(const std::vector<float>& seq, std::size_t len) {
  std::vector<std::vector<float>> out;
  for (std::size_t s = 0; s + len <= seq.size(); s += len)
    out.emplace_back(seq.begin() + static_cast<std::ptrdiff_t>(s),
                     seq.begin() + static_cast<std::ptrdiff_t>(s + len));
  return out;
}

inline double reconstruction_mse(const Tokenizer& tk, const std::vector<std::vector<float>>& seqs,
                                 std::size_t len) {
  std::vector<std::vector<float>> toks;
  for (const auto& s : seqs)
    for (auto& t : split_tokens(s, len)) toks.push_back(std::move(t));
  if (toks.empty()) return 0.0;
  const auto rec = tk.decode(tk.encode(toks));
  double se = 0.0;
  for (std::size_t i = 0; i < toks.size(); ++i)
    for (std::size_t j = 0; j < len; ++j) {
      const double d = static_cast<double>(rec[i][j]) - toks[i][j];
      se += d * d;
    }
  return se / static_cast<double>(toks.size() * len);
}

inline std::vector<std::size_t> usage_histogram(const Tokenizer& tk, const std::vector<std::vector<float>>& seqs,
                                                std::size_t len) {
  std::vector<std::vector<float>> toks;
  for (const auto& s : seqs)
    for (auto& t : split_tokens(s, len)) toks.push_back(std::move(t));
  std::vector<std::size_t> usage(tk.codebook.size, 0);
  if (!toks.empty())
    for (std::size_t k : tk.encode(toks)) ++usage[k];
  return usage;
}

}  // namespace detail

/// Trains one band tokenizer (AdamW on the conv net, EMA on the codebook).
/// `on_step(step, loss)` is called after every update when provided.
inline TrainedTokenizer train_tokenizer(
    const TokenCorpus& corpus, const TrainTokenizerConfig& cfg,
    const std::function<void(std::size_t, double)>& on_step = {}) {
  using namespace engine;
  const std::size_t len = corpus.token_len;
  const std::size_t k_size = cfg.codebook_size ? cfg.codebook_size : codebook_size(corpus.band);
  if (corpus.sequences.empty()) throw ArgumentError("train_tokenizer: empty corpus");
  for (const auto& s : corpus.sequences)
    if (s.empty() || s.size() % len != 0)
      throw ArgumentError("train_tokenizer: sequence length not a multiple of the token length");

  Rng rng(derive_seed(cfg.seed, 1));
  std::vector<std::size_t> order(corpus.sequences.size());
  std::iota(order.begin(), order.end(), 0);
  shuffle(order, rng);
  std::size_t n_hold = static_cast<std::size_t>(
      std::floor(cfg.holdout_fraction * static_cast<double>(order.size())));
  if (cfg.holdout_fraction > 0.0 && n_hold == 0 && order.size() > 1) n_hold = 1;
  std::vector<std::vector<float>> heldout, train;
  for (std::size_t i = 0; i < order.size(); ++i)
    (i < n_hold ? heldout : train).push_back(corpus.sequences[order[i]]);

  TrainedTokenizer out;
  Tokenizer& tk = out.tokenizer;
  tk.band = corpus.band;
  tk.net = TokenizerNet<float>(len, cfg.latent_dim, derive_seed(cfg.seed, 2));
  auto& params = tk.net.params();
  OptimizerState<float> opt;
  opt.init_for(params);
  AdamWConfig adam;
  adam.weight_decay = cfg.weight_decay;
  adam.clip_norm = cfg.clip_norm;

  std::vector<std::size_t> seq_order(train.size());
  std::iota(seq_order.begin(), seq_order.end(), 0);

  auto make_batches = [&]() {
    shuffle(seq_order, rng);
    std::vector<std::vector<std::size_t>> batches;
    std::vector<std::size_t> cur;
    std::size_t tokens = 0;
    for (std::size_t idx : seq_order) {
      cur.push_back(idx);
      tokens += train[idx].size() / len;
      if (tokens >= cfg.batch_tokens) {
        batches.push_back(std::move(cur));
        cur.clear();
        tokens = 0;
      }
    }
    if (!cur.empty()) batches.push_back(std::move(cur));
    return batches;
  };

  auto batch_tensor = [&](const std::vector<std::size_t>& seqs, std::vector<std::size_t>& counts) {
    std::vector<float> flat;
    counts.clear();
    for (std::size_t idx : seqs) {
      flat.insert(flat.end(), train[idx].begin(), train[idx].end());
      counts.push_back(train[idx].size() / len);
    }
    const std::size_t b = flat.size() / len;
    return Tensor<float>({b, 1, len}, std::move(flat));
  };

  // Codebook entries start as encoder outputs of the first shuffled tokens,
  // drawn without replacement (with replacement only if the corpus is smaller
  // than K).
  {
    NoGradGuard no_grad;
    std::vector<std::vector<float>> init_tokens;
    auto first = make_batches();
    for (const auto& b : first) {
      for (std::size_t idx : b)
        for (auto& t : detail::split_tokens(train[idx], len)) init_tokens.push_back(std::move(t));
      if (init_tokens.size() >= std::max(k_size, cfg.batch_tokens)) break;
    }
    Tokenizer probe{corpus.band, tk.net, {}};
    const auto z = probe.encode_latents(init_tokens);
    std::vector<std::size_t> pick;
    if (init_tokens.size() >= k_size) {
      pick = sample_without_replacement(rng, init_tokens.size(), k_size);
    } else {
      for (std::size_t i = 0; i < k_size; ++i) pick.push_back(uniform_index(rng, init_tokens.size()));
    }
    std::vector<float> entries;
    for (std::size_t i : pick)
      entries.insert(entries.end(), z.begin() + static_cast<std::ptrdiff_t>(i * cfg.latent_dim),
                     z.begin() + static_cast<std::ptrdiff_t>((i + 1) * cfg.latent_dim));
    tk.codebook = Codebook::from_entries(corpus.band, cfg.latent_dim, entries);
    tk.codebook.decay = cfg.ema_decay;
  }

  std::size_t step = 0;
  std::vector<std::size_t> counts;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double loss_sum = 0.0, mse_sum = 0.0;
    std::size_t n_batches = 0;
    std::vector<float> last_latents;
    std::vector<std::size_t> epoch_hits(tk.codebook.size, 0);
    for (const auto& b : make_batches()) {
      if (cfg.max_steps && step >= cfg.max_steps) break;
      auto x = batch_tensor(b, counts);
      zero_grads(params);
      auto z_e = tk.net.encode(x);
      const std::size_t bsz = x.dim(0), d = cfg.latent_dim;
      std::vector<std::size_t> assign(bsz);
      std::vector<float> zq(bsz * d);
      for (std::size_t i = 0; i < bsz; ++i) {
        std::span<const float> row(z_e.data().data() + i * d, d);
        assign[i] = nearest_code(row, tk.codebook).index;
        const auto e = tk.codebook.entry(assign[i]);
        std::copy(e.begin(), e.end(), zq.begin() + static_cast<std::ptrdiff_t>(i * d));
      }
      Tensor<float> z_q({bsz, d}, std::move(zq));
      auto recon = tk.net.decode(straight_through(z_e, z_q));
      auto parts = tokenizer_loss<float>(x, recon, z_e, z_q, counts, cfg.weights, cfg.scales);
      const double loss = parts.total.item();
      ++step;
      if (!std::isfinite(loss))
        throw NumericalError("train_tokenizer: non-finite loss at step " + std::to_string(step));
      parts.total.backward();
      adamw_step(params, opt, cfg.lr, adam);
      ema_update(tk.codebook, z_e.data(), assign);
      for (std::size_t k : assign) ++epoch_hits[k];
      last_latents.assign(z_e.data().begin(), z_e.data().end());
      out.report.step_losses.push_back(loss);
      if (on_step) on_step(step, loss);
      loss_sum += loss;
      mse_sum += parts.mse;
      ++n_batches;
    }
    // dead: nothing assigned this epoch, or a decayed count; skipped after the
    // last epoch so the reported usage reflects trained entries
    const bool last_epoch = epoch == cfg.epochs || (cfg.max_steps && step >= cfg.max_steps);
    if (cfg.dead_code_restart && !last_epoch && !last_latents.empty()) {
      auto& cb = tk.codebook;
      const double mean_count =
          std::accumulate(cb.ema_count.begin(), cb.ema_count.end(), 0.0) / static_cast<double>(cb.size);
      const std::size_t avail = last_latents.size() / cb.dim;
      for (std::size_t k = 0; k < cb.size; ++k) {
        if (epoch_hits[k] > 0 && cb.ema_count[k] >= 1e-3 * mean_count) continue;
        const std::size_t src = uniform_index(rng, avail);
        for (std::size_t j = 0; j < cb.dim; ++j) {
          cb.vectors[k * cb.dim + j] = last_latents[src * cb.dim + j];
          cb.ema_sum[k * cb.dim + j] = last_latents[src * cb.dim + j] * cb.ema_count[k];
        }
      }
    }
    EpochStats st;
    st.epoch = epoch;
    st.train_loss = n_batches ? loss_sum / static_cast<double>(n_batches) : 0.0;
    st.train_mse = n_batches ? mse_sum / static_cast<double>(n_batches) : 0.0;
    st.heldout_mse = detail::reconstruction_mse(tk, heldout.empty() ? train : heldout, len);
    out.report.usage = detail::usage_histogram(tk, train, len);
    st.codes_used = static_cast<std::size_t>(
        std::count_if(out.report.usage.begin(), out.report.usage.end(), [](std::size_t c) { return c > 0; }));
    out.report.epochs.push_back(st);
    if (cfg.max_steps && step >= cfg.max_steps) break;
  }

  if (out.report.epochs.empty()) out.report.usage = detail::usage_histogram(tk, train, len);
  return out;
}

}  // namespace bandvq::vq
