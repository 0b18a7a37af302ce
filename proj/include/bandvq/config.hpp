#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bandvq/data/checkpoint.hpp"
#include "bandvq/data/synth.hpp"
#include "bandvq/downstream.hpp"
#include "bandvq/encoder.hpp"
#include "bandvq/error.hpp"
#include "bandvq/signal.hpp"
#include "bandvq/tokens.hpp"
#include "bandvq/vq.hpp"

namespace bandvq::config {

using nlohmann::json;

/// Every key the config accepts, with its default.
inline json defaults() {
  return json{
      {"seed", 0},
      {"paths",
       {{"data_dir", "run/data"},
        {"tokenizer_dir", "run/tokenizers"},
        {"tokens_dir", "run/tokens"},
        {"checkpoint_dir", "run/checkpoints"},
        {"output_dir", "run/out"}}},
      {"signal",
       {{"sample_rate", 128.0},
        {"token_length", 128},
        {"scale", 100.0},
        {"rms_eps", 0.01},
        {"rms_floor", 0.01},
        {"line_freq", 50.0}}},
      {"vq",
       {{"latent_dim", 32},
        {"codebook_sizes", {512, 512, 512, 768, 1024}},
        {"offsets", {0, 512, 1024, 1536, 2304}},
        {"ema_decay", 0.99},
        {"power_bins", 128},
        {"power_eps", 1e-8},
        {"power_log_min", -0.1},
        {"power_log_max", 4.0}}},
      {"tokenizer_training",
       {{"epochs", 20},
        {"batch_tokens", 512},
        {"lr", 3e-4},
        {"weight_decay", 1e-5},
        {"clip_norm", 1.0},
        {"loss_weights", {{"mae", 1.25}, {"mse", 0.5}, {"stft", 0.25}, {"commit", 1.0}}},
        {"stft_n_fft", {256, 512, 1024}},
        {"stft_hop_fraction", 0.25},
        {"holdout_fraction", 0.1},
        {"max_tokens", 0},
        {"dead_code_restart", false}}},
      {"encoder", {{"layers", 12}, {"d", 256}, {"heads", 8}, {"ffn_mult", 4}, {"max_T", 256}}},
      {"pretrain",
       {{"batch_size", 16},
        {"steps", 30000},
        {"peak_lr", 3e-4},
        {"min_lr", 3e-5},
        {"warmup_steps", 10000},
        {"weight_decay", 1e-2},
        {"clip_norm", 1.0},
        {"p_mask", 0.5},
        {"p_meta", 0.1},
        {"checkpoint_every", 1000}}},
      {"finetune",
       {{"encoder_lr", 3e-5},
        {"head_lr", 1e-3},
        {"batch_size", 16},
        {"hidden", 256},
        {"dropout", 0.2},
        {"max_epochs", 30},
        {"min_epochs", 6},
        {"patience", 8},
        {"weight_decay", 1e-2},
        {"clip_norm", 1.0},
        {"val_fraction", 0.2},
        {"num_classes", 0}}},
      {"ablation", {{"no_power", false}, {"no_metadata", false}}},
      {"loso", {{"jobs", 1}, {"permute_labels", false}}},
      {"synth",
       {{"subjects", 8},
        {"trials_per_subject", 24},
        {"classes", 2},
        {"channels", {"C3", "C4", "Pz", "Oz"}},
        {"duration_s", 4.0},
        {"sample_rate", 256.0},
        {"band_rms_uv", {20.0, 10.0, 10.0, 5.0, 2.0}},
        {"class_band", "alpha"},
        {"class_ratio", 2.0},
        {"subject_gain_min", 0.8},
        {"subject_gain_max", 1.25},
        {"trial_jitter", 0.05},
        {"white_noise_uv", 0.5},
        {"burst_uv", 0.0},
        {"line_noise_uv", 0.0},
        {"reference", "common_average"},
        {"task", "motor imagery"},
        {"phase", "task"},
        {"phase_codes_class", false}}},
  };
}

namespace detail {

inline bool same_kind(const json& def, const json& v) {
  if (def.is_boolean()) return v.is_boolean();
  if (def.is_number_unsigned() || def.is_number_integer())
    return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
  if (def.is_number_float()) return v.is_number();
  if (def.is_string()) return v.is_string();
  if (def.is_array()) return v.is_array();
  if (def.is_object()) return v.is_object();
  return false;
}

inline std::string kind_name(const json& def) {
  if (def.is_boolean()) return "a boolean";
  if (def.is_number_integer() || def.is_number_unsigned()) return "a non-negative integer";
  if (def.is_number_float()) return "a number";
  if (def.is_string()) return "a string";
  if (def.is_array()) return "an array";
  return "an object";
}

/// Overlays `user` on `base`, rejecting unknown keys and type changes.
inline void merge(json& base, const json& user, const std::string& path) {
  if (!user.is_object()) throw ConfigError("config" + (path.empty() ? "" : " key '" + path + "'") + ": expected an object");
  for (const auto& [k, v] : user.items()) {
    const std::string key = path.empty() ? k : path + "." + k;
    if (!base.contains(k)) throw ConfigError("config: unknown key '" + key + "'");
    json& slot = base[k];
    if (!same_kind(slot, v)) throw ConfigError("config key '" + key + "' must be " + kind_name(slot));
    if (slot.is_object()) {
      merge(slot, v, key);
    } else if (slot.is_number_float()) {
      slot = v.get<double>();
    } else {
      slot = v;
    }
  }
}

}  // namespace detail

struct RunConfig {
  json tree = defaults();

  static RunConfig from_json(const json& user) {
    RunConfig c;
    detail::merge(c.tree, user, "");
    c.validate();
    return c;
  }

  static RunConfig load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw MissingInputError("config file not found: " + path.string());
    json user;
    try {
      user = json::parse(in, nullptr, true, /*ignore_comments=*/true);
    } catch (const json::parse_error& e) {
      throw ConfigError("config " + path.string() + ": " + e.what());
    }
    return from_json(user);
  }

  /// Applies one "a.b.c=value" override; value is parsed as JSON, falling
  /// back to a plain string.
  void set(const std::string& assignment) {
    assign(assignment);
    validate();
  }

  /// Applies several overrides, validating once at the end so that
  /// interdependent keys can change together.
  void set_all(const std::vector<std::string>& assignments) {
    for (const auto& a : assignments) assign(a);
    validate();
  }

  void assign(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + assignment + "'");
    const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
    json value;
    try {
      value = json::parse(raw);
    } catch (const json::parse_error&) {
      value = raw;
    }
    json patch = value;
    std::vector<std::string> parts;
    std::stringstream ss(key);
    for (std::string p; std::getline(ss, p, '.');) parts.push_back(p);
    for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = json{{*it, patch}};
    detail::merge(tree, patch, "");
  }

  template <class V>
  V get(const std::string& dotted) const {
    const json* node = &tree;
    std::stringstream ss(dotted);
    for (std::string p; std::getline(ss, p, '.');) node = &node->at(p);
    return node->get<V>();
  }

  std::uint64_t seed() const { return get<std::uint64_t>("seed"); }
  std::string canonical() const { return tree.dump(); }
  std::uint64_t fingerprint() const { return data::fnv1a64(canonical()); }

  std::filesystem::path path(const std::string& key) const { return get<std::string>("paths." + key); }

  // -- typed views ---------------------------------------------------------

  PreprocessConfig preprocess() const {
    PreprocessConfig p;
    p.line_freq = get<double>("signal.line_freq");
    p.target_rate = get<double>("signal.sample_rate");
    p.scale = get<double>("signal.scale");
    return p;
  }

  tokens::StreamOptions stream_options() const {
    tokens::StreamOptions o;
    o.token_len = get<std::size_t>("signal.token_length");
    o.microvolt_scale = get<double>("signal.scale");
    o.rms_eps = get<double>("signal.rms_eps");
    o.rms_floor = get<double>("signal.rms_floor");
    return o;
  }

  vq::TrainTokenizerConfig tokenizer_training(Band band) const {
    vq::TrainTokenizerConfig t;
    t.epochs = get<std::size_t>("tokenizer_training.epochs");
    t.batch_tokens = get<std::size_t>("tokenizer_training.batch_tokens");
    t.lr = get<double>("tokenizer_training.lr");
    t.weight_decay = get<double>("tokenizer_training.weight_decay");
    t.clip_norm = get<double>("tokenizer_training.clip_norm");
    t.codebook_size = get<std::vector<std::size_t>>("vq.codebook_sizes").at(band_index(band));
    t.latent_dim = get<std::size_t>("vq.latent_dim");
    t.ema_decay = get<double>("vq.ema_decay");
    t.weights = {get<double>("tokenizer_training.loss_weights.mae"), get<double>("tokenizer_training.loss_weights.mse"),
                 get<double>("tokenizer_training.loss_weights.stft"),
                 get<double>("tokenizer_training.loss_weights.commit")};
    t.scales.n_ffts = get<std::vector<std::size_t>>("tokenizer_training.stft_n_fft");
    t.scales.hop_fraction = get<double>("tokenizer_training.stft_hop_fraction");
    t.holdout_fraction = get<double>("tokenizer_training.holdout_fraction");
    t.dead_code_restart = get<bool>("tokenizer_training.dead_code_restart");
    t.seed = derive_seed(seed(), 0x70c0ULL + band_index(band));
    return t;
  }

  encoder::EncoderConfig encoder() const {
    encoder::EncoderConfig e;
    e.layers = get<std::size_t>("encoder.layers");
    e.d = get<std::size_t>("encoder.d");
    e.heads = get<std::size_t>("encoder.heads");
    e.ffn_mult = get<std::size_t>("encoder.ffn_mult");
    e.max_T = get<std::size_t>("encoder.max_T");
    e.p_meta = get<double>("pretrain.p_meta");
    e.seed = derive_seed(seed(), 0xe4cULL);
    return e;
  }

  /// Architecture-only view; checkpoints are stamped with its fingerprint.
  json encoder_arch() const {
    return {{"encoder", tree.at("encoder")},
            {"token_length", tree.at("signal").at("token_length")},
            {"codebook_sizes", tree.at("vq").at("codebook_sizes")}};
  }

  encoder::PretrainConfig pretrain() const {
    encoder::PretrainConfig p;
    p.batch_size = get<std::size_t>("pretrain.batch_size");
    p.steps = get<std::uint64_t>("pretrain.steps");
    p.schedule = {get<double>("pretrain.peak_lr"), get<double>("pretrain.min_lr"),
                  get<std::uint64_t>("pretrain.warmup_steps"), p.steps};
    p.adamw = {0.9, 0.999, 1e-8, get<double>("pretrain.weight_decay"), get<double>("pretrain.clip_norm")};
    p.p_mask = get<double>("pretrain.p_mask");
    p.p_meta = get<double>("pretrain.p_meta");
    p.checkpoint_every = get<std::uint64_t>("pretrain.checkpoint_every");
    p.seed = derive_seed(seed(), 0x9e7ULL);
    return p;
  }

  downstream::FinetuneConfig finetune() const {
    downstream::FinetuneConfig f;
    f.encoder_lr = get<double>("finetune.encoder_lr");
    f.head_lr = get<double>("finetune.head_lr");
    f.batch_size = get<std::size_t>("finetune.batch_size");
    f.hidden = get<std::size_t>("finetune.hidden");
    f.dropout = get<double>("finetune.dropout");
    f.max_epochs = get<std::size_t>("finetune.max_epochs");
    f.min_epochs = get<std::size_t>("finetune.min_epochs");
    f.patience = get<std::size_t>("finetune.patience");
    f.weight_decay = get<double>("finetune.weight_decay");
    f.clip_norm = get<double>("finetune.clip_norm");
    f.val_fraction = get<double>("finetune.val_fraction");
    f.num_classes = get<std::size_t>("finetune.num_classes");
    f.seed = derive_seed(seed(), 0xf1eULL);
    return f;
  }

  downstream::Ablation ablation() const {
    return {get<bool>("ablation.no_power"), get<bool>("ablation.no_metadata")};
  }

  downstream::TrialPipeline pipeline() const { return {preprocess(), stream_options(), ablation()}; }

  data::SynthConfig synth() const {
    data::SynthConfig s;
    s.subjects = get<std::size_t>("synth.subjects");
    s.trials_per_subject = get<std::size_t>("synth.trials_per_subject");
    s.classes = get<std::size_t>("synth.classes");
    s.channel_names = get<std::vector<std::string>>("synth.channels");
    s.duration_s = get<double>("synth.duration_s");
    s.sample_rate = get<double>("synth.sample_rate");
    const auto amps = get<std::vector<double>>("synth.band_rms_uv");
    std::copy(amps.begin(), amps.end(), s.band_rms_uv.begin());
    s.class_band = parse_band(get<std::string>("synth.class_band"));
    s.class_ratio = get<double>("synth.class_ratio");
    s.subject_gain_min = get<double>("synth.subject_gain_min");
    s.subject_gain_max = get<double>("synth.subject_gain_max");
    s.trial_jitter = get<double>("synth.trial_jitter");
    s.white_noise_uv = get<double>("synth.white_noise_uv");
    s.burst_uv = get<double>("synth.burst_uv");
    s.line_noise_uv = get<double>("synth.line_noise_uv");
    s.line_freq = get<double>("signal.line_freq");
    s.reference = get<std::string>("synth.reference");
    s.task = get<std::string>("synth.task");
    s.phase = get<std::string>("synth.phase");
    s.phase_codes_class = get<bool>("synth.phase_codes_class");
    s.seed = derive_seed(seed(), 0x5e7ULL);
    return s;
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("config: " + m); };
    try {
      const auto fixed_offsets = std::vector<std::uint32_t>(tokens::kBandOffsets.begin(), tokens::kBandOffsets.end());
      if (get<std::vector<std::uint32_t>>("vq.offsets") != fixed_offsets)
        fail("vq.offsets is fixed at [0, 512, 1024, 1536, 2304]");
      if (get<std::size_t>("vq.power_bins") != tokens::kPowerBins) fail("vq.power_bins is fixed at 128");
      if (get<double>("vq.power_eps") != tokens::kPowerEps || get<double>("vq.power_log_min") != tokens::kLogPowerMin ||
          get<double>("vq.power_log_max") != tokens::kLogPowerMax)
        fail("vq.power_eps/power_log_min/power_log_max are fixed at 1e-8/-0.1/4.0");
      const auto sizes = get<std::vector<std::size_t>>("vq.codebook_sizes");
      if (sizes.size() != kBandCount) fail("vq.codebook_sizes needs 5 entries");
      for (Band b : kAllBands)
        if (sizes[band_index(b)] == 0 || sizes[band_index(b)] > vq::codebook_size(b))
          fail("vq.codebook_sizes[" + std::to_string(band_index(b)) + "] must be in [1, " +
               std::to_string(vq::codebook_size(b)) + "]");
      const auto L = get<std::size_t>("signal.token_length");
      if (L == 0 || L % 32 != 0) fail("signal.token_length must be a positive multiple of 32");
      if (!(get<double>("signal.sample_rate") > 0.0)) fail("signal.sample_rate must be > 0");
      if (!(get<double>("signal.scale") > 0.0)) fail("signal.scale must be > 0");
      if (get<std::vector<double>>("synth.band_rms_uv").size() != kBandCount) fail("synth.band_rms_uv needs 5 entries");
      parse_band(get<std::string>("synth.class_band"));
      encoder().validate();
      pretrain().validate();
      finetune().validate();
      synth().validate();
    } catch (const ConfigError&) {
      throw;
    } catch (const json::exception& e) {
      throw ConfigError(std::string("config: ") + e.what());
    } catch (const Error& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
  }
};

}  // namespace bandvq::config
