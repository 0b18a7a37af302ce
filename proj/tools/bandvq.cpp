#include <CLI11.hpp>

#include <Eigen/Core>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "bandvq.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace bandvq;

namespace {

constexpr const char* kVersion = "0.1.0";

enum Exit : int { kOk = 0, kGeneric = 1, kConfig = 2, kMissing = 3, kNumerical = 4, kFormat = 5 };

struct Common {
  std::string config_path;
  std::vector<std::string> sets;
};

config::RunConfig load_config(const Common& c) {
  config::RunConfig cfg = c.config_path.empty() ? config::RunConfig{} : config::RunConfig::load(c.config_path);
  cfg.set_all(c.sets);
  return cfg;
}

void log_line(std::ostream& os, const json& j) { os << j.dump() << '\n' << std::flush; }

class RunManifest {
 public:
  RunManifest(std::string cmd, const config::RunConfig& cfg)
      : cmd_(std::move(cmd)), cfg_(cfg), start_(std::chrono::steady_clock::now()) {}

  json& outputs() { return outputs_; }

  void write() const {
    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    std::ostringstream ver;
    ver << EIGEN_WORLD_VERSION << '.' << EIGEN_MAJOR_VERSION << '.' << EIGEN_MINOR_VERSION;
    json j{{"subcommand", cmd_},
           {"config", cfg_.tree},
           {"fingerprint", cfg_.fingerprint()},
           {"seed", cfg_.seed()},
           {"versions", {{"bandvq", kVersion}, {"compiler", __VERSION__}, {"eigen", ver.str()},
                         {"format", {{"eegb", data::kEegbVersion}, {"bvqt", data::kBvqtVersion},
                                     {"checkpoint", data::kCheckpointVersion}}}}},
           {"wall_time_s", wall},
           {"outputs", outputs_}};
    const fs::path dir = cfg_.path("output_dir");
    fs::create_directories(dir);
    // the latest run, plus a per-subcommand copy that later runs keep
    std::ofstream(dir / "run_manifest.json") << j.dump(2) << '\n';
    std::ofstream(dir / ("run_manifest." + cmd_ + ".json")) << j.dump(2) << '\n';
  }

 private:
  std::string cmd_;
  const config::RunConfig& cfg_;
  std::chrono::steady_clock::time_point start_;
  json outputs_ = json::object();
};

fs::path manifest_path(const config::RunConfig& cfg) { return cfg.path("data_dir") / "manifest.jsonl"; }

fs::path tokenizer_file(const config::RunConfig& cfg, Band b) {
  return cfg.path("tokenizer_dir") / (std::string(band_name(b)) + ".ckpt");
}

std::vector<Trial> load_trials(const config::RunConfig& cfg) {
  const auto p = manifest_path(cfg);
  if (!fs::exists(p)) throw MissingInputError("dataset manifest not found: " + p.string() + " (run `synth` first)");
  return data::read_dataset(p);
}

// -- synth ------------------------------------------------------------------

int cmd_synth(const config::RunConfig& cfg) {
  RunManifest rm("synth", cfg);
  const auto trials = data::synth_corpus(cfg.synth());
  const auto entries = data::write_dataset(cfg.path("data_dir"), trials);
  rm.outputs() = {{"manifest", manifest_path(cfg).string()}, {"trials", entries.size()}};
  rm.write();
  std::cout << "wrote " << entries.size() << " trials to " << cfg.path("data_dir") << "\n";
  return kOk;
}

// -- train-tokenizer ----------------------------------------------------------

int cmd_train_tokenizer(const config::RunConfig& cfg, const std::string& band_name_arg) {
  const Band band = parse_band(band_name_arg);
  RunManifest rm("train-tokenizer." + std::string(band_name(band)), cfg);
  const auto trials = load_trials(cfg);
  const auto pre = cfg.preprocess();
  const auto so = cfg.stream_options();
  vq::TokenCorpus corpus;
  corpus.band = band;
  corpus.token_len = so.token_len;
  corpus.rms_eps = so.rms_eps;
  corpus.rms_floor = so.rms_floor;
  const auto max_tokens = cfg.get<std::size_t>("tokenizer_training.max_tokens");
  for (const auto& t : trials) {
    if (max_tokens && corpus.token_count() >= max_tokens) break;
    const auto seg = preprocess(t.segment, pre);
    auto bands = band_decompose(seg, so.pad_samples);
    auto& w = bands[band_index(band)];
    w.samples = center_crop(w.samples, so.token_len);
    corpus.append(w);
  }
  if (corpus.token_count() == 0) throw MissingInputError("train-tokenizer: dataset yields no tokens");
  auto tcfg = cfg.tokenizer_training(band);

  fs::create_directories(cfg.path("tokenizer_dir"));
  std::ofstream log(cfg.path("tokenizer_dir") / (std::string(band_name(band)) + ".log.jsonl"));
  auto trained = vq::train_tokenizer(corpus, tcfg, [&](std::size_t step, double loss) {
    log_line(log, {{"step", step}, {"loss", loss}});
  });
  for (const auto& e : trained.report.epochs) {
    log_line(log, {{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"train_mse", e.train_mse},
                   {"heldout_mse", e.heldout_mse}, {"codes_used", e.codes_used}});
    std::cout << "epoch " << e.epoch << " loss " << e.train_loss << " heldout_mse " << e.heldout_mse
              << " codes_used " << e.codes_used << "\n";
  }
  auto ck = data::tokenizer_checkpoint(trained.tokenizer);
  ck.put_json("tokenizer.usage", trained.report.usage);
  data::save_checkpoint(tokenizer_file(cfg, band), ck);
  rm.outputs() = {{"checkpoint", tokenizer_file(cfg, band).string()}, {"tokens", corpus.token_count()}};
  rm.write();
  return kOk;
}

// -- tokenize ---------------------------------------------------------------

std::array<vq::Tokenizer, kBandCount> load_tokenizers(const config::RunConfig& cfg) {
  std::array<vq::Tokenizer, kBandCount> out;
  for (Band b : kAllBands) {
    const auto p = tokenizer_file(cfg, b);
    if (!fs::exists(p))
      throw MissingInputError("no tokenizer checkpoint for band " + std::string(band_name(b)) + " (expected " +
                              p.string() + "; run `train-tokenizer --band " + std::string(band_name(b)) + "`)");
    out[band_index(b)] = data::tokenizer_from_checkpoint(data::load_checkpoint(p));
  }
  return out;
}

int cmd_tokenize(const config::RunConfig& cfg) {
  RunManifest rm("tokenize", cfg);
  const auto tks = load_tokenizers(cfg);
  tokens::TokenizerSet set{};
  for (Band b : kAllBands) set[band_index(b)] = &tks[band_index(b)];
  const auto trials = load_trials(cfg);
  auto pipe = cfg.pipeline();
  pipe.ablation = {};  // ablations are applied when streams are consumed
  const fs::path dir = cfg.path("tokens_dir");
  fs::create_directories(dir);
  std::ofstream man(dir / "manifest.jsonl", std::ios::trunc);
  for (std::size_t i = 0; i < trials.size(); ++i) {
    const auto tt = downstream::tokenize_trial(trials[i], set, pipe, i);
    json files = json::object();
    for (Band b : kAllBands) {
      std::ostringstream name;
      name << std::setw(5) << std::setfill('0') << i << "." << band_name(b) << ".bvqt";
      data::write_bvqt(dir / name.str(), tt.streams[band_index(b)]);
      files[std::string(band_name(b))] = name.str();
    }
    log_line(man, {{"id", i}, {"subject", tt.subject}, {"label", tt.label}, {"files", files}});
  }
  rm.outputs() = {{"tokens_dir", dir.string()}, {"trials", trials.size()}};
  rm.write();
  std::cout << "tokenized " << trials.size() << " trials into " << dir << "\n";
  return kOk;
}

std::vector<downstream::TokenizedTrial> load_tokenized(const config::RunConfig& cfg) {
  const fs::path dir = cfg.path("tokens_dir");
  const fs::path man = dir / "manifest.jsonl";
  std::ifstream in(man);
  if (!in) throw MissingInputError("token manifest not found: " + man.string() + " (run `tokenize` first)");
  const auto abl = cfg.ablation();
  std::vector<downstream::TokenizedTrial> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw FormatError(man.string() + ": " + e.what());
    }
    downstream::TokenizedTrial t;
    t.id = j.at("id").get<std::size_t>();
    t.subject = j.at("subject").get<std::string>();
    t.label = j.at("label").get<std::size_t>();
    for (Band b : kAllBands) {
      const fs::path p = dir / j.at("files").at(std::string(band_name(b))).get<std::string>();
      if (!fs::exists(p)) throw MissingInputError("token file not found: " + p.string());
      t.streams[band_index(b)] = data::read_bvqt(p);
      downstream::apply_ablation(t.streams[band_index(b)], abl);
    }
    out.push_back(std::move(t));
  }
  if (out.empty()) throw MissingInputError("token manifest is empty: " + man.string());
  return out;
}

// -- pretrain ---------------------------------------------------------------

fs::path pretrain_file(const config::RunConfig& cfg) { return cfg.path("checkpoint_dir") / "pretrain.ckpt"; }

int cmd_pretrain(const config::RunConfig& cfg, bool resume) {
  RunManifest rm("pretrain", cfg);
  const auto trials = load_tokenized(cfg);
  std::vector<tokens::TokenStream> corpus;
  for (const auto& t : trials)
    for (const auto& s : t.streams) corpus.push_back(s);
  const auto fp = data::fingerprint_of(cfg.encoder_arch());
  encoder::PretrainState st = resume && fs::exists(pretrain_file(cfg))
                                  ? data::pretrain_state_from(data::load_checkpoint(pretrain_file(cfg), fp))
                                  : encoder::PretrainState::fresh(cfg.encoder());
  const auto pcfg = cfg.pretrain();
  fs::create_directories(cfg.path("checkpoint_dir"));
  std::ofstream log(cfg.path("checkpoint_dir") / "pretrain.log.jsonl", resume ? std::ios::app : std::ios::trunc);
  encoder::pretrain(
      st, corpus, pcfg,
      [&](const encoder::StepRecord& r) {
        if (r.skipped) {
          std::cerr << "warning: step " << r.step << " skipped, no maskable positions\n";
          log_line(log, {{"step", r.step}, {"lr", r.lr}, {"skipped", true}});
          return;
        }
        log_line(log, {{"step", r.step}, {"lr", r.lr}, {"loss", r.loss}, {"masked_accuracy", r.masked_accuracy}});
      },
      [&](const encoder::PretrainState& s) { data::save_checkpoint(pretrain_file(cfg), data::pretrain_checkpoint(s, fp)); });
  data::save_checkpoint(pretrain_file(cfg), data::pretrain_checkpoint(st, fp));
  rm.outputs() = {{"checkpoint", pretrain_file(cfg).string()}, {"steps", st.step}, {"sequences", corpus.size()}};
  rm.write();
  std::cout << "pretrained " << st.step << " steps; checkpoint " << pretrain_file(cfg) << "\n";
  return kOk;
}

encoder::TransformerEncoder<float> load_pretrained_encoder(const config::RunConfig& cfg) {
  const auto p = pretrain_file(cfg);
  if (!fs::exists(p)) throw MissingInputError("pretrained encoder not found: " + p.string() + " (run `pretrain` first)");
  return data::get_encoder(data::load_checkpoint(p, data::fingerprint_of(cfg.encoder_arch())));
}

// -- finetune ---------------------------------------------------------------

int cmd_finetune(const config::RunConfig& cfg) {
  RunManifest rm("finetune", cfg);
  const auto trials = load_tokenized(cfg);
  const auto enc = load_pretrained_encoder(cfg);
  const auto fc = cfg.finetune();
  auto subjects = downstream::subjects_of(trials);
  if (subjects.size() < 2) throw ArgumentError("finetune: need at least 2 subjects for a subject-level split");
  Rng rng(derive_seed(cfg.seed(), 0xf5ULL));
  shuffle(subjects, rng);
  const std::size_t n_val = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::ceil(fc.val_fraction * static_cast<double>(subjects.size()) - 1e-9)));
  const std::set<std::string> val_set(subjects.begin(), subjects.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<const downstream::TokenizedTrial*> train, val;
  for (const auto& t : trials) (val_set.count(t.subject) ? val : train).push_back(&t);
  const std::size_t classes = downstream::infer_classes(trials, fc.num_classes);
  const auto res = downstream::finetune(enc, train, val, classes, fc);
  const fs::path out = cfg.path("checkpoint_dir") / "classifier.ckpt";
  data::save_checkpoint(out, data::classifier_checkpoint(res.model, fc.dropout, data::fingerprint_of(cfg.encoder_arch())));
  json report{{"best_epoch", res.best_epoch}, {"epochs_run", res.epochs_run}, {"val_accuracy", res.val_accuracy},
              {"train_loss", res.train_loss}, {"val_subjects", std::vector<std::string>(val_set.begin(), val_set.end())}};
  fs::create_directories(cfg.path("output_dir"));
  std::ofstream(cfg.path("output_dir") / "finetune.json") << report.dump(2) << '\n';
  rm.outputs() = {{"checkpoint", out.string()}, {"best_epoch", res.best_epoch},
                  {"best_val_accuracy", res.val_accuracy.at(res.best_epoch - 1)}};
  rm.write();
  std::cout << "best epoch " << res.best_epoch << " val accuracy " << res.val_accuracy.at(res.best_epoch - 1) << "\n";
  return kOk;
}

// -- loso -------------------------------------------------------------------

int cmd_loso(const config::RunConfig& cfg, std::size_t jobs) {
  RunManifest rm("loso", cfg);
  auto trials = load_tokenized(cfg);
  if (cfg.get<bool>("loso.permute_labels")) downstream::permute_labels(trials, derive_seed(cfg.seed(), 0x9e3ULL));
  const auto enc = load_pretrained_encoder(cfg);
  downstream::LosoConfig lc{cfg.finetune(), jobs ? jobs : cfg.get<std::size_t>("loso.jobs"),
                            derive_seed(cfg.seed(), 0x1050ULL)};
  auto rep = downstream::loso_evaluate(enc, trials, lc, {}, [](const downstream::FoldReport& f) {
    std::cerr << "fold " << f.test_subject << " accuracy " << f.accuracy << " macro_f1 " << f.macro_f1 << "\n";
  });
  rep.fingerprint = std::to_string(cfg.fingerprint());
  const fs::path dir = cfg.path("output_dir");
  fs::create_directories(dir);
  std::ofstream log(dir / "loso.jsonl", std::ios::trunc);
  std::ofstream table(dir / "loso_summary.tsv", std::ios::trunc);
  table << "subject\ttrials\tbest_epoch\taccuracy\tmacro_f1\n";
  for (const auto& f : rep.folds) {
    log_line(log, {{"fold", f.test_subject}, {"accuracy", f.accuracy}, {"macro_f1", f.macro_f1},
                   {"best_epoch", f.best_epoch}, {"test_trials", f.test_trials},
                   {"train_subjects", f.train_subjects}, {"val_subjects", f.val_subjects}});
    table << f.test_subject << '\t' << f.test_trials << '\t' << f.best_epoch << '\t' << f.accuracy << '\t'
          << f.macro_f1 << '\n';
  }
  log_line(log, {{"summary", true}, {"mean_accuracy", rep.mean_accuracy}, {"mean_macro_f1", rep.mean_macro_f1},
                 {"fingerprint", rep.fingerprint}, {"seed", rep.seed}});
  table << "mean\t\t\t" << rep.mean_accuracy << '\t' << rep.mean_macro_f1 << '\n';
  rm.outputs() = {{"mean_accuracy", rep.mean_accuracy}, {"mean_macro_f1", rep.mean_macro_f1},
                  {"folds", rep.folds.size()}};
  rm.write();
  std::cout << "LOSO mean accuracy " << rep.mean_accuracy << " macro-F1 " << rep.mean_macro_f1 << "\n";
  return kOk;
}

// -- inspect ----------------------------------------------------------------

void print_histogram(const std::vector<std::size_t>& counts, std::size_t buckets) {
  if (counts.empty()) return;
  const std::size_t width = (counts.size() + buckets - 1) / buckets;
  std::size_t mx = 1;
  std::vector<std::size_t> agg;
  for (std::size_t s = 0; s < counts.size(); s += width) {
    std::size_t v = 0;
    for (std::size_t i = s; i < std::min(counts.size(), s + width); ++i) v += counts[i];
    agg.push_back(v);
    mx = std::max(mx, v);
  }
  for (std::size_t i = 0; i < agg.size(); ++i) {
    std::cout << "  [" << std::setw(4) << i * width << "," << std::setw(4) << std::min(counts.size(), (i + 1) * width)
              << ") " << std::setw(7) << agg[i] << " " << std::string(agg[i] * 40 / mx, '#') << "\n";
  }
}

int inspect_body(const config::RunConfig& cfg, const std::string& target) {
  if (!target.empty()) {
    const fs::path p = target;
    if (!fs::exists(p)) throw MissingInputError("inspect: no such file " + p.string());
    if (p.extension() == ".bvqt") {
      const auto s = data::read_bvqt(p);
      std::cout << "band " << band_name(s.band) << " C=" << s.channels << " T=" << s.times << "\n";
      return kOk;
    }
    const auto ck = data::load_checkpoint(p);
    std::cout << "checkpoint " << p << " fingerprint " << ck.fingerprint() << "\n";
    for (const auto& [name, bytes] : ck.sections()) std::cout << "  " << name << " " << bytes.size() << " bytes\n";
    if (ck.has("tokenizer.usage")) {
      const auto usage = ck.get_json("tokenizer.usage").get<std::vector<std::size_t>>();
      std::size_t used = 0;
      for (auto u : usage) used += u > 0;
      std::cout << "codebook usage: " << used << "/" << usage.size() << " entries used\n";
      print_histogram(usage, 16);
    }
    return kOk;
  }
  for (Band b : kAllBands) {
    const auto p = tokenizer_file(cfg, b);
    if (!fs::exists(p)) {
      std::cout << band_name(b) << ": no tokenizer\n";
      continue;
    }
    const auto ck = data::load_checkpoint(p);
    const auto usage = ck.has("tokenizer.usage") ? ck.get_json("tokenizer.usage").get<std::vector<std::size_t>>()
                                                 : std::vector<std::size_t>{};
    std::size_t used = 0;
    for (auto u : usage) used += u > 0;
    std::cout << band_name(b) << ": codebook usage " << used << "/" << usage.size() << "\n";
    print_histogram(usage, 8);
  }
  if (fs::exists(cfg.path("tokens_dir") / "manifest.jsonl")) {
    const auto trials = load_tokenized(cfg);
    std::array<std::vector<std::size_t>, kBandCount> codes;
    std::vector<std::size_t> powers(tokens::kPowerBins + 1, 0);
    for (Band b : kAllBands) codes[band_index(b)].assign(vq::codebook_size(b), 0);
    for (const auto& t : trials)
      for (const auto& s : t.streams) {
        for (auto c : s.codes) {
          const auto [band, local] = tokens::split_global(c);
          ++codes[band_index(band)][local];
        }
        for (auto pw : s.powers) ++powers[pw];
      }
    std::cout << "token streams: " << trials.size() << " trials, C=" << trials.front().streams[0].channels
              << " T=" << trials.front().streams[0].times << "\n";
    for (Band b : kAllBands) {
      std::size_t distinct = 0;
      for (auto c : codes[band_index(b)]) distinct += c > 0;
      std::cout << band_name(b) << ": " << distinct << " distinct codes\n";
    }
    std::cout << "power bins:\n";
    print_histogram(powers, 16);
  }
  return kOk;
}

int cmd_inspect(const config::RunConfig& cfg, const std::string& target) {
  RunManifest rm("inspect", cfg);
  const int rc = inspect_body(cfg, target);
  rm.outputs() = {{"target", target}};
  rm.write();
  return rc;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Band-wise EEG tokenization, masked-code pretraining and LOSO evaluation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);
  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", common.config_path, "JSON config file");
    sub->add_option("--set", common.sets, "Override a config key, e.g. --set pretrain.steps=100")->take_all();
  };
  auto* synth = app.add_subcommand("synth", "Generate the synthetic EEG corpus");
  auto* train = app.add_subcommand("train-tokenizer", "Train one band tokenizer");
  auto* tokenize = app.add_subcommand("tokenize", "Tokenize the dataset with the five band tokenizers");
  auto* pretrain = app.add_subcommand("pretrain", "Masked-code-prediction pretraining");
  auto* finetune = app.add_subcommand("finetune", "Fine-tune encoder and classifier on a subject split");
  auto* loso = app.add_subcommand("loso", "Leave-one-subject-out evaluation");
  auto* inspect = app.add_subcommand("inspect", "Print codebook usage and token statistics");
  for (auto* s : {synth, train, tokenize, pretrain, finetune, loso, inspect}) add_common(s);
  std::string band;
  train->add_option("--band", band, "delta|theta|alpha|beta|gamma")
      ->required()
      ->check(CLI::IsMember({"delta", "theta", "alpha", "beta", "gamma"}));
  bool resume = false;
  pretrain->add_flag("--resume", resume, "Continue from the existing pretraining checkpoint");
  std::size_t jobs = 0;
  loso->add_option("--jobs", jobs, "Folds to run in parallel (0 = config value)");
  std::string target;
  inspect->add_option("path", target, "Checkpoint or .bvqt file (default: everything under the config paths)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    const auto cfg = load_config(common);
    if (*synth) return cmd_synth(cfg);
    if (*train) return cmd_train_tokenizer(cfg, band);
    if (*tokenize) return cmd_tokenize(cfg);
    if (*pretrain) return cmd_pretrain(cfg, resume);
    if (*finetune) return cmd_finetune(cfg);
    if (*loso) return cmd_loso(cfg, jobs);
    if (*inspect) return cmd_inspect(cfg, target);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const MissingInputError& e) {
    std::cerr << "missing input: " << e.what() << "\n";
    return kMissing;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kNumerical;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kFormat;
  } catch (const FingerprintError& e) {
    std::cerr << "fingerprint mismatch: " << e.what() << "\n";
    return kFormat;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kGeneric;
  }
  return kGeneric;
}
