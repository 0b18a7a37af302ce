#pragma once

#include <string>

#include <nlohmann/json.hpp>

#include "bandvq/data/checkpoint.hpp"
#include "bandvq/downstream.hpp"
#include "bandvq/encoder.hpp"
#include "bandvq/error.hpp"

namespace bandvq::data {

inline nlohmann::json to_json(const encoder::EncoderConfig& c) {
  return {{"layers", c.layers},   {"d", c.d},
          {"heads", c.heads},     {"ffn_mult", c.ffn_mult},
          {"max_T", c.max_T},     {"code_vocab", c.code_vocab},
          {"power_vocab", c.power_vocab}, {"channel_vocab", c.channel_vocab},
          {"p_meta", c.p_meta},   {"init_std", c.init_std},
          {"seed", c.seed}};
}

inline encoder::EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
  encoder::EncoderConfig c;
  try {
    c.layers = j.at("layers").get<std::size_t>();
    c.d = j.at("d").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.ffn_mult = j.at("ffn_mult").get<std::size_t>();
    c.max_T = j.at("max_T").get<std::size_t>();
    c.code_vocab = j.at("code_vocab").get<std::size_t>();
    c.power_vocab = j.at("power_vocab").get<std::size_t>();
    c.channel_vocab = j.at("channel_vocab").get<std::size_t>();
    c.p_meta = j.at("p_meta").get<double>();
    c.init_std = j.at("init_std").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("encoder config section: ") + e.what());
  }
  c.validate();
  return c;
}

inline void put_encoder(Checkpoint& ck, const encoder::TransformerEncoder<float>& enc) {
  ck.put_json("encoder.config", to_json(enc.config()));
  ck.put_params("encoder.params", enc.params());
}

inline encoder::TransformerEncoder<float> get_encoder(const Checkpoint& ck) {
  encoder::TransformerEncoder<float> enc(encoder_config_from_json(ck.get_json("encoder.config")));
  ck.get_params("encoder.params", enc.params());
  return enc;
}

inline Checkpoint pretrain_checkpoint(const encoder::PretrainState& st, std::uint64_t fingerprint) {
  Checkpoint ck(fingerprint);
  put_encoder(ck, st.encoder);
  ck.put_params("heads.params", st.heads.params());
  ck.put_optimizer("optimizer.encoder", st.encoder_opt);
  for (Band b : kAllBands)
    ck.put_optimizer("optimizer.head." + std::string(band_name(b)), st.head_opt[band_index(b)]);
  ck.put_json("pretrain.state", {{"step", st.step}});
  return ck;
}

inline encoder::PretrainState pretrain_state_from(const Checkpoint& ck) {
  encoder::PretrainState st;
  st.encoder = get_encoder(ck);
  st.heads = encoder::BandHeads<float>(st.encoder.config().d, 0, st.encoder.config().init_std);
  ck.get_params("heads.params", st.heads.params());
  st.encoder_opt = ck.get_optimizer("optimizer.encoder");
  for (Band b : kAllBands)
    st.head_opt[band_index(b)] = ck.get_optimizer("optimizer.head." + std::string(band_name(b)));
  st.step = ck.get_json("pretrain.state").at("step").get<std::uint64_t>();
  return st;
}

inline Checkpoint classifier_checkpoint(const downstream::ClassifierModel& m, double dropout,
                                        std::uint64_t fingerprint) {
  Checkpoint ck(fingerprint);
  put_encoder(ck, m.encoder);
  ck.put_json("classifier.config", {{"in", m.head.in_features()},
                                    {"hidden", m.head.params()[0].tensor.dim(0)},
                                    {"classes", m.head.classes()},
                                    {"dropout", dropout}});
  ck.put_params("classifier.params", m.head.params());
  return ck;
}

inline downstream::ClassifierModel classifier_from(const Checkpoint& ck) {
  downstream::ClassifierModel m;
  m.encoder = get_encoder(ck);
  const auto cfg = ck.get_json("classifier.config");
  m.head = downstream::ClassifierHead<float>(cfg.at("in").get<std::size_t>(), cfg.at("hidden").get<std::size_t>(),
                                             cfg.at("classes").get<std::size_t>(), cfg.at("dropout").get<double>(), 0);
  ck.get_params("classifier.params", m.head.params());
  return m;
}

}  // namespace bandvq::data
