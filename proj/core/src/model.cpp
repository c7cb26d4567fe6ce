// SPDX-License-Identifier: Apache-2.0

#include "ccmd/model.hpp"

#include <stdexcept>

namespace ccmd {

using nlohmann::json;

const char* to_string(Arch a) { return a == Arch::Transformer ? "transformer" : "gin"; }

Arch arch_from_string(const std::string& s) {
  if (s == "transformer") return Arch::Transformer;
  if (s == "gin") return Arch::Gin;
  throw std::invalid_argument("unknown architecture '" + s + "' (expected transformer or gin)");
}

net::TransformerConfig ModelConfig::transformer() const {
  return {.layers = layers, .width = width, .heads = heads, .ffn = ffn};
}

net::GinConfig ModelConfig::gin() const {
  return {.layers = layers, .width = width, .eps = gin_eps};
}

enc::EncoderConfig ModelConfig::encoder_config() const {
  enc::EncoderConfig e = encoder;
  e.width = width;
  return e;
}

void ModelConfig::validate() const {
  enc::validate(encoder_config());
  if (arch == Arch::Transformer) net::validate(transformer());
  else net::validate(gin());
  if (projection_width < 0) throw std::invalid_argument("model: negative projection width");
}

bool operator==(const ModelConfig& a, const ModelConfig& b) { return to_json(a) == to_json(b); }

json to_json(const ModelConfig& cfg) {
  return json{{"arch", to_string(cfg.arch)},
              {"view", enc::to_string(cfg.view)},
              {"width", cfg.width},
              {"layers", cfg.layers},
              {"heads", cfg.heads},
              {"ffn", cfg.ffn},
              {"gin_eps", cfg.gin_eps},
              {"attention_bias", cfg.attention_bias},
              {"projection_width", cfg.projection_width},
              {"atom_vocab", cfg.encoder.atom_vocab},
              {"bond_vocab", cfg.encoder.bond_vocab},
              {"bond_width", cfg.encoder.bond_width},
              {"rbf_centers", cfg.encoder.rbf.centers},
              {"rbf_d_max", cfg.encoder.rbf.d_max}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  c.arch = arch_from_string(j.value("arch", std::string(to_string(c.arch))));
  c.view = enc::view_from_string(j.value("view", std::string(enc::to_string(c.view))));
  c.width = j.value("width", c.width);
  c.layers = j.value("layers", c.layers);
  c.heads = j.value("heads", c.heads);
  c.ffn = j.value("ffn", c.ffn);
  c.gin_eps = j.value("gin_eps", c.gin_eps);
  c.attention_bias = j.value("attention_bias", c.attention_bias);
  c.projection_width = j.value("projection_width", c.projection_width);
  c.encoder.atom_vocab = j.value("atom_vocab", c.encoder.atom_vocab);
  c.encoder.bond_vocab = j.value("bond_vocab", c.encoder.bond_vocab);
  c.encoder.bond_width = j.value("bond_width", c.encoder.bond_width);
  c.encoder.rbf.centers = j.value("rbf_centers", c.encoder.rbf.centers);
  c.encoder.rbf.d_max = j.value("rbf_d_max", c.encoder.rbf.d_max);
  c.validate();
  return c;
}

ParamStore init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  ParamStore store;
  enc::init_encoder(store, cfg.encoder_config(), cfg.view, rng);
  if (cfg.arch == Arch::Transformer) {
    net::init_transformer(store, cfg.transformer(), rng);
    if (cfg.attention_bias)
      net::init_attention_bias(store, cfg.transformer(), cfg.view, cfg.encoder_config(), rng);
  } else {
    net::init_gin(store, cfg.gin(), rng);
  }
  net::init_head(store, cfg.width, rng);
  if (cfg.projection_width > 0) {
    const auto in = static_cast<std::size_t>(cfg.width);
    const auto out = static_cast<std::size_t>(cfg.projection_width);
    std::vector<double> eye(in * out, 0.0);
    for (std::size_t i = 0; i < std::min(in, out); ++i) eye[i * out + i] = 1.0;
    store.add("proj.w", {in, out}, std::move(eye));
  }
  return store;
}

net::BackboneOutput model_forward(const ModelConfig& cfg, ParamBinding& params,
                                  const mol::GraphBatch& batch, const net::LayerHook& hook) {
  const auto enc_cfg = cfg.encoder_config();
  ad::Tensor tokens = enc::ape_tokens(params, batch, cfg.view, enc_cfg);
  if (cfg.arch == Arch::Gin) return net::gin_forward(params, tokens, batch, cfg.gin(), hook);
  std::optional<ad::Tensor> bias;
  if (cfg.attention_bias)
    bias = net::attention_bias(params, batch, cfg.view, cfg.transformer(), enc_cfg);
  return net::transformer_forward(params, tokens, batch, bias, cfg.transformer(), hook);
}

net::LayerTrace project_trace(const ModelConfig& cfg, ParamBinding& params,
                              const net::LayerTrace& trace) {
  if (cfg.projection_width <= 0) return trace;
  net::LayerTrace out;
  out.attention = trace.attention;
  for (const auto& x : trace.tokens) out.tokens.push_back(ad::matmul(x, params.get("proj.w")));
  return out;
}

}  // namespace ccmd
