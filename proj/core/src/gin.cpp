// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <stdexcept>
#include <string>

#include "ccmd/backbone.hpp"

namespace ccmd::net {

namespace {

std::string layer_key(int l, const char* name) {
  return "gin.l" + std::to_string(l) + "." + name;
}

}  // namespace

void validate(const GinConfig& cfg) {
  if (cfg.layers < 1) throw std::invalid_argument("gin: layers must be >= 1");
  if (cfg.width < 1) throw std::invalid_argument("gin: width must be positive");
}

void init_gin(ParamStore& store, const GinConfig& cfg, Rng& rng) {
  validate(cfg);
  const auto d = static_cast<std::size_t>(cfg.width);
  for (int l = 0; l < cfg.layers; ++l) {
    store.add(layer_key(l, "w1"), {d, d}, fan_in_init(d * d, d, rng));
    store.add(layer_key(l, "b1"), {d}, std::vector<double>(d, 0.0));
    store.add(layer_key(l, "ln.g"), {d}, std::vector<double>(d, 1.0));
    store.add(layer_key(l, "ln.b"), {d}, std::vector<double>(d, 0.0));
    store.add(layer_key(l, "w2"), {d, d}, fan_in_init(d * d, d, rng));
    store.add(layer_key(l, "b2"), {d}, std::vector<double>(d, 0.0));
  }
}

std::vector<double> gin_adjacency(const mol::GraphBatch& batch) {
  const std::size_t B = batch.batch, T = batch.tokens;
  std::vector<double> adj(B * T * T, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 1; i < T; ++i) {
      if (batch.mask[batch.token_index(b, i)] == 0.0) continue;
      adj[batch.pair_index(b, 0, i)] = 1.0;
      adj[batch.pair_index(b, i, 0)] = 1.0;
      for (std::size_t j = 1; j < T; ++j)
        if (batch.bond_types[batch.pair_index(b, i, j)] != 0) adj[batch.pair_index(b, i, j)] = 1.0;
    }
  return adj;
}

BackboneOutput gin_forward(ParamBinding& params, const ad::Tensor& tokens,
                           const mol::GraphBatch& batch, const GinConfig& cfg,
                           const LayerHook& hook) {
  validate(cfg);
  ad::Tape& tape = params.tape();
  const std::size_t B = batch.batch, T = batch.tokens, d = static_cast<std::size_t>(cfg.width);
  if (tokens.shape() != ad::Shape{B, T, d})
    throw std::invalid_argument("gin_forward: tokens " + ad::to_string(tokens.shape()) +
                                " do not match batch " + ad::to_string({B, T, d}));
  ad::Tensor adj = tape.constant({B, T, T}, gin_adjacency(batch));
  ad::Tensor slot_mask = enc::token_mask(tape, batch, cfg.width);

  BackboneOutput out;
  ad::Tensor x = tokens;
  for (int l = 0; l < cfg.layers; ++l) {
    auto key = [l](const char* n) { return layer_key(l, n); };
    ad::Tensor agg = ad::matmul(adj, x);
    ad::Tensor self = cfg.eps == 0.0 ? x : ad::scale(x, 1.0 + cfg.eps);
    ad::Tensor h = ad::add(ad::matmul(ad::add(self, agg), params.get(key("w1"))), params.get(key("b1")));
    h = ad::relu(ad::layer_norm(h, params.get(key("ln.g")), params.get(key("ln.b")), cfg.ln_eps));
    h = ad::add(ad::matmul(h, params.get(key("w2"))), params.get(key("b2")));
    x = ad::mul(h, slot_mask);
    if (hook) x = hook(static_cast<std::size_t>(l + 1), x);
    for (double v : x.values())
      if (!std::isfinite(v))
        throw std::runtime_error("non-finite activation in layer " + std::to_string(l + 1));
    out.trace.tokens.push_back(x);
  }
  out.prediction = readout(params, x);
  return out;
}

}  // namespace ccmd::net
