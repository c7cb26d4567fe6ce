// SPDX-License-Identifier: Apache-2.0

#include <array>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "ccmd/backbone.hpp"

namespace ccmd::net {

namespace {

std::string layer_key(int l, const char* name) {
  return "tf.l" + std::to_string(l) + "." + name;
}

void add_linear(ParamStore& store, const std::string& w, const std::string& b, std::size_t in,
                std::size_t out, Rng& rng) {
  store.add(w, {in, out}, fan_in_init(in * out, in, rng));
  store.add(b, {out}, std::vector<double>(out, 0.0));
}

ad::Tensor linear(ParamBinding& p, const ad::Tensor& x, const std::string& w, const std::string& b) {
  return ad::add(ad::matmul(x, p.get(w)), p.get(b));
}

// [B, T, H*dh] -> [B*H, T, dh]
ad::Tensor split_heads(const ad::Tensor& x, std::size_t B, std::size_t T, std::size_t H,
                       std::size_t dh) {
  static constexpr std::array<std::size_t, 4> kAxes{0, 2, 1, 3};
  return ad::reshape(ad::permute(ad::reshape(x, {B, T, H, dh}), kAxes), {B * H, T, dh});
}

// [B*H, T, dh] -> [B, T, H*dh]
ad::Tensor merge_heads(const ad::Tensor& x, std::size_t B, std::size_t T, std::size_t H,
                       std::size_t dh) {
  static constexpr std::array<std::size_t, 4> kAxes{0, 2, 1, 3};
  return ad::reshape(ad::permute(ad::reshape(x, {B, H, T, dh}), kAxes), {B, T, H * dh});
}

void check_finite(const ad::Tensor& t, int layer) {
  for (double v : t.values())
    if (!std::isfinite(v))
      throw std::runtime_error("non-finite activation in layer " + std::to_string(layer));
}

}  // namespace

void validate(const TransformerConfig& cfg) {
  if (cfg.layers < 1) throw std::invalid_argument("transformer: layers must be >= 1");
  if (cfg.width < 1 || cfg.heads < 1 || cfg.ffn < 1)
    throw std::invalid_argument("transformer: width, heads and ffn must be positive");
  if (cfg.width % cfg.heads != 0)
    throw std::invalid_argument("transformer: width " + std::to_string(cfg.width) +
                                " not divisible by heads " + std::to_string(cfg.heads));
}

void init_head(ParamStore& store, int width, Rng& rng) {
  const auto d = static_cast<std::size_t>(width);
  add_linear(store, "head.w1", "head.b1", d, d, rng);
  add_linear(store, "head.w2", "head.b2", d, 1, rng);
}

void init_transformer(ParamStore& store, const TransformerConfig& cfg, Rng& rng) {
  validate(cfg);
  const auto d = static_cast<std::size_t>(cfg.width);
  const auto f = static_cast<std::size_t>(cfg.ffn);
  for (int l = 0; l < cfg.layers; ++l) {
    store.add(layer_key(l, "ln1.g"), {d}, std::vector<double>(d, 1.0));
    store.add(layer_key(l, "ln1.b"), {d}, std::vector<double>(d, 0.0));
    add_linear(store, layer_key(l, "wq"), layer_key(l, "bq"), d, d, rng);
    // No key bias: it shifts every logit of a query row equally.
    store.add(layer_key(l, "wk"), {d, d}, fan_in_init(d * d, d, rng));
    add_linear(store, layer_key(l, "wv"), layer_key(l, "bv"), d, d, rng);
    add_linear(store, layer_key(l, "wo"), layer_key(l, "bo"), d, d, rng);
    store.add(layer_key(l, "ln2.g"), {d}, std::vector<double>(d, 1.0));
    store.add(layer_key(l, "ln2.b"), {d}, std::vector<double>(d, 0.0));
    add_linear(store, layer_key(l, "w1"), layer_key(l, "b1"), d, f, rng);
    add_linear(store, layer_key(l, "w2"), layer_key(l, "b2"), f, d, rng);
  }
}

void init_attention_bias(ParamStore& store, const TransformerConfig& cfg, enc::View view,
                         const enc::EncoderConfig& enc_cfg, Rng& rng) {
  const auto H = static_cast<std::size_t>(cfg.heads);
  if (view == enc::View::ThreeD) {
    const auto K = static_cast<std::size_t>(enc_cfg.rbf.centers);
    store.add("bias.rbf", {K, H}, fan_in_init(K * H, K, rng));
  } else {
    const auto V = static_cast<std::size_t>(enc_cfg.bond_vocab) + 1;
    store.add("bias.bond", {V, H}, normal_init(V * H, 0.02, rng));
  }
}

ad::Tensor attention_bias(ParamBinding& params, const mol::GraphBatch& batch, enc::View view,
                          const TransformerConfig& cfg, const enc::EncoderConfig& enc_cfg) {
  ad::Tape& tape = params.tape();
  const std::size_t B = batch.batch, T = batch.tokens, H = static_cast<std::size_t>(cfg.heads);
  const std::size_t pairs = B * T * T;
  ad::Tensor per_pair;  // [B*T*T, H]
  if (view == enc::View::ThreeD) {
    if (!batch.has_geometry)
      throw std::invalid_argument("attention_bias: 3D view requires coordinates");
    const auto K = static_cast<std::size_t>(enc_cfg.rbf.centers);
    std::vector<double> feats(pairs * K, 0.0);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 1; i < T; ++i) {
        if (batch.mask[batch.token_index(b, i)] == 0.0) continue;
        for (std::size_t j = 1; j < T; ++j) {
          if (batch.mask[batch.token_index(b, j)] == 0.0) continue;
          const std::size_t p = batch.pair_index(b, i, j);
          const auto r = enc::rbf_expand(batch.distances[p], enc_cfg.rbf);
          std::copy(r.begin(), r.end(), feats.begin() + static_cast<std::ptrdiff_t>(p * K));
        }
      }
    per_pair = ad::matmul(tape.constant({pairs, K}, std::move(feats)), params.get("bias.rbf"));
  } else {
    std::vector<double> bonded(pairs * H, 0.0);
    for (std::size_t p = 0; p < pairs; ++p)
      if (batch.bond_types[p] != 0) std::fill_n(bonded.data() + p * H, H, 1.0);
    per_pair = ad::mul(ad::embedding_lookup(params.get("bias.bond"), batch.bond_types),
                       tape.constant({pairs, H}, std::move(bonded)));
  }
  static constexpr std::array<std::size_t, 4> kAxes{0, 3, 1, 2};
  return ad::reshape(ad::permute(ad::reshape(per_pair, {B, T, T, H}), kAxes), {B * H, T, T});
}

ad::Tensor readout(ParamBinding& params, const ad::Tensor& last_tokens) {
  const std::size_t B = last_tokens.dim(0), d = last_tokens.dim(2);
  ad::Tensor x0 = ad::reshape(ad::slice(last_tokens, 1, 0, 1), {B, d});
  ad::Tensor h = ad::gelu(linear(params, x0, "head.w1", "head.b1"));
  return ad::reshape(linear(params, h, "head.w2", "head.b2"), {B});
}

BackboneOutput transformer_forward(ParamBinding& params, const ad::Tensor& tokens,
                                   const mol::GraphBatch& batch,
                                   const std::optional<ad::Tensor>& bias,
                                   const TransformerConfig& cfg, const LayerHook& hook) {
  validate(cfg);
  ad::Tape& tape = params.tape();
  const std::size_t B = batch.batch, T = batch.tokens, d = static_cast<std::size_t>(cfg.width);
  const std::size_t H = static_cast<std::size_t>(cfg.heads), dh = d / H;
  if (tokens.shape() != ad::Shape{B, T, d})
    throw std::invalid_argument("transformer_forward: tokens " + ad::to_string(tokens.shape()) +
                                " do not match batch " + ad::to_string({B, T, d}));
  if (bias && bias->shape() != ad::Shape{B * H, T, T})
    throw std::invalid_argument("transformer_forward: bias " + ad::to_string(bias->shape()) +
                                " expected " + ad::to_string({B * H, T, T}));

  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  std::vector<double> key_mask(B * H * T * T, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t j = 0; j < T; ++j) {
      if (batch.mask[batch.token_index(b, j)] != 0.0) continue;
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t i = 0; i < T; ++i) key_mask[((b * H + h) * T + i) * T + j] = kNegInf;
    }
  ad::Tensor logit_mask = tape.constant({B * H, T, T}, std::move(key_mask));
  ad::Tensor slot_mask = enc::token_mask(tape, batch, cfg.width);
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  BackboneOutput out;
  ad::Tensor x = tokens;
  for (int l = 0; l < cfg.layers; ++l) {
    auto key = [l](const char* n) { return layer_key(l, n); };
    ad::Tensor h = ad::layer_norm(x, params.get(key("ln1.g")), params.get(key("ln1.b")), cfg.ln_eps);
    ad::Tensor q = split_heads(linear(params, h, key("wq"), key("bq")), B, T, H, dh);
    ad::Tensor k = split_heads(ad::matmul(h, params.get(key("wk"))), B, T, H, dh);
    ad::Tensor v = split_heads(linear(params, h, key("wv"), key("bv")), B, T, H, dh);
    ad::Tensor logits = ad::scale(ad::matmul_nt(q, k), inv_sqrt_dh);
    if (bias) logits = ad::add(logits, *bias);
    ad::Tensor attn = ad::softmax_row(ad::add(logits, logit_mask));
    ad::Tensor ctx = merge_heads(ad::matmul(attn, v), B, T, H, dh);
    ad::Tensor x1 = ad::add(x, linear(params, ctx, key("wo"), key("bo")));
    ad::Tensor h2 = ad::layer_norm(x1, params.get(key("ln2.g")), params.get(key("ln2.b")), cfg.ln_eps);
    ad::Tensor f = linear(params, ad::gelu(linear(params, h2, key("w1"), key("b1"))), key("w2"), key("b2"));
    x = ad::mul(ad::add(x1, f), slot_mask);
    if (hook) x = hook(static_cast<std::size_t>(l + 1), x);
    check_finite(attn, l + 1);
    check_finite(x, l + 1);
    out.trace.tokens.push_back(x);
    out.trace.attention.push_back(ad::reshape(attn, {B, H, T, T}));
  }
  out.prediction = readout(params, x);
  check_finite(out.prediction, cfg.layers);
  return out;
}

}  // namespace ccmd::net
