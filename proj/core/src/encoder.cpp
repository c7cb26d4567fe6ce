// SPDX-License-Identifier: Apache-2.0

#include "ccmd/encoder.hpp"

#include <stdexcept>

namespace ccmd::enc {

const char* to_string(View v) { return v == View::TwoD ? "2d" : "3d"; }

View view_from_string(const std::string& s) {
  if (s == "2d" || s == "2D") return View::TwoD;
  if (s == "3d" || s == "3D") return View::ThreeD;
  throw std::invalid_argument("unknown view '" + s + "' (expected 2d or 3d)");
}

std::vector<double> rbf_expand(double d, const RbfConfig& cfg) {
  if (!(d >= 0.0)) throw std::invalid_argument("rbf_expand: distance must be >= 0");
  const double g = cfg.gamma();
  std::vector<double> out(static_cast<std::size_t>(cfg.centers));
  for (int k = 0; k < cfg.centers; ++k) {
    const double diff = d - cfg.center(k);
    out[static_cast<std::size_t>(k)] = std::exp(-g * diff * diff);
  }
  return out;
}

void validate(const EncoderConfig& cfg) {
  if (cfg.rbf.centers < 2) throw std::invalid_argument("encoder: RBF needs at least 2 centres");
  if (!(cfg.rbf.d_max > 0.0)) throw std::invalid_argument("encoder: RBF d_max must be positive");
  if (cfg.width < 1 || cfg.bond_width < 1 || cfg.atom_vocab < 1 || cfg.bond_vocab < 1)
    throw std::invalid_argument("encoder: widths and vocabularies must be positive");
}

void init_encoder(ParamStore& store, const EncoderConfig& cfg, View view, Rng& rng) {
  validate(cfg);
  const auto d = static_cast<std::size_t>(cfg.width);
  const std::size_t d_in = view == View::TwoD ? static_cast<std::size_t>(cfg.bond_width)
                                              : static_cast<std::size_t>(cfg.rbf.centers);
  const auto vocab = static_cast<std::size_t>(cfg.atom_vocab);
  store.add("enc.atom_embed", {vocab, d}, normal_init(vocab * d, 0.02, rng));
  if (view == View::TwoD) {
    const auto bv = static_cast<std::size_t>(cfg.bond_vocab);
    store.add("enc.bond_embed", {bv, d_in}, normal_init(bv * d_in, 0.02, rng));
  }
  store.add("enc.ape.w1", {d_in, d}, fan_in_init(d_in * d, d_in, rng));
  store.add("enc.ape.b1", {d}, fan_in_init(d, d_in, rng));
  store.add("enc.ape.w2", {d, d}, fan_in_init(d * d, d, rng));
  store.add("enc.ape.b2", {d}, fan_in_init(d, d, rng));
  store.add("enc.virtual", {d}, std::vector<double>(d, 0.0));
}

std::vector<double> neighbour_features(const mol::GraphBatch& batch, View view,
                                       const EncoderConfig& cfg) {
  const std::size_t B = batch.batch, T = batch.tokens;
  if (view == View::TwoD) {
    const auto bv = static_cast<std::size_t>(cfg.bond_vocab);
    std::vector<double> counts(B * T * bv, 0.0);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 1; i < T; ++i)
        for (std::size_t j = 1; j < T; ++j) {
          const int t = batch.bond_types[batch.pair_index(b, i, j)];
          if (t == 0) continue;
          if (t < 0 || static_cast<std::size_t>(t) > bv)
            throw std::invalid_argument("ape_tokens: bond type outside vocabulary");
          counts[batch.token_index(b, i) * bv + static_cast<std::size_t>(t - 1)] += 1.0;
        }
    return counts;
  }
  if (!batch.has_geometry)
    throw std::invalid_argument("ape_tokens: 3D view requires coordinates");
  const auto K = static_cast<std::size_t>(cfg.rbf.centers);
  std::vector<double> feats(B * T * K, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 1; i < T; ++i)
      for (std::size_t j = 1; j < T; ++j) {
        if (batch.bond_types[batch.pair_index(b, i, j)] == 0) continue;
        const auto r = rbf_expand(batch.distances[batch.pair_index(b, i, j)], cfg.rbf);
        double* dst = feats.data() + batch.token_index(b, i) * K;
        for (std::size_t k = 0; k < K; ++k) dst[k] += r[k];
      }
  return feats;
}

ad::Tensor token_mask(ad::Tape& tape, const mol::GraphBatch& batch, int width) {
  const std::size_t B = batch.batch, T = batch.tokens, d = static_cast<std::size_t>(width);
  std::vector<double> m(B * T * d);
  for (std::size_t r = 0; r < B * T; ++r)
    std::fill_n(m.data() + r * d, d, batch.mask[r]);
  return tape.constant({B, T, d}, std::move(m));
}

ad::Tensor ape_tokens(ParamBinding& params, const mol::GraphBatch& batch, View view,
                      const EncoderConfig& cfg) {
  validate(cfg);
  ad::Tape& tape = params.tape();
  const std::size_t B = batch.batch, T = batch.tokens, d = static_cast<std::size_t>(cfg.width);
  const std::size_t rows = B * T;

  auto feats = neighbour_features(batch, view, cfg);
  ad::Tensor agg;
  if (view == View::TwoD) {
    const auto bv = static_cast<std::size_t>(cfg.bond_vocab);
    agg = ad::matmul(tape.constant({rows, bv}, std::move(feats)), params.get("enc.bond_embed"));
  } else {
    agg = tape.constant({rows, static_cast<std::size_t>(cfg.rbf.centers)}, std::move(feats));
  }
  ad::Tensor h = ad::gelu(ad::add(ad::matmul(agg, params.get("enc.ape.w1")), params.get("enc.ape.b1")));
  h = ad::add(ad::matmul(h, params.get("enc.ape.w2")), params.get("enc.ape.b2"));

  ad::Tensor atoms = ad::embedding_lookup(params.get("enc.atom_embed"), batch.atom_ids);
  std::vector<double> atom_mask(rows * d, 0.0);
  std::vector<double> virtual_slot(rows, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    virtual_slot[batch.token_index(b, 0)] = 1.0;
    for (std::size_t t = 1; t < T; ++t)
      if (batch.mask[batch.token_index(b, t)] != 0.0)
        std::fill_n(atom_mask.data() + batch.token_index(b, t) * d, d, 1.0);
  }
  ad::Tensor tokens = ad::mul(ad::add(atoms, h), tape.constant({rows, d}, std::move(atom_mask)));
  ad::Tensor virt = ad::matmul(tape.constant({rows, 1}, std::move(virtual_slot)),
                               ad::reshape(params.get("enc.virtual"), {1, d}));
  return ad::reshape(ad::add(tokens, virt), {B, T, d});
}

}  // namespace ccmd::enc
