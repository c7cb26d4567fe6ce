// SPDX-License-Identifier: Apache-2.0
//
// Graph-transformer and GIN backbones. Both return the prediction read out
// from the virtual token of the last layer together with every layer's token
// states, so distillation losses and gradient probes can reach inner layers.

#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "ccmd/autodiff.hpp"
#include "ccmd/batch.hpp"
#include "ccmd/encoder.hpp"
#include "ccmd/params.hpp"

namespace ccmd::net {

struct TransformerConfig {
  int layers = 4;
  int width = 64;
  int heads = 4;
  int ffn = 256;
  double ln_eps = 1e-5;
};

struct GinConfig {
  int layers = 3;
  int width = 64;
  double eps = 0.0;  // self-loop weight is (1 + eps)
  double ln_eps = 1e-5;
};

void validate(const TransformerConfig& cfg);
void validate(const GinConfig& cfg);

struct LayerTrace {
  std::vector<ad::Tensor> tokens;     // X^l, l = 1..L, each [B, T, d]
  std::vector<ad::Tensor> attention;  // W^l, each [B, heads, T, T]; empty for GIN

  std::size_t layers() const { return tokens.size(); }
};

/// Optional rewrite of each layer's output X^l (1-based layer index) before it
/// is recorded and fed to the next layer; used by gradient probes.
using LayerHook = std::function<ad::Tensor(std::size_t layer, const ad::Tensor& tokens)>;

struct BackboneOutput {
  ad::Tensor prediction;  // [B]
  LayerTrace trace;
};

void init_transformer(ParamStore& store, const TransformerConfig& cfg, Rng& rng);
void init_gin(ParamStore& store, const GinConfig& cfg, Rng& rng);
/// Readout MLP d -> d -> 1 under "head.".
void init_head(ParamStore& store, int width, Rng& rng);

/// Per-head additive attention bias for the given view, [B * heads, T, T].
/// 3D: a learned linear map of the RBF expansion of every atom pair distance.
/// 2D: a learned scalar per bond type on bonded pairs, zero elsewhere.
void init_attention_bias(ParamStore& store, const TransformerConfig& cfg, enc::View view,
                         const enc::EncoderConfig& enc_cfg, Rng& rng);
ad::Tensor attention_bias(ParamBinding& params, const mol::GraphBatch& batch, enc::View view,
                          const TransformerConfig& cfg, const enc::EncoderConfig& enc_cfg);

/// Pre-LN transformer: X' = MHA(LN(X)) + X, X = FFN(LN(X')) + X'.
/// Padded keys get -inf logits; padded slots are zeroed after every layer.
BackboneOutput transformer_forward(ParamBinding& params, const ad::Tensor& tokens,
                                   const mol::GraphBatch& batch,
                                   const std::optional<ad::Tensor>& bias,
                                   const TransformerConfig& cfg, const LayerHook& hook = {});

/// Dense adjacency [B, T, T] over bonds, with the virtual token linked to
/// every atom in both directions.
std::vector<double> gin_adjacency(const mol::GraphBatch& batch);

/// X^{l+1}_i = MLP((1 + eps) X^l_i + sum_{j in nbrs(i)} X^l_j).
BackboneOutput gin_forward(ParamBinding& params, const ad::Tensor& tokens,
                           const mol::GraphBatch& batch, const GinConfig& cfg,
                           const LayerHook& hook = {});

/// R = MLP(X_0^L) on a [B, T, d] token tensor.
ad::Tensor readout(ParamBinding& params, const ad::Tensor& last_tokens);

}  // namespace ccmd::net
