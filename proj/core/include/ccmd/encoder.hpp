// SPDX-License-Identifier: Apache-2.0
//
// Input tokens with absolute position encoding built from adjacent edges:
//   token_i = atom_embed(id_i) + MLP(sum over bonded neighbours j of e_ij)
// where e_ij is a learned bond-type embedding (2D view) or the RBF expansion
// of the bond length (3D view). Slot 0 holds a learned virtual-token vector;
// padded slots are exactly zero.

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "ccmd/autodiff.hpp"
#include "ccmd/batch.hpp"
#include "ccmd/params.hpp"

namespace ccmd::enc {

enum class View { TwoD, ThreeD };

const char* to_string(View v);
View view_from_string(const std::string& s);

struct RbfConfig {
  int centers = 32;
  double d_max = std::sqrt(3.0);

  double center(int k) const { return d_max * k / (centers - 1); }
  /// Each Gaussian falls to exp(-1) at the neighbouring centre.
  double gamma() const { return double(centers - 1) * double(centers - 1) / (d_max * d_max); }
};

/// Component k = exp(-gamma (d - mu_k)^2).
std::vector<double> rbf_expand(double d, const RbfConfig& cfg);

struct EncoderConfig {
  int atom_vocab = 16;
  int bond_vocab = 4;
  int width = 64;       // d
  int bond_width = 32;  // d_e, 2D view only
  RbfConfig rbf;
};

void validate(const EncoderConfig& cfg);

/// Adds the encoder parameters for `view` under the "enc." prefix.
void init_encoder(ParamStore& store, const EncoderConfig& cfg, View view, Rng& rng);

/// [B, T, width] input tokens.
ad::Tensor ape_tokens(ParamBinding& params, const mol::GraphBatch& batch, View view,
                      const EncoderConfig& cfg);

/// Per-slot sum of neighbour edge features before the MLP: [B*T, d_in] where
/// d_in is the bond vocabulary (2D, as type counts) or the RBF width (3D).
std::vector<double> neighbour_features(const mol::GraphBatch& batch, View view,
                                       const EncoderConfig& cfg);

/// Constant [B, T, width] tensor: 1 on real slots (virtual included), 0 on padding.
ad::Tensor token_mask(ad::Tape& tape, const mol::GraphBatch& batch, int width);

}  // namespace ccmd::enc
