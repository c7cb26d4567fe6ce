// SPDX-License-Identifier: Apache-2.0
//
// Supervised and distillation losses.
//
// All distillation terms are L1 distances averaged over the embedding width.
// The global term matches virtual-token embeddings layer by layer; the local
// term matches every real token of a molecule and is averaged over those
// tokens (L̄a), which removes the explicit size factor of the summed form.
// The coordinating weight f(N) multiplies L̄a per molecule: 1/N for the
// transformer (an effective 1/N^2 on the summed form) and 1 for GIN.
//
// Teacher tensors are always copied onto the student's tape as constants, so
// no gradient can reach the teacher.

#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ccmd/autodiff.hpp"
#include "ccmd/backbone.hpp"
#include "ccmd/batch.hpp"
#include "ccmd/model.hpp"
#include "json.hpp"

namespace ccmd::distill {

enum class Mode {
  None,         // supervised only
  GlobalOnly,   // + L_m
  LocalOnly,    // + w * L̄a
  GlobalLocal,  // + L_m + w * L̄a
  NaiveAll,     // + w * token-mean L1 over every token of the batch, no split
};
enum class LayerScope { Last, All };
enum class WeightRule { Manual, Coordinating };

const char* to_string(Mode m);
const char* to_string(LayerScope s);
const char* to_string(WeightRule r);
Mode mode_from_string(const std::string& s);
LayerScope scope_from_string(const std::string& s);
WeightRule rule_from_string(const std::string& s);

struct DistillConfig {
  Mode mode = Mode::GlobalLocal;
  LayerScope scope = LayerScope::All;
  WeightRule rule = WeightRule::Coordinating;
  double manual_weight = 1.0;
  Arch arch = Arch::Transformer;
  /// Whether the local term covers the virtual slot as well as the atoms.
  bool local_includes_virtual = true;

  void validate() const;
};

nlohmann::json to_json(const DistillConfig& cfg);
DistillConfig distill_config_from_json(const nlohmann::json& j);

struct LossBreakdown {
  double l_2d = 0.0;
  double l_m = 0.0;
  double l_a_mean = 0.0;     // batch mean of L̄a
  double weight_mean = 0.0;  // batch mean of the weight applied to L̄a
  double total = 0.0;
};

/// Copy of `t` as a constant on `tape`.
ad::Tensor detach(const ad::Tensor& t, ad::Tape& tape);
net::LayerTrace detach(const net::LayerTrace& trace, ad::Tape& tape);

/// mean_b |pred_b - label_b|.
ad::Tensor supervised_l1(const ad::Tensor& pred, std::span<const double> labels);

/// Sum over selected layers of mean-elementwise L1 between virtual tokens.
ad::Tensor loss_global(const net::LayerTrace& student, const net::LayerTrace& teacher,
                       LayerScope scope);

/// Per-molecule L̄a [B]: sum over selected layers of the token-averaged,
/// width-averaged L1 over real tokens (virtual slot optional).
ad::Tensor loss_local_mean(const net::LayerTrace& student, const net::LayerTrace& teacher,
                           const mol::GraphBatch& batch, LayerScope scope,
                           bool include_virtual = true);

/// Per-molecule summed form La [B] (token sum instead of token mean).
ad::Tensor loss_local_sum(const net::LayerTrace& student, const net::LayerTrace& teacher,
                          const mol::GraphBatch& batch, LayerScope scope,
                          bool include_virtual = true);

/// Width-averaged L1 pooled over every real token of the batch.
ad::Tensor loss_naive_all(const net::LayerTrace& student, const net::LayerTrace& teacher,
                          const mol::GraphBatch& batch, LayerScope scope);

/// Multiplier on L̄a for a molecule of N atoms.
double coordinating_weight(int n_atoms, Arch arch);

/// Weight on L̄a of each molecule under `cfg`.
std::vector<double> atom_weights(std::span<const int> atom_counts, const DistillConfig& cfg);

struct DistillTerms {
  ad::Tensor l_2d;
  std::optional<ad::Tensor> l_m;
  std::optional<ad::Tensor> l_a_mean;  // [B]
  std::optional<ad::Tensor> naive;
};

/// Computes the terms `cfg.mode` needs.
DistillTerms compute_terms(const ad::Tensor& pred, const net::LayerTrace& student,
                           const std::optional<net::LayerTrace>& teacher,
                           const mol::GraphBatch& batch, const DistillConfig& cfg);

struct TotalLoss {
  ad::Tensor total;
  LossBreakdown breakdown;
};

/// Composes the objective. `atom_counts` is required by the coordinating rule.
TotalLoss total_loss(const DistillTerms& terms, std::span<const int> atom_counts,
                     const DistillConfig& cfg);

}  // namespace ccmd::distill
