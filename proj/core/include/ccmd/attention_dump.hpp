// SPDX-License-Identifier: Apache-2.0
//
// Attention heat maps as CSV: one file per (layer, head) for one molecule of
// the batch, named layer<l>_head<h>.csv with l counted from 1. Each file has T
// rows of T comma-separated weights; row 0 is the virtual token's attention.

#pragma once

#include <filesystem>
#include <vector>

#include "ccmd/backbone.hpp"

namespace ccmd::net {

/// Row-major T x T matrix.
struct AttentionMap {
  std::size_t size = 0;
  std::vector<double> weights;

  double at(std::size_t i, std::size_t j) const { return weights[i * size + j]; }
};

/// Extracts W^l for one molecule and head. `layer` is 1-based.
AttentionMap attention_map(const LayerTrace& trace, std::size_t molecule, std::size_t layer,
                           std::size_t head);

/// Writes every (layer, head) map of `molecule` as layer<l>_head<h>.csv, both
/// 1-based; returns the files written.
std::vector<std::filesystem::path> dump_attention(const LayerTrace& trace,
                                                  const std::filesystem::path& dir,
                                                  std::size_t molecule = 0);

AttentionMap load_attention_csv(const std::filesystem::path& path);

}  // namespace ccmd::net
