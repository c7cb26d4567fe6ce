// SPDX-License-Identifier: Apache-2.0
//
// Padded mini-batches. Token slot 0 of every row is the virtual token; atom k
// of a molecule occupies slot k + 1. Slots past N + 1 are padding.

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "ccmd/molecule.hpp"

namespace ccmd::mol {

struct GraphBatch {
  std::size_t batch = 0;   // B
  std::size_t tokens = 0;  // T = max N + 1

  std::vector<int> atom_ids;       // [B, T]; 0 in the virtual and padded slots
  std::vector<int> bond_types;     // [B, T, T]; 0 = no bond, 1 + bucket otherwise
  std::vector<double> distances;   // [B, T, T]; zeros when geometry is absent
  std::vector<double> mask;        // [B, T]; 1 for virtual and atom slots
  std::vector<int> atom_counts;    // [B]
  std::vector<double> labels;      // [B]
  std::vector<std::size_t> source; // [B] index of each row in the source list
  bool has_geometry = false;

  std::size_t token_index(std::size_t b, std::size_t t) const { return b * tokens + t; }
  std::size_t pair_index(std::size_t b, std::size_t i, std::size_t j) const {
    return (b * tokens + i) * tokens + j;
  }
};

/// Packs the given molecules (in order) into one padded batch.
GraphBatch make_batch(std::span<const Molecule> molecules);
GraphBatch make_batch(std::span<const Molecule* const> molecules);

/// Splits a dataset into padded batches of at most `batch_size` molecules.
/// With a shuffle seed the order is a seeded permutation; otherwise it is the
/// dataset order.
std::vector<GraphBatch> make_batches(std::span<const Molecule> molecules, std::size_t batch_size,
                                     std::optional<std::uint64_t> shuffle_seed);

/// Copy of `b` with every raw distance removed; this is all a 2D model sees.
GraphBatch strip_geometry(const GraphBatch& b);

}  // namespace ccmd::mol
