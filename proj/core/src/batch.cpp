// SPDX-License-Identifier: Apache-2.0

#include "ccmd/batch.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

namespace ccmd::mol {

GraphBatch make_batch(std::span<const Molecule* const> molecules) {
  if (molecules.empty()) throw std::invalid_argument("make_batch: no molecules");
  GraphBatch g;
  g.batch = molecules.size();
  std::size_t max_n = 0;
  bool all_geom = true;
  for (const Molecule* m : molecules) {
    max_n = std::max(max_n, m->atoms.size());
    all_geom = all_geom && m->coords.has_value();
  }
  g.tokens = max_n + 1;
  g.has_geometry = all_geom;
  const std::size_t B = g.batch, T = g.tokens;
  g.atom_ids.assign(B * T, 0);
  g.bond_types.assign(B * T * T, 0);
  g.distances.assign(B * T * T, 0.0);
  g.mask.assign(B * T, 0.0);
  g.atom_counts.resize(B);
  g.labels.resize(B);
  g.source.resize(B);
  for (std::size_t b = 0; b < B; ++b) {
    const Molecule& m = *molecules[b];
    const std::size_t n = m.atoms.size();
    g.atom_counts[b] = static_cast<int>(n);
    g.labels[b] = m.label;
    g.source[b] = b;
    g.mask[g.token_index(b, 0)] = 1.0;
    for (std::size_t k = 0; k < n; ++k) {
      g.atom_ids[g.token_index(b, k + 1)] = m.atoms[k];
      g.mask[g.token_index(b, k + 1)] = 1.0;
    }
    for (const auto& bond : m.bonds) {
      const std::size_t i = static_cast<std::size_t>(bond.i) + 1;
      const std::size_t j = static_cast<std::size_t>(bond.j) + 1;
      g.bond_types[g.pair_index(b, i, j)] = bond.type + 1;
      g.bond_types[g.pair_index(b, j, i)] = bond.type + 1;
    }
    if (all_geom) {
      const auto& c = *m.coords;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const double dx = c[i][0] - c[j][0], dy = c[i][1] - c[j][1], dz = c[i][2] - c[j][2];
          g.distances[g.pair_index(b, i + 1, j + 1)] = std::sqrt(dx * dx + dy * dy + dz * dz);
        }
    }
  }
  return g;
}

GraphBatch make_batch(std::span<const Molecule> molecules) {
  std::vector<const Molecule*> ptrs;
  ptrs.reserve(molecules.size());
  for (const auto& m : molecules) ptrs.push_back(&m);
  return make_batch(std::span<const Molecule* const>(ptrs));
}

std::vector<GraphBatch> make_batches(std::span<const Molecule> molecules, std::size_t batch_size,
                                     std::optional<std::uint64_t> shuffle_seed) {
  if (batch_size == 0) throw std::invalid_argument("make_batches: batch size must be >= 1");
  if (molecules.empty()) throw std::invalid_argument("make_batches: empty dataset");
  std::vector<std::size_t> order(molecules.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (shuffle_seed) {
    std::mt19937_64 rng(*shuffle_seed);
    // Fisher-Yates with an explicit draw so the order does not depend on the
    // standard library's shuffle implementation.
    for (std::size_t i = order.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(rng() % i);
      std::swap(order[i - 1], order[j]);
    }
  }
  std::vector<GraphBatch> out;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    std::vector<const Molecule*> ptrs;
    for (std::size_t k = start; k < end; ++k) ptrs.push_back(&molecules[order[k]]);
    GraphBatch g = make_batch(std::span<const Molecule* const>(ptrs));
    for (std::size_t k = start; k < end; ++k) g.source[k - start] = order[k];
    out.push_back(std::move(g));
  }
  return out;
}

GraphBatch strip_geometry(const GraphBatch& b) {
  GraphBatch out = b;
  std::fill(out.distances.begin(), out.distances.end(), 0.0);
  out.has_geometry = false;
  return out;
}

}  // namespace ccmd::mol
