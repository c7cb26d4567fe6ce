// SPDX-License-Identifier: Apache-2.0

#include "ccmd/molecule.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <queue>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>

namespace ccmd::mol {

namespace {

double dist(const Vec3& a, const Vec3& b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

bool degenerate(std::span<const Vec3> coords) {
  for (std::size_t i = 0; i < coords.size(); ++i)
    for (std::size_t j = i + 1; j < coords.size(); ++j)
      if (coords[i] == coords[j]) return true;
  return false;
}

}  // namespace

int bond_bucket(double distance, const GenConfig& cfg) {
  const double width = cfg.cutoff / cfg.bond_buckets;
  const int b = static_cast<int>(std::floor(distance / width));
  return std::clamp(b, 0, cfg.bond_buckets - 1);
}

std::vector<Bond> bonds_from_coords(std::span<const Vec3> coords, const GenConfig& cfg) {
  const std::size_t n = coords.size();
  std::set<std::pair<int, int>> pairs;

  // Prim on the complete graph.
  std::vector<double> best(n, std::numeric_limits<double>::infinity());
  std::vector<int> parent(n, -1);
  std::vector<bool> in_tree(n, false);
  if (n > 0) best[0] = 0.0;
  for (std::size_t step = 0; step < n; ++step) {
    std::size_t u = n;
    for (std::size_t v = 0; v < n; ++v)
      if (!in_tree[v] && (u == n || best[v] < best[u])) u = v;
    in_tree[u] = true;
    if (parent[u] >= 0) {
      const int a = std::min<int>(parent[u], static_cast<int>(u));
      const int b = std::max<int>(parent[u], static_cast<int>(u));
      pairs.emplace(a, b);
    }
    for (std::size_t v = 0; v < n; ++v) {
      if (in_tree[v]) continue;
      const double d = dist(coords[u], coords[v]);
      if (d < best[v]) {
        best[v] = d;
        parent[v] = static_cast<int>(u);
      }
    }
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (dist(coords[i], coords[j]) < cfg.cutoff)
        pairs.emplace(static_cast<int>(i), static_cast<int>(j));

  std::vector<Bond> bonds;
  bonds.reserve(pairs.size());
  for (auto [i, j] : pairs)
    bonds.push_back({i, j, bond_bucket(dist(coords[i], coords[j]), cfg)});
  return bonds;
}

double raw_label(const Molecule& m) {
  if (!m.coords) throw std::invalid_argument("raw_label: molecule has no coordinates");
  const auto& c = *m.coords;
  double y = 0.0;
  for (const auto& b : m.bonds) y += 1.0 / dist(c[b.i], c[b.j]);
  return y;
}

Molecule molecule_from_coords(std::vector<int> atoms, std::vector<Vec3> coords,
                              const GenConfig& cfg) {
  if (atoms.size() != coords.size())
    throw std::invalid_argument("molecule_from_coords: atoms/coords length mismatch");
  Molecule m;
  m.bonds = bonds_from_coords(coords, cfg);
  m.atoms = std::move(atoms);
  m.coords = std::move(coords);
  m.label = raw_label(m);
  return m;
}

bool is_connected(const Molecule& m) {
  const int n = m.size();
  if (n == 0) return false;
  std::vector<std::vector<int>> adj(n);
  for (const auto& b : m.bonds) {
    adj[b.i].push_back(b.j);
    adj[b.j].push_back(b.i);
  }
  std::vector<bool> seen(n, false);
  std::queue<int> q;
  q.push(0);
  seen[0] = true;
  int reached = 1;
  while (!q.empty()) {
    const int u = q.front();
    q.pop();
    for (int v : adj[u])
      if (!seen[v]) {
        seen[v] = true;
        ++reached;
        q.push(v);
      }
  }
  return reached == n;
}

void validate(const Molecule& m, const GenConfig& cfg) {
  const int n = m.size();
  if (n < 2 || n > cfg.n_max)
    throw std::invalid_argument("molecule: atom count " + std::to_string(n) + " outside [2, " +
                                std::to_string(cfg.n_max) + "]");
  for (int a : m.atoms)
    if (a < 0 || a >= cfg.atom_vocab)
      throw std::invalid_argument("molecule: atom id " + std::to_string(a) + " outside vocabulary");
  std::set<std::pair<int, int>> seen;
  for (const auto& b : m.bonds) {
    if (b.i < 0 || b.j >= n || b.i >= b.j)
      throw std::invalid_argument("molecule: bond (" + std::to_string(b.i) + ", " +
                                  std::to_string(b.j) + ") must satisfy 0 <= i < j < N");
    if (b.type < 0 || b.type >= cfg.bond_buckets)
      throw std::invalid_argument("molecule: bond type " + std::to_string(b.type) +
                                  " outside vocabulary");
    if (!seen.emplace(b.i, b.j).second)
      throw std::invalid_argument("molecule: duplicate bond (" + std::to_string(b.i) + ", " +
                                  std::to_string(b.j) + ")");
  }
  if (!is_connected(m)) throw std::invalid_argument("molecule: bond graph is not connected");
  if (m.coords) {
    if (static_cast<int>(m.coords->size()) != n)
      throw std::invalid_argument("molecule: coords length differs from atom count");
    for (const auto& p : *m.coords)
      for (double x : p)
        if (!std::isfinite(x)) throw std::invalid_argument("molecule: non-finite coordinate");
  }
  if (!std::isfinite(m.label)) throw std::invalid_argument("molecule: non-finite label");
}

Dataset gen_synthetic(int count, int n_lo, int n_hi, std::uint64_t seed, const GenConfig& cfg) {
  if (count < 0) throw std::invalid_argument("gen_synthetic: negative count");
  if (n_lo < 2 || n_hi > cfg.n_max || n_lo > n_hi)
    throw std::invalid_argument("gen_synthetic: n_range [" + std::to_string(n_lo) + ", " +
                                std::to_string(n_hi) + "] must lie within [2, " +
                                std::to_string(cfg.n_max) + "]");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> size_dist(n_lo, n_hi);
  std::uniform_int_distribution<int> atom_dist(0, cfg.atom_vocab - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  Dataset ds;
  ds.seed = seed;
  ds.molecules.reserve(static_cast<std::size_t>(count));
  for (int k = 0; k < count; ++k) {
    const int n = size_dist(rng);
    std::vector<Vec3> coords(static_cast<std::size_t>(n));
    do {
      for (auto& p : coords) p = {unit(rng), unit(rng), unit(rng)};
    } while (degenerate(coords));
    std::vector<int> atoms(static_cast<std::size_t>(n));
    for (auto& a : atoms) a = atom_dist(rng);
    ds.molecules.push_back(molecule_from_coords(std::move(atoms), std::move(coords), cfg));
  }

  if (!ds.molecules.empty()) {
    double mu = 0.0;
    for (const auto& m : ds.molecules) mu += m.label;
    mu /= static_cast<double>(ds.molecules.size());
    double var = 0.0;
    for (const auto& m : ds.molecules) var += (m.label - mu) * (m.label - mu);
    var /= static_cast<double>(ds.molecules.size());
    const double sd = var > 0.0 ? std::sqrt(var) : 1.0;
    for (auto& m : ds.molecules) m.label = (m.label - mu) / sd;
    ds.label_mean = mu;
    ds.label_std = sd;
  }
  return ds;
}

Molecule permute_atoms(const Molecule& m, std::span<const int> perm) {
  const int n = m.size();
  if (static_cast<int>(perm.size()) != n)
    throw std::invalid_argument("permute_atoms: permutation length differs from atom count");
  std::vector<bool> seen(static_cast<std::size_t>(n), false);
  for (int p : perm) {
    if (p < 0 || p >= n || seen[p]) throw std::invalid_argument("permute_atoms: not a permutation");
    seen[p] = true;
  }
  Molecule out;
  out.label = m.label;
  out.atoms.assign(static_cast<std::size_t>(n), 0);
  for (int k = 0; k < n; ++k) out.atoms[perm[k]] = m.atoms[k];
  if (m.coords) {
    std::vector<Vec3> c(static_cast<std::size_t>(n));
    for (int k = 0; k < n; ++k) c[perm[k]] = (*m.coords)[k];
    out.coords = std::move(c);
  }
  for (const auto& b : m.bonds) {
    const int i = perm[b.i], j = perm[b.j];
    out.bonds.push_back({std::min(i, j), std::max(i, j), b.type});
  }
  std::sort(out.bonds.begin(), out.bonds.end(),
            [](const Bond& x, const Bond& y) { return std::pair(x.i, x.j) < std::pair(y.i, y.j); });
  return out;
}

}  // namespace ccmd::mol
