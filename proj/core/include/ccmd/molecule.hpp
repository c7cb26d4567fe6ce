// SPDX-License-Identifier: Apache-2.0
//
// Synthetic molecules whose label is a pure function of 3D geometry.

#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace ccmd::mol {

using Vec3 = std::array<double, 3>;

struct Bond {
  int i = 0;
  int j = 0;
  int type = 0;  // distance bucket in [0, bond_buckets)

  friend bool operator==(const Bond&, const Bond&) = default;
};

struct Molecule {
  std::vector<int> atoms;
  std::vector<Bond> bonds;  // i < j, no duplicate pairs
  std::optional<std::vector<Vec3>> coords;
  double label = 0.0;

  int size() const { return static_cast<int>(atoms.size()); }
  friend bool operator==(const Molecule&, const Molecule&) = default;
};

struct GenConfig {
  int atom_vocab = 16;
  int bond_buckets = 4;
  double cutoff = 0.35;
  int n_max = 128;
};

struct Dataset {
  std::vector<Molecule> molecules;
  double label_mean = 0.0;
  double label_std = 1.0;
  std::uint64_t seed = 0;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// Bucket index of a bond length over equal-width buckets of [0, cutoff].
/// Longer bonds (spanning-tree edges) fall into the last bucket.
int bond_bucket(double distance, const GenConfig& cfg);

/// Bonds from geometry: Euclidean minimum spanning tree plus every pair
/// closer than the cutoff. Sorted by (i, j).
std::vector<Bond> bonds_from_coords(std::span<const Vec3> coords, const GenConfig& cfg);

/// Sum of inverse bond lengths. Requires coordinates.
double raw_label(const Molecule& m);

/// Builds an unstandardised molecule from explicit geometry.
Molecule molecule_from_coords(std::vector<int> atoms, std::vector<Vec3> coords,
                              const GenConfig& cfg);

/// Throws std::invalid_argument if any structural invariant is violated.
void validate(const Molecule& m, const GenConfig& cfg = {});
bool is_connected(const Molecule& m);

/// `count` molecules with N uniform in [n_lo, n_hi], labels standardised by
/// the dataset's own mean and standard deviation. Deterministic in `seed`.
Dataset gen_synthetic(int count, int n_lo, int n_hi, std::uint64_t seed,
                      const GenConfig& cfg = {});

/// Same atoms/bonds/coords with atom order permuted: atom k moves to perm[k].
Molecule permute_atoms(const Molecule& m, std::span<const int> perm);

}  // namespace ccmd::mol
