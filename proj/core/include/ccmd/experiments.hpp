// SPDX-License-Identifier: Apache-2.0
//
// Small experiment drivers: the ablation grid, the manual-weight sweep and the
// size-boundedness check of the local term.

#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "ccmd/trainer.hpp"

namespace ccmd::exp {

double median(std::vector<double> v);
/// Spearman rank correlation with average ranks for ties.
double spearman(std::span<const double> x, std::span<const double> y);

struct Variant {
  std::string name;
  distill::DistillConfig distill;
};

/// baseline, global-last, global-all, local (token-mean term at weight 1),
/// global+local with the coordinating weight.
std::vector<Variant> ablation_variants();
/// global+local at each manual weight, then the coordinating rule.
std::vector<Variant> sweep_variants(std::span<const double> weights);

struct GridConfig {
  int train_count = 5000;
  int val_count = 1000;
  int n_lo = 4;
  int n_hi = 24;
  std::uint64_t data_seed = 2024;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  train::TrainConfig teacher;  // view forced to 3D
  train::TrainConfig student;  // view forced to 2D; distill config set per variant
};

struct GridResult {
  std::vector<std::string> names;  // "teacher" first, then variants in order
  std::map<std::string, std::vector<double>> mae;  // best validation MAE per seed
  double seconds = 0.0;

  double median(const std::string& name) const;
};

/// Splits one generated dataset into train/val, so both share label scaling.
std::pair<mol::Dataset, mol::Dataset> make_split(int train_count, int val_count, int n_lo, int n_hi,
                                                 std::uint64_t seed);

GridResult run_grid(const GridConfig& cfg, std::span<const Variant> variants,
                    std::ostream* log = nullptr);

void write_grid_csv(const GridResult& r, std::ostream& os);

struct SweepRow {
  std::string rule;  // "manual" or "coordinating"
  double weight = 0.0;  // manual weight; 0 for the coordinating rule
  std::vector<double> maes;
  double median_mae = 0.0;
};

std::vector<SweepRow> weight_sweep(const train::TrainConfig& base, const Checkpoint& teacher,
                                   const mol::Dataset& train, const mol::Dataset& val,
                                   std::span<const double> weights,
                                   std::span<const std::uint64_t> seeds, std::ostream* log = nullptr);

void write_sweep_csv(std::span<const SweepRow> rows, std::ostream& os);

struct Boundedness {
  std::vector<int> sizes;
  std::vector<double> weighted_mean;  // mean f(N) * token-mean local term per size
  std::vector<double> summed_mean;    // mean token-summed local term per size
  double weighted_ratio = 0.0;        // max / min of weighted_mean
  double summed_spearman = 0.0;       // per molecule, summed term vs N
};

/// Evaluates both local terms between independently initialised 3D teacher
/// and 2D student models on random molecules of each size.
Boundedness boundedness_check(const ModelConfig& model, std::span<const int> sizes,
                              int molecules_per_size, std::uint64_t seed);

}  // namespace ccmd::exp
