// SPDX-License-Identifier: Apache-2.0
//
// Measures how the gradient reaching the virtual token grows with molecule
// size when a student is pulled towards a teacher by the summed per-token
// loss, and fits power laws to the result.

#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ccmd/model.hpp"
#include "ccmd/molecule.hpp"
#include "json.hpp"

namespace ccmd::scan {

struct LogLogFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
  std::size_t points = 0;
};

/// Ordinary least squares of ln(value) on ln(N).
LogLogFit fit_loglog(std::span<const std::pair<double, double>> points);

enum class Weighting {
  Summed,       // token-summed local loss, no size correction
  Coordinated,  // f(N) times the token-averaged local loss
};

struct Probe {
  ModelConfig model;
  const ParamStore* student = nullptr;
  const ParamStore* teacher = nullptr;
  Weighting weighting = Weighting::Summed;
  bool include_virtual = true;
};

/// Gradient of the local loss w.r.t. the virtual token of every layer
/// (1-based layer l at index l - 1), for a single molecule.
std::vector<std::vector<double>> virtual_grads(const Probe& probe, const mol::Molecule& m);

std::vector<double> virtual_grad_norms(const Probe& probe, const mol::Molecule& m);
double virtual_grad_norm(const Probe& probe, const mol::Molecule& m, std::size_t layer);

/// Loss value with `offset` added to the virtual token after `layer`.
double probe_loss(const Probe& probe, const mol::Molecule& m, std::size_t layer,
                  std::span<const double> offset);

/// Copy of `store` with N(0, sigma^2) noise added to every value.
ParamStore perturb(const ParamStore& store, double sigma, std::uint64_t seed);

struct ScanConfig {
  std::vector<Arch> archs{Arch::Transformer, Arch::Gin};
  std::vector<int> sizes{8, 16, 32, 64, 128};
  int seeds = 5;
  int molecules_per_cell = 20;
  double teacher_noise = 0.1;
  std::uint64_t seed = 0;
  int width = 64;
  int layers = 4;
  int heads = 4;
  int ffn = 256;
  bool include_virtual = true;
  /// Also measure the coordinated loss on the same molecules.
  bool weighted = true;

  ModelConfig model(Arch arch) const;
  void validate() const;
};

struct ScanRow {
  Arch arch;
  int n;
  int seed;
  int layer;
  double norm;           // geometric mean over the cell's molecules
  double weighted_norm;  // same under the coordinated loss; 0 when not measured
};

struct ArchFit {
  Arch arch;
  std::vector<int> pooled_layers;
  std::vector<LogLogFit> per_layer;  // index l - 1; points == 0 when not fittable
  LogLogFit pooled;
  LogLogFit pooled_weighted;
};

struct ScanResult {
  std::vector<ScanRow> rows;
  std::vector<ArchFit> fits;
  std::vector<std::string> dropped;
  nlohmann::json config;

  const ArchFit& fit(Arch arch) const;
};

/// Layers excluded from pooling are the first and the last one; with fewer
/// than three layers every layer is pooled.
std::vector<int> middle_layers(int layers);

ScanResult scaling_scan(const ScanConfig& cfg);

/// `arch,N,seed,layer,norm`; `weighted` selects the coordinated norms.
void write_csv(const ScanResult& r, std::ostream& os, bool weighted = false);
nlohmann::json summary_json(const ScanResult& r);

}  // namespace ccmd::scan
