// SPDX-License-Identifier: Apache-2.0

#include "ccmd/gradscan.hpp"

#include <cmath>
#include <map>
#include <ostream>
#include <random>
#include <set>
#include <stdexcept>

#include "ccmd/batch.hpp"
#include "ccmd/distill.hpp"

namespace ccmd::scan {

using nlohmann::json;

LogLogFit fit_loglog(std::span<const std::pair<double, double>> points) {
  std::set<double> distinct;
  for (const auto& [n, v] : points) {
    if (!(n > 0.0) || !std::isfinite(n))
      throw std::invalid_argument("fit_loglog: N must be positive, got " + std::to_string(n));
    if (!(v > 0.0) || !std::isfinite(v))
      throw std::invalid_argument("fit_loglog: value must be positive and finite, got " +
                                  std::to_string(v));
    distinct.insert(n);
  }
  if (distinct.size() < 2) throw std::invalid_argument("fit_loglog: need at least 2 distinct N");

  const double k = static_cast<double>(points.size());
  double mx = 0, my = 0;
  for (const auto& [n, v] : points) {
    mx += std::log(n);
    my += std::log(v);
  }
  mx /= k;
  my /= k;
  double sxx = 0, sxy = 0, syy = 0;
  for (const auto& [n, v] : points) {
    const double dx = std::log(n) - mx, dy = std::log(v) - my;
    sxx += dx * dx;
    sxy += dx * dy;
    syy += dy * dy;
  }
  LogLogFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  double sse = 0;
  for (const auto& [n, v] : points) {
    const double e = std::log(v) - (f.intercept + f.slope * std::log(n));
    sse += e * e;
  }
  f.r2 = syy > 0 ? 1.0 - sse / syy : 1.0;
  f.points = points.size();
  return f;
}

namespace {

struct ProbeRun {
  double loss = 0.0;
  std::vector<std::vector<double>> grads;
};

ProbeRun run_probe(const Probe& p, const mol::Molecule& m, std::size_t offset_layer,
                   std::span<const double> offset, bool want_grads) {
  if (!p.student || !p.teacher) throw std::invalid_argument("probe: student and teacher required");
  const mol::Molecule* one[] = {&m};
  mol::GraphBatch batch = mol::make_batch(std::span<const mol::Molecule* const>(one));
  if (p.model.view == enc::View::TwoD) batch = mol::strip_geometry(batch);

  ad::Tape teacher_tape;
  ParamBinding teacher_params(teacher_tape, *p.teacher, false);
  const net::LayerTrace teacher = model_forward(p.model, teacher_params, batch).trace;

  ad::Tape tape;
  ParamBinding params(tape, *p.student, true);
  const std::size_t T = batch.tokens, d = static_cast<std::size_t>(p.model.width);
  net::LayerHook hook;
  if (offset_layer > 0) {
    if (offset.size() != d)
      throw std::invalid_argument("probe: offset has " + std::to_string(offset.size()) +
                                  " values, width is " + std::to_string(d));
    hook = [&](std::size_t layer, const ad::Tensor& x) {
      if (layer != offset_layer) return x;
      std::vector<double> shift(T * d, 0.0);
      std::copy(offset.begin(), offset.end(), shift.begin());
      return ad::add(x, tape.constant({1, T, d}, std::move(shift)));
    };
  }
  const net::LayerTrace student = model_forward(p.model, params, batch, hook).trace;
  const net::LayerTrace target = distill::detach(teacher, tape);

  ad::Tensor per_mol;
  if (p.weighting == Weighting::Summed) {
    per_mol = distill::loss_local_sum(student, target, batch, distill::LayerScope::All,
                                      p.include_virtual);
  } else {
    per_mol = ad::scale(distill::loss_local_mean(student, target, batch, distill::LayerScope::All,
                                                 p.include_virtual),
                        distill::coordinating_weight(static_cast<int>(m.atoms.size()),
                                                     p.model.arch));
  }
  ad::Tensor loss = ad::sum(per_mol);

  ProbeRun run;
  run.loss = loss.item();
  if (!want_grads) return run;
  tape.backward(loss);
  for (const auto& x : student.tokens) {
    std::vector<double> g(d, 0.0);
    if (tape.has_grad(x)) {
      auto full = tape.grad(x);
      std::copy(full.begin(), full.begin() + static_cast<std::ptrdiff_t>(d), g.begin());
    }
    run.grads.push_back(std::move(g));
  }
  return run;
}

double l2(std::span<const double> v) {
  double s = 0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

void check_layer(const Probe& p, std::size_t layer) {
  if (layer < 1 || layer > static_cast<std::size_t>(p.model.layers))
    throw std::out_of_range("layer " + std::to_string(layer) + " outside 1.." +
                            std::to_string(p.model.layers));
}

}  // namespace

std::vector<std::vector<double>> virtual_grads(const Probe& probe, const mol::Molecule& m) {
  return run_probe(probe, m, 0, {}, true).grads;
}

std::vector<double> virtual_grad_norms(const Probe& probe, const mol::Molecule& m) {
  std::vector<double> out;
  for (const auto& g : virtual_grads(probe, m)) out.push_back(l2(g));
  return out;
}

double virtual_grad_norm(const Probe& probe, const mol::Molecule& m, std::size_t layer) {
  check_layer(probe, layer);
  return virtual_grad_norms(probe, m)[layer - 1];
}

double probe_loss(const Probe& probe, const mol::Molecule& m, std::size_t layer,
                  std::span<const double> offset) {
  check_layer(probe, layer);
  return run_probe(probe, m, layer, offset, false).loss;
}

ParamStore perturb(const ParamStore& store, double sigma, std::uint64_t seed) {
  ParamStore out = store;
  Rng rng(seed);
  std::normal_distribution<double> noise(0.0, sigma);
  for (auto& [name, p] : out)
    for (double& v : p.values) v += noise(rng);
  return out;
}

ModelConfig ScanConfig::model(Arch arch) const {
  ModelConfig c;
  c.arch = arch;
  c.view = enc::View::TwoD;
  c.width = width;
  c.layers = layers;
  c.heads = heads;
  c.ffn = ffn;
  return c;
}

void ScanConfig::validate() const {
  if (archs.empty()) throw std::invalid_argument("scan: no architectures");
  if (sizes.size() < 2) throw std::invalid_argument("scan: need at least 2 molecule sizes");
  for (int n : sizes)
    if (n < 2 || n > mol::GenConfig{}.n_max)
      throw std::invalid_argument("scan: molecule size " + std::to_string(n) + " out of range");
  if (seeds < 1 || molecules_per_cell < 1)
    throw std::invalid_argument("scan: seeds and molecules per cell must be >= 1");
  if (!(teacher_noise > 0.0)) throw std::invalid_argument("scan: teacher noise must be > 0");
  for (Arch a : archs) model(a).validate();
}

std::vector<int> middle_layers(int layers) {
  std::vector<int> out;
  if (layers < 3) {
    for (int l = 1; l <= layers; ++l) out.push_back(l);
  } else {
    for (int l = 2; l < layers; ++l) out.push_back(l);
  }
  return out;
}

const ArchFit& ScanResult::fit(Arch arch) const {
  for (const auto& f : fits)
    if (f.arch == arch) return f;
  throw std::out_of_range(std::string("no fit for architecture ") + to_string(arch));
}

namespace {

double geo_mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += std::log(x);
  return std::exp(s / static_cast<double>(v.size()));
}

}  // namespace

ScanResult scaling_scan(const ScanConfig& cfg) {
  cfg.validate();
  ScanResult result;
  result.config = json{{"archs", json::array()},      {"sizes", cfg.sizes},
                       {"seeds", cfg.seeds},          {"molecules_per_cell", cfg.molecules_per_cell},
                       {"teacher_noise", cfg.teacher_noise}, {"seed", cfg.seed},
                       {"width", cfg.width},          {"layers", cfg.layers},
                       {"heads", cfg.heads},          {"ffn", cfg.ffn},
                       {"include_virtual", cfg.include_virtual}, {"weighted", cfg.weighted}};
  for (Arch a : cfg.archs) result.config["archs"].push_back(to_string(a));

  // Molecules depend on (N, seed) only, so both architectures see the same ones.
  std::map<std::pair<int, int>, mol::Dataset> molecules;
  for (int n : cfg.sizes)
    for (int s = 0; s < cfg.seeds; ++s)
      molecules[{n, s}] = mol::gen_synthetic(cfg.molecules_per_cell, n, n,
                                             cfg.seed * 1000003ULL + static_cast<std::uint64_t>(n) * 7919ULL +
                                                 static_cast<std::uint64_t>(s));

  for (Arch arch : cfg.archs) {
    const ModelConfig model = cfg.model(arch);
    const int L = model.layers;
    // (N, layer) -> per-seed cell values
    std::map<std::pair<int, int>, std::vector<double>> by_n_layer, by_n_layer_w;
    for (int s = 0; s < cfg.seeds; ++s) {
      const std::uint64_t init_seed = cfg.seed * 7777ULL + static_cast<std::uint64_t>(s);
      const ParamStore student = init_model(model, init_seed);
      const ParamStore teacher = perturb(student, cfg.teacher_noise, init_seed ^ 0x9e3779b97f4a7c15ULL);
      Probe summed{model, &student, &teacher, Weighting::Summed, cfg.include_virtual};
      Probe coordinated = summed;
      coordinated.weighting = Weighting::Coordinated;

      for (int n : cfg.sizes) {
        std::vector<std::vector<double>> norms(L), norms_w(L);
        const auto& ds = molecules.at({n, s});
        for (std::size_t i = 0; i < ds.molecules.size(); ++i) {
          const auto& m = ds.molecules[i];
          std::vector<double> g = virtual_grad_norms(summed, m);
          std::vector<double> gw = cfg.weighted ? virtual_grad_norms(coordinated, m)
                                                : std::vector<double>(L, 1.0);
          for (int l = 0; l < L; ++l) {
            const bool ok = std::isfinite(g[l]) && g[l] > 0 && std::isfinite(gw[l]) && gw[l] > 0;
            if (!ok) {
              result.dropped.push_back(std::string(to_string(arch)) + " N=" + std::to_string(n) +
                                       " seed=" + std::to_string(s) + " molecule=" +
                                       std::to_string(i) + " layer=" + std::to_string(l + 1) +
                                       " norm=" + std::to_string(g[l]));
              continue;
            }
            norms[l].push_back(g[l]);
            norms_w[l].push_back(gw[l]);
          }
        }
        for (int l = 0; l < L; ++l) {
          if (norms[l].empty()) continue;
          const double gm = geo_mean(norms[l]);
          const double gmw = cfg.weighted ? geo_mean(norms_w[l]) : 0.0;
          result.rows.push_back({arch, n, s, l + 1, gm, gmw});
          by_n_layer[{n, l + 1}].push_back(gm);
          by_n_layer_w[{n, l + 1}].push_back(gmw);
        }
      }
    }

    ArchFit fit;
    fit.arch = arch;
    fit.pooled_layers = middle_layers(L);
    auto points_for = [&](const auto& table, const std::vector<int>& layers) {
      std::vector<std::pair<double, double>> pts;
      for (int l : layers)
        for (int n : cfg.sizes) {
          auto it = table.find({n, l});
          if (it != table.end()) pts.emplace_back(static_cast<double>(n), geo_mean(it->second));
        }
      return pts;
    };
    // A layer whose virtual token gets no gradient at all has no points.
    for (int l = 1; l <= L; ++l) {
      const auto pts = points_for(by_n_layer, {l});
      fit.per_layer.push_back(pts.size() >= 2 ? fit_loglog(pts) : LogLogFit{});
    }
    fit.pooled = fit_loglog(points_for(by_n_layer, fit.pooled_layers));
    if (cfg.weighted) fit.pooled_weighted = fit_loglog(points_for(by_n_layer_w, fit.pooled_layers));
    result.fits.push_back(std::move(fit));
  }
  return result;
}

void write_csv(const ScanResult& r, std::ostream& os, bool weighted) {
  os << "arch,N,seed,layer,norm\n";
  os.precision(17);
  for (const auto& row : r.rows)
    os << to_string(row.arch) << ',' << row.n << ',' << row.seed << ',' << row.layer << ','
       << (weighted ? row.weighted_norm : row.norm) << '\n';
}

json summary_json(const ScanResult& r) {
  auto fit_json = [](const LogLogFit& f) {
    return json{{"slope", f.slope}, {"intercept", f.intercept}, {"r2", f.r2}, {"points", f.points}};
  };
  json j{{"config", r.config}, {"dropped", r.dropped}, {"fits", json::object()}};
  for (const auto& f : r.fits) {
    json a{{"pooled_layers", f.pooled_layers}, {"pooled", fit_json(f.pooled)}, {"per_layer", json::array()}};
    for (const auto& pl : f.per_layer) a["per_layer"].push_back(fit_json(pl));
    if (r.config.value("weighted", false)) {
      a["pooled_weighted"] = fit_json(f.pooled_weighted);
      a["slope_drop"] = f.pooled.slope - f.pooled_weighted.slope;
    }
    j["fits"][to_string(f.arch)] = a;
  }
  if (r.fits.size() >= 2) {
    try {
      j["slope_gap"] = r.fit(Arch::Transformer).pooled.slope - r.fit(Arch::Gin).pooled.slope;
    } catch (const std::out_of_range&) {
    }
  }
  return j;
}

}  // namespace ccmd::scan
