// SPDX-License-Identifier: Apache-2.0

#include "ccmd/experiments.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <ostream>
#include <stdexcept>

#include "ccmd/batch.hpp"

namespace ccmd::exp {

double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median of an empty list");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

namespace {

std::vector<double> ranks(std::span<const double> x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
    i = j + 1;
  }
  return r;
}

}  // namespace

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2)
    throw std::invalid_argument("spearman: need two equal-length lists of at least 2 values");
  const auto rx = ranks(x), ry = ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0 || syy == 0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

std::vector<Variant> ablation_variants() {
  using namespace distill;
  auto make = [](const char* name, Mode mode, LayerScope scope, WeightRule rule) {
    Variant v{name, {}};
    v.distill.mode = mode;
    v.distill.scope = scope;
    v.distill.rule = rule;
    v.distill.manual_weight = 1.0;
    return v;
  };
  return {make("baseline", Mode::None, LayerScope::All, WeightRule::Manual),
          make("global-last", Mode::GlobalOnly, LayerScope::Last, WeightRule::Manual),
          make("global-all", Mode::GlobalOnly, LayerScope::All, WeightRule::Manual),
          make("local", Mode::LocalOnly, LayerScope::All, WeightRule::Manual),
          make("global+local-coordinating", Mode::GlobalLocal, LayerScope::All,
               WeightRule::Coordinating)};
}

std::vector<Variant> sweep_variants(std::span<const double> weights) {
  std::vector<Variant> out;
  for (double w : weights) {
    if (!(w >= 0.0)) throw std::invalid_argument("sweep: weights must be >= 0");
    Variant v;
    char buf[64];
    std::snprintf(buf, sizeof buf, "global+local-w%g", w);
    v.name = buf;
    v.distill.mode = distill::Mode::GlobalLocal;
    v.distill.rule = distill::WeightRule::Manual;
    v.distill.manual_weight = w;
    out.push_back(v);
  }
  Variant c;
  c.name = "global+local-coordinating";
  c.distill.mode = distill::Mode::GlobalLocal;
  c.distill.rule = distill::WeightRule::Coordinating;
  out.push_back(c);
  return out;
}

double GridResult::median(const std::string& name) const {
  auto it = mae.find(name);
  if (it == mae.end()) throw std::out_of_range("grid: no variant '" + name + "'");
  return exp::median(it->second);
}

std::pair<mol::Dataset, mol::Dataset> make_split(int train_count, int val_count, int n_lo,
                                                 int n_hi, std::uint64_t seed) {
  if (train_count < 1 || val_count < 1)
    throw std::invalid_argument("split: train and validation counts must be >= 1");
  mol::Dataset all = mol::gen_synthetic(train_count + val_count, n_lo, n_hi, seed);
  mol::Dataset train = all, val = all;
  train.molecules.assign(all.molecules.begin(), all.molecules.begin() + train_count);
  val.molecules.assign(all.molecules.begin() + train_count, all.molecules.end());
  return {std::move(train), std::move(val)};
}

GridResult run_grid(const GridConfig& cfg, std::span<const Variant> variants, std::ostream* log) {
  const auto start = std::chrono::steady_clock::now();
  if (cfg.seeds.empty()) throw std::invalid_argument("grid: no seeds");
  const auto [train, val] = make_split(cfg.train_count, cfg.val_count, cfg.n_lo, cfg.n_hi, cfg.data_seed);

  GridResult r;
  r.names.push_back("teacher");
  for (const auto& v : variants) {
    if (r.mae.contains(v.name) || v.name == "teacher")
      throw std::invalid_argument("grid: duplicate variant name '" + v.name + "'");
    r.names.push_back(v.name);
    r.mae[v.name];
  }
  for (std::uint64_t seed : cfg.seeds) {
    train::TrainConfig tc = cfg.teacher;
    tc.seed = seed;
    const auto teacher = train::train_teacher(tc, train, val);
    r.mae["teacher"].push_back(teacher.record.best_val_mae);
    if (log) *log << "seed " << seed << " teacher " << teacher.record.best_val_mae << std::endl;
    for (const auto& v : variants) {
      train::TrainConfig sc = cfg.student;
      sc.seed = seed;
      sc.distill = v.distill;
      const auto student = train::distill_student(sc, teacher.best, train, val);
      r.mae[v.name].push_back(student.record.best_val_mae);
      if (log) *log << "seed " << seed << ' ' << v.name << ' ' << student.record.best_val_mae << std::endl;
    }
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

void write_grid_csv(const GridResult& r, std::ostream& os) {
  os << "variant,seed_index,val_mae\n";
  os.precision(17);
  for (const auto& name : r.names) {
    const auto& v = r.mae.at(name);
    for (std::size_t i = 0; i < v.size(); ++i) os << name << ',' << i << ',' << v[i] << '\n';
  }
}

std::vector<SweepRow> weight_sweep(const train::TrainConfig& base, const Checkpoint& teacher,
                                   const mol::Dataset& train, const mol::Dataset& val,
                                   std::span<const double> weights,
                                   std::span<const std::uint64_t> seeds, std::ostream* log) {
  if (weights.empty()) throw std::invalid_argument("sweep: no weights");
  if (seeds.empty()) throw std::invalid_argument("sweep: no seeds");
  std::vector<SweepRow> rows;
  for (const auto& v : sweep_variants(weights)) {
    SweepRow row;
    row.rule = distill::to_string(v.distill.rule);
    row.weight = v.distill.rule == distill::WeightRule::Manual ? v.distill.manual_weight : 0.0;
    for (std::uint64_t seed : seeds) {
      train::TrainConfig c = base;
      c.seed = seed;
      c.distill = v.distill;
      c.run_dir.clear();
      row.maes.push_back(train::distill_student(c, teacher, train, val).record.best_val_mae);
      if (log) *log << v.name << " seed " << seed << ' ' << row.maes.back() << std::endl;
    }
    row.median_mae = median(row.maes);
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_sweep_csv(std::span<const SweepRow> rows, std::ostream& os) {
  os << "rule,weight,median_val_mae,seeds\n";
  for (const auto& r : rows) {
    os << r.rule << ',' << r.weight << ',';
    const auto prec = os.precision(17);
    os << r.median_mae << ',' << r.maes.size() << '\n';
    os.precision(prec);
  }
}

Boundedness boundedness_check(const ModelConfig& model, std::span<const int> sizes,
                              int molecules_per_size, std::uint64_t seed) {
  if (sizes.size() < 2) throw std::invalid_argument("boundedness: need at least 2 sizes");
  if (molecules_per_size < 1) throw std::invalid_argument("boundedness: need molecules");
  ModelConfig student_cfg = model, teacher_cfg = model;
  student_cfg.view = enc::View::TwoD;
  teacher_cfg.view = enc::View::ThreeD;
  const ParamStore student = init_model(student_cfg, seed);
  const ParamStore teacher = init_model(teacher_cfg, seed + 1);

  Boundedness out;
  std::vector<double> all_n, all_summed;
  for (int n : sizes) {
    const auto ds = mol::gen_synthetic(molecules_per_size, n, n, seed * 31ULL + static_cast<std::uint64_t>(n));
    double wsum = 0, ssum = 0;
    for (const auto& m : ds.molecules) {
      const mol::Molecule* one[] = {&m};
      const mol::GraphBatch full = mol::make_batch(std::span<const mol::Molecule* const>(one));
      const mol::GraphBatch flat = mol::strip_geometry(full);
      ad::Tape tape;
      ParamBinding tp(tape, teacher, false), sp(tape, student, false);
      const auto t = model_forward(teacher_cfg, tp, full).trace;
      const auto s = model_forward(student_cfg, sp, flat).trace;
      const double mean_term =
          distill::loss_local_mean(s, t, flat, distill::LayerScope::All).values()[0];
      const double summed = distill::loss_local_sum(s, t, flat, distill::LayerScope::All).values()[0];
      wsum += distill::coordinating_weight(n, model.arch) * mean_term;
      ssum += summed;
      all_n.push_back(n);
      all_summed.push_back(summed);
    }
    out.sizes.push_back(n);
    out.weighted_mean.push_back(wsum / molecules_per_size);
    out.summed_mean.push_back(ssum / molecules_per_size);
  }
  const auto [lo, hi] = std::minmax_element(out.weighted_mean.begin(), out.weighted_mean.end());
  out.weighted_ratio = *hi / *lo;
  out.summed_spearman = spearman(all_n, all_summed);
  return out;
}

}  // namespace ccmd::exp
