// SPDX-License-Identifier: Apache-2.0

#include "ccmd/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <ostream>
#include <stdexcept>

#include "ccmd/batch.hpp"

namespace ccmd::train {

using nlohmann::json;

void TrainConfig::validate() const {
  adam.validate();
  if (batch_size < 1) throw std::invalid_argument("train: batch size must be >= 1");
  if (epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
  model.validate();
  distill.validate();
}

json to_json(const TrainConfig& cfg) {
  return json{{"lr", cfg.adam.lr},
              {"beta1", cfg.adam.beta1},
              {"beta2", cfg.adam.beta2},
              {"eps", cfg.adam.eps},
              {"clip_norm", cfg.adam.clip_norm},
              {"batch_size", cfg.batch_size},
              {"epochs", cfg.epochs},
              {"seed", cfg.seed},
              {"model", to_json(cfg.model)},
              {"distill", distill::to_json(cfg.distill)},
              {"train", cfg.train_path},
              {"val", cfg.val_path},
              {"teacher", cfg.teacher_path},
              {"run_dir", cfg.run_dir.string()}};
}

TrainConfig train_config_from_json(const json& j, TrainConfig base) {
  if (!j.is_object()) throw std::invalid_argument("train config must be a JSON object");
  static const char* kKeys[] = {"lr",   "beta1", "beta2", "eps",   "clip_norm", "batch_size", "epochs",
                                "seed", "model", "distill", "train", "val",     "teacher",    "run_dir"};
  for (const auto& [k, v] : j.items()) {
    bool known = false;
    for (const char* key : kKeys) known = known || k == key;
    if (!known) throw std::invalid_argument("train config: unknown key '" + k + "'");
  }
  TrainConfig c = std::move(base);
  c.adam.lr = j.value("lr", c.adam.lr);
  c.adam.beta1 = j.value("beta1", c.adam.beta1);
  c.adam.beta2 = j.value("beta2", c.adam.beta2);
  c.adam.eps = j.value("eps", c.adam.eps);
  c.adam.clip_norm = j.value("clip_norm", c.adam.clip_norm);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.seed = j.value("seed", c.seed);
  if (j.contains("model")) {
    json m = to_json(c.model);
    m.update(j.at("model"));
    c.model = model_config_from_json(m);
  }
  if (j.contains("distill")) {
    json d = distill::to_json(c.distill);
    d.update(j.at("distill"));
    c.distill = distill::distill_config_from_json(d);
  }
  c.train_path = j.value("train", c.train_path);
  c.val_path = j.value("val", c.val_path);
  c.teacher_path = j.value("teacher", c.teacher_path);
  c.run_dir = j.value("run_dir", c.run_dir.string());
  c.validate();
  return c;
}

void write_record_csv(const TrainingRecord& record, std::ostream& os) {
  os << "epoch,train_mae,val_mae,l_2d,l_m,l_a_mean,weight_mean,seconds\n";
  os.precision(17);
  for (const auto& e : record.epochs)
    os << e.epoch << ',' << e.train_mae << ',' << e.val_mae << ',' << e.loss.l_2d << ','
       << e.loss.l_m << ',' << e.loss.l_a_mean << ',' << e.loss.weight_mean << ',' << e.seconds
       << '\n';
}

namespace {

void require_geometry(std::span<const mol::Molecule> molecules, const char* what) {
  for (std::size_t i = 0; i < molecules.size(); ++i)
    if (!molecules[i].coords)
      throw std::invalid_argument(std::string(what) + ": molecule " + std::to_string(i) +
                                  " has no coordinates, the 3D view needs them");
}

mol::GraphBatch view_batch(mol::GraphBatch b, enc::View view) {
  return view == enc::View::TwoD ? mol::strip_geometry(b) : b;
}

// Per-molecule teacher token states, [layer][(N + 1) * d].
struct TeacherCache {
  std::size_t width = 0;
  std::vector<std::vector<std::vector<double>>> traces;

  net::LayerTrace place(const mol::GraphBatch& batch, ad::Tape& tape) const {
    net::LayerTrace out;
    const std::size_t B = batch.batch, T = batch.tokens, d = width;
    const std::size_t L = traces.front().size();
    for (std::size_t l = 0; l < L; ++l) {
      std::vector<double> v(B * T * d, 0.0);
      for (std::size_t b = 0; b < B; ++b) {
        const auto& src = traces[batch.source[b]][l];
        std::copy(src.begin(), src.end(), v.begin() + static_cast<std::ptrdiff_t>(b * T * d));
      }
      out.tokens.push_back(tape.constant({B, T, d}, std::move(v)));
    }
    return out;
  }
};

TeacherCache build_teacher_cache(const Checkpoint& teacher, std::span<const mol::Molecule> molecules) {
  TeacherCache cache;
  cache.width = static_cast<std::size_t>(teacher.model.width);
  cache.traces.reserve(molecules.size());
  for (const auto& m : molecules) {
    const mol::Molecule* one[] = {&m};
    const mol::GraphBatch batch =
        view_batch(mol::make_batch(std::span<const mol::Molecule* const>(one)), teacher.model.view);
    ad::Tape tape;
    ParamBinding params(tape, teacher.params, false);
    const auto out = model_forward(teacher.model, params, batch);
    std::vector<std::vector<double>> layers;
    for (const auto& x : out.trace.tokens) layers.emplace_back(x.values().begin(), x.values().end());
    cache.traces.push_back(std::move(layers));
  }
  return cache;
}

struct Loop {
  const TrainConfig& cfg;
  const mol::Dataset& train;
  const mol::Dataset& val;
  const TeacherCache* teacher = nullptr;
  EpochCallback on_epoch;

  TrainResult run() {
    const ModelConfig& model = cfg.model;
    if (train.molecules.empty()) throw std::invalid_argument("train: empty training set");
    if (val.molecules.empty()) throw std::invalid_argument("train: empty validation set");

    distill::DistillConfig dcfg = cfg.distill;
    dcfg.arch = model.arch;
    if (!teacher) dcfg.mode = distill::Mode::None;

    Checkpoint current{model, init_model(model, cfg.seed), train.label_mean, train.label_std, cfg.seed};
    Adam adam(cfg.adam);
    TrainResult result;
    result.record.best_val_mae = std::numeric_limits<double>::infinity();

    if (!cfg.run_dir.empty()) {
      std::filesystem::create_directories(cfg.run_dir);
      std::ofstream os(cfg.run_dir / "config.json");
      os << to_json(cfg).dump(2) << '\n';
      if (!os) throw std::runtime_error("cannot write " + (cfg.run_dir / "config.json").string());
    }

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
      const auto start = std::chrono::steady_clock::now();
      const auto batches = mol::make_batches(train.molecules, static_cast<std::size_t>(cfg.batch_size),
                                             cfg.seed * 1000003ULL + static_cast<std::uint64_t>(epoch));
      EpochRecord rec;
      rec.epoch = epoch;
      double abs_err = 0.0;
      std::size_t seen = 0;
      for (const auto& raw : batches) {
        const mol::GraphBatch batch = view_batch(raw, model.view);
        ad::Tape tape;
        ParamBinding params(tape, current.params, true);
        const auto out = model_forward(model, params, batch);
        std::optional<net::LayerTrace> target;
        net::LayerTrace student = out.trace;
        if (dcfg.mode != distill::Mode::None) {
          target = teacher->place(batch, tape);
          student = project_trace(model, params, out.trace);
        }
        const auto terms = distill::compute_terms(out.prediction, student, target, batch, dcfg);
        const auto loss = distill::total_loss(terms, batch.atom_counts, dcfg);
        tape.backward(loss.total);
        adam.step(current.params, params.gradients());

        const auto pred = out.prediction.values();
        for (std::size_t b = 0; b < batch.batch; ++b) abs_err += std::abs(pred[b] - batch.labels[b]);
        seen += batch.batch;
        const double w = static_cast<double>(batch.batch);
        rec.loss.l_2d += loss.breakdown.l_2d * w;
        rec.loss.l_m += loss.breakdown.l_m * w;
        rec.loss.l_a_mean += loss.breakdown.l_a_mean * w;
        rec.loss.weight_mean += loss.breakdown.weight_mean * w;
        rec.loss.total += loss.breakdown.total * w;
        if (!std::isfinite(loss.breakdown.total))
          throw std::runtime_error("non-finite loss in epoch " + std::to_string(epoch));
      }
      const double n = static_cast<double>(seen);
      rec.train_mae = abs_err / n;
      rec.loss.l_2d /= n;
      rec.loss.l_m /= n;
      rec.loss.l_a_mean /= n;
      rec.loss.weight_mean /= n;
      rec.loss.total /= n;
      rec.val_mae = evaluate(current, val.molecules, model.view, cfg.batch_size);
      rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

      if (rec.val_mae < result.record.best_val_mae) {
        result.record.best_val_mae = rec.val_mae;
        result.record.best_epoch = epoch;
        result.best = current;
        if (!cfg.run_dir.empty()) save_checkpoint(current, cfg.run_dir / "best.ckpt");
      }
      result.record.epochs.push_back(rec);
      if (!cfg.run_dir.empty()) {
        std::ofstream os(cfg.run_dir / "record.csv");
        write_record_csv(result.record, os);
      }
      if (on_epoch) on_epoch(rec);
    }
    result.last = current;
    if (!cfg.run_dir.empty()) save_checkpoint(current, cfg.run_dir / "last.ckpt");
    return result;
  }
};

}  // namespace

TrainResult train_supervised(const TrainConfig& cfg, const mol::Dataset& train,
                             const mol::Dataset& val, const EpochCallback& on_epoch) {
  cfg.validate();
  if (cfg.model.view == enc::View::ThreeD) {
    require_geometry(train.molecules, "train");
    require_geometry(val.molecules, "validation");
  }
  return Loop{cfg, train, val, nullptr, on_epoch}.run();
}

TrainResult train_teacher(const TrainConfig& cfg, const mol::Dataset& train,
                          const mol::Dataset& val, const EpochCallback& on_epoch) {
  TrainConfig c = cfg;
  c.model.view = enc::View::ThreeD;
  c.distill.mode = distill::Mode::None;
  return train_supervised(c, train, val, on_epoch);
}

TrainResult distill_student(const TrainConfig& cfg, const Checkpoint& teacher,
                            const mol::Dataset& train, const mol::Dataset& val,
                            const EpochCallback& on_epoch) {
  TrainConfig c = cfg;
  c.model.view = enc::View::TwoD;
  c.validate();
  if (teacher.model.view != enc::View::ThreeD)
    throw std::invalid_argument("distill: teacher checkpoint is not a 3D model");
  const int student_width = c.model.projection_width > 0 ? c.model.projection_width : c.model.width;
  if (c.distill.mode != distill::Mode::None) {
    if (student_width != teacher.model.width)
      throw std::invalid_argument("distill: student trace width " + std::to_string(student_width) +
                                  " does not match teacher width " +
                                  std::to_string(teacher.model.width) + " (set a projection)");
    if (c.model.layers != teacher.model.layers)
      throw std::invalid_argument("distill: student has " + std::to_string(c.model.layers) +
                                  " layers, teacher has " + std::to_string(teacher.model.layers));
    require_geometry(train.molecules, "distill");
  }
  if (c.distill.mode == distill::Mode::None) return Loop{c, train, val, nullptr, on_epoch}.run();
  const TeacherCache cache = build_teacher_cache(teacher, train.molecules);
  return Loop{c, train, val, &cache, on_epoch}.run();
}

double evaluate(const Checkpoint& ckpt, std::span<const mol::Molecule> molecules, enc::View view,
                int batch_size) {
  if (molecules.empty()) throw std::invalid_argument("evaluate: empty dataset");
  if (view != ckpt.model.view)
    throw std::invalid_argument(std::string("evaluate: checkpoint is a ") +
                                enc::to_string(ckpt.model.view) + " model, asked for the " +
                                enc::to_string(view) + " view");
  if (view == enc::View::ThreeD) require_geometry(molecules, "evaluate");
  if (batch_size < 1) throw std::invalid_argument("evaluate: batch size must be >= 1");
  double abs_err = 0.0;
  for (const auto& raw : mol::make_batches(molecules, static_cast<std::size_t>(batch_size), std::nullopt)) {
    const mol::GraphBatch batch = view_batch(raw, view);
    ad::Tape tape;
    ParamBinding params(tape, ckpt.params, false);
    const auto pred = model_forward(ckpt.model, params, batch).prediction.values();
    for (std::size_t b = 0; b < batch.batch; ++b) abs_err += std::abs(pred[b] - batch.labels[b]);
  }
  return abs_err / static_cast<double>(molecules.size());
}

}  // namespace ccmd::train
