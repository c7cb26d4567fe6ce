// SPDX-License-Identifier: Apache-2.0
//
// Training loops: supervised teacher/baseline training, distillation from a
// frozen teacher, evaluation, and the run directory they write to.

#pragma once

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "ccmd/adam.hpp"
#include "ccmd/checkpoint.hpp"
#include "ccmd/distill.hpp"
#include "ccmd/model.hpp"
#include "ccmd/molecule.hpp"
#include "json.hpp"

namespace ccmd::train {

struct EpochRecord {
  int epoch = 0;  // 1-based
  double train_mae = 0.0;
  double val_mae = 0.0;
  distill::LossBreakdown loss;  // batch means over the epoch
  double seconds = 0.0;
};

struct TrainingRecord {
  std::vector<EpochRecord> epochs;
  double best_val_mae = 0.0;
  int best_epoch = 0;
};

struct TrainConfig {
  AdamConfig adam;
  int batch_size = 64;
  int epochs = 10;
  std::uint64_t seed = 0;
  ModelConfig model;
  distill::DistillConfig distill;
  std::string train_path;
  std::string val_path;
  std::string teacher_path;
  /// When non-empty, config.json, record.csv, best.ckpt and last.ckpt go here.
  std::filesystem::path run_dir;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& cfg);
/// Missing keys keep their defaults; `base` supplies them.
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

struct TrainResult {
  Checkpoint best;
  Checkpoint last;
  TrainingRecord record;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Supervised L1 training of `cfg.model` on its own view. A 3D model needs
/// coordinates on every molecule.
TrainResult train_supervised(const TrainConfig& cfg, const mol::Dataset& train,
                             const mol::Dataset& val, const EpochCallback& on_epoch = {});

/// Supervised training of the 3D teacher (the view is forced to 3D).
TrainResult train_teacher(const TrainConfig& cfg, const mol::Dataset& train,
                          const mol::Dataset& val, const EpochCallback& on_epoch = {});

/// Trains a 2D student against the frozen teacher under `cfg.distill`.
TrainResult distill_student(const TrainConfig& cfg, const Checkpoint& teacher,
                            const mol::Dataset& train, const mol::Dataset& val,
                            const EpochCallback& on_epoch = {});

/// Mean |prediction - label| in standardized label units.
double evaluate(const Checkpoint& ckpt, std::span<const mol::Molecule> molecules, enc::View view,
                int batch_size = 64);

void write_record_csv(const TrainingRecord& record, std::ostream& os);

}  // namespace ccmd::train
