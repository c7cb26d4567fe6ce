// SPDX-License-Identifier: Apache-2.0
//
// JSON checkpoints. Values are written in shortest round-trip form, so a
// save/load cycle reproduces every double bit for bit.

#pragma once

#include <cstdint>
#include <filesystem>

#include "ccmd/model.hpp"
#include "ccmd/params.hpp"
#include "json.hpp"

namespace ccmd {

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig model;
  ParamStore params;
  double label_mean = 0.0;
  double label_std = 1.0;
  std::uint64_t seed = 0;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

nlohmann::json to_json(const Checkpoint& ckpt);
Checkpoint checkpoint_from_json(const nlohmann::json& j);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// Loads and rejects a checkpoint whose architecture differs from `expected`.
Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected);

}  // namespace ccmd
