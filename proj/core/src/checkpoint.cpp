// SPDX-License-Identifier: Apache-2.0

#include "ccmd/checkpoint.hpp"

#include <fstream>
#include <stdexcept>

namespace ccmd {

using nlohmann::json;

json to_json(const Checkpoint& ckpt) {
  json params = json::object();
  for (const auto& [name, p] : ckpt.params) params[name] = json{{"shape", p.shape}, {"values", p.values}};
  return json{{"ccmd_ckpt_version", kCheckpointVersion},
              {"model", to_json(ckpt.model)},
              {"label_mean", ckpt.label_mean},
              {"label_std", ckpt.label_std},
              {"seed", ckpt.seed},
              {"params", params}};
}

Checkpoint checkpoint_from_json(const json& j) {
  if (!j.is_object() || !j.contains("ccmd_ckpt_version"))
    throw std::runtime_error("checkpoint: missing ccmd_ckpt_version");
  const int version = j.at("ccmd_ckpt_version").get<int>();
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  Checkpoint c;
  try {
    c.model = model_config_from_json(j.at("model"));
    c.label_mean = j.at("label_mean").get<double>();
    c.label_std = j.at("label_std").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& [name, p] : j.at("params").items())
      c.params.add(name, p.at("shape").get<ad::Shape>(), p.at("values").get<std::vector<double>>());
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("checkpoint: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw std::runtime_error(std::string("checkpoint: ") + e.what());
  }

  // The stored parameters must be exactly what the stored architecture builds.
  const ParamStore layout = init_model(c.model, 0);
  if (layout.size() != c.params.size())
    throw std::runtime_error("checkpoint: " + std::to_string(c.params.size()) +
                             " parameters, architecture expects " + std::to_string(layout.size()));
  for (const auto& [name, p] : layout) {
    if (!c.params.contains(name)) throw std::runtime_error("checkpoint: missing parameter '" + name + "'");
    if (c.params.at(name).shape != p.shape)
      throw std::runtime_error("checkpoint: parameter '" + name + "' has shape " +
                               ad::to_string(c.params.at(name).shape) + ", expected " +
                               ad::to_string(p.shape));
  }
  return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path.string());
  os << to_json(ckpt).dump() << '\n';
  if (!os) throw std::runtime_error("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::parse_error& e) {
    throw std::runtime_error("checkpoint " + path.string() + ": " + e.what());
  }
  return checkpoint_from_json(j);
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected) {
  Checkpoint c = load_checkpoint(path);
  if (!(c.model == expected))
    throw std::runtime_error("checkpoint " + path.string() + " architecture " +
                             to_json(c.model).dump() + " does not match " + to_json(expected).dump());
  return c;
}

}  // namespace ccmd
