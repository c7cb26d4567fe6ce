// SPDX-License-Identifier: Apache-2.0

#include "ccmd/dataset_io.hpp"

#include <fstream>
#include "json.hpp"

namespace ccmd::mol {

using nlohmann::json;

namespace {

json molecule_to_json(const Molecule& m) {
  json j = json::object();
  j["atoms"] = m.atoms;
  json bonds = json::array();
  for (const auto& b : m.bonds) bonds.push_back({b.i, b.j, b.type});
  j["bonds"] = std::move(bonds);
  if (m.coords) {
    json c = json::array();
    for (const auto& p : *m.coords) c.push_back({p[0], p[1], p[2]});
    j["coords"] = std::move(c);
  }
  j["label"] = m.label;
  return j;
}

Molecule molecule_from_json(const json& j, std::size_t line) {
  if (!j.is_object()) throw DatasetFormatError(line, "expected a JSON object");
  for (const char* key : {"atoms", "bonds", "label"})
    if (!j.contains(key)) throw DatasetFormatError(line, std::string("missing key '") + key + "'");
  Molecule m;
  try {
    m.atoms = j.at("atoms").get<std::vector<int>>();
    for (const auto& b : j.at("bonds")) {
      if (!b.is_array() || b.size() != 3)
        throw DatasetFormatError(line, "bond entries must be [i, j, type]");
      m.bonds.push_back({b[0].get<int>(), b[1].get<int>(), b[2].get<int>()});
    }
    if (j.contains("coords")) {
      std::vector<Vec3> c;
      for (const auto& p : j.at("coords")) {
        if (!p.is_array() || p.size() != 3)
          throw DatasetFormatError(line, "coords entries must be [x, y, z]");
        c.push_back({p[0].get<double>(), p[1].get<double>(), p[2].get<double>()});
      }
      m.coords = std::move(c);
    }
    m.label = j.at("label").get<double>();
  } catch (const json::exception& e) {
    throw DatasetFormatError(line, e.what());
  }
  try {
    validate(m);
  } catch (const std::invalid_argument& e) {
    throw DatasetFormatError(line, e.what());
  }
  return m;
}

}  // namespace

void write_jsonl(const Dataset& ds, std::ostream& os) {
  // Header keys are written in a fixed order so the version key comes first.
  os << "{\"ccmd_dataset_version\": " << kDatasetVersion
     << ", \"count\": " << ds.molecules.size()
     << ", \"seed\": " << json(ds.seed).dump()
     << ", \"label_mean\": " << json(ds.label_mean).dump()
     << ", \"label_std\": " << json(ds.label_std).dump() << "}\n";
  for (const auto& m : ds.molecules) os << molecule_to_json(m).dump() << '\n';
}

Dataset read_jsonl(std::istream& is) {
  Dataset ds;
  std::string text;
  std::size_t line = 0;
  bool have_header = false;
  while (std::getline(is, text)) {
    ++line;
    if (text.empty()) continue;
    json j;
    try {
      j = json::parse(text);
    } catch (const json::parse_error& e) {
      throw DatasetFormatError(line, std::string("malformed JSON: ") + e.what());
    }
    if (!have_header) {
      if (!j.is_object() || !j.contains("ccmd_dataset_version"))
        throw DatasetFormatError(line, "missing dataset header");
      const auto version = j.at("ccmd_dataset_version");
      if (!version.is_number_integer() || version.get<int>() != kDatasetVersion)
        throw DatasetFormatError(line, "unsupported dataset version " + version.dump());
      try {
        ds.label_mean = j.value("label_mean", 0.0);
        ds.label_std = j.value("label_std", 1.0);
        ds.seed = j.value("seed", std::uint64_t{0});
      } catch (const json::exception& e) {
        throw DatasetFormatError(line, e.what());
      }
      have_header = true;
      continue;
    }
    ds.molecules.push_back(molecule_from_json(j, line));
  }
  if (!have_header) throw DatasetFormatError(line, "empty file: missing dataset header");
  return ds;
}

void save_jsonl(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_jsonl(ds, os);
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

Dataset load_jsonl(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  return read_jsonl(is);
}

}  // namespace ccmd::mol
