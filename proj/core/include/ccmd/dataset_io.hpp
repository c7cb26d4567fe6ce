// SPDX-License-Identifier: Apache-2.0
//
// JSONL persistence. The first line is a header object starting with
// {"ccmd_dataset_version": 1, ...}; every further line holds one molecule:
//   {"atoms": [...], "bonds": [[i, j, type], ...], "coords": [[x, y, z], ...], "label": y}
// `coords` is optional. Labels are stored standardised; the header carries
// the standardisation constants and the generator seed.

#pragma once

#include <filesystem>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

#include "ccmd/molecule.hpp"

namespace ccmd::mol {

inline constexpr int kDatasetVersion = 1;

class DatasetFormatError : public std::runtime_error {
 public:
  DatasetFormatError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

void write_jsonl(const Dataset& ds, std::ostream& os);
Dataset read_jsonl(std::istream& is);

void save_jsonl(const Dataset& ds, const std::filesystem::path& path);
Dataset load_jsonl(const std::filesystem::path& path);

}  // namespace ccmd::mol
