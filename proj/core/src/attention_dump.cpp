// SPDX-License-Identifier: Apache-2.0

#include "ccmd/attention_dump.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

#include "json.hpp"

namespace ccmd::net {

AttentionMap attention_map(const LayerTrace& trace, std::size_t molecule, std::size_t layer,
                           std::size_t head) {
  if (trace.attention.empty())
    throw std::invalid_argument("attention_map: trace has no attention (GIN backbone?)");
  if (layer < 1 || layer > trace.attention.size())
    throw std::out_of_range("attention_map: layer " + std::to_string(layer) + " out of range");
  const ad::Tensor& w = trace.attention[layer - 1];
  const std::size_t B = w.dim(0), H = w.dim(1), T = w.dim(2);
  if (molecule >= B) throw std::out_of_range("attention_map: molecule index out of range");
  if (head >= H) throw std::out_of_range("attention_map: head index out of range");
  AttentionMap m;
  m.size = T;
  const auto v = w.values();
  const auto* src = v.data() + (molecule * H + head) * T * T;
  m.weights.assign(src, src + T * T);
  return m;
}

std::vector<std::filesystem::path> dump_attention(const LayerTrace& trace,
                                                  const std::filesystem::path& dir,
                                                  std::size_t molecule) {
  if (trace.attention.empty())
    throw std::invalid_argument("dump_attention: trace has no attention maps (GIN backbone)");
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> written;
  const std::size_t H = trace.attention.front().dim(1);
  for (std::size_t l = 1; l <= trace.attention.size(); ++l)
    for (std::size_t h = 0; h < H; ++h) {
      const AttentionMap m = attention_map(trace, molecule, l, h);
      auto path = dir / ("layer" + std::to_string(l) + "_head" + std::to_string(h + 1) + ".csv");
      std::ofstream os(path);
      if (!os) throw std::runtime_error("cannot write " + path.string());
      for (std::size_t i = 0; i < m.size; ++i) {
        for (std::size_t j = 0; j < m.size; ++j) {
          if (j) os << ',';
          os << nlohmann::json(m.at(i, j)).dump();
        }
        os << '\n';
      }
      written.push_back(path);
    }
  return written;
}

AttentionMap load_attention_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  AttentionMap m;
  std::string line;
  std::size_t rows = 0;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::size_t cols = 0;
    while (std::getline(ss, cell, ',')) {
      m.weights.push_back(std::stod(cell));
      ++cols;
    }
    if (rows == 0) m.size = cols;
    else if (cols != m.size)
      throw std::runtime_error(path.string() + ": ragged row " + std::to_string(rows + 1));
    ++rows;
  }
  if (rows != m.size) throw std::runtime_error(path.string() + ": matrix is not square");
  return m;
}

}  // namespace ccmd::net
