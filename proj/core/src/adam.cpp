// SPDX-License-Identifier: Apache-2.0

#include "ccmd/adam.hpp"

#include <cmath>
#include <stdexcept>

namespace ccmd {

void AdamConfig::validate() const {
  if (!(lr > 0.0)) throw std::invalid_argument("adam: learning rate must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
    throw std::invalid_argument("adam: betas must lie in [0, 1)");
  if (!(eps > 0.0)) throw std::invalid_argument("adam: eps must be > 0");
  if (!(clip_norm >= 0.0)) throw std::invalid_argument("adam: clip norm must be >= 0");
}

Adam::Adam(AdamConfig cfg) : cfg_(cfg) { cfg_.validate(); }

void Adam::step(ParamStore& params, const GradMap& grads) {
  double scale = 1.0;
  if (cfg_.clip_norm > 0.0) {
    double sq = 0.0;
    for (const auto& [name, g] : grads)
      for (double x : g) sq += x * x;
    const double norm = std::sqrt(sq);
    if (norm > cfg_.clip_norm) scale = cfg_.clip_norm / norm;
  }

  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (const auto& [name, g] : grads) {
    Param& p = params.at(name);
    if (g.size() != p.values.size())
      throw std::invalid_argument("adam: gradient for '" + name + "' has " +
                                  std::to_string(g.size()) + " values, parameter has " +
                                  std::to_string(p.values.size()));
    auto& m = m_[name];
    auto& v = v_[name];
    if (m.empty()) {
      m.assign(g.size(), 0.0);
      v.assign(g.size(), 0.0);
    }
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double gi = g[i] * scale;
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
      p.values[i] -= cfg_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps);
    }
  }
}

}  // namespace ccmd
