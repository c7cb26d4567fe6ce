// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "ccmd/params.hpp"

namespace ccmd {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Global gradient-norm clip; 0 disables it.
  double clip_norm = 0.0;

  void validate() const;
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg);

  /// One bias-corrected update of every parameter that has a gradient entry.
  void step(ParamStore& params, const GradMap& grads);
  std::size_t steps() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  AdamConfig cfg_;
  std::size_t t_ = 0;
  std::map<std::string, std::vector<double>> m_, v_;
};

}  // namespace ccmd
