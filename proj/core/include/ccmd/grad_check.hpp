// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ccmd/autodiff.hpp"

namespace ccmd::ad {

/// Builds a scalar from a variable placed on a fresh tape.
using ScalarFn = std::function<Tensor(Tape&, const Tensor&)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  /// Set when an analytic gradient, a probe value, or the base value is NaN.
  std::optional<std::size_t> nan_index;

  bool ok(double tol) const { return !nan_index && max_rel_error < tol; }
  std::string describe() const;
};

/// Compares the reverse-mode gradient of `f` at `x` against central
/// differences with step `h`. The error is relative in the infinity norm,
/// max_i |analytic_i - cd_i| / max(max_i |analytic_i|, max_i |cd_i|, 1e-8);
/// `worst_index` is the element with the largest absolute difference.
GradCheckResult grad_check(const ScalarFn& f, const Shape& shape, const std::vector<double>& x,
                           double h = 1e-6);

}  // namespace ccmd::ad
