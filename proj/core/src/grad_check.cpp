// SPDX-License-Identifier: Apache-2.0

#include "ccmd/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace ccmd::ad {

namespace {

double evaluate(const ScalarFn& f, const Shape& shape, const std::vector<double>& x) {
  Tape tape;
  Tensor v = tape.variable(shape, x);
  return f(tape, v).item();
}

}  // namespace

std::string GradCheckResult::describe() const {
  std::ostringstream os;
  if (nan_index) {
    os << "NaN at element " << *nan_index;
  } else {
    os << "max relative error " << max_rel_error << " at element " << worst_index;
  }
  return os.str();
}

GradCheckResult grad_check(const ScalarFn& f, const Shape& shape, const std::vector<double>& x,
                           double h) {
  if (!(h > 0.0)) throw std::invalid_argument("grad_check: step h must be positive");
  if (numel(shape) != x.size()) throw std::invalid_argument("grad_check: shape/value mismatch");

  GradCheckResult result;
  std::vector<double> analytic(x.size(), 0.0);
  {
    Tape tape;
    Tensor v = tape.variable(shape, x);
    Tensor root = f(tape, v);
    if (std::isnan(root.item())) {
      result.nan_index = 0;
      return result;
    }
    tape.backward(root);
    auto g = tape.grad(v);
    if (!g.empty()) std::copy(g.begin(), g.end(), analytic.begin());
  }

  std::vector<double> probe = x;
  double diff_max = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + h;
    const double up = evaluate(f, shape, probe);
    probe[i] = x[i] - h;
    const double down = evaluate(f, shape, probe);
    probe[i] = x[i];
    const double cd = (up - down) / (2.0 * h);
    if (std::isnan(analytic[i]) || std::isnan(cd)) {
      result.nan_index = i;
      return result;
    }
    const double diff = std::fabs(analytic[i] - cd);
    if (diff > diff_max) {
      diff_max = diff;
      result.worst_index = i;
    }
    scale = std::max({scale, std::fabs(analytic[i]), std::fabs(cd)});
  }
  result.max_rel_error = diff_max / std::max(scale, 1e-8);
  return result;
}

}  // namespace ccmd::ad
