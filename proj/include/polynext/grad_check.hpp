#pragma once

#include <functional>

#include "polynext/autodiff.hpp"

namespace polynext {

struct GradCheckReport {
  double max_rel_error = 0.0;
  int64_t worst_index = -1;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  bool ok(double tol) const { return max_rel_error < tol; }
};

/// Compares the tape gradient of a scalar-valued function against central
/// finite differences, componentwise over `x`. The function must read `x`
/// through tape.param(x) so the analytic gradient can be retrieved; `x` is
/// perturbed in place and restored. Relative error uses a
/// max(|analytic|, |numeric|, 1e-8) denominator.
GradCheckReport grad_check(const std::function<Var(Tape&)>& f, Tensor& x, double step = 1e-5);

}  // namespace polynext
