#include "polynext/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace polynext {

GradCheckReport grad_check(const std::function<Var(Tape&)>& f, Tensor& x, double step) {
  check(step > 0.0, "grad_check: step must be positive");

  Tensor analytic(x.shape(), 0.0);
  {
    Tape tape;
    Var loss = f(tape);
    check(tape.value(loss).numel() == 1, "grad_check: function must be scalar-valued");
    check(tape.value(loss).all_finite(), "grad_check: non-finite value in f(x)");
    tape.backward(loss);
    const Tensor* g = tape.grad_for(x);
    if (g) analytic = *g;  // untouched parameters have zero gradient
  }

  auto eval = [&]() {
    Tape tape;
    Var loss = f(tape);
    double v = tape.value(loss)[0];
    check(std::isfinite(v), "grad_check: non-finite value in f(x)");
    return v;
  };

  GradCheckReport report;
  for (int64_t i = 0; i < x.numel(); ++i) {
    double saved = x[i];
    x[i] = saved + step;
    double fp = eval();
    x[i] = saved - step;
    double fm = eval();
    x[i] = saved;
    double numeric = (fp - fm) / (2.0 * step);
    double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
    double rel = std::abs(analytic[i] - numeric) / denom;
    if (rel > report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_index = i;
      report.analytic_at_worst = analytic[i];
      report.numeric_at_worst = numeric;
    }
  }
  return report;
}

}  // namespace polynext
