#pragma once

#include <cmath>
#include <functional>
#include <string>

#include "dan/ops.hpp"
#include "dan/tensor.hpp"

namespace dan {

struct GradCheckReport {
  double max_rel_err = 0.0;
  bool pass = false;
  std::int64_t worst_index = -1;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
};

// Central-difference check of reverse-mode gradients for a scalar-valued
// function of one tensor. Meant for 64-bit elements; float inputs lose too
// many digits for the default step.
inline GradCheckReport finite_diff_check(
    const std::function<Tensor<double>(Tape<double>*, const Tensor<double>&)>& f,
    const Tensor<double>& x, double step = 1e-5, double tolerance = 1e-4) {
  Tensor<double> probe = x.clone(true);
  Tape<double> tape;
  Tensor<double> y = f(&tape, probe);
  if (!y.is_scalar())
    throw DimensionError("finite_diff_check: function must be scalar-valued, got " +
                         shape_str(y.shape()));
  backward(tape, y);

  GradCheckReport report;
  Tensor<double> work = x.clone(false);
  for (std::int64_t i = 0; i < x.size(); ++i) {
    double saved = work.data()[i];
    work.data()[i] = saved + step;
    double fp = f(nullptr, work).item();
    work.data()[i] = saved - step;
    double fm = f(nullptr, work).item();
    work.data()[i] = saved;
    double numeric = (fp - fm) / (2.0 * step);
    double analytic = probe.grad()[i];
    double rel = std::abs(analytic - numeric) /
                 std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    if (rel > report.max_rel_err) {
      report.max_rel_err = rel;
      report.worst_index = i;
      report.analytic_at_worst = analytic;
      report.numeric_at_worst = numeric;
    }
  }
  report.pass = report.max_rel_err < tolerance;
  return report;
}

}  // namespace dan
