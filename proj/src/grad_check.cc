#include "siamese/grad_check.h"

#include <algorithm>
#include <cmath>
#include <string>

#include "siamese/errors.h"

namespace siamese {

std::vector<double> central_difference(const ScalarObjective& f,
                                       std::span<const double> p, double h) {
  std::vector<double> point(p.begin(), p.end());
  std::vector<double> grad(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double original = point[i];
    point[i] = original + h;
    const double plus = f(point);
    point[i] = original - h;
    const double minus = f(point);
    point[i] = original;
    if (!std::isfinite(plus) || !std::isfinite(minus)) {
      throw DivergenceError("objective is not finite near coordinate " + std::to_string(i),
                            i);
    }
    grad[i] = (plus - minus) / (2.0 * h);
  }
  return grad;
}

GradCheckReport finite_diff_check(const ScalarObjective& f, std::span<const double> p,
                                  std::span<const double> analytic, double h) {
  if (!(h >= 1e-7 && h <= 1e-3)) {
    throw ContractError("finite difference step must lie in [1e-7, 1e-3]");
  }
  if (analytic.size() != p.size()) {
    throw ContractError("analytic gradient length differs from the point");
  }
  GradCheckReport report;
  report.numeric = central_difference(f, p, h);
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double fd = report.numeric[i];
    const double an = analytic[i];
    const double rel =
        std::abs(fd - an) / std::max({1.0, std::abs(fd), std::abs(an)});
    if (!(rel <= report.max_rel_error)) {
      report.max_rel_error = rel;
      report.worst_index = i;
    }
  }
  return report;
}

}  // namespace siamese
