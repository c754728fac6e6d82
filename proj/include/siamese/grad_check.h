#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

namespace siamese {

using ScalarObjective = std::function<double(std::span<const double>)>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  std::vector<double> numeric;
};

/// Central-difference gradient check.
///
/// Compares `analytic` against (f(p + h e_i) - f(p - h e_i)) / 2h for every
/// coordinate and reports the largest |g_fd - g_an| / max(1, |g_fd|, |g_an|).
/// Requires h in [1e-7, 1e-3]; throws DivergenceError when f is not finite.
GradCheckReport finite_diff_check(const ScalarObjective& f, std::span<const double> p,
                                  std::span<const double> analytic, double h = 1e-5);

// Central-difference gradient alone.
std::vector<double> central_difference(const ScalarObjective& f,
                                       std::span<const double> p, double h);

}  // namespace siamese
