#include "echo/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "echo/common.hpp"

namespace echo::nn {

GradCheckReport gradient_check(const Objective& f, std::vector<double> x, std::size_t probe_count,
                               std::uint64_t seed, double h, double floor) {
  if (x.empty()) throw ValidationError("gradient_check: empty parameter vector");
  std::vector<double> analytic(x.size(), 0.0);
  const double f0 = f(x, &analytic);
  if (!std::isfinite(f0)) throw NumericError("gradient_check: objective is not finite");

  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  probe_count = std::min(probe_count, x.size());

  GradCheckReport report;
  report.probes = probe_count;
  for (std::size_t p = 0; p < probe_count; ++p) {
    const std::size_t i = order[p];
    const double saved = x[i];
    x[i] = saved + h;
    const double fp = f(x, nullptr);
    x[i] = saved - h;
    const double fm = f(x, nullptr);
    x[i] = saved;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NumericError("gradient_check: objective is not finite at a probe");
    const double numeric = (fp - fm) / (2.0 * h);
    const double a = analytic[i];
    const double rel =
        std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
    if (rel >= report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_index = i;
      report.worst_analytic = a;
      report.worst_numeric = numeric;
    }
  }
  return report;
}

}  // namespace echo::nn
