#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace echo::nn {

// Scalar objective of a flat parameter vector. When `grad` is non-null the
// callee fills it with the reverse-mode gradient.
using Objective = std::function<double(std::span<const double> x, std::vector<double>* grad)>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t probes = 0;
};

// Compares the reverse-mode gradient with central differences at
// `probe_count` random coordinates. Relative error is
// |a - n| / max(|a|, |n|, floor). Throws NumericError on non-finite output.
GradCheckReport gradient_check(const Objective& f, std::vector<double> x, std::size_t probe_count,
                               std::uint64_t seed, double h = 1e-5, double floor = 1e-6);

}  // namespace echo::nn
