#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "engram_ar/autodiff.hpp"

namespace engram_ar {

struct ParamCoordinate {
  std::size_t param = 0;
  std::size_t element = 0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  ParamCoordinate worst;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Builds a scalar loss on a fresh graph.
using ScalarFn = std::function<Var(Graph<double>&)>;

/// Compares reverse-mode gradients with central differences
/// (f(x+eps) - f(x-eps)) / 2eps at the given coordinates. The error per
/// coordinate is |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|).
/// Throws NumericError on non-finite losses or gradients.
GradCheckResult grad_check(const ScalarFn& f, ParamSet<double>& params, double eps,
                           std::span<const ParamCoordinate> coords);

/// Up to `per_param` seeded coordinates from every trainable parameter.
std::vector<ParamCoordinate> sample_coordinates(const ParamSet<double>& params, std::size_t per_param,
                                                std::uint64_t seed);

}  // namespace engram_ar
