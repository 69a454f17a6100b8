#include "engram_ar/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "engram_ar/rng.hpp"

namespace engram_ar {

namespace {

double evaluate(const ScalarFn& f, const ParamSet<double>& params) {
  Graph<double> g(&params, /*record=*/false);
  const double v = g.value(f(g))[0];
  if (!std::isfinite(v)) throw NumericError("grad_check: non-finite loss");
  return v;
}

}  // namespace

GradCheckResult grad_check(const ScalarFn& f, ParamSet<double>& params, double eps,
                           std::span<const ParamCoordinate> coords) {
  GradSet<double> grads(params);
  {
    Graph<double> g(&params);
    const Var loss = f(g);
    if (!std::isfinite(g.value(loss)[0])) throw NumericError("grad_check: non-finite loss");
    g.backward(loss, grads);
  }
  GradCheckResult result;
  for (const ParamCoordinate& c : coords) {
    double& x = params[c.param].value[c.element];
    const double saved = x;
    x = saved + eps;
    const double up = evaluate(f, params);
    x = saved - eps;
    const double down = evaluate(f, params);
    x = saved;
    const double numeric = (up - down) / (2.0 * eps);
    const double analytic = grads[c.param][c.element];
    if (!std::isfinite(analytic)) throw NumericError("grad_check: non-finite gradient for " + params[c.param].name);
    const double err = std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
    ++result.coordinates;
    if (err >= result.max_rel_error) {
      result.max_rel_error = err;
      result.worst = c;
      result.worst_analytic = analytic;
      result.worst_numeric = numeric;
    }
  }
  return result;
}

std::vector<ParamCoordinate> sample_coordinates(const ParamSet<double>& params, std::size_t per_param,
                                                std::uint64_t seed) {
  std::vector<ParamCoordinate> out;
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (!params[p].trainable) continue;
    const std::size_t n = params[p].value.size();
    if (n <= per_param) {
      for (std::size_t e = 0; e < n; ++e) out.push_back({p, e});
      continue;
    }
    CounterRng rng(seed, "grad-check", {p});
    for (std::size_t i = 0; i < per_param; ++i) out.push_back({p, static_cast<std::size_t>(rng.below(n))});
  }
  return out;
}

}  // namespace engram_ar
