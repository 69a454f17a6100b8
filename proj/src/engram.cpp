#include "engram_ar/engram.hpp"

#include <cmath>

#include "engram_ar/kernels.hpp"
#include "engram_ar/rng.hpp"
#include "linalg.hpp"

namespace engram_ar {

void EngramModuleConfig::validate(int hidden) const {
  if (banks.empty()) throw ConfigError("engram module needs at least one bank");
  for (const auto& b : banks) b.validate();
  for (std::size_t i = 0; i < banks.size(); ++i)
    for (std::size_t j = 0; j < i; ++j)
      if (banks[i].bank_id == banks[j].bank_id) throw ConfigError("duplicate bank_id in engram module");
  if (num_heads <= 0 || d_head <= 0) throw ConfigError("engram heads and d_head must be positive");
  if (table_size < 1) throw ConfigError("engram table_size must be at least 1");
  if (gate_clamp && !(*gate_clamp >= 0.0 && *gate_clamp <= 1.0)) throw ConfigError("gate_clamp must lie in [0,1]");
  if (table_mode != TableMode::learned && table_mode != TableMode::frozen_noise)
    throw ConfigError("training-time table mode must be learned or frozen_noise");
  if (hidden <= 0) throw ConfigError("hidden must be positive");
}

namespace {

template <typename Real>
Tensor<Real> trunc_normal(Shape shape, double stddev, std::uint64_t seed, const std::string& name) {
  Tensor<Real> t(std::move(shape));
  CounterRng rng(seed, "init", {fnv1a(name)});
  for (auto& v : t.values()) v = static_cast<Real>(rng.truncated_normal(stddev));
  return t;
}

template <typename Real>
Tensor<Real> std_normal(Shape shape, std::uint64_t seed, const std::string& name) {
  Tensor<Real> t(std::move(shape));
  CounterRng rng(seed, "init", {fnv1a(name)});
  for (auto& v : t.values()) v = static_cast<Real>(rng.normal());
  return t;
}

}  // namespace

template <typename Real>
void init_engram_params(const EngramModuleConfig& cfg, int hidden, ParamSet<Real>& params, std::uint64_t seed) {
  cfg.validate(hidden);
  const auto d = static_cast<std::size_t>(hidden);
  const auto dm = static_cast<std::size_t>(cfg.d_mem());
  const std::string p = cfg.prefix();
  const bool frozen = cfg.table_mode == TableMode::frozen_noise;
  for (const auto& bank : cfg.banks)
    for (int k = 0; k < cfg.num_heads; ++k) {
      const std::string name = cfg.table_name(bank.bank_id, k);
      const Shape shape{static_cast<std::size_t>(cfg.table_size), static_cast<std::size_t>(cfg.d_head)};
      // Learned tables start like any embedding; frozen ones are fixed standard-normal noise.
      params.add(name, frozen ? std_normal<Real>(shape, seed, name) : trunc_normal<Real>(shape, 0.02, seed, name),
                 ParamGroup::table, !frozen);
    }
  params.add(p + ".wk", trunc_normal<Real>({dm, d}, 0.02, seed, p + ".wk"), ParamGroup::weight);
  if (cfg.value_mlp(hidden)) {
    params.add(p + ".wv1", trunc_normal<Real>({dm, d}, 0.02, seed, p + ".wv1"), ParamGroup::weight);
    params.add(p + ".wv2", trunc_normal<Real>({d, d}, 0.02, seed, p + ".wv2"), ParamGroup::weight);
  } else {
    params.add(p + ".wv", trunc_normal<Real>({dm, d}, 0.02, seed, p + ".wv"), ParamGroup::weight);
  }
  params.add(p + ".norm_h", Tensor<Real>({d}, Real{1}), ParamGroup::norm);
  params.add(p + ".norm_k", Tensor<Real>({d}, Real{1}), ParamGroup::norm);
  params.add(p + ".norm_conv", Tensor<Real>({d}, Real{1}), ParamGroup::norm);
  params.add(p + ".conv", Tensor<Real>({d, static_cast<std::size_t>(kConvTaps)}, Real{0}), ParamGroup::weight);
  params.add(p + ".layerscale", Tensor<Real>({d}, static_cast<Real>(cfg.layerscale_init)), ParamGroup::layerscale);
}

template <typename Real>
EngramVars bind_engram(Graph<Real>& g, const EngramModuleConfig& cfg, int hidden) {
  EngramVars v;
  const std::string p = cfg.prefix();
  for (const auto& bank : cfg.banks)
    for (int k = 0; k < cfg.num_heads; ++k) v.tables.push_back(g.param(cfg.table_name(bank.bank_id, k)));
  v.w_k = g.param(p + ".wk");
  if (cfg.value_mlp(hidden)) {
    v.w_v1 = g.param(p + ".wv1");
    v.w_v2 = g.param(p + ".wv2");
  } else {
    v.w_v = g.param(p + ".wv");
  }
  v.norm_h = g.param(p + ".norm_h");
  v.norm_k = g.param(p + ".norm_k");
  v.norm_conv = g.param(p + ".norm_conv");
  v.conv = g.param(p + ".conv");
  v.layerscale = g.param(p + ".layerscale");
  return v;
}

template <typename Real>
Var gather_memory(Graph<Real>& g, const EngramVars& vars, const std::vector<std::vector<std::int64_t>>& buckets) {
  std::vector<Var> parts;
  parts.reserve(vars.tables.size());
  std::vector<std::int64_t> column(buckets.size());
  for (std::size_t t = 0; t < vars.tables.size(); ++t) {
    for (std::size_t i = 0; i < buckets.size(); ++i) column[i] = buckets[i][t];
    parts.push_back(embedding_gather(g, vars.tables[t], std::span<const std::int64_t>(column)));
  }
  return concat_cols(g, std::span<const Var>(parts));
}

template <typename Real>
Var engram_gate(Graph<Real>& g, Var h, Var e, const EngramVars& vars) {
  const auto d = g.value(h).cols();
  const Var hn = rms_norm(g, h, vars.norm_h);
  const Var kn = rms_norm(g, matmul(g, e, vars.w_k), vars.norm_k);
  const Var logit = scale(g, sum_cols(g, mul(g, hn, kn)), 1.0 / std::sqrt(static_cast<double>(d)));
  return sigmoid(g, logit);
}

template <typename Real>
Var engram_value(Graph<Real>& g, Var e, const EngramVars& vars) {
  if (vars.w_v.valid()) return matmul(g, e, vars.w_v);
  return matmul(g, silu(g, matmul(g, e, vars.w_v1)), vars.w_v2);
}

template <typename Real>
Var engram_fuse(Graph<Real>& g, Var h, Var e, const EngramVars& vars, std::optional<double> clamp) {
  const auto& H = g.value(h);
  const auto& E = g.value(e);
  if (H.rows() != E.rows())
    throw ShapeError("engram_fuse: hidden " + shape_string(H.shape()) + " vs memory " + shape_string(E.shape()));
  if (E.cols() != g.value(vars.w_k).rows())
    throw ShapeError("engram_fuse: memory " + shape_string(E.shape()) + " vs W_K " + shape_string(g.shape(vars.w_k)));
  const Var gate = clamp ? g.constant(Tensor<Real>::matrix(H.rows(), 1, static_cast<Real>(*clamp)))
                         : engram_gate(g, h, e, vars);
  const Var ve = engram_value(g, e, vars);
  const Var gated = mul(g, ve, gate);
  const Var refined = silu(g, depthwise_causal_conv1d(g, rms_norm(g, gated, vars.norm_conv), vars.conv));
  const Var v = add(g, ve, refined);
  return add(g, h, mul(g, mul(g, v, vars.layerscale), gate));
}

template <typename Real>
void engram_fuse_step(const EngramModuleConfig& cfg, const ParamSet<Real>& params, std::span<Real> h,
                      std::span<const Real> e, std::optional<double> clamp, EngramStepState<Real>& state) {
  const std::size_t d = h.size();
  const std::string p = cfg.prefix();
  if (e.size() != static_cast<std::size_t>(cfg.d_mem()))
    throw ShapeError("engram_fuse_step: memory width " + std::to_string(e.size()) + " != " + std::to_string(cfg.d_mem()));

  Real gate;
  if (clamp) {
    gate = static_cast<Real>(*clamp);
  } else {
    std::vector<Real> hn(d), kn(d);
    kernels::rms_norm_row<Real>(h, params.at(p + ".norm_h").value.span(), hn);
    const auto k = detail::vec_mat<Real>(e, params.at(p + ".wk").value);
    kernels::rms_norm_row<Real>(k, params.at(p + ".norm_k").value.span(), kn);
    Real dot{0};
    for (std::size_t i = 0; i < d; ++i) dot += hn[i] * kn[i];
    gate = kernels::sigmoid(dot * static_cast<Real>(1.0 / std::sqrt(static_cast<double>(d))));
  }

  std::vector<Real> ve;
  if (cfg.value_mlp(static_cast<int>(d))) {
    auto mid = detail::vec_mat<Real>(e, params.at(p + ".wv1").value);
    for (auto& x : mid) x = kernels::silu(x);
    ve = detail::vec_mat<Real>(mid, params.at(p + ".wv2").value);
  } else {
    ve = detail::vec_mat<Real>(e, params.at(p + ".wv").value);
  }

  std::vector<Real> gated(d);
  for (std::size_t i = 0; i < d; ++i) gated[i] = ve[i] * gate;
  state.gated.push_back(gated);

  // Normalized window, oldest first; missing history is zero padding.
  const auto& norm_conv = params.at(p + ".norm_conv").value;
  const std::size_t avail = state.gated.size();
  std::vector<std::vector<Real>> window(avail, std::vector<Real>(d));
  for (std::size_t j = 0; j < avail; ++j) kernels::rms_norm_row<Real>(state.gated[j], norm_conv.span(), window[j]);
  const std::size_t taps = kConvTaps;
  auto history = [&](std::size_t j) -> std::span<const Real> {
    // tap j reads time t - (taps-1) + j; the newest row is window.back().
    const std::size_t back = taps - 1 - j;
    if (back >= avail) return {};
    return window[avail - 1 - back];
  };
  std::vector<Real> conv_out(d);
  kernels::causal_conv_row<Real>(params.at(p + ".conv").value.span(), d, taps, history, conv_out);

  while (state.gated.size() > state.history) state.gated.pop_front();

  const auto& ls = params.at(p + ".layerscale").value;
  for (std::size_t i = 0; i < d; ++i) {
    const Real v = ve[i] + kernels::silu(conv_out[i]);
    h[i] = h[i] + (v * ls[i]) * gate;
  }
}

#define ENGRAM_AR_INSTANTIATE(Real)                                                                          \
  template void init_engram_params<Real>(const EngramModuleConfig&, int, ParamSet<Real>&, std::uint64_t);    \
  template EngramVars bind_engram<Real>(Graph<Real>&, const EngramModuleConfig&, int);                       \
  template Var gather_memory<Real>(Graph<Real>&, const EngramVars&, const std::vector<std::vector<std::int64_t>>&); \
  template Var engram_gate<Real>(Graph<Real>&, Var, Var, const EngramVars&);                                 \
  template Var engram_value<Real>(Graph<Real>&, Var, const EngramVars&);                                     \
  template Var engram_fuse<Real>(Graph<Real>&, Var, Var, const EngramVars&, std::optional<double>);          \
  template void engram_fuse_step<Real>(const EngramModuleConfig&, const ParamSet<Real>&, std::span<Real>,    \
                                       std::span<const Real>, std::optional<double>, EngramStepState<Real>&);

ENGRAM_AR_INSTANTIATE(float)
ENGRAM_AR_INSTANTIATE(double)

}  // namespace engram_ar
