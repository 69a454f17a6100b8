#include "engram_ar/inference.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <string>

#include "engram_ar/kernels.hpp"
#include "engram_ar/rng.hpp"
#include "linalg.hpp"

namespace engram_ar {

void SamplerConfig::validate() const {
  if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
  if (top_k && *top_k < 1) throw ConfigError("top_k must be at least 1");
  if (!(cfg_max >= 1.0)) throw ConfigError("cfg_max must be at least 1");
  if (!(cfg_alpha > 0.0)) throw ConfigError("cfg_alpha must be positive");
  if (gate_clamp && !(*gate_clamp >= 0.0 && *gate_clamp <= 1.0)) throw ConfigError("gate_clamp must lie in [0,1]");
}

double cfg_schedule(std::int64_t t, std::int64_t total, double cfg_max, double alpha) {
  if (total < 2) return cfg_max;
  if (t < 0 || t >= total) throw DomainError("cfg_schedule: step " + std::to_string(t) + " outside [0, " +
                                             std::to_string(total) + ")");
  const double phase = 0.5 * (1.0 - std::cos(std::numbers::pi * static_cast<double>(t) / static_cast<double>(total - 1)));
  return 1.0 + (cfg_max - 1.0) * std::pow(phase, alpha);
}

template <typename Real>
Decoder<Real>::Decoder(const Model<Real>& model, const ParamSet<Real>& params, ForwardOptions opts)
    : model_(model), params_(params), opts_(opts) {
  cache_.resize(static_cast<std::size_t>(model.backbone().num_layers));
  engram_state_.resize(model.config().engram.size());
}

template <typename Real>
std::vector<Real> Decoder<Real>::step(TokenId token) {
  const auto& b = model_.backbone();
  const SequenceLayout& layout = model_.layout();
  const int t = static_cast<int>(tokens_.size());
  if (t >= layout.sequence_length())
    throw DomainError("decoder overflow: capacity is " + std::to_string(layout.sequence_length()) + " positions");
  if (token < 0 || token >= layout.sentinel()) throw DomainError("decoder: token id " + std::to_string(token) + " not a valid input");
  tokens_.push_back(token);

  const auto d = static_cast<std::size_t>(b.hidden);
  const auto hd = static_cast<std::size_t>(b.head_dim());
  const auto heads = static_cast<std::size_t>(b.num_heads);
  std::vector<Real> x(params_.at("embed.tokens").value.row(static_cast<std::size_t>(token)).begin(),
                      params_.at("embed.tokens").value.row(static_cast<std::size_t>(token)).end());
  std::vector<Real> a(d), q, k, v, o(d), scratch(static_cast<std::size_t>(t) + 1);
  const auto cos_a = model_.rope().cos.row(static_cast<std::size_t>(t));
  const auto sin_a = model_.rope().sin.row(static_cast<std::size_t>(t));

  std::span<const TokenId> context = tokens_;
  if (!opts_.hash_context.empty()) context = opts_.hash_context;

  std::size_t engram_index = 0;
  for (int l = 0; l < b.num_layers; ++l) {
    const std::string L = "layer" + std::to_string(l);
    if (const EngramModuleConfig* ecfg = model_.config().engram_at(l)) {
      if (!opts_.bypass_engram && layout.is_image_position(t)) {
        const int cell = t - layout.prefix_len;
        const auto buckets = bucket_indices(context, layout, cell / layout.grid_width, cell % layout.grid_width,
                                            model_.hashes(engram_index), opts_.collapse_buckets);
        std::vector<Real> e;
        e.reserve(static_cast<std::size_t>(ecfg->d_mem()));
        std::size_t ti = 0;
        for (const auto& bank : ecfg->banks)
          for (int h = 0; h < ecfg->num_heads; ++h) {
            const auto row = params_.at(ecfg->table_name(bank.bank_id, h)).value.row(static_cast<std::size_t>(buckets[ti++]));
            e.insert(e.end(), row.begin(), row.end());
          }
        const auto clamp = opts_.gate_clamp ? opts_.gate_clamp : ecfg->gate_clamp;
        engram_fuse_step<Real>(*ecfg, params_, x, e, clamp, engram_state_[engram_index]);
      }
      ++engram_index;
    }

    auto& cache = cache_[static_cast<std::size_t>(l)];
    kernels::rms_norm_row<Real>(x, params_.at(L + ".attn.norm").value.span(), a);
    q = detail::vec_mat<Real>(a, params_.at(L + ".attn.wq").value);
    k = detail::vec_mat<Real>(a, params_.at(L + ".attn.wk").value);
    v = detail::vec_mat<Real>(a, params_.at(L + ".attn.wv").value);
    kernels::rms_norm_row<Real>(q, params_.at(L + ".attn.q_norm").value.span(), q);
    kernels::rms_norm_row<Real>(k, params_.at(L + ".attn.k_norm").value.span(), k);
    kernels::rotary_row<Real>(q, hd, cos_a, sin_a);
    kernels::rotary_row<Real>(k, hd, cos_a, sin_a);
    cache.keys.insert(cache.keys.end(), k.begin(), k.end());
    cache.values.insert(cache.values.end(), v.begin(), v.end());
    kernels::attend_row<Real>(q, cache.keys.data(), cache.values.data(), static_cast<std::size_t>(t) + 1, d, heads, o,
                              scratch);
    const auto proj = detail::vec_mat<Real>(o, params_.at(L + ".attn.wo").value);
    for (std::size_t i = 0; i < d; ++i) x[i] += proj[i];

    kernels::rms_norm_row<Real>(x, params_.at(L + ".ffn.norm").value.span(), a);
    auto gate = detail::vec_mat<Real>(a, params_.at(L + ".ffn.w1").value);
    const auto up = detail::vec_mat<Real>(a, params_.at(L + ".ffn.w3").value);
    for (std::size_t i = 0; i < gate.size(); ++i) gate[i] = kernels::silu(gate[i]) * up[i];
    const auto down = detail::vec_mat<Real>(gate, params_.at(L + ".ffn.w2").value);
    for (std::size_t i = 0; i < d; ++i) x[i] += down[i];
  }
  kernels::rms_norm_row<Real>(x, params_.at("final_norm").value.span(), a);
  return detail::vec_mat<Real>(a, params_.at("head.out").value);
}

template <typename Real>
TokenGrid sample(const Model<Real>& model, const ParamSet<Real>& params, int class_id, const SamplerConfig& sampler,
                 std::int64_t sample_index) {
  sampler.validate();
  const auto& b = model.backbone();
  const SequenceLayout& layout = model.layout();
  if (class_id < 0 || class_id >= b.num_classes)
    throw DomainError("sample: class id " + std::to_string(class_id) + " outside [0, " + std::to_string(b.num_classes) + ")");

  ForwardOptions opts;
  opts.gate_clamp = sampler.gate_clamp;
  Decoder<Real> cond(model, params, opts);
  Decoder<Real> uncond(model, params, opts);
  const bool guided = sampler.cfg_max != 1.0;

  std::vector<Real> l_cond, l_null;
  for (TokenId p : b.prefix_for_class(class_id)) l_cond = cond.step(layout.prefix_token(p));
  if (guided)
    for (TokenId p : b.prefix_for_class(b.null_class_id())) l_null = uncond.step(layout.prefix_token(p));

  TokenGrid grid;
  grid.height = layout.grid_height;
  grid.width = layout.grid_width;
  grid.vocab_size = layout.image_vocab;
  grid.prefix_vocab = layout.prefix_vocab;
  grid.class_id = class_id;
  grid.prefix = b.prefix_for_class(class_id);

  const auto V = static_cast<std::size_t>(layout.image_vocab);
  const std::int64_t n = layout.image_tokens();
  CounterRng rng(sampler.seed, "sample", {static_cast<std::uint64_t>(class_id), static_cast<std::uint64_t>(sample_index)});
  std::vector<double> logits(V);
  std::vector<std::size_t> order(V);
  for (std::int64_t t = 0; t < n; ++t) {
    const double s = guided ? cfg_schedule(t, n, sampler.cfg_max, sampler.cfg_alpha) : 1.0;
    for (std::size_t i = 0; i < V; ++i)
      logits[i] = s == 1.0 ? static_cast<double>(l_cond[i])
                           : static_cast<double>(l_null[i]) + s * (static_cast<double>(l_cond[i]) - l_null[i]);
    for (auto& l : logits) l /= sampler.temperature;

    std::size_t keep = V;
    std::iota(order.begin(), order.end(), std::size_t{0});
    if (sampler.top_k && static_cast<std::size_t>(*sampler.top_k) < V) {
      keep = static_cast<std::size_t>(*sampler.top_k);
      std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(),
                        [&](std::size_t x, std::size_t y) { return logits[x] > logits[y] || (logits[x] == logits[y] && x < y); });
      std::sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep));
    }
    double mx = -INFINITY;
    for (std::size_t j = 0; j < keep; ++j) mx = std::max(mx, logits[order[j]]);
    double total = 0.0;
    for (std::size_t j = 0; j < keep; ++j) total += std::exp(logits[order[j]] - mx);
    double u = rng.uniform() * total;
    std::size_t chosen = order[keep - 1];
    for (std::size_t j = 0; j < keep; ++j) {
      u -= std::exp(logits[order[j]] - mx);
      if (u < 0.0) {
        chosen = order[j];
        break;
      }
    }
    const auto token = static_cast<TokenId>(chosen);
    grid.cells.push_back(token);
    if (t + 1 < n) {
      l_cond = cond.step(token);
      if (guided) l_null = uncond.step(token);
    }
  }
  return grid;
}

template class Decoder<float>;
template class Decoder<double>;
template TokenGrid sample<float>(const Model<float>&, const ParamSet<float>&, int, const SamplerConfig&, std::int64_t);
template TokenGrid sample<double>(const Model<double>&, const ParamSet<double>&, int, const SamplerConfig&,
                                  std::int64_t);

}  // namespace engram_ar
