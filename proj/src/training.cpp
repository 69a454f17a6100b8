#include "engram_ar/training.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "engram_ar/parallel.hpp"
#include "engram_ar/rng.hpp"

namespace engram_ar {

// ---------------------------------------------------------------------------
// Parameter accounting

ParamReport count_params(const BackboneConfig& backbone, std::span<const EngramModuleConfig> engram) {
  backbone.validate();
  const std::int64_t d = backbone.hidden;
  const std::int64_t f = backbone.ffn_inner;
  const std::int64_t V = backbone.vocab_size_total();
  const std::int64_t hd = backbone.head_dim();

  ParamReport r;
  const std::int64_t per_layer = 2 * d + 4 * d * d + 2 * hd + 3 * d * f;
  r.backbone_params = 2 * V * d + d + backbone.num_layers * per_layer;
  for (const auto& e : engram) {
    e.validate(backbone.hidden);
    const std::int64_t dm = e.d_mem();
    const std::int64_t tables = static_cast<std::int64_t>(e.banks.size()) * e.num_heads;
    r.memory_params += tables * e.table_size * e.d_head;
    const std::int64_t value = e.value_mlp(backbone.hidden) ? dm * d + d * d : dm * d;
    r.engram_glue_params += dm * d + value + kConvTaps * d + d + 3 * d;
  }
  r.total = r.backbone_params + r.memory_params + r.engram_glue_params;
  r.rho = static_cast<double>(r.backbone_params) / static_cast<double>(r.total);
  return r;
}

std::int64_t solve_table_size(double target_rho, const BackboneConfig& backbone, const std::vector<BankSpec>& banks,
                              int num_heads, int d_head, int engram_layers, std::int64_t max_table_size) {
  if (!(target_rho > 0.0 && target_rho < 1.0))
    throw DomainError("target rho must lie in (0, 1), got " + std::to_string(target_rho));
  if (engram_layers < 1) throw DomainError("solve_table_size needs at least one engram layer");

  auto rho_at = [&](std::int64_t m) {
    EngramModuleConfig e;
    e.banks = banks;
    e.num_heads = num_heads;
    e.d_head = d_head;
    e.table_size = m;
    const std::vector<EngramModuleConfig> mods(static_cast<std::size_t>(engram_layers), e);
    return count_params(backbone, mods).rho;
  };

  if (rho_at(2) <= target_rho) return 2;
  std::int64_t lo = 2;  // rho(lo) > target
  std::int64_t hi = 4;
  while (rho_at(hi) > target_rho) {
    lo = hi;
    if (hi > max_table_size / 2)
      throw DomainError("target rho " + std::to_string(target_rho) + " unreachable below table size " +
                        std::to_string(max_table_size));
    hi *= 2;
  }
  while (hi - lo > 1) {
    const std::int64_t mid = lo + (hi - lo) / 2;
    (rho_at(mid) <= target_rho ? hi : lo) = mid;
  }
  const std::int64_t m = next_prime_at_least(hi);
  if (m > max_table_size)
    throw DomainError("target rho " + std::to_string(target_rho) + " needs a table larger than " +
                      std::to_string(max_table_size));
  return m;
}

// ---------------------------------------------------------------------------
// Optimizer

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("adam eps must be positive");
  if (weight_decay < 0.0) throw ConfigError("weight decay must be non-negative");
  if (!(warmup_fraction >= 0.0 && warmup_fraction <= 1.0)) throw ConfigError("warmup fraction must lie in [0, 1]");
  if (!(class_dropout >= 0.0 && class_dropout <= 1.0)) throw ConfigError("class dropout must lie in [0, 1]");
  if (batch_size < 1) throw ConfigError("batch size must be at least 1");
  if (total_steps < 0) throw ConfigError("total steps must be non-negative");
  if (log_interval < 1) throw ConfigError("log interval must be at least 1");
  if (table_mode != TableMode::learned && table_mode != TableMode::frozen_noise)
    throw ConfigError("training table mode must be learned or frozen-noise");
}

void apply_condition(ModelConfig& model, const TrainConfig& train) {
  for (auto& e : model.engram) {
    e.table_mode = train.table_mode;
    e.banks = banks_for_variant(train.banks_variant);
  }
}

double learning_rate(const TrainConfig& cfg, std::int64_t step) {
  const auto warmup = static_cast<std::int64_t>(std::ceil(cfg.warmup_fraction * static_cast<double>(cfg.total_steps)));
  if (step < warmup) return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
  const std::int64_t decay = std::max<std::int64_t>(1, cfg.total_steps - warmup);
  const double progress = std::min(1.0, static_cast<double>(step - warmup) / static_cast<double>(decay));
  return cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

template <typename Real>
AdamState<Real> AdamState<Real>::zeros(const ParamSet<Real>& params) {
  AdamState s;
  for (const auto& p : params) {
    s.m.emplace_back(p.trainable ? Tensor<Real>(p.value.shape()) : Tensor<Real>());
    s.v.emplace_back(p.trainable ? Tensor<Real>(p.value.shape()) : Tensor<Real>());
  }
  return s;
}

template <typename Real>
void adamw_step(ParamSet<Real>& params, const GradSet<Real>& grads, AdamState<Real>& state, const TrainConfig& cfg,
                double lr) {
  if (grads.size() != params.size() || state.m.size() != params.size())
    throw ShapeError("adamw_step: parameter, gradient and state counts differ");
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!p.trainable) continue;
    const bool decay = p.group == ParamGroup::weight && cfg.weight_decay > 0.0;
    auto& w = p.value.values();
    const auto& g = grads[i].values();
    auto& m = state.m[i].values();
    auto& v = state.v[i].values();
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g[j];
      const double mj = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
      const double vj = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
      m[j] = static_cast<Real>(mj);
      v[j] = static_cast<Real>(vj);
      double wj = w[j];
      if (decay) wj -= lr * cfg.weight_decay * wj;
      wj -= lr * (mj / bc1) / (std::sqrt(vj / bc2) + cfg.adam_eps);
      w[j] = static_cast<Real>(wj);
    }
  }
}

template <typename Real>
double grad_norm(const ParamSet<Real>& params, const GradSet<Real>& grads) {
  double ss = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].trainable) continue;
    for (Real g : grads[i].values()) ss += static_cast<double>(g) * g;
  }
  return std::sqrt(ss);
}

// ---------------------------------------------------------------------------
// Training loop

Checkpoint init_checkpoint(const ModelConfig& model, const TrainConfig& train) {
  train.validate();
  Checkpoint ck;
  ck.model = model;
  ck.train = train;
  const Model<float> m(model);
  ck.model = m.config();
  ck.init_seed = derive_seed(train.seed, "params");
  ck.params = m.init_params(ck.init_seed);
  ck.optimizer = AdamState<float>::zeros(ck.params);
  return ck;
}

namespace {

void check_layout(const std::vector<TokenGrid>& grids, const SequenceLayout& layout, const char* what) {
  for (const auto& g : grids) {
    const SequenceLayout l = g.layout();
    if (l.grid_height != layout.grid_height || l.grid_width != layout.grid_width ||
        l.image_vocab != layout.image_vocab || l.prefix_vocab != layout.prefix_vocab ||
        l.prefix_len != layout.prefix_len)
      throw ConfigError(std::string(what) + " grids do not match the model's sequence layout");
  }
}

}  // namespace

TrainResult train(const std::vector<TokenGrid>& corpus, const std::vector<TokenGrid>& validation, Checkpoint start,
                  const std::function<void(const LossRow&)>& on_log) {
  const TrainConfig& cfg = start.train;
  cfg.validate();
  for (const auto& e : start.model.engram)
    if (e.table_mode != cfg.table_mode)
      throw ConfigError("engram table mode " + std::string(to_string(e.table_mode)) +
                        " disagrees with training condition " + std::string(to_string(cfg.table_mode)));
  const Model<float> model(start.model);
  const SequenceLayout layout = model.layout();
  if (corpus.empty() && cfg.total_steps > 0) throw ConfigError("training corpus is empty");
  check_layout(corpus, layout, "training");
  check_layout(validation, layout, "validation");

  TrainResult result;
  result.checkpoint = std::move(start);
  auto& params = result.checkpoint.params;
  auto& opt = result.checkpoint.optimizer;
  const int threads = resolve_threads(cfg.threads);
  const auto B = static_cast<std::size_t>(cfg.batch_size);
  const TokenId null_token = layout.prefix_token(model.backbone().null_class_id());

  std::vector<GradSet<float>> per_seq(B, GradSet<float>(params));
  std::vector<double> losses(B);
  std::vector<std::vector<TokenId>> batch(B);
  GradSet<float> total(params);

  for (std::int64_t step = opt.step; step < cfg.total_steps; ++step) {
    CounterRng pick(cfg.seed, "batch", {static_cast<std::uint64_t>(step)});
    for (std::size_t b = 0; b < B; ++b) {
      batch[b] = raster_flatten(corpus[pick.below(corpus.size())]);
      if (pick.bernoulli(cfg.class_dropout)) batch[b][0] = null_token;
    }
    parallel_for(B, threads, [&](std::size_t b) {
      per_seq[b].zero();
      Graph<float> g(&params);
      const Var loss = model.loss(g, batch[b]);
      losses[b] = g.value(loss)[0];
      g.backward(loss, per_seq[b]);
    });

    double mean_loss = 0.0;
    for (double l : losses) mean_loss += l;
    mean_loss /= static_cast<double>(B);
    if (!std::isfinite(mean_loss))
      throw NumericError("training diverged at step " + std::to_string(step) + ": loss is " +
                         std::to_string(mean_loss));

    total.zero();
    for (const auto& gs : per_seq) total.accumulate(gs);
    double factor = 1.0 / static_cast<double>(B);
    const double norm = grad_norm(params, total) * factor;
    if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm at step " + std::to_string(step));
    if (cfg.grad_clip > 0.0 && norm > cfg.grad_clip) factor *= cfg.grad_clip / norm;
    for (std::size_t i = 0; i < total.size(); ++i)
      for (auto& x : total[i].values()) x = static_cast<float>(x * factor);

    const double lr = learning_rate(cfg, step);
    adamw_step(params, total, opt, cfg, lr);

    if ((step + 1) % cfg.log_interval == 0 || step + 1 == cfg.total_steps) {
      LossRow row{step + 1, lr, mean_loss, std::nullopt};
      if (!validation.empty()) row.val_ce = evaluate_ce(model, params, validation, {}, threads);
      result.curve.push_back(row);
      if (on_log) on_log(row);
    }
  }
  return result;
}

template <typename Real>
double evaluate_ce(const Model<Real>& model, const ParamSet<Real>& params, std::span<const TokenGrid> grids,
                   const ForwardOptions& opts, int threads) {
  if (grids.empty()) throw DomainError("evaluate_ce: empty evaluation set");
  std::vector<double> ce(grids.size());
  parallel_for(grids.size(), threads, [&](std::size_t i) {
    const auto seq = raster_flatten(grids[i]);
    Graph<Real> g(&params, /*record=*/false);
    ce[i] = static_cast<double>(g.value(model.loss(g, seq, opts))[0]);
  });
  double sum = 0.0;
  for (double c : ce) sum += c;
  return sum / static_cast<double>(ce.size());
}

#define ENGRAM_AR_INSTANTIATE(Real)                                                                                \
  template struct AdamState<Real>;                                                                                 \
  template void adamw_step<Real>(ParamSet<Real>&, const GradSet<Real>&, AdamState<Real>&, const TrainConfig&,      \
                                 double);                                                                          \
  template double grad_norm<Real>(const ParamSet<Real>&, const GradSet<Real>&);                                    \
  template double evaluate_ce<Real>(const Model<Real>&, const ParamSet<Real>&, std::span<const TokenGrid>,         \
                                    const ForwardOptions&, int);

ENGRAM_AR_INSTANTIATE(float)
ENGRAM_AR_INSTANTIATE(double)

}  // namespace engram_ar
