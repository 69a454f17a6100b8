#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "engram_ar/model.hpp"
#include "engram_ar/tokens.hpp"

namespace engram_ar {

// ---------------------------------------------------------------------------
// Parameter accounting

struct ParamReport {
  std::int64_t backbone_params = 0;
  std::int64_t memory_params = 0;       // sum over tables of M x d_head
  std::int64_t engram_glue_params = 0;  // W_K, W_V, conv, layerscale, engram norms
  std::int64_t total = 0;
  double rho = 1.0;  // backbone / total; glue sits in the denominator only
};

ParamReport count_params(const BackboneConfig& backbone, std::span<const EngramModuleConfig> engram);

/// Smallest prime M with rho <= target_rho for `engram_layers` identical
/// modules. Throws DomainError for targets outside (0, 1) or when the
/// required table would exceed `max_table_size`.
std::int64_t solve_table_size(double target_rho, const BackboneConfig& backbone, const std::vector<BankSpec>& banks,
                              int num_heads, int d_head, int engram_layers,
                              std::int64_t max_table_size = std::int64_t{1} << 40);

// ---------------------------------------------------------------------------
// Optimizer

struct TrainConfig {
  double lr = 4e-4;
  double beta1 = 0.9;
  double beta2 = 0.96;
  double adam_eps = 1e-8;
  double weight_decay = 0.03;
  double warmup_fraction = 0.02;
  double grad_clip = 1.0;  // global norm; <= 0 disables
  double class_dropout = 0.1;
  int batch_size = 16;
  std::int64_t total_steps = 2000;
  int log_interval = 50;
  std::uint64_t seed = 1;
  TableMode table_mode = TableMode::learned;
  BankVariant banks_variant = BankVariant::seq1d;
  int threads = 0;  // 0: resolve from hardware / ENGRAM_AR_THREADS

  void validate() const;
};

/// Applies the training condition (table mode, bank variant) to every engram
/// module of `model`.
void apply_condition(ModelConfig& model, const TrainConfig& train);

/// Linear warmup over ceil(warmup_fraction * total) steps, then cosine decay to 0.
double learning_rate(const TrainConfig& cfg, std::int64_t step);

template <typename Real>
struct AdamState {
  std::int64_t step = 0;
  std::vector<Tensor<Real>> m;  // empty tensors for frozen parameters
  std::vector<Tensor<Real>> v;

  static AdamState zeros(const ParamSet<Real>& params);
};

/// One decoupled-weight-decay Adam update. Decay applies only to the weight
/// group; frozen parameters are untouched.
template <typename Real>
void adamw_step(ParamSet<Real>& params, const GradSet<Real>& grads, AdamState<Real>& state, const TrainConfig& cfg,
                double lr);

/// Global L2 norm over trainable gradients.
template <typename Real>
double grad_norm(const ParamSet<Real>& params, const GradSet<Real>& grads);

// ---------------------------------------------------------------------------
// Training loop

struct Checkpoint {
  ModelConfig model;
  TrainConfig train;
  ParamSet<float> params;
  AdamState<float> optimizer;
  std::uint64_t init_seed = 0;
};

struct LossRow {
  std::int64_t step = 0;
  double lr = 0.0;
  double train_ce = 0.0;
  std::optional<double> val_ce;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<LossRow> curve;
};

/// Initial checkpoint: parameters seeded from train.seed, zero optimizer state.
Checkpoint init_checkpoint(const ModelConfig& model, const TrainConfig& train);

/// Trains from `start` on `corpus`. Deterministic for a given seed and
/// independent of the worker count: per-sequence gradients are reduced in
/// batch order. Aborts with NumericError on a non-finite loss.
TrainResult train(const std::vector<TokenGrid>& corpus, const std::vector<TokenGrid>& validation, Checkpoint start,
                  const std::function<void(const LossRow&)>& on_log = {});

/// Mean teacher-forced cross-entropy over image-token targets.
template <typename Real>
double evaluate_ce(const Model<Real>& model, const ParamSet<Real>& params, std::span<const TokenGrid> grids,
                   const ForwardOptions& opts = {}, int threads = 1);

}  // namespace engram_ar
