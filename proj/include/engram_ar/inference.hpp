#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "engram_ar/engram.hpp"
#include "engram_ar/model.hpp"

namespace engram_ar {

struct SamplerConfig {
  double temperature = 1.0;
  std::optional<int> top_k;
  double cfg_max = 16.0;
  double cfg_alpha = 1.8;
  std::optional<double> gate_clamp;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Guidance scale 1 + (cfg_max - 1) * (0.5 (1 - cos(pi t / (T-1))))^alpha,
/// ramping from 1 at t = 0 to cfg_max at t = T-1. T < 2 yields cfg_max.
double cfg_schedule(std::int64_t t, std::int64_t total, double cfg_max, double alpha);

/// Incremental decoder: per-layer key/value cache plus the engram conv
/// window. Feeding a sequence one token at a time reproduces the logits of
/// Model::forward row by row.
template <typename Real>
class Decoder {
 public:
  Decoder(const Model<Real>& model, const ParamSet<Real>& params, ForwardOptions opts = {});

  /// Consumes one model-space token and returns next-token logits
  /// (vocab_size_total entries). Throws DomainError past sequence capacity.
  std::vector<Real> step(TokenId token);

  std::size_t length() const { return tokens_.size(); }
  const std::vector<TokenId>& tokens() const { return tokens_; }
  /// Gated values currently held by an engram module's conv window.
  std::size_t engram_window(std::size_t engram_index) const { return engram_state_[engram_index].gated.size(); }

 private:
  struct LayerCache {
    std::vector<Real> keys;    // [length, d], normalized and rotated
    std::vector<Real> values;  // [length, d]
  };

  const Model<Real>& model_;
  const ParamSet<Real>& params_;
  ForwardOptions opts_;
  std::vector<TokenId> tokens_;
  std::vector<LayerCache> cache_;
  std::vector<EngramStepState<Real>> engram_state_;
};

/// Samples one grid for `class_id` with classifier-free guidance against the
/// null class: l = l_null + s(t) (l_cond - l_null). Only image tokens are
/// sampled. Deterministic in (sampler.seed, class_id, sample_index).
template <typename Real>
TokenGrid sample(const Model<Real>& model, const ParamSet<Real>& params, int class_id, const SamplerConfig& sampler,
                 std::int64_t sample_index = 0);

}  // namespace engram_ar
