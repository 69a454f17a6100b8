#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "engram_ar/autodiff.hpp"
#include "engram_ar/backbone.hpp"
#include "engram_ar/engram.hpp"
#include "engram_ar/hashing.hpp"

namespace engram_ar {

struct ModelConfig {
  BackboneConfig backbone;
  std::vector<EngramModuleConfig> engram;  // sorted by layer_index on validate
  std::uint64_t hash_seed = 0x5EEDF00DULL;

  void validate() const;
  const EngramModuleConfig* engram_at(int layer) const;
};

/// Builds one EngramModuleConfig per layer with identical shape.
std::vector<EngramModuleConfig> engram_layers(std::span<const int> layers, BankVariant variant, int num_heads,
                                              int d_head, std::int64_t table_size, double layerscale_init,
                                              TableMode mode);

/// Evaluation-time switches. None of these alter what attention sees.
struct ForwardOptions {
  bool bypass_engram = false;          // skip every engram module
  std::optional<double> gate_clamp;    // overrides any configured clamp
  bool collapse_buckets = false;       // all lookups hit row 0
  std::span<const TokenId> hash_context;  // donor sequence for context extraction only
};

/// Causal token-grid transformer with engram modules injected before the
/// attention of their configured layers, on image positions only.
template <typename Real>
class Model {
 public:
  explicit Model(ModelConfig config);

  const ModelConfig& config() const { return config_; }
  const BackboneConfig& backbone() const { return config_.backbone; }
  const SequenceLayout& layout() const { return layout_; }
  const HashLayout& hashes(std::size_t engram_index) const { return hashes_[engram_index]; }
  const RopeTables<Real>& rope() const { return rope_; }

  /// Allocates and initializes every parameter in serialization order.
  ParamSet<Real> init_params(std::uint64_t seed) const;

  /// Logits [T, vocab_size_total] for a model-space sequence of length T.
  Var forward(Graph<Real>& g, std::span<const TokenId> sequence, const ForwardOptions& opts = {}) const;

  /// Mean cross-entropy over image-token targets (rows P-1 .. T-2).
  Var loss(Graph<Real>& g, std::span<const TokenId> sequence, const ForwardOptions& opts = {}) const;

  Tensor<Real> logits(const ParamSet<Real>& params, std::span<const TokenId> sequence,
                      const ForwardOptions& opts = {}) const;

  /// Per-row targets: next token for rows predicting image tokens, else -1.
  std::vector<std::int32_t> image_targets(std::span<const TokenId> sequence) const;

  /// Bucket indices [image position][table] for one engram module.
  std::vector<std::vector<std::int64_t>> buckets(std::size_t engram_index, std::span<const TokenId> context,
                                                 std::size_t image_positions, bool collapse) const;

 private:
  ModelConfig config_;
  SequenceLayout layout_;
  std::vector<HashLayout> hashes_;
  RopeTables<Real> rope_;
};

}  // namespace engram_ar
