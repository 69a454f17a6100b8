#pragma once
// Small models and random parameter sets shared by the tests.

#include <cmath>
#include <string>

#include "engram_ar/model.hpp"
#include "engram_ar/rng.hpp"
#include "engram_ar/tokens.hpp"

namespace fixture {

using namespace engram_ar;

/// L=2, d=16, 2 heads, V=32, 4x4 grid; engram modules at `layers`.
inline ModelConfig tiny_model(BankVariant variant = BankVariant::seq1d, std::vector<int> layers = {0},
                              int heads = 2, int d_head = 8, std::int64_t table = 101) {
  ModelConfig m;
  m.backbone.num_layers = 2;
  m.backbone.hidden = 16;
  m.backbone.num_heads = 2;
  m.backbone.ffn_inner = 48;
  m.backbone.image_vocab = 32;
  m.backbone.num_classes = 4;
  m.backbone.aux_tokens = 1;
  m.backbone.grid_height = 4;
  m.backbone.grid_width = 4;
  m.engram = engram_layers(layers, variant, heads, d_head, table, 1e-4, TableMode::learned);
  return m;
}

/// Initial parameters with the engram glue pushed away from its near-no-op
/// init (layerscale, conv taps), so the memory path visibly matters.
template <typename Real>
ParamSet<Real> lively_params(const Model<Real>& model, std::uint64_t seed, double glue_scale = 0.5) {
  auto params = model.init_params(seed);
  CounterRng rng(seed, "lively");
  for (auto& p : params) {
    const bool conv = p.name.ends_with(".conv");
    const bool ls = p.name.ends_with(".layerscale");
    const bool norm = p.group == ParamGroup::norm;
    if (!(conv || ls || norm)) continue;
    for (auto& v : p.value.values())
      v = static_cast<Real>(norm ? 1.0 + 0.2 * rng.normal() : glue_scale * rng.normal());
  }
  return params;
}

/// Random checkpoint at unit-variance activation scale: weights drawn
/// N(0, 1/fan_in), norms near 1, engram glue and tables O(1). Finite
/// differences at a fixed step need weights well above the step size.
template <typename Real>
ParamSet<Real> random_checkpoint(const Model<Real>& model, std::uint64_t seed) {
  auto params = lively_params(model, seed);
  CounterRng rng(seed, "random-checkpoint");
  for (auto& p : params) {
    if (p.group == ParamGroup::norm || p.group == ParamGroup::layerscale || p.name.ends_with(".conv")) continue;
    const bool unit = p.name == "embed.tokens" || p.group == ParamGroup::table;
    const double std = unit ? 1.0 : 1.0 / std::sqrt(static_cast<double>(p.value.shape()[0]));
    for (auto& v : p.value.values()) v = static_cast<Real>(std * rng.normal());
  }
  return params;
}

/// A random valid model-space sequence for the model's layout.
inline std::vector<TokenId> random_sequence(const BackboneConfig& b, std::uint64_t key, std::size_t length = 0) {
  CounterRng rng(key);
  const auto layout = b.layout();
  std::vector<TokenId> seq;
  seq.push_back(layout.prefix_token(static_cast<TokenId>(rng.below(static_cast<std::uint64_t>(b.num_classes + 1)))));
  for (int i = 1; i < layout.prefix_len; ++i) seq.push_back(layout.prefix_token(b.num_classes + i));
  const std::size_t total = length ? length : static_cast<std::size_t>(layout.sequence_length());
  while (seq.size() < total) seq.push_back(static_cast<TokenId>(rng.below(static_cast<std::uint64_t>(b.image_vocab))));
  return seq;
}

}  // namespace fixture
