#pragma once

#include <cstdint>
#include <deque>
#include <optional>
#include <string>
#include <vector>

#include "engram_ar/autodiff.hpp"
#include "engram_ar/hashing.hpp"

namespace engram_ar {

inline constexpr int kConvTaps = 4;

struct EngramModuleConfig {
  int layer_index = 0;
  std::vector<BankSpec> banks;
  int num_heads = 4;  // H, hash heads per bank
  int d_head = 64;
  std::int64_t table_size = 36715;  // V_mem, used verbatim
  std::optional<double> gate_clamp;
  double layerscale_init = 1e-4;
  TableMode table_mode = TableMode::learned;

  int d_mem() const { return static_cast<int>(banks.size()) * num_heads * d_head; }
  /// W_V becomes a two-layer MLP (d_mem -> d -> d) when d_mem exceeds d.
  bool value_mlp(int hidden) const { return d_mem() > hidden; }
  void validate(int hidden) const;

  /// Parameter name prefix, e.g. "layer6.engram".
  std::string prefix() const { return "layer" + std::to_string(layer_index) + ".engram"; }
  std::string table_name(int bank_id, int head) const {
    return prefix() + ".table.b" + std::to_string(bank_id) + ".h" + std::to_string(head);
  }
};

/// Creates the module's parameters (tables first, bank-major) in `params`.
template <typename Real>
void init_engram_params(const EngramModuleConfig& cfg, int hidden, ParamSet<Real>& params, std::uint64_t seed);

/// Graph handles for one module's parameters.
struct EngramVars {
  std::vector<Var> tables;  // bank-major, head-minor
  Var w_k;
  Var w_v;   // matrix form
  Var w_v1;  // MLP form
  Var w_v2;
  Var norm_h;
  Var norm_k;
  Var norm_conv;
  Var conv;
  Var layerscale;
};

template <typename Real>
EngramVars bind_engram(Graph<Real>& g, const EngramModuleConfig& cfg, int hidden);

/// Memory vectors e_t [n, d_mem] for the given bucket indices ([n][tables]).
template <typename Real>
Var gather_memory(Graph<Real>& g, const EngramVars& vars, const std::vector<std::vector<std::int64_t>>& buckets);

/// g_t = sigmoid(RMSNorm(h_t) . RMSNorm(W_K e_t) / sqrt(d)), shape [n, 1].
template <typename Real>
Var engram_gate(Graph<Real>& g, Var h, Var e, const EngramVars& vars);

/// W_V e_t (matrix or MLP).
template <typename Real>
Var engram_value(Graph<Real>& g, Var e, const EngramVars& vars);

/// Gated fusion over the image-position hiddens h [T, d]:
///   v~_t = g_t W_V e_t
///   v_t  = W_V e_t + SiLU(CausalConv(RMSNorm(V~)))_t
///   h_t  + g_t (layerscale * v_t)
/// A clamp replaces both occurrences of g_t with the constant.
template <typename Real>
Var engram_fuse(Graph<Real>& g, Var h, Var e, const EngramVars& vars, std::optional<double> clamp);

/// Rolling per-sequence state for incremental decoding: the last
/// `history` gated values v~ (3 for a 4-tap kernel).
template <typename Real>
struct EngramStepState {
  std::deque<std::vector<Real>> gated;
  std::size_t history = kConvTaps - 1;
};

/// One fused row for incremental decoding. `h` is updated in place.
template <typename Real>
void engram_fuse_step(const EngramModuleConfig& cfg, const ParamSet<Real>& params, std::span<Real> h,
                      std::span<const Real> e, std::optional<double> clamp, EngramStepState<Real>& state);

}  // namespace engram_ar
