#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

#include "engram_ar/tensor.hpp"

namespace engram_ar {

/// Handle to a node on a Graph tape.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so walking the
/// tape backwards is a valid topological order.
///
/// Parameter leaves reference the ParamSet without copying; their gradients
/// land in the GradSet passed to backward(). Frozen (non-trainable)
/// parameters never require gradients.
template <typename Real>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, Var self)>;

  explicit Graph(const ParamSet<Real>* params = nullptr, bool record = true) : params_(params), record_(record) {}

  bool recording() const { return record_; }
  const ParamSet<Real>* params() const { return params_; }

  Var constant(Tensor<Real> value);
  Var param(std::size_t index);
  Var param(const std::string& name) { return param(params_->index_of(name)); }

  const Tensor<Real>& value(Var v) const {
    const Node& n = nodes_[static_cast<std::size_t>(v.id)];
    return n.ref ? *n.ref : n.value;
  }
  const Shape& shape(Var v) const { return value(v).shape(); }
  bool requires_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].requires_grad; }

  /// Gradient buffer of a node, zero-allocated on first access.
  std::vector<Real>& grad(Var v);
  bool has_grad(Var v) const { return !nodes_[static_cast<std::size_t>(v.id)].grad.empty(); }

  /// Appends an op result. The backward closure is kept only when recording
  /// and at least one input requires a gradient.
  Var emit(Tensor<Real> value, std::initializer_list<Var> inputs, BackwardFn backward);
  Var emit(Tensor<Real> value, std::span<const Var> inputs, BackwardFn backward);

  /// Seeds d(loss)/d(loss) = 1 for a single-element loss and accumulates
  /// parameter gradients into `grads`.
  void backward(Var loss, GradSet<Real>& grads);

  std::size_t num_nodes() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<Real> value;
    const Tensor<Real>* ref = nullptr;
    int param_index = -1;
    bool requires_grad = false;
    std::vector<Real> grad;
    BackwardFn backward;
  };

  const ParamSet<Real>* params_;
  bool record_;
  std::deque<Node> nodes_;
};

// Core ops. All operate on 2D row-major values ([rows, cols]).

template <typename Real> Var matmul(Graph<Real>& g, Var a, Var b);
template <typename Real> Var add(Graph<Real>& g, Var a, Var b);
/// Elementwise product; b may also be [rows, 1] (per-row) or [1, cols] / [cols] (per-column).
template <typename Real> Var mul(Graph<Real>& g, Var a, Var b);
template <typename Real> Var scale(Graph<Real>& g, Var a, double s);
template <typename Real> Var sum_cols(Graph<Real>& g, Var a);
template <typename Real> Var concat_cols(Graph<Real>& g, std::span<const Var> parts);
template <typename Real> Var concat_rows(Graph<Real>& g, std::span<const Var> parts);
template <typename Real> Var slice_rows(Graph<Real>& g, Var a, std::size_t begin, std::size_t end);
template <typename Real> Var softmax(Graph<Real>& g, Var a);
template <typename Real> Var sigmoid(Graph<Real>& g, Var a);
template <typename Real> Var silu(Graph<Real>& g, Var a);
/// x / sqrt(mean(x^2) + 1e-6) * scale over each group of scale.size() columns.
template <typename Real> Var rms_norm(Graph<Real>& g, Var x, Var scale);
template <typename Real> Var embedding_gather(Graph<Real>& g, Var table, std::span<const std::int64_t> rows);
/// x: [T, C]; weights: [C, K]. Left zero padding of K-1 steps; no bias.
template <typename Real> Var depthwise_causal_conv1d(Graph<Real>& g, Var x, Var weights);
/// Mean over rows whose target is >= 0; returns a [1, 1] value.
template <typename Real> Var cross_entropy(Graph<Real>& g, Var logits, std::span<const std::int32_t> targets);
/// Multi-head causal softmax attention, scale 1/sqrt(head_dim).
template <typename Real> Var causal_attention(Graph<Real>& g, Var q, Var k, Var v, std::size_t num_heads);
/// Pairwise rotation of each head slice; cos/sin are [rows, head_dim/2].
template <typename Real>
Var rotary(Graph<Real>& g, Var x, std::size_t head_dim, const Tensor<Real>& cos_t, const Tensor<Real>& sin_t);

}  // namespace engram_ar
