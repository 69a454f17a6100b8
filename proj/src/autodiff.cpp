#include "engram_ar/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <memory>
#include <sstream>

#include "engram_ar/kernels.hpp"

namespace engram_ar {

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {

template <typename Real>
using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Real>
using MapC = Eigen::Map<const RowMat<Real>>;
template <typename Real>
using MapM = Eigen::Map<RowMat<Real>>;

[[noreturn]] void mismatch(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_string(a) + " and " + shape_string(b));
}

}  // namespace

template <typename Real>
Var Graph<Real>::constant(Tensor<Real> value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size() - 1)};
}

template <typename Real>
Var Graph<Real>::param(std::size_t index) {
  if (params_ == nullptr || index >= params_->size()) throw ConfigError("graph has no parameter #" + std::to_string(index));
  Node n;
  n.ref = &(*params_)[index].value;
  n.param_index = static_cast<int>(index);
  n.requires_grad = record_ && (*params_)[index].trainable;
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size() - 1)};
}

template <typename Real>
std::vector<Real>& Graph<Real>::grad(Var v) {
  Node& n = nodes_[static_cast<std::size_t>(v.id)];
  if (n.grad.empty()) n.grad.assign(value(v).size(), Real{0});
  return n.grad;
}

template <typename Real>
Var Graph<Real>::emit(Tensor<Real> value, std::initializer_list<Var> inputs, BackwardFn backward) {
  return emit(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(backward));
}

template <typename Real>
Var Graph<Real>::emit(Tensor<Real> value, std::span<const Var> inputs, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  if (record_) {
    for (Var in : inputs) n.requires_grad = n.requires_grad || requires_grad(in);
    if (n.requires_grad) n.backward = std::move(backward);
  }
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size() - 1)};
}

template <typename Real>
void Graph<Real>::backward(Var loss, GradSet<Real>& grads) {
  if (value(loss).size() != 1) throw ShapeError("backward: loss must be a single element, got " + shape_string(shape(loss)));
  if (!requires_grad(loss)) return;
  grad(loss)[0] = Real{1};
  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.empty()) continue;
    if (n.backward) n.backward(*this, Var{id});
    if (n.param_index >= 0) {
      auto& dst = grads[static_cast<std::size_t>(n.param_index)].values();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += n.grad[i];
    }
  }
}

// ---------------------------------------------------------------------------

template <typename Real>
Var matmul(Graph<Real>& g, Var a, Var b) {
  const auto& A = g.value(a);
  const auto& B = g.value(b);
  if (A.cols() != B.rows()) mismatch("matmul", A.shape(), B.shape());
  const auto n = A.rows(), k = A.cols(), m = B.cols();
  Tensor<Real> out = Tensor<Real>::matrix(n, m);
  MapM<Real>(out.data(), n, m).noalias() = MapC<Real>(A.data(), n, k) * MapC<Real>(B.data(), k, m);
  return g.emit(std::move(out), {a, b}, [a, b, n, k, m](Graph<Real>& g, Var self) {
    MapC<Real> dC(g.grad(self).data(), n, m);
    if (g.requires_grad(a))
      MapM<Real>(g.grad(a).data(), n, k).noalias() += dC * MapC<Real>(g.value(b).data(), k, m).transpose();
    if (g.requires_grad(b))
      MapM<Real>(g.grad(b).data(), k, m).noalias() += MapC<Real>(g.value(a).data(), n, k).transpose() * dC;
  });
}

template <typename Real>
Var add(Graph<Real>& g, Var a, Var b) {
  const auto& A = g.value(a);
  const auto& B = g.value(b);
  if (A.size() != B.size() || A.cols() != B.cols()) mismatch("add", A.shape(), B.shape());
  Tensor<Real> out(A.shape());
  for (std::size_t i = 0; i < A.size(); ++i) out[i] = A[i] + B[i];
  return g.emit(std::move(out), {a, b}, [a, b](Graph<Real>& g, Var self) {
    const auto& d = g.grad(self);
    for (Var x : {a, b}) {
      if (!g.requires_grad(x)) continue;
      auto& gx = g.grad(x);
      for (std::size_t i = 0; i < d.size(); ++i) gx[i] += d[i];
    }
  });
}

template <typename Real>
Var mul(Graph<Real>& g, Var a, Var b) {
  const auto& A = g.value(a);
  const auto& B = g.value(b);
  const std::size_t n = A.rows(), c = A.cols();
  enum class Mode { same, per_row, per_col } mode;
  if (B.size() == A.size() && B.cols() == c)
    mode = Mode::same;
  else if (B.rows() == n && B.cols() == 1)
    mode = Mode::per_row;
  else if (B.size() == c)
    mode = Mode::per_col;
  else
    mismatch("mul", A.shape(), B.shape());
  auto bidx = [mode, c](std::size_t r, std::size_t j) {
    return mode == Mode::same ? r * c + j : (mode == Mode::per_row ? r : j);
  };
  Tensor<Real> out(A.shape());
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] = A[r * c + j] * B[bidx(r, j)];
  return g.emit(std::move(out), {a, b}, [a, b, n, c, bidx](Graph<Real>& g, Var self) {
    const auto& d = g.grad(self);
    const auto& A = g.value(a);
    const auto& B = g.value(b);
    if (g.requires_grad(a)) {
      auto& ga = g.grad(a);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < c; ++j) ga[r * c + j] += d[r * c + j] * B[bidx(r, j)];
    }
    if (g.requires_grad(b)) {
      auto& gb = g.grad(b);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < c; ++j) gb[bidx(r, j)] += d[r * c + j] * A[r * c + j];
    }
  });
}

template <typename Real>
Var scale(Graph<Real>& g, Var a, double s) {
  const auto& A = g.value(a);
  const Real k = static_cast<Real>(s);
  Tensor<Real> out(A.shape());
  for (std::size_t i = 0; i < A.size(); ++i) out[i] = A[i] * k;
  return g.emit(std::move(out), {a}, [a, k](Graph<Real>& g, Var self) {
    const auto& d = g.grad(self);
    auto& ga = g.grad(a);
    for (std::size_t i = 0; i < d.size(); ++i) ga[i] += d[i] * k;
  });
}

template <typename Real>
Var sum_cols(Graph<Real>& g, Var a) {
  const auto& A = g.value(a);
  const std::size_t n = A.rows(), c = A.cols();
  Tensor<Real> out = Tensor<Real>::matrix(n, 1);
  for (std::size_t r = 0; r < n; ++r) {
    Real s{0};
    for (std::size_t j = 0; j < c; ++j) s += A[r * c + j];
    out[r] = s;
  }
  return g.emit(std::move(out), {a}, [a, n, c](Graph<Real>& g, Var self) {
    const auto& d = g.grad(self);
    auto& ga = g.grad(a);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < c; ++j) ga[r * c + j] += d[r];
  });
}

template <typename Real>
Var concat_cols(Graph<Real>& g, std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t n = g.value(parts[0]).rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (Var p : parts) {
    const auto& P = g.value(p);
    if (P.rows() != n) mismatch("concat_cols", g.shape(parts[0]), P.shape());
    widths.push_back(P.cols());
    total += P.cols();
  }
  Tensor<Real> out = Tensor<Real>::matrix(n, total);
  std::size_t off = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const auto& P = g.value(parts[i]);
    for (std::size_t r = 0; r < n; ++r)
      std::copy_n(P.data() + r * widths[i], widths[i], out.data() + r * total + off);
    off += widths[i];
  }
  std::vector<Var> ins(parts.begin(), parts.end());
  return g.emit(std::move(out), parts, [ins, widths, n, total](Graph<Real>& g, Var self) {
    const auto& d = g.grad(self);
    std::size_t off = 0;
    for (std::size_t i = 0; i < ins.size(); ++i) {
      if (g.requires_grad(ins[i])) {
        auto& gp = g.grad(ins[i]);
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t j = 0; j < widths[i]; ++j) gp[r * widths[i] + j] += d[r * total + off + j];
      }
      off += widths[i];
    }
  });
}

template <typename Real>
Var concat_rows(Graph<Real>& g, std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t c = g.value(parts[0]).cols();
  std::vector<std::size_t> sizes;
  std::size_t rows = 0;
  for (Var p : parts) {
    const auto& P = g.value(p);
    if (P.cols() != c) mismatch("concat_rows", g.shape(parts[0]), P.shape());
    sizes.push_back(P.size());
    rows += P.rows();
  }
  Tensor<Real> out = Tensor<Real>::matrix(rows, c);
  std::size_t off = 0;
  for (Var p : parts) {
    const auto& P = g.value(p);
    std::copy(P.values().begin(), P.values().end(), out.data() + off);
    off += P.size();
  }
  std::vector<Var> ins(parts.begin(), parts.end());
  return g.emit(std::move(out), parts, [ins, sizes](Graph<Real>& g, Var self) {
    const auto& d = g.grad(self);
    std::size_t off = 0;
    for (std::size_t i = 0; i < ins.size(); ++i) {
      if (g.requires_grad(ins[i])) {
        auto& gp = g.grad(ins[i]);
        for (std::size_t j = 0; j < sizes[i]; ++j) gp[j] += d[off + j];
      }
      off += sizes[i];
    }
  });
}

template <typename Real>
Var slice_rows(Graph<Real>& g, Var a, std::size_t begin, std::size_t end) {
  const auto& A = g.value(a);
  if (begin > end || end > A.rows())
    throw ShapeError("slice_rows: range [" + std::to_string(begin) + "," + std::to_string(end) + ") outside " +
                     shape_string(A.shape()));
  const std::size_t c = A.cols();
  Tensor<Real> out = Tensor<Real>::matrix(end - begin, c);
  std::copy(A.data() + begin * c, A.data() + end * c, out.data());
  return g.emit(std::move(out), {a}, [a, begin, c](Graph<Real>& g, Var self) {
    const auto& d = g.grad(self);
    auto& ga = g.grad(a);
    for (std::size_t i = 0; i < d.size(); ++i) ga[begin * c + i] += d[i];
  });
}

template <typename Real>
Var softmax(Graph<Real>& g, Var a) {
  const auto& A = g.value(a);
  const std::size_t n = A.rows(), c = A.cols();
  Tensor<Real> out(A.shape());
  for (std::size_t r = 0; r < n; ++r) {
    const Real* x = A.data() + r * c;
    Real* y = out.data() + r * c;
    const Real mx = *std::max_element(x, x + c);
    Real s{0};
    for (std::size_t j = 0; j < c; ++j) s += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < c; ++j) y[j] /= s;
  }
  return g.emit(std::move(out), {a}, [a, n, c](Graph<Real>& g, Var self) {
    const auto& d = g.grad(self);
    const auto& Y = g.value(self);
    auto& ga = g.grad(a);
    for (std::size_t r = 0; r < n; ++r) {
      Real dot{0};
      for (std::size_t j = 0; j < c; ++j) dot += d[r * c + j] * Y[r * c + j];
      for (std::size_t j = 0; j < c; ++j) ga[r * c + j] += Y[r * c + j] * (d[r * c + j] - dot);
    }
  });
}

template <typename Real>
Var sigmoid(Graph<Real>& g, Var a) {
  const auto& A = g.value(a);
  Tensor<Real> out(A.shape());
  for (std::size_t i = 0; i < A.size(); ++i) out[i] = kernels::sigmoid(A[i]);
  return g.emit(std::move(out), {a}, [a](Graph<Real>& g, Var self) {
    const auto& d = g.grad(self);
    const auto& Y = g.value(self);
    auto& ga = g.grad(a);
    for (std::size_t i = 0; i < d.size(); ++i) ga[i] += d[i] * Y[i] * (Real{1} - Y[i]);
  });
}

template <typename Real>
Var silu(Graph<Real>& g, Var a) {
  const auto& A = g.value(a);
  Tensor<Real> out(A.shape());
  for (std::size_t i = 0; i < A.size(); ++i) out[i] = kernels::silu(A[i]);
  return g.emit(std::move(out), {a}, [a](Graph<Real>& g, Var self) {
    const auto& d = g.grad(self);
    const auto& X = g.value(a);
    auto& ga = g.grad(a);
    for (std::size_t i = 0; i < d.size(); ++i) {
      const Real s = kernels::sigmoid(X[i]);
      ga[i] += d[i] * s * (Real{1} + X[i] * (Real{1} - s));
    }
  });
}

template <typename Real>
Var rms_norm(Graph<Real>& g, Var x, Var scale_var) {
  const auto& X = g.value(x);
  const auto& S = g.value(scale_var);
  const std::size_t group = S.size();
  if (group == 0 || X.cols() % group != 0) mismatch("rms_norm", X.shape(), S.shape());
  Tensor<Real> out(X.shape());
  const std::size_t n = X.rows(), c = X.cols();
  for (std::size_t r = 0; r < n; ++r) kernels::rms_norm_row<Real>(X.row(r), S.span(), out.row(r));
  return g.emit(std::move(out), {x, scale_var}, [x, scale_var, n, c, group](Graph<Real>& g, Var self) {
    const auto& d = g.grad(self);
    const auto& X = g.value(x);
    const auto& S = g.value(scale_var);
    const bool need_x = g.requires_grad(x);
    const bool need_s = g.requires_grad(scale_var);
    std::vector<Real>* gx = need_x ? &g.grad(x) : nullptr;
    std::vector<Real>* gs = need_s ? &g.grad(scale_var) : nullptr;
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t g0 = 0; g0 < c; g0 += group) {
        const std::size_t base = r * c + g0;
        const Real inv = kernels::rms_inverse<Real>(X.span().subspan(base, group));
        if (need_s)
          for (std::size_t i = 0; i < group; ++i) (*gs)[i] += d[base + i] * X[base + i] * inv;
        if (need_x) {
          Real dot{0};
          for (std::size_t i = 0; i < group; ++i) dot += d[base + i] * S[i] * X[base + i];
          const Real coef = inv * inv * inv * dot / static_cast<Real>(group);
          for (std::size_t i = 0; i < group; ++i) (*gx)[base + i] += d[base + i] * S[i] * inv - coef * X[base + i];
        }
      }
    }
  });
}

template <typename Real>
Var embedding_gather(Graph<Real>& g, Var table, std::span<const std::int64_t> rows) {
  const auto& T = g.value(table);
  const std::size_t c = T.cols();
  Tensor<Real> out = Tensor<Real>::matrix(rows.size(), c);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || static_cast<std::size_t>(rows[i]) >= T.rows())
      throw ShapeError("embedding_gather: row " + std::to_string(rows[i]) + " outside table " + shape_string(T.shape()));
    std::copy_n(T.data() + static_cast<std::size_t>(rows[i]) * c, c, out.data() + i * c);
  }
  std::vector<std::int64_t> idx(rows.begin(), rows.end());
  return g.emit(std::move(out), {table}, [table, idx = std::move(idx), c](Graph<Real>& g, Var self) {
    const auto& d = g.grad(self);
    auto& gt = g.grad(table);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) gt[static_cast<std::size_t>(idx[i]) * c + j] += d[i * c + j];
  });
}

template <typename Real>
Var depthwise_causal_conv1d(Graph<Real>& g, Var x, Var weights) {
  const auto& X = g.value(x);
  const auto& Wt = g.value(weights);
  const std::size_t T = X.rows(), C = X.cols();
  if (Wt.rows() != C) mismatch("depthwise_causal_conv1d", X.shape(), Wt.shape());
  const std::size_t K = Wt.cols();
  Tensor<Real> out(X.shape());
  for (std::size_t t = 0; t < T; ++t) {
    auto history = [&](std::size_t j) -> std::span<const Real> {
      const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + j) - static_cast<std::ptrdiff_t>(K - 1);
      if (src < 0) return {};
      return X.row(static_cast<std::size_t>(src));
    };
    kernels::causal_conv_row<Real>(Wt.span(), C, K, history, out.row(t));
  }
  return g.emit(std::move(out), {x, weights}, [x, weights, T, C, K](Graph<Real>& g, Var self) {
    const auto& d = g.grad(self);
    const auto& X = g.value(x);
    const auto& Wt = g.value(weights);
    const bool need_x = g.requires_grad(x);
    const bool need_w = g.requires_grad(weights);
    std::vector<Real>* gx = need_x ? &g.grad(x) : nullptr;
    std::vector<Real>* gw = need_w ? &g.grad(weights) : nullptr;
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t j = 0; j < K; ++j) {
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + j) - static_cast<std::ptrdiff_t>(K - 1);
        if (src < 0) continue;
        const auto s = static_cast<std::size_t>(src);
        for (std::size_t c = 0; c < C; ++c) {
          const Real dy = d[t * C + c];
          if (need_x) (*gx)[s * C + c] += Wt[c * K + j] * dy;
          if (need_w) (*gw)[c * K + j] += X[s * C + c] * dy;
        }
      }
  });
}

template <typename Real>
Var cross_entropy(Graph<Real>& g, Var logits, std::span<const std::int32_t> targets) {
  const auto& L = g.value(logits);
  const std::size_t n = L.rows(), V = L.cols();
  if (targets.size() != n) throw ShapeError("cross_entropy: " + std::to_string(targets.size()) +
                                            " targets for logits " + shape_string(L.shape()));
  std::size_t count = 0;
  Real total{0};
  for (std::size_t r = 0; r < n; ++r) {
    if (targets[r] < 0) continue;
    if (static_cast<std::size_t>(targets[r]) >= V) throw ShapeError("cross_entropy: target outside vocabulary");
    const Real* x = L.data() + r * V;
    const Real mx = *std::max_element(x, x + V);
    Real s{0};
    for (std::size_t j = 0; j < V; ++j) s += std::exp(x[j] - mx);
    total += mx + std::log(s) - x[targets[r]];
    ++count;
  }
  Tensor<Real> out = Tensor<Real>::matrix(1, 1);
  out[0] = count ? total / static_cast<Real>(count) : Real{0};
  std::vector<std::int32_t> tg(targets.begin(), targets.end());
  return g.emit(std::move(out), {logits}, [logits, tg = std::move(tg), n, V, count](Graph<Real>& g, Var self) {
    if (count == 0) return;
    const Real d0 = g.grad(self)[0] / static_cast<Real>(count);
    const auto& L = g.value(logits);
    auto& gl = g.grad(logits);
    for (std::size_t r = 0; r < n; ++r) {
      if (tg[r] < 0) continue;
      const Real* x = L.data() + r * V;
      const Real mx = *std::max_element(x, x + V);
      Real s{0};
      for (std::size_t j = 0; j < V; ++j) s += std::exp(x[j] - mx);
      for (std::size_t j = 0; j < V; ++j) gl[r * V + j] += d0 * std::exp(x[j] - mx) / s;
      gl[r * V + static_cast<std::size_t>(tg[r])] -= d0;
    }
  });
}

template <typename Real>
Var causal_attention(Graph<Real>& g, Var q, Var k, Var v, std::size_t num_heads) {
  const auto& Q = g.value(q);
  const auto& K = g.value(k);
  const auto& Vv = g.value(v);
  if (Q.shape() != K.shape()) mismatch("causal_attention", Q.shape(), K.shape());
  if (Q.shape() != Vv.shape()) mismatch("causal_attention", Q.shape(), Vv.shape());
  const std::size_t T = Q.rows(), d = Q.cols();
  if (num_heads == 0 || d % num_heads != 0) throw ShapeError("causal_attention: width not divisible by heads");
  Tensor<Real> out(Q.shape());
  // probs[t] holds [head][s <= t] for row t.
  auto probs = std::make_shared<std::vector<std::vector<Real>>>(T);
  std::vector<Real> scratch(T);
  for (std::size_t t = 0; t < T; ++t) {
    (*probs)[t].assign(num_heads * (t + 1), Real{0});
    kernels::attend_row<Real>(Q.row(t), K.data(), Vv.data(), t + 1, d, num_heads, out.row(t), scratch, (*probs)[t]);
  }
  return g.emit(std::move(out), {q, k, v}, [q, k, v, probs, T, d, num_heads](Graph<Real>& g, Var self) {
    const auto& dO = g.grad(self);
    const auto& Q = g.value(q);
    const auto& K = g.value(k);
    const auto& Vv = g.value(v);
    const std::size_t hd = d / num_heads;
    const Real sc = Real{1} / std::sqrt(static_cast<Real>(hd));
    std::vector<Real>* gq = g.requires_grad(q) ? &g.grad(q) : nullptr;
    std::vector<Real>* gk = g.requires_grad(k) ? &g.grad(k) : nullptr;
    std::vector<Real>* gv = g.requires_grad(v) ? &g.grad(v) : nullptr;
    std::vector<Real> dS(T);
    for (std::size_t t = 0; t < T; ++t) {
      const auto& P = (*probs)[t];
      const std::size_t cnt = t + 1;
      for (std::size_t h = 0; h < num_heads; ++h) {
        const std::size_t off = h * hd;
        const Real* p = P.data() + h * cnt;
        Real dot{0};
        for (std::size_t s = 0; s < cnt; ++s) {
          Real dp{0};
          for (std::size_t i = 0; i < hd; ++i) dp += dO[t * d + off + i] * Vv[s * d + off + i];
          dS[s] = dp;
          dot += p[s] * dp;
          if (gv)
            for (std::size_t i = 0; i < hd; ++i) (*gv)[s * d + off + i] += p[s] * dO[t * d + off + i];
        }
        for (std::size_t s = 0; s < cnt; ++s) {
          const Real ds = p[s] * (dS[s] - dot) * sc;
          if (gq)
            for (std::size_t i = 0; i < hd; ++i) (*gq)[t * d + off + i] += ds * K[s * d + off + i];
          if (gk)
            for (std::size_t i = 0; i < hd; ++i) (*gk)[s * d + off + i] += ds * Q[t * d + off + i];
        }
      }
    }
  });
}

template <typename Real>
Var rotary(Graph<Real>& g, Var x, std::size_t head_dim, const Tensor<Real>& cos_t, const Tensor<Real>& sin_t) {
  const auto& X = g.value(x);
  const std::size_t n = X.rows(), c = X.cols();
  if (head_dim % 2 != 0 || c % head_dim != 0) throw ShapeError("rotary: bad head_dim for " + shape_string(X.shape()));
  if (cos_t.rows() != n || cos_t.cols() != head_dim / 2) mismatch("rotary", X.shape(), cos_t.shape());
  Tensor<Real> out = X;
  for (std::size_t r = 0; r < n; ++r) kernels::rotary_row<Real>(out.row(r), head_dim, cos_t.row(r), sin_t.row(r));
  return g.emit(std::move(out), {x}, [x, n, c, head_dim, cos_t, sin_t](Graph<Real>& g, Var self) {
    const auto& d = g.grad(self);
    auto& gx = g.grad(x);
    for (std::size_t r = 0; r < n; ++r) {
      const auto cs = cos_t.row(r);
      const auto sn = sin_t.row(r);
      for (std::size_t h0 = 0; h0 < c; h0 += head_dim)
        for (std::size_t i = 0; i < head_dim / 2; ++i) {
          const std::size_t a = r * c + h0 + 2 * i;
          const Real d0 = d[a], d1 = d[a + 1];
          gx[a] += d0 * cs[i] + d1 * sn[i];
          gx[a + 1] += -d0 * sn[i] + d1 * cs[i];
        }
    }
  });
}

#define ENGRAM_AR_INSTANTIATE(Real)                                                                   \
  template class Graph<Real>;                                                                         \
  template Var matmul<Real>(Graph<Real>&, Var, Var);                                                  \
  template Var add<Real>(Graph<Real>&, Var, Var);                                                     \
  template Var mul<Real>(Graph<Real>&, Var, Var);                                                     \
  template Var scale<Real>(Graph<Real>&, Var, double);                                                \
  template Var sum_cols<Real>(Graph<Real>&, Var);                                                     \
  template Var concat_cols<Real>(Graph<Real>&, std::span<const Var>);                                 \
  template Var concat_rows<Real>(Graph<Real>&, std::span<const Var>);                                 \
  template Var slice_rows<Real>(Graph<Real>&, Var, std::size_t, std::size_t);                         \
  template Var softmax<Real>(Graph<Real>&, Var);                                                      \
  template Var sigmoid<Real>(Graph<Real>&, Var);                                                      \
  template Var silu<Real>(Graph<Real>&, Var);                                                         \
  template Var rms_norm<Real>(Graph<Real>&, Var, Var);                                                \
  template Var embedding_gather<Real>(Graph<Real>&, Var, std::span<const std::int64_t>);              \
  template Var depthwise_causal_conv1d<Real>(Graph<Real>&, Var, Var);                                 \
  template Var cross_entropy<Real>(Graph<Real>&, Var, std::span<const std::int32_t>);                 \
  template Var causal_attention<Real>(Graph<Real>&, Var, Var, Var, std::size_t);                      \
  template Var rotary<Real>(Graph<Real>&, Var, std::size_t, const Tensor<Real>&, const Tensor<Real>&);

ENGRAM_AR_INSTANTIATE(float)
ENGRAM_AR_INSTANTIATE(double)

}  // namespace engram_ar
