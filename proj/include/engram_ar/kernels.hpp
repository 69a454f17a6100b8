#pragma once

// Row-level kernels shared by the taped ops and the incremental decoder, so
// both paths run identical arithmetic where they can.

#include <cmath>
#include <cstddef>
#include <span>

namespace engram_ar::kernels {

inline constexpr double kRmsEps = 1e-6;

template <typename Real>
Real sigmoid(Real x) {
  return Real{1} / (Real{1} + std::exp(-x));
}

template <typename Real>
Real silu(Real x) {
  return x * sigmoid(x);
}

/// Returns 1 / sqrt(mean(x^2) + eps).
template <typename Real>
Real rms_inverse(std::span<const Real> x) {
  Real ss{0};
  for (Real v : x) ss += v * v;
  return Real{1} / std::sqrt(ss / static_cast<Real>(x.size()) + static_cast<Real>(kRmsEps));
}

/// y = x * rms_inverse(x) * scale, applied independently to each contiguous
/// group of scale.size() elements.
template <typename Real>
void rms_norm_row(std::span<const Real> x, std::span<const Real> scale, std::span<Real> y) {
  const std::size_t group = scale.size();
  for (std::size_t g0 = 0; g0 < x.size(); g0 += group) {
    const Real inv = rms_inverse(x.subspan(g0, group));
    for (std::size_t i = 0; i < group; ++i) y[g0 + i] = x[g0 + i] * inv * scale[i];
  }
}

/// Rotates consecutive pairs of each head slice by the given angles
/// (cos/sin have head_dim/2 entries).
template <typename Real>
void rotary_row(std::span<Real> x, std::size_t head_dim, std::span<const Real> cos_a, std::span<const Real> sin_a) {
  for (std::size_t h0 = 0; h0 < x.size(); h0 += head_dim) {
    for (std::size_t i = 0; i < head_dim / 2; ++i) {
      const Real a = x[h0 + 2 * i];
      const Real b = x[h0 + 2 * i + 1];
      x[h0 + 2 * i] = a * cos_a[i] - b * sin_a[i];
      x[h0 + 2 * i + 1] = a * sin_a[i] + b * cos_a[i];
    }
  }
}

/// Causal attention output for one query row over `count` cached rows.
/// keys/values are row-major [count, d]; probs receives per-head
/// probabilities laid out [head][count] when non-empty.
template <typename Real>
void attend_row(std::span<const Real> q, const Real* keys, const Real* values, std::size_t count, std::size_t d,
                std::size_t num_heads, std::span<Real> out, std::span<Real> scratch, std::span<Real> probs = {}) {
  const std::size_t hd = d / num_heads;
  const Real scale = Real{1} / std::sqrt(static_cast<Real>(hd));
  for (std::size_t h = 0; h < num_heads; ++h) {
    const std::size_t off = h * hd;
    Real mx = -INFINITY;
    for (std::size_t s = 0; s < count; ++s) {
      Real dot{0};
      const Real* k = keys + s * d + off;
      for (std::size_t i = 0; i < hd; ++i) dot += q[off + i] * k[i];
      scratch[s] = dot * scale;
      if (scratch[s] > mx) mx = scratch[s];
    }
    Real total{0};
    for (std::size_t s = 0; s < count; ++s) {
      scratch[s] = std::exp(scratch[s] - mx);
      total += scratch[s];
    }
    for (std::size_t i = 0; i < hd; ++i) out[off + i] = Real{0};
    for (std::size_t s = 0; s < count; ++s) {
      const Real p = scratch[s] / total;
      if (!probs.empty()) probs[h * count + s] = p;
      const Real* v = values + s * d + off;
      for (std::size_t i = 0; i < hd; ++i) out[off + i] += p * v[i];
    }
  }
}

/// One output row of the depthwise causal convolution at time t.
/// weights are [channels, taps]; the last tap multiplies x[t].
/// `history(j)` returns the input row at time t - (taps - 1) + j, or an
/// empty span for times before the sequence start.
template <typename Real, typename History>
void causal_conv_row(std::span<const Real> weights, std::size_t channels, std::size_t taps, History&& history,
                     std::span<Real> out) {
  for (std::size_t c = 0; c < channels; ++c) out[c] = Real{0};
  for (std::size_t j = 0; j < taps; ++j) {
    std::span<const Real> xr = history(j);
    if (xr.empty()) continue;
    for (std::size_t c = 0; c < channels; ++c) out[c] += weights[c * taps + j] * xr[c];
  }
}

}  // namespace engram_ar::kernels
