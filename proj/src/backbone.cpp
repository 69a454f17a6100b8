#include "engram_ar/backbone.hpp"

#include <cmath>
#include <string>

#include "engram_ar/errors.hpp"

namespace engram_ar {

std::vector<TokenId> BackboneConfig::prefix_for_class(TokenId class_or_null) const {
  std::vector<TokenId> prefix{class_or_null};
  for (int j = 0; j < aux_tokens; ++j) prefix.push_back(num_classes + 1 + j);
  return prefix;
}

void BackboneConfig::validate() const {
  if (num_layers < 0) throw ConfigError("num_layers must be non-negative");
  if (hidden <= 0 || num_heads <= 0) throw ConfigError("hidden and num_heads must be positive");
  if (hidden % num_heads != 0)
    throw ConfigError("hidden " + std::to_string(hidden) + " not divisible by " + std::to_string(num_heads) + " heads");
  if (head_dim() % 4 != 0) throw ConfigError("head_dim must be a multiple of 4 for 2D rotary halves");
  if (ffn_inner <= 0) throw ConfigError("ffn_inner must be positive");
  if (image_vocab <= 0 || num_classes <= 0 || aux_tokens < 0) throw ConfigError("bad vocabulary sizes");
  if (grid_height <= 0 || grid_width <= 0) throw ConfigError("grid dimensions must be positive");
  if (!(rope_base > 1.0)) throw ConfigError("rope_base must exceed 1");
}

int BackboneConfig::default_ffn_inner(int hidden) {
  const double raw = 8.0 * hidden / 3.0;
  const int rounded = static_cast<int>(std::floor(raw / 64.0 + 0.5)) * 64;
  return rounded < 64 ? 64 : rounded;
}

std::vector<double> rope2d(const BackboneConfig& cfg, int position) {
  const int total = cfg.prefix_len() + cfg.grid_height * cfg.grid_width;
  if (position < 0 || position >= total)
    throw DomainError("rope2d: position " + std::to_string(position) + " outside [0, " + std::to_string(total) + ")");
  const int hd = cfg.head_dim();
  std::vector<double> angles(static_cast<std::size_t>(hd / 2));
  if (position < cfg.prefix_len()) {
    for (int i = 0; i < hd / 2; ++i) angles[i] = position * std::pow(cfg.rope_base, -2.0 * i / hd);
    return angles;
  }
  const int idx = position - cfg.prefix_len();
  const int row = idx / cfg.grid_width;
  const int col = idx % cfg.grid_width;
  const int quarter = hd / 4;
  const int half = hd / 2;
  for (int i = 0; i < quarter; ++i) {
    const double freq = std::pow(cfg.rope_base, -2.0 * i / half);
    angles[i] = row * freq;
    angles[quarter + i] = col * freq;
  }
  return angles;
}

template <typename Real>
RopeTables<Real> RopeTables<Real>::build(const BackboneConfig& cfg, int count) {
  const auto half = static_cast<std::size_t>(cfg.head_dim() / 2);
  RopeTables t{Tensor<Real>::matrix(static_cast<std::size_t>(count), half),
               Tensor<Real>::matrix(static_cast<std::size_t>(count), half)};
  for (int p = 0; p < count; ++p) {
    const auto angles = rope2d(cfg, p);
    for (std::size_t i = 0; i < half; ++i) {
      t.cos(p, i) = static_cast<Real>(std::cos(angles[i]));
      t.sin(p, i) = static_cast<Real>(std::sin(angles[i]));
    }
  }
  return t;
}

template struct RopeTables<float>;
template struct RopeTables<double>;

}  // namespace engram_ar
