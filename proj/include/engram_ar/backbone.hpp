#pragma once

#include <vector>

#include "engram_ar/tensor.hpp"
#include "engram_ar/tokens.hpp"

namespace engram_ar {

/// Causal transformer dimensions. Token ids follow SequenceLayout: image
/// ids, then prefix ids, then one sentinel id (never fed as input).
struct BackboneConfig {
  int num_layers = 2;
  int hidden = 16;
  int num_heads = 2;
  int ffn_inner = 48;
  int image_vocab = 32;
  int num_classes = 4;
  int aux_tokens = 1;
  int grid_height = 4;
  int grid_width = 4;
  double rope_base = 10000.0;

  int head_dim() const { return hidden / num_heads; }
  int prefix_len() const { return 1 + aux_tokens; }
  int prefix_vocab() const { return num_classes + 1 + aux_tokens; }
  int vocab_size_total() const { return image_vocab + prefix_vocab() + 1; }
  TokenId null_class_id() const { return num_classes; }
  SequenceLayout layout() const {
    return SequenceLayout{grid_height, grid_width, image_vocab, prefix_vocab(), prefix_len()};
  }
  /// Prefix ids (not offset) for a class or the null id.
  std::vector<TokenId> prefix_for_class(TokenId class_or_null) const;
  void validate() const;

  /// 8d/3 rounded to the nearest multiple of 64 (at least 64).
  static int default_ffn_inner(int hidden);

  friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;
};

/// Rotation angle per rotary pair (head_dim/2 values) at a sequence position.
/// Prefix positions use 1D rotary over the whole head; image positions
/// rotate the first half of the head by row and the second half by column.
std::vector<double> rope2d(const BackboneConfig& cfg, int position);

/// cos/sin tables [positions, head_dim/2] for positions [0, count).
template <typename Real>
struct RopeTables {
  Tensor<Real> cos;
  Tensor<Real> sin;
  static RopeTables build(const BackboneConfig& cfg, int count);
};

}  // namespace engram_ar
