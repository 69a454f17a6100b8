#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace engram_ar {

using TokenId = std::int32_t;

/// Flattened-sequence geometry shared by the model, hashing, and corpus code.
///
/// Model-space ids: image tokens occupy [0, V), prefix tokens are offset to
/// [V, V + V_pre), and V + V_pre is the out-of-grid sentinel used only as a
/// hash context id.
struct SequenceLayout {
  int grid_height = 0;
  int grid_width = 0;
  int image_vocab = 0;   // V
  int prefix_vocab = 0;  // V_pre
  int prefix_len = 0;    // P

  int image_tokens() const { return grid_height * grid_width; }
  int sequence_length() const { return prefix_len + image_tokens(); }
  TokenId sentinel() const { return image_vocab + prefix_vocab; }
  int vocab_total() const { return image_vocab + prefix_vocab + 1; }
  TokenId prefix_token(TokenId prefix_id) const { return image_vocab + prefix_id; }
  bool is_image_position(int seq_pos) const {
    return seq_pos >= prefix_len && seq_pos < sequence_length();
  }
  void validate() const;
};

struct MotifInstance {
  int motif_id = 0;  // index within the class's motif pool
  int row = 0;
  int col = 0;
  friend bool operator==(const MotifInstance&, const MotifInstance&) = default;
};

/// Ground truth recorded by the generator; pair_similarity reads it.
struct GridOrigin {
  std::uint64_t spec_fingerprint = 0;
  std::int64_t sample_index = 0;
  std::vector<MotifInstance> motifs;
  friend bool operator==(const GridOrigin&, const GridOrigin&) = default;
};

struct TokenGrid {
  int height = 0;
  int width = 0;
  int vocab_size = 0;
  int prefix_vocab = 0;
  int class_id = 0;
  std::vector<TokenId> cells;   // row-major, ids in [0, vocab_size)
  std::vector<TokenId> prefix;  // ids in [0, prefix_vocab); prefix[0] is the class token
  std::optional<GridOrigin> origin;

  TokenId at(int row, int col) const { return cells[static_cast<std::size_t>(row) * width + col]; }
  SequenceLayout layout() const;
  void validate() const;

  friend bool operator==(const TokenGrid&, const TokenGrid&) = default;
};

struct MotifShape {
  int rows = 1;
  int cols = 1;
  friend bool operator==(const MotifShape&, const MotifShape&) = default;
};

/// Planted-motif corpus generator settings.
///
/// Each class owns `motifs_per_class` fixed token patches and a background
/// token. Every grid of a class includes each class motif independently with
/// probability `motif_fill_fraction`, stamped at seeded non-overlapping
/// positions; every cell is then replaced by a uniform token with
/// probability `noise_rate`.
struct CorpusSpec {
  int num_classes = 10;
  int grid_height = 8;
  int grid_width = 8;
  int vocab_size = 64;
  int motifs_per_class = 6;
  std::vector<MotifShape> motif_shapes = {{2, 2}, {1, 3}, {3, 1}, {2, 3}};
  double motif_fill_fraction = 0.6;
  double noise_rate = 0.1;
  std::uint64_t seed = 42;
  int aux_tokens = 1;

  int prefix_len() const { return 1 + aux_tokens; }
  /// class ids, one null (unconditional) id, then the auxiliary ids.
  int prefix_vocab() const { return num_classes + 1 + aux_tokens; }
  TokenId null_class_id() const { return num_classes; }
  SequenceLayout layout() const;
  MotifShape motif_shape(int motif_id) const;
  std::uint64_t fingerprint() const;
  void validate() const;

  friend bool operator==(const CorpusSpec&, const CorpusSpec&) = default;
};

/// Token content of motif `motif_id` of class `class_id`, row-major.
std::vector<TokenId> motif_tokens(const CorpusSpec& spec, int class_id, int motif_id);
TokenId background_token(const CorpusSpec& spec, int class_id);
std::vector<TokenId> prefix_for_class(const CorpusSpec& spec, TokenId class_or_null);

TokenGrid generate_sample(const CorpusSpec& spec, std::int64_t sample_index);
std::vector<TokenGrid> generate_corpus(const CorpusSpec& spec, std::int64_t count,
                                       std::int64_t first_index = 0);

/// Model-space sequence: prefix ids (offset by V) followed by cells in raster order.
std::vector<TokenId> raster_flatten(const TokenGrid& grid);
TokenGrid unflatten(std::span<const TokenId> sequence, const SequenceLayout& layout);

/// Ground-truth similarity in [0, 1]: 0.5 for a class match plus half the
/// fraction of shared motif instances.
double pair_similarity(const TokenGrid& a, const TokenGrid& b);

}  // namespace engram_ar
