#include "engram_ar/tokens.hpp"

#include <algorithm>
#include <bit>
#include <map>
#include <string>

#include "engram_ar/errors.hpp"
#include "engram_ar/rng.hpp"

namespace engram_ar {

void SequenceLayout::validate() const {
  if (grid_height <= 0 || grid_width <= 0) throw ConfigError("grid dimensions must be positive");
  if (image_vocab <= 0) throw ConfigError("image vocabulary must be non-empty");
  if (prefix_vocab < 0 || prefix_len < 0) throw ConfigError("prefix sizes must be non-negative");
}

SequenceLayout TokenGrid::layout() const {
  return SequenceLayout{height, width, vocab_size, prefix_vocab, static_cast<int>(prefix.size())};
}

void TokenGrid::validate() const {
  if (height <= 0 || width <= 0) throw ConfigError("grid dimensions must be positive");
  if (cells.size() != static_cast<std::size_t>(height) * width)
    throw ConfigError("cell count " + std::to_string(cells.size()) + " != height*width");
  for (TokenId t : cells)
    if (t < 0 || t >= vocab_size) throw ConfigError("cell id out of vocabulary: " + std::to_string(t));
  for (TokenId t : prefix)
    if (t < 0 || t >= prefix_vocab) throw ConfigError("prefix id out of range: " + std::to_string(t));
  if (!prefix.empty() && prefix[0] != class_id) throw ConfigError("prefix[0] must encode class_id");
}

SequenceLayout CorpusSpec::layout() const {
  return SequenceLayout{grid_height, grid_width, vocab_size, prefix_vocab(), prefix_len()};
}

MotifShape CorpusSpec::motif_shape(int motif_id) const {
  return motif_shapes[static_cast<std::size_t>(motif_id) % motif_shapes.size()];
}

std::uint64_t CorpusSpec::fingerprint() const {
  std::uint64_t h = derive_seed(seed, "corpus-spec",
                                {static_cast<std::uint64_t>(num_classes),
                                 static_cast<std::uint64_t>(grid_height),
                                 static_cast<std::uint64_t>(grid_width),
                                 static_cast<std::uint64_t>(vocab_size),
                                 static_cast<std::uint64_t>(motifs_per_class),
                                 static_cast<std::uint64_t>(aux_tokens)});
  for (const auto& s : motif_shapes)
    h = derive_seed(h, {static_cast<std::uint64_t>(s.rows), static_cast<std::uint64_t>(s.cols)});
  // Exact bit patterns of the rates.
  h = derive_seed(h, {std::bit_cast<std::uint64_t>(motif_fill_fraction),
                      std::bit_cast<std::uint64_t>(noise_rate)});
  return h;
}

void CorpusSpec::validate() const {
  if (num_classes <= 0) throw ConfigError("num_classes must be positive");
  if (grid_height <= 0 || grid_width <= 0) throw ConfigError("grid dimensions must be positive");
  if (vocab_size <= 0) throw ConfigError("vocab_size must be positive");
  if (vocab_size + prefix_vocab() + 1 > 65536)
    throw ConfigError("vocabulary does not fit 16-bit token ids");
  if (motifs_per_class < 0) throw ConfigError("motifs_per_class must be non-negative");
  if (motifs_per_class > 0 && motif_shapes.empty()) throw ConfigError("motif_shapes is empty");
  for (const auto& s : motif_shapes) {
    if (s.rows <= 0 || s.cols <= 0) throw ConfigError("motif shape must be positive");
    if (s.rows > grid_height || s.cols > grid_width)
      throw ConfigError("motif " + std::to_string(s.rows) + "x" + std::to_string(s.cols) +
                        " larger than grid");
  }
  if (!(motif_fill_fraction >= 0.0 && motif_fill_fraction <= 1.0))
    throw ConfigError("motif_fill_fraction must lie in [0,1]");
  if (!(noise_rate >= 0.0 && noise_rate <= 1.0)) throw ConfigError("noise_rate must lie in [0,1]");
  if (aux_tokens < 0) throw ConfigError("aux_tokens must be non-negative");
}

std::vector<TokenId> motif_tokens(const CorpusSpec& spec, int class_id, int motif_id) {
  const MotifShape shape = spec.motif_shape(motif_id);
  CounterRng rng(spec.seed, "motif",
                 {static_cast<std::uint64_t>(class_id), static_cast<std::uint64_t>(motif_id)});
  std::vector<TokenId> out(static_cast<std::size_t>(shape.rows) * shape.cols);
  for (auto& t : out) t = static_cast<TokenId>(rng.below(static_cast<std::uint64_t>(spec.vocab_size)));
  return out;
}

TokenId background_token(const CorpusSpec& spec, int class_id) {
  CounterRng rng(spec.seed, "background", {static_cast<std::uint64_t>(class_id)});
  return static_cast<TokenId>(rng.below(static_cast<std::uint64_t>(spec.vocab_size)));
}

std::vector<TokenId> prefix_for_class(const CorpusSpec& spec, TokenId class_or_null) {
  std::vector<TokenId> prefix;
  prefix.reserve(static_cast<std::size_t>(spec.prefix_len()));
  prefix.push_back(class_or_null);
  for (int j = 0; j < spec.aux_tokens; ++j) prefix.push_back(spec.num_classes + 1 + j);
  return prefix;
}

namespace {

bool fits(const std::vector<char>& used, int width, int row, int col, MotifShape s) {
  for (int r = 0; r < s.rows; ++r)
    for (int c = 0; c < s.cols; ++c)
      if (used[static_cast<std::size_t>(row + r) * width + col + c]) return false;
  return true;
}

}  // namespace

TokenGrid generate_sample(const CorpusSpec& spec, std::int64_t sample_index) {
  spec.validate();
  const int H = spec.grid_height;
  const int W = spec.grid_width;
  const int class_id = static_cast<int>(sample_index % spec.num_classes);
  const auto idx = static_cast<std::uint64_t>(sample_index);

  TokenGrid grid;
  grid.height = H;
  grid.width = W;
  grid.vocab_size = spec.vocab_size;
  grid.prefix_vocab = spec.prefix_vocab();
  grid.class_id = class_id;
  grid.prefix = prefix_for_class(spec, class_id);
  grid.cells.assign(static_cast<std::size_t>(H) * W, background_token(spec, class_id));

  GridOrigin origin;
  origin.spec_fingerprint = spec.fingerprint();
  origin.sample_index = sample_index;

  CounterRng include_rng(spec.seed, "include", {idx});
  CounterRng place_rng(spec.seed, "place", {idx});
  std::vector<char> used(grid.cells.size(), 0);
  for (int m = 0; m < spec.motifs_per_class; ++m) {
    if (!include_rng.bernoulli(spec.motif_fill_fraction)) continue;
    const MotifShape s = spec.motif_shape(m);
    const int max_r = H - s.rows;
    const int max_c = W - s.cols;
    std::optional<std::pair<int, int>> spot;
    for (int attempt = 0; attempt < 32 && !spot; ++attempt) {
      const int r = static_cast<int>(place_rng.below(static_cast<std::uint64_t>(max_r + 1)));
      const int c = static_cast<int>(place_rng.below(static_cast<std::uint64_t>(max_c + 1)));
      if (fits(used, W, r, c, s)) spot = std::pair{r, c};
    }
    // Exhaustive scan from a seeded start before giving up on the motif.
    if (!spot) {
      const int total = (max_r + 1) * (max_c + 1);
      const int start = static_cast<int>(place_rng.below(static_cast<std::uint64_t>(total)));
      for (int k = 0; k < total && !spot; ++k) {
        const int p = (start + k) % total;
        const int r = p / (max_c + 1);
        const int c = p % (max_c + 1);
        if (fits(used, W, r, c, s)) spot = std::pair{r, c};
      }
    }
    if (!spot) continue;
    const auto [r0, c0] = *spot;
    const auto tokens = motif_tokens(spec, class_id, m);
    for (int r = 0; r < s.rows; ++r)
      for (int c = 0; c < s.cols; ++c) {
        const auto cell = static_cast<std::size_t>(r0 + r) * W + c0 + c;
        used[cell] = 1;
        grid.cells[cell] = tokens[static_cast<std::size_t>(r) * s.cols + c];
      }
    origin.motifs.push_back({m, r0, c0});
  }

  CounterRng noise_rng(spec.seed, "noise", {idx});
  for (auto& cell : grid.cells) {
    const bool replace = noise_rng.bernoulli(spec.noise_rate);
    const auto token = static_cast<TokenId>(noise_rng.below(static_cast<std::uint64_t>(spec.vocab_size)));
    if (replace) cell = token;
  }
  grid.origin = std::move(origin);
  return grid;
}

std::vector<TokenGrid> generate_corpus(const CorpusSpec& spec, std::int64_t count,
                                       std::int64_t first_index) {
  spec.validate();
  if (count < 0) throw ConfigError("corpus count must be non-negative");
  std::vector<TokenGrid> out;
  out.reserve(static_cast<std::size_t>(count));
  for (std::int64_t i = 0; i < count; ++i) out.push_back(generate_sample(spec, first_index + i));
  return out;
}

std::vector<TokenId> raster_flatten(const TokenGrid& grid) {
  std::vector<TokenId> seq;
  seq.reserve(grid.prefix.size() + grid.cells.size());
  for (TokenId p : grid.prefix) seq.push_back(grid.vocab_size + p);
  seq.insert(seq.end(), grid.cells.begin(), grid.cells.end());
  return seq;
}

TokenGrid unflatten(std::span<const TokenId> sequence, const SequenceLayout& layout) {
  if (sequence.size() != static_cast<std::size_t>(layout.sequence_length()))
    throw DomainError("sequence length " + std::to_string(sequence.size()) +
                      " does not match layout length " + std::to_string(layout.sequence_length()));
  TokenGrid grid;
  grid.height = layout.grid_height;
  grid.width = layout.grid_width;
  grid.vocab_size = layout.image_vocab;
  grid.prefix_vocab = layout.prefix_vocab;
  for (int i = 0; i < layout.prefix_len; ++i) grid.prefix.push_back(sequence[i] - layout.image_vocab);
  grid.cells.assign(sequence.begin() + layout.prefix_len, sequence.end());
  grid.class_id = grid.prefix.empty() ? 0 : grid.prefix[0];
  return grid;
}

double pair_similarity(const TokenGrid& a, const TokenGrid& b) {
  if (!a.origin || !b.origin) throw ConfigError("pair_similarity needs generator ground truth");
  if (a.origin->spec_fingerprint != b.origin->spec_fingerprint)
    throw ConfigError("pair_similarity: grids come from different corpus specs");
  if (a.class_id != b.class_id) return 0.0;  // class motif pools are disjoint
  const auto& ma = a.origin->motifs;
  const auto& mb = b.origin->motifs;
  const std::size_t denom = std::max(ma.size(), mb.size());
  if (denom == 0) return 1.0;
  std::map<int, int> counts;
  for (const auto& m : ma) ++counts[m.motif_id];
  std::size_t shared = 0;
  for (const auto& m : mb) {
    auto it = counts.find(m.motif_id);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++shared;
    }
  }
  return 0.5 + 0.5 * static_cast<double>(shared) / static_cast<double>(denom);
}

}  // namespace engram_ar
