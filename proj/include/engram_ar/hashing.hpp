#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "engram_ar/errors.hpp"
#include "engram_ar/tokens.hpp"

namespace engram_ar {

enum class BankLabel { seq2, seq3, b0_1x2, b1_2x1, b2_1x3, b3_3x1, b4_2x2 };

std::string_view to_string(BankLabel label);
BankLabel bank_label_from_string(std::string_view s);

struct GridOffset {
  int drow = 0;
  int dcol = 0;
  friend bool operator==(const GridOffset&, const GridOffset&) = default;
};

inline constexpr int kMaxNgramOrder = 4;

/// A named set of causal neighbour offsets. Sequential banks (seq2, seq3)
/// read `dcol` as a step back along the flattened sequence and ignore rows.
struct BankSpec {
  int bank_id = 0;
  BankLabel label = BankLabel::seq2;
  std::vector<GridOffset> offsets;

  static BankSpec make(BankLabel label, int bank_id);
  int order() const { return static_cast<int>(offsets.size()); }
  bool sequential() const { return label == BankLabel::seq2 || label == BankLabel::seq3; }
  void validate() const;
};

enum class BankVariant { seq1d, spatial2d };
std::string_view to_string(BankVariant v);
BankVariant bank_variant_from_string(std::string_view s);

/// seq1d = {seq2, seq3}; spatial2d = {1x2, 2x1, 1x3, 3x1, 2x2}.
std::vector<BankSpec> banks_for_variant(BankVariant v);

struct HashHead {
  int head_index = 0;
  std::uint64_t seed = 0;
  std::uint64_t multiplier = 1;  // always odd
  std::int64_t table_size = 1;   // M

  /// Seed from (root, bank, head); multiplier = splitmix64(seed) | 1.
  static HashHead make(std::uint64_t root_seed, int bank_id, int head_index, std::int64_t table_size);
  void validate() const;
};

enum class TableMode { learned, frozen_noise, bucket_collapsed, randomized_at_probe };
std::string_view to_string(TableMode m);
TableMode table_mode_from_string(std::string_view s);

/// Hash context: up to kMaxNgramOrder model-space token ids.
struct NgramContext {
  std::array<TokenId, kMaxNgramOrder> ids{};
  int size = 0;

  std::span<const TokenId> view() const { return {ids.data(), static_cast<std::size_t>(size)}; }
  friend bool operator==(const NgramContext& a, const NgramContext& b) {
    if (a.size != b.size) return false;
    for (int i = 0; i < a.size; ++i)
      if (a.ids[i] != b.ids[i]) return false;
    return true;
  }
};

std::int64_t next_prime_at_least(std::int64_t n);
bool is_prime(std::int64_t n);

/// Context for the image cell (row, col) of a model-space sequence. Only
/// sequence positions up to and including the cell are read, so a partial
/// (still being generated) sequence works as long as it covers the cell.
NgramContext extract_context(std::span<const TokenId> sequence, const SequenceLayout& layout, int row,
                             int col, const BankSpec& bank);
NgramContext extract_context(const TokenGrid& grid, int row, int col, const BankSpec& bank);

inline constexpr std::uint64_t kHashAddend = 0x9E3779B97F4A7C15ULL;

/// Multiplicative-XOR hash: h = seed; h = (h ^ (z + addend)) * multiplier per
/// token (mod 2^64); bucket = h mod M.
inline std::int64_t hash_ngram(std::span<const TokenId> context, const HashHead& head) {
  std::uint64_t h = head.seed;
  for (TokenId z : context) h = (h ^ (static_cast<std::uint64_t>(static_cast<std::int64_t>(z)) + kHashAddend)) * head.multiplier;
  return static_cast<std::int64_t>(h % static_cast<std::uint64_t>(head.table_size));
}

inline std::int64_t hash_ngram(const NgramContext& context, const HashHead& head) {
  return hash_ngram(context.view(), head);
}

/// Non-owning view of one memory table E (rows x d_head, row-major).
template <typename Real>
struct TableView {
  std::span<const Real> entries;
  std::int64_t rows = 0;
  int d_head = 0;
  TableMode mode = TableMode::learned;
};

/// The hash heads of one engram layer, laid out bank-major.
struct HashLayout {
  std::vector<BankSpec> banks;
  std::vector<std::vector<HashHead>> heads;  // [bank][head]

  static HashLayout make(std::vector<BankSpec> banks, int heads_per_bank, std::int64_t table_size,
                         std::uint64_t root_seed);
  int num_banks() const { return static_cast<int>(banks.size()); }
  int heads_per_bank() const { return heads.empty() ? 0 : static_cast<int>(heads.front().size()); }
  int num_tables() const { return num_banks() * heads_per_bank(); }
};

/// Bucket indices for every (bank, head) in concatenation order.
std::vector<std::int64_t> bucket_indices(std::span<const TokenId> sequence, const SequenceLayout& layout,
                                         int row, int col, const HashLayout& hashes,
                                         bool collapse_buckets = false);

/// Concatenation over banks (bank_id order) then heads of the addressed rows.
template <typename Real>
std::vector<Real> retrieve_memory(std::span<const TokenId> sequence, const SequenceLayout& layout, int row,
                                  int col, const HashLayout& hashes, std::span<const TableView<Real>> tables) {
  if (tables.size() != static_cast<std::size_t>(hashes.num_tables()))
    throw ConfigError("retrieve_memory: expected " + std::to_string(hashes.num_tables()) + " tables, got " +
                      std::to_string(tables.size()));
  std::vector<Real> out;
  std::size_t t = 0;
  for (int b = 0; b < hashes.num_banks(); ++b) {
    const NgramContext ctx = extract_context(sequence, layout, row, col, hashes.banks[b]);
    for (const HashHead& head : hashes.heads[b]) {
      const TableView<Real>& table = tables[t++];
      if (table.rows != head.table_size) throw ConfigError("table size does not match hash head");
      const std::int64_t idx = table.mode == TableMode::bucket_collapsed ? 0 : hash_ngram(ctx, head);
      const auto row_span = table.entries.subspan(static_cast<std::size_t>(idx) * table.d_head,
                                                  static_cast<std::size_t>(table.d_head));
      out.insert(out.end(), row_span.begin(), row_span.end());
    }
  }
  return out;
}

template <typename Real>
std::vector<Real> retrieve_memory(const TokenGrid& grid, int row, int col, const HashLayout& hashes,
                                  std::span<const TableView<Real>> tables) {
  const auto seq = raster_flatten(grid);
  return retrieve_memory<Real>(seq, grid.layout(), row, col, hashes, tables);
}

}  // namespace engram_ar
