#include "engram_ar/hashing.hpp"

#include <algorithm>
#include <limits>

#include "engram_ar/rng.hpp"

namespace engram_ar {

namespace {

template <typename Enum, std::size_t N>
Enum parse_enum(std::string_view s, const std::array<std::pair<std::string_view, Enum>, N>& table,
                std::string_view what) {
  for (const auto& [name, value] : table)
    if (name == s) return value;
  throw ConfigError("unknown " + std::string(what) + ": " + std::string(s));
}

constexpr std::array<std::pair<std::string_view, BankLabel>, 7> kBankLabels{{
    {"seq2", BankLabel::seq2},
    {"seq3", BankLabel::seq3},
    {"b0_1x2", BankLabel::b0_1x2},
    {"b1_2x1", BankLabel::b1_2x1},
    {"b2_1x3", BankLabel::b2_1x3},
    {"b3_3x1", BankLabel::b3_3x1},
    {"b4_2x2", BankLabel::b4_2x2},
}};

constexpr std::array<std::pair<std::string_view, BankVariant>, 2> kVariants{{
    {"seq1d", BankVariant::seq1d},
    {"spatial2d", BankVariant::spatial2d},
}};

constexpr std::array<std::pair<std::string_view, TableMode>, 4> kModes{{
    {"learned", TableMode::learned},
    {"frozen_noise", TableMode::frozen_noise},
    {"bucket_collapsed", TableMode::bucket_collapsed},
    {"randomized_at_probe", TableMode::randomized_at_probe},
}};

template <typename Enum, std::size_t N>
std::string_view enum_name(Enum v, const std::array<std::pair<std::string_view, Enum>, N>& table) {
  for (const auto& [name, value] : table)
    if (value == v) return name;
  return "?";
}

}  // namespace

std::string_view to_string(BankLabel label) { return enum_name(label, kBankLabels); }
BankLabel bank_label_from_string(std::string_view s) { return parse_enum(s, kBankLabels, "bank label"); }
std::string_view to_string(BankVariant v) { return enum_name(v, kVariants); }
BankVariant bank_variant_from_string(std::string_view s) {
  // Accept the CLI spelling too.
  if (s == "seq-1d") return BankVariant::seq1d;
  if (s == "spatial-2d") return BankVariant::spatial2d;
  return parse_enum(s, kVariants, "bank variant");
}
std::string_view to_string(TableMode m) { return enum_name(m, kModes); }
TableMode table_mode_from_string(std::string_view s) {
  if (s == "frozen-noise") return TableMode::frozen_noise;
  return parse_enum(s, kModes, "table mode");
}

BankSpec BankSpec::make(BankLabel label, int bank_id) {
  BankSpec b;
  b.bank_id = bank_id;
  b.label = label;
  switch (label) {
    case BankLabel::seq2:
    case BankLabel::b0_1x2: b.offsets = {{0, 0}, {0, -1}}; break;
    case BankLabel::seq3:
    case BankLabel::b2_1x3: b.offsets = {{0, 0}, {0, -1}, {0, -2}}; break;
    case BankLabel::b1_2x1: b.offsets = {{0, 0}, {-1, 0}}; break;
    case BankLabel::b3_3x1: b.offsets = {{0, 0}, {-1, 0}, {-2, 0}}; break;
    case BankLabel::b4_2x2: b.offsets = {{0, 0}, {0, -1}, {-1, 0}, {-1, -1}}; break;
  }
  return b;
}

void BankSpec::validate() const {
  if (offsets.empty() || offsets.size() > static_cast<std::size_t>(kMaxNgramOrder))
    throw ConfigError("bank order must be in [1, " + std::to_string(kMaxNgramOrder) + "]");
  if (offsets.front() != GridOffset{0, 0}) throw ConfigError("bank offsets must start with (0,0)");
  for (std::size_t i = 0; i < offsets.size(); ++i) {
    const auto [dr, dc] = offsets[i];
    if (!(dr < 0 || (dr == 0 && dc <= 0))) throw ConfigError("bank offset is not causal in raster order");
    for (std::size_t j = 0; j < i; ++j)
      if (offsets[j] == offsets[i]) throw ConfigError("duplicate bank offset");
  }
}

std::vector<BankSpec> banks_for_variant(BankVariant v) {
  if (v == BankVariant::seq1d) return {BankSpec::make(BankLabel::seq2, 0), BankSpec::make(BankLabel::seq3, 1)};
  return {BankSpec::make(BankLabel::b0_1x2, 0), BankSpec::make(BankLabel::b1_2x1, 1),
          BankSpec::make(BankLabel::b2_1x3, 2), BankSpec::make(BankLabel::b3_3x1, 3),
          BankSpec::make(BankLabel::b4_2x2, 4)};
}

HashHead HashHead::make(std::uint64_t root_seed, int bank_id, int head_index, std::int64_t table_size) {
  HashHead h;
  h.head_index = head_index;
  h.seed = derive_seed(root_seed, "hash-head",
                       {static_cast<std::uint64_t>(bank_id), static_cast<std::uint64_t>(head_index)});
  h.multiplier = splitmix64(h.seed) | 1ULL;
  h.table_size = table_size;
  return h;
}

void HashHead::validate() const {
  if ((multiplier & 1ULL) == 0) throw ConfigError("hash multiplier must be odd");
  if (table_size < 1) throw ConfigError("table size must be at least 1");
}

bool is_prime(std::int64_t n) {
  if (n < 2) return false;
  if (n < 4) return true;
  if (n % 2 == 0 || n % 3 == 0) return false;
  for (std::int64_t i = 5; i * i <= n; i += 6)
    if (n % i == 0 || n % (i + 2) == 0) return false;
  return true;
}

std::int64_t next_prime_at_least(std::int64_t n) {
  if (n < 2) throw DomainError("next_prime_at_least: n must be >= 2, got " + std::to_string(n));
  while (!is_prime(n)) {
    if (n == std::numeric_limits<std::int64_t>::max()) throw DomainError("next_prime_at_least: overflow");
    ++n;
  }
  return n;
}

NgramContext extract_context(std::span<const TokenId> sequence, const SequenceLayout& layout, int row,
                             int col, const BankSpec& bank) {
  if (row < 0 || row >= layout.grid_height || col < 0 || col >= layout.grid_width)
    throw DomainError("extract_context: position (" + std::to_string(row) + "," + std::to_string(col) +
                      ") outside " + std::to_string(layout.grid_height) + "x" +
                      std::to_string(layout.grid_width) + " grid");
  const int seq_pos = layout.prefix_len + row * layout.grid_width + col;
  if (seq_pos >= static_cast<int>(sequence.size()))
    throw DomainError("extract_context: sequence does not yet cover the position");
  NgramContext ctx;
  ctx.size = bank.order();
  for (int i = 0; i < ctx.size; ++i) {
    const auto [dr, dc] = bank.offsets[i];
    TokenId id = layout.sentinel();
    if (bank.sequential()) {
      const int p = seq_pos + dc;
      if (p >= 0) id = sequence[p];
    } else {
      const int r = row + dr;
      const int c = col + dc;
      if (r >= 0 && r < layout.grid_height && c >= 0 && c < layout.grid_width)
        id = sequence[layout.prefix_len + r * layout.grid_width + c];
    }
    ctx.ids[i] = id;
  }
  return ctx;
}

NgramContext extract_context(const TokenGrid& grid, int row, int col, const BankSpec& bank) {
  const auto seq = raster_flatten(grid);
  return extract_context(seq, grid.layout(), row, col, bank);
}

HashLayout HashLayout::make(std::vector<BankSpec> banks, int heads_per_bank, std::int64_t table_size,
                            std::uint64_t root_seed) {
  if (heads_per_bank <= 0) throw ConfigError("heads per bank must be positive");
  HashLayout out;
  std::sort(banks.begin(), banks.end(), [](const BankSpec& a, const BankSpec& b) { return a.bank_id < b.bank_id; });
  for (const auto& b : banks) {
    b.validate();
    std::vector<HashHead> heads;
    for (int k = 0; k < heads_per_bank; ++k) heads.push_back(HashHead::make(root_seed, b.bank_id, k, table_size));
    out.heads.push_back(std::move(heads));
  }
  out.banks = std::move(banks);
  return out;
}

std::vector<std::int64_t> bucket_indices(std::span<const TokenId> sequence, const SequenceLayout& layout,
                                         int row, int col, const HashLayout& hashes, bool collapse_buckets) {
  std::vector<std::int64_t> out;
  out.reserve(static_cast<std::size_t>(hashes.num_tables()));
  for (int b = 0; b < hashes.num_banks(); ++b) {
    const NgramContext ctx = extract_context(sequence, layout, row, col, hashes.banks[b]);
    for (const HashHead& head : hashes.heads[b]) out.push_back(collapse_buckets ? 0 : hash_ngram(ctx, head));
  }
  return out;
}

}  // namespace engram_ar
