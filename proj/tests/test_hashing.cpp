#include <doctest.h>

#include <set>

#include "engram_ar/hashing.hpp"
#include "engram_ar/rng.hpp"
#include "oracles.hpp"

using namespace engram_ar;

namespace {

bool trial_division_prime(std::int64_t n) {
  if (n < 2) return false;
  for (std::int64_t d = 2; d * d <= n; ++d)
    if (n % d == 0) return false;
  return true;
}

// 2x2 grid [[a,b],[c,d]] with one prefix token k.
TokenGrid tiny_grid() {
  return TokenGrid{2, 2, 10, 3, 1, {1, 2, 3, 4}, {1}, std::nullopt};
}

}  // namespace

TEST_CASE("next_prime_at_least") {
  CHECK(next_prime_at_least(2) == 2);
  CHECK(next_prime_at_least(10) == 11);
  // The paper's sweep endpoints 5243 (7^2 x 107) and 52831 (23 x 2297) are not prime.
  CHECK(next_prime_at_least(5240) == 5261);
  CHECK_FALSE(is_prime(5243));
  CHECK_FALSE(is_prime(52831));
  CHECK_THROWS_AS(next_prime_at_least(1), DomainError);
  for (std::int64_t n = 2; n < 3000; ++n) {
    const auto p = next_prime_at_least(n);
    CHECK(trial_division_prime(p));
    for (std::int64_t q = n; q < p; ++q) CHECK_FALSE(trial_division_prime(q));
  }
  CHECK_FALSE(is_prime(36715));  // the paper's table size, 5 x 7343
}

TEST_CASE("bank specs are causal and distinct") {
  for (auto label : {BankLabel::seq2, BankLabel::seq3, BankLabel::b0_1x2, BankLabel::b1_2x1, BankLabel::b2_1x3,
                     BankLabel::b3_3x1, BankLabel::b4_2x2}) {
    const auto b = BankSpec::make(label, 0);
    CHECK_NOTHROW(b.validate());
    CHECK(bank_label_from_string(to_string(label)) == label);
  }
  BankSpec bad = BankSpec::make(BankLabel::b0_1x2, 0);
  bad.offsets[1] = {0, 1};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad.offsets[1] = {0, 0};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK(banks_for_variant(BankVariant::seq1d).size() == 2u);
  CHECK(banks_for_variant(BankVariant::spatial2d).size() == 5u);
}

TEST_CASE("context extraction") {
  const auto g = tiny_grid();
  const TokenId sent = g.layout().sentinel();
  CHECK(sent == 13);
  auto ctx = extract_context(g, 0, 0, BankSpec::make(BankLabel::b1_2x1, 1));
  CHECK(ctx.view()[0] == 1);
  CHECK(ctx.view()[1] == sent);
  ctx = extract_context(g, 1, 1, BankSpec::make(BankLabel::b4_2x2, 4));
  CHECK(std::vector<TokenId>(ctx.view().begin(), ctx.view().end()) == std::vector<TokenId>{4, 3, 2, 1});
  // seq2 at the first image cell sees the last prefix token (offset into model space).
  ctx = extract_context(g, 0, 0, BankSpec::make(BankLabel::seq2, 0));
  CHECK(ctx.view()[0] == 1);
  CHECK(ctx.view()[1] == g.vocab_size + 1);
  // seq3 reaches before the sequence start.
  ctx = extract_context(g, 0, 0, BankSpec::make(BankLabel::seq3, 1));
  CHECK(ctx.view()[2] == sent);
  CHECK_THROWS_AS(extract_context(g, 2, 0, BankSpec::make(BankLabel::seq2, 0)), DomainError);
}

TEST_CASE("hash heads") {
  const auto h = HashHead::make(123, 0, 0, 1);
  const std::vector<TokenId> ctx = {5, 9};
  CHECK(hash_ngram(ctx, h) == 0);
  const auto h2 = HashHead::make(123, 1, 3, 997);
  CHECK(h2.multiplier % 2 == 1);
  CHECK(hash_ngram(ctx, h2) == hash_ngram(ctx, h2));

  // Hand-evaluated mixing step.
  std::uint64_t x = h2.seed;
  for (TokenId z : ctx) x = (x ^ (static_cast<std::uint64_t>(z) + 0x9E3779B97F4A7C15ULL)) * h2.multiplier;
  CHECK(hash_ngram(ctx, h2) == static_cast<std::int64_t>(x % 997));

  std::set<std::uint64_t> seeds;
  for (int b = 0; b < 5; ++b)
    for (int k = 0; k < 8; ++k) seeds.insert(HashHead::make(123, b, k, 997).seed);
  CHECK(seeds.size() == 40u);
}

TEST_CASE("hash uniformity (single head)") {
  const auto head = HashHead::make(7, 0, 0, 997);
  std::vector<std::int64_t> counts(997, 0);
  CounterRng rng(11, "ctx");
  for (int i = 0; i < 200000; ++i) {
    const TokenId c[2] = {static_cast<TokenId>(rng.below(65536)), static_cast<TokenId>(rng.below(65536))};
    ++counts[hash_ngram(c, head)];
  }
  CHECK(oracle::uniform_chi_square_p(counts) > 1e-6);
}

TEST_CASE("retrieve_memory concatenates addressed rows in (bank, head) order") {
  const auto g = tiny_grid();
  auto hashes = HashLayout::make({BankSpec::make(BankLabel::b1_2x1, 1), BankSpec::make(BankLabel::b0_1x2, 0)}, 2, 7, 3);
  REQUIRE(hashes.banks[0].bank_id == 0);
  std::vector<std::vector<double>> storage(4);
  std::vector<TableView<double>> views;
  for (int t = 0; t < 4; ++t) {
    for (int r = 0; r < 7; ++r)
      for (int c = 0; c < 2; ++c) storage[t].push_back(100.0 * t + 10.0 * r + c);
    views.push_back({storage[t], 7, 2, TableMode::learned});
  }
  const auto e = retrieve_memory<double>(g, 1, 0, hashes, views);
  REQUIRE(e.size() == 8u);
  std::size_t t = 0;
  for (int b = 0; b < 2; ++b) {
    const auto ctx = extract_context(g, 1, 0, hashes.banks[b]);
    for (int k = 0; k < 2; ++k, ++t) {
      const auto row = hash_ngram(ctx, hashes.heads[b][k]);
      CHECK(e[2 * t] == 100.0 * t + 10.0 * row);
      CHECK(e[2 * t + 1] == 100.0 * t + 10.0 * row + 1);
    }
  }
  // bucket-collapsed tables ignore the position.
  for (auto& v : views) v.mode = TableMode::bucket_collapsed;
  const auto c0 = retrieve_memory<double>(g, 0, 0, hashes, views);
  const auto c1 = retrieve_memory<double>(g, 1, 1, hashes, views);
  CHECK(c0 == c1);
  views.pop_back();
  CHECK_THROWS_AS(retrieve_memory<double>(g, 0, 0, hashes, views), ConfigError);
}

TEST_CASE("paper default memory width") {
  auto hashes = HashLayout::make(banks_for_variant(BankVariant::seq1d), 4, 36715, 1);
  CHECK(hashes.num_tables() * 64 == 512);
}

TEST_CASE("retrieval is causal in raster order") {
  CorpusSpec spec;
  const auto g = generate_sample(spec, 4);
  const auto hashes = HashLayout::make(banks_for_variant(BankVariant::spatial2d), 2, 101, 9);
  const auto seq = raster_flatten(g);
  const auto layout = g.layout();
  for (int pos = 0; pos < 64; pos += 5) {
    const int row = pos / 8, col = pos % 8;
    const auto base = bucket_indices(seq, layout, row, col, hashes);
    for (int later = pos + 1; later < 64; ++later) {
      auto mutated = seq;
      mutated[layout.prefix_len + later] = (mutated[layout.prefix_len + later] + 1) % spec.vocab_size;
      CHECK(bucket_indices(mutated, layout, row, col, hashes) == base);
    }
  }
}
