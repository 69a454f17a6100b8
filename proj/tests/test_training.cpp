#include <doctest.h>

#include <cmath>

#include "engram_ar/config.hpp"
#include "engram_ar/training.hpp"
#include "fixtures.hpp"

using namespace engram_ar;
using fixture::tiny_model;

TEST_CASE("parameter accounting examples") {
  const auto base = tiny_model();
  CHECK(count_params(base.backbone, {}).rho == 1.0);

  auto cfg = tiny_model(BankVariant::seq1d, {0}, 4, 8, 101);
  const auto r = count_params(cfg.backbone, cfg.engram);
  CHECK(r.memory_params == 2 * 4 * 101 * 8);
  CHECK(r.total == r.backbone_params + r.memory_params + r.engram_glue_params);
  CHECK(r.rho > 0.0);
  CHECK(r.rho < 1.0);

  // Hand-expanded backbone count for the tiny shape: V_total = 32 + 6 + 1.
  const std::int64_t d = 16, f = 48, V = 39, hd = 8;
  CHECK(r.backbone_params == 2 * V * d + d + 2 * (2 * d + 4 * d * d + 2 * hd + 3 * d * f));
}

TEST_CASE("AR-B backbone is about 177M parameters") {
  const auto x = ExperimentConfig::ar_b();
  CHECK(x.model.backbone.vocab_size_total() == 4096 + 1017 + 1);
  const auto r = count_params(x.model.backbone, {});
  CHECK(std::abs(static_cast<double>(r.total) - 177e6) / 177e6 <= 0.03);
}

TEST_CASE("solve_table_size") {
  const auto cfg = tiny_model();
  const auto banks = banks_for_variant(BankVariant::seq1d);
  CHECK(solve_table_size(0.9999, cfg.backbone, banks, 2, 8, 1) == 2);
  std::int64_t prev = 0;
  for (double target : {0.8, 0.4, 0.2, 0.1}) {
    const auto m = solve_table_size(target, cfg.backbone, banks, 2, 8, 1);
    CHECK(is_prime(m));
    CHECK(m > prev);
    prev = m;
    auto mods = engram_layers(std::vector<int>{0}, BankVariant::seq1d, 2, 8, m, 1e-4, TableMode::learned);
    const double rho = count_params(cfg.backbone, mods).rho;
    CHECK(rho <= target);
    CHECK(std::abs(rho - target) <= 0.01);
  }
  CHECK_THROWS_AS(solve_table_size(1.0, cfg.backbone, banks, 2, 8, 1), DomainError);
  CHECK_THROWS_AS(solve_table_size(0.0, cfg.backbone, banks, 2, 8, 1), DomainError);
  CHECK_THROWS_AS(solve_table_size(0.01, cfg.backbone, banks, 2, 8, 1, 1000), DomainError);
}

TEST_CASE("learning rate schedule") {
  TrainConfig cfg;
  cfg.lr = 1.0;
  cfg.total_steps = 100;
  CHECK(learning_rate(cfg, 0) == doctest::Approx(0.5));  // 2 warmup steps
  CHECK(learning_rate(cfg, 1) == doctest::Approx(1.0));
  CHECK(learning_rate(cfg, 2) == doctest::Approx(1.0));
  CHECK(learning_rate(cfg, 51) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(learning_rate(cfg, 100) == doctest::Approx(0.0));
  for (int s = 2; s < 99; ++s) CHECK(learning_rate(cfg, s + 1) <= learning_rate(cfg, s));
}

TEST_CASE("AdamW single step matches the closed form") {
  // f(x) = 0.5 a x^2 per coordinate; gradient a x.
  ParamSet<double> p;
  p.add("w", Tensor<double>({1, 3}, std::vector<double>{0.5, -2.0, 3.0}), ParamGroup::weight);
  p.add("n", Tensor<double>({3}, std::vector<double>{1.5, 0.25, -1.0}), ParamGroup::norm);
  const double a = 0.7;
  TrainConfig cfg;
  auto state = AdamState<double>::zeros(p);
  const auto before = p;
  GradSet<double> g(p);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 3; ++j) g[i][j] = a * p[i].value[j];
  const double lr = 1e-2;
  adamw_step(p, g, state, cfg, lr);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      const double x = before[i].value[j];
      const double grad = a * x;
      // After one step the bias-corrected moments are g and g^2.
      double expect = x;
      if (i == 0) expect -= lr * cfg.weight_decay * x;
      expect -= lr * grad / (std::abs(grad) + cfg.adam_eps);
      CHECK(std::abs(p[i].value[j] - expect) <= 1e-10);
    }
  CHECK(state.step == 1);

  // Second step against a hand-rolled recurrence.
  const auto mid = p;
  GradSet<double> g2(p);
  for (std::size_t j = 0; j < 3; ++j) g2[0][j] = a * p[0].value[j];
  adamw_step(p, g2, state, cfg, lr);
  for (std::size_t j = 0; j < 3; ++j) {
    const double g1v = a * before[0].value[j], g2v = a * mid[0].value[j];
    const double m = 0.9 * (0.1 * g1v) + 0.1 * g2v;
    const double v = 0.96 * (0.04 * g1v * g1v) + 0.04 * g2v * g2v;
    const double mh = m / (1 - 0.81), vh = v / (1 - 0.96 * 0.96);
    double x = mid[0].value[j];
    x -= lr * cfg.weight_decay * x;
    x -= lr * mh / (std::sqrt(vh) + cfg.adam_eps);
    CHECK(std::abs(p[0].value[j] - x) <= 1e-10);
  }
}

TEST_CASE("frozen parameters are skipped by the optimizer") {
  ParamSet<double> p;
  p.add("t", Tensor<double>({2, 2}, 1.0), ParamGroup::table, false);
  auto state = AdamState<double>::zeros(p);
  GradSet<double> g(p);
  g[0].fill(5.0);
  adamw_step(p, g, state, TrainConfig{}, 0.1);
  CHECK(p[0].value == Tensor<double>({2, 2}, 1.0));
  CHECK(grad_norm(p, g) == 0.0);
}

namespace {

ModelConfig small_engram_model() {
  auto m = tiny_model(BankVariant::seq1d, {0}, 2, 8, 101);
  m.backbone.image_vocab = 16;
  m.backbone.num_classes = 2;
  return m;
}

std::vector<TokenGrid> small_corpus(std::int64_t n, std::int64_t first = 0) {
  CorpusSpec spec;
  spec.grid_height = spec.grid_width = 4;
  spec.vocab_size = 16;
  spec.num_classes = 2;
  spec.motifs_per_class = 2;
  spec.motif_shapes = {{2, 2}, {1, 3}};
  return generate_corpus(spec, n, first);
}

}  // namespace

TEST_CASE("zero steps leaves the initialization untouched") {
  TrainConfig tc;
  tc.total_steps = 0;
  const auto start = init_checkpoint(small_engram_model(), tc);
  const auto res = train(small_corpus(8), {}, start);
  CHECK(res.curve.empty());
  for (std::size_t i = 0; i < start.params.size(); ++i) CHECK(res.checkpoint.params[i].value == start.params[i].value);
}

TEST_CASE("short training is deterministic across thread counts and lowers the loss") {
  auto model = small_engram_model();
  TrainConfig tc;
  tc.total_steps = 30;
  tc.batch_size = 4;
  tc.lr = 3e-3;
  tc.log_interval = 10;
  const auto corpus = small_corpus(64);
  const auto val = small_corpus(8, 1000);
  tc.threads = 1;
  const auto a = train(corpus, val, init_checkpoint(model, tc));
  tc.threads = 3;
  const auto b = train(corpus, val, init_checkpoint(model, tc));
  REQUIRE(a.curve.size() == 3u);
  for (std::size_t i = 0; i < a.curve.size(); ++i) CHECK(a.curve[i].train_ce == b.curve[i].train_ce);
  for (std::size_t i = 0; i < a.checkpoint.params.size(); ++i)
    CHECK(a.checkpoint.params[i].value == b.checkpoint.params[i].value);
  const Model<float> m(a.checkpoint.model);
  const auto init = init_checkpoint(model, tc);
  CHECK(evaluate_ce(m, a.checkpoint.params, val) < evaluate_ce(m, init.params, val));
}

TEST_CASE("frozen-noise tables stay bit-identical and the loss still falls") {
  auto model = small_engram_model();
  TrainConfig tc;
  tc.total_steps = 30;
  tc.batch_size = 4;
  tc.lr = 3e-3;
  tc.table_mode = TableMode::frozen_noise;
  apply_condition(model, tc);
  const auto start = init_checkpoint(model, tc);
  const auto val = small_corpus(8, 1000);
  const auto res = train(small_corpus(64), val, start);
  bool saw_table = false, glue_moved = false;
  for (std::size_t i = 0; i < start.params.size(); ++i) {
    const auto& p = start.params[i];
    if (p.group == ParamGroup::table) {
      saw_table = true;
      CHECK_FALSE(p.trainable);
      CHECK(res.checkpoint.params[i].value == p.value);
    }
    if (p.name.ends_with(".wk")) glue_moved = res.checkpoint.params[i].value != p.value;
  }
  CHECK(saw_table);
  CHECK(glue_moved);
  const Model<float> m(res.checkpoint.model);
  CHECK(evaluate_ce(m, res.checkpoint.params, val) < evaluate_ce(m, start.params, val));
}

TEST_CASE("train config validation") {
  TrainConfig tc;
  tc.batch_size = 0;
  CHECK_THROWS_AS(tc.validate(), ConfigError);
  tc = TrainConfig{};
  tc.lr = -1;
  CHECK_THROWS_AS(tc.validate(), ConfigError);
}

TEST_CASE("divergence aborts") {
  TrainConfig tc;
  tc.total_steps = 3;
  tc.batch_size = 2;
  auto start = init_checkpoint(small_engram_model(), tc);
  start.params.at("embed.tokens").value[0] = NAN;
  CHECK_THROWS_AS(train(small_corpus(8), {}, start), NumericError);
}
