#include <doctest.h>

#include <cmath>

#include "engram_ar/engram.hpp"
#include "engram_ar/grad_check.hpp"
#include "engram_ar/kernels.hpp"
#include "engram_ar/model.hpp"
#include "engram_ar/training.hpp"
#include "fixtures.hpp"

using namespace engram_ar;
using fixture::lively_params;
using fixture::random_sequence;
using fixture::tiny_model;

namespace {

std::vector<double> rotate(std::vector<double> x, const BackboneConfig& b, int pos) {
  const auto ang = rope2d(b, pos);
  std::vector<double> c, s;
  for (double a : ang) {
    c.push_back(std::cos(a));
    s.push_back(std::sin(a));
  }
  kernels::rotary_row<double>(x, x.size(), c, s);
  return x;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

std::vector<double> random_vec(std::size_t n, std::uint64_t key) {
  CounterRng rng(key);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

}  // namespace

// --- rotary ----------------------------------------------------------------

TEST_CASE("2D rotary") {
  BackboneConfig b;
  b.hidden = 32;
  b.num_heads = 2;
  b.grid_height = b.grid_width = 6;
  const int P = b.prefix_len();
  for (double a : rope2d(b, P)) CHECK(a == 0.0);
  const auto q = random_vec(16, 1);
  const auto r = rotate(q, b, P + 9);
  CHECK(std::sqrt(dot(r, r)) == doctest::Approx(std::sqrt(dot(q, q))).epsilon(1e-12));
  CHECK_THROWS_AS(rope2d(b, P + 36), DomainError);

  CounterRng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const auto qv = random_vec(16, 100 + trial), kv = random_vec(16, 200 + trial);
    const int r1 = static_cast<int>(rng.below(6)), c1 = static_cast<int>(rng.below(6));
    const int r2 = static_cast<int>(rng.below(6)), c2 = static_cast<int>(rng.below(6));
    const int sr = -std::min(r1, r2), sc = -std::min(c1, c2);  // shift both so the smaller lands on 0
    const double d1 = dot(rotate(qv, b, P + r1 * 6 + c1), rotate(kv, b, P + r2 * 6 + c2));
    const double d2 =
        dot(rotate(qv, b, P + (r1 + sr) * 6 + c1 + sc), rotate(kv, b, P + (r2 + sr) * 6 + c2 + sc));
    CHECK(std::abs(d1 - d2) < 1e-5);
  }
}

TEST_CASE("backbone config") {
  CHECK(BackboneConfig::default_ffn_inner(768) == 2048);
  BackboneConfig b;
  b.num_heads = 3;
  CHECK_THROWS_AS(b.validate(), ConfigError);
  b = BackboneConfig{};
  b.hidden = 18;
  b.num_heads = 2;  // head_dim 9 is odd
  CHECK_THROWS_AS(b.validate(), ConfigError);
}

// --- engram module ---------------------------------------------------------

namespace {

struct EngramRig {
  EngramModuleConfig cfg;
  ParamSet<double> params;
  static constexpr int d = 16;

  explicit EngramRig(double ls = 0.3) {
    cfg.layer_index = 0;
    cfg.banks = banks_for_variant(BankVariant::seq1d);
    cfg.num_heads = 1;
    cfg.d_head = 4;  // d_mem 8 < d: matrix W_V
    cfg.table_size = 13;
    cfg.layerscale_init = ls;
    init_engram_params(cfg, d, params, 5);
  }

  Tensor<double> run(const Tensor<double>& h, const Tensor<double>& e, std::optional<double> clamp) {
    Graph<double> g(&params, false);
    const auto vars = bind_engram(g, cfg, d);
    return g.value(engram_fuse(g, g.constant(h), g.constant(e), vars, clamp));
  }
};

Tensor<double> random_tensor(Shape s, std::uint64_t key) {
  Tensor<double> t(std::move(s));
  CounterRng rng(key);
  for (auto& v : t.values()) v = rng.normal();
  return t;
}

}  // namespace

TEST_CASE("engram gate") {
  EngramRig rig;
  Graph<double> g(&rig.params, false);
  const auto vars = bind_engram(g, rig.cfg, rig.d);
  const auto h = random_tensor({3, 16}, 1), e = random_tensor({3, 8}, 2);
  const auto g1 = g.value(engram_gate(g, g.constant(h), g.constant(e), vars));
  auto h5 = h;
  for (auto& v : h5.values()) v *= 5.0;
  const auto g5 = g.value(engram_gate(g, g.constant(h5), g.constant(e), vars));
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(g1[i] > 0.0);
    CHECK(g1[i] < 1.0);
    CHECK(std::abs(g1[i] - g5[i]) < 1e-6);
  }
  // Zero retrieval: W_K e = 0, the eps-regularized norm yields 0 and the gate is 0.5.
  const auto g0 = g.value(engram_gate(g, g.constant(h), g.constant(Tensor<double>({3, 8}, 0.0)), vars));
  for (double v : g0.values()) CHECK(v == 0.5);

  // Orthogonal normalized operands: build h orthogonal to RMSNorm(W_K e).
  const auto k = g.value(matmul(g, g.constant(e), vars.w_k));
  Tensor<double> ho({1, 16});
  const auto krow = k.row(0);
  // h = any vector minus its projection on k.
  const auto base = random_tensor({1, 16}, 9);
  double kk = 0, hk = 0;
  for (int i = 0; i < 16; ++i) {
    kk += krow[i] * krow[i];
    hk += base[i] * krow[i];
  }
  for (int i = 0; i < 16; ++i) ho[i] = base[i] - hk / kk * krow[i];
  Tensor<double> e1({1, 8});
  for (int i = 0; i < 8; ++i) e1[i] = e(0, i);
  const auto go = g.value(engram_gate(g, g.constant(ho), g.constant(e1), vars));
  CHECK(go[0] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("engram fuse identities") {
  const auto h = random_tensor({5, 16}, 3), e = random_tensor({5, 8}, 4);
  EngramRig rig;
  for (auto& v : rig.params.at("layer0.engram.conv").value.values()) v = 0.3;
  CHECK(rig.run(h, e, 0.0) == h);

  EngramRig zero_ls(0.0);
  CHECK(zero_ls.run(h, e, std::nullopt) == h);

  // clamp 1, zero conv taps, one position: h + layerscale * W_V e.
  EngramRig one(0.0);
  CounterRng rng(6);
  for (auto& v : one.params.at("layer0.engram.layerscale").value.values()) v = rng.normal();
  const auto h1 = random_tensor({1, 16}, 7), e1 = random_tensor({1, 8}, 8);
  const auto out = one.run(h1, e1, 1.0);
  const auto& wv = one.params.at("layer0.engram.wv").value;
  const auto& ls = one.params.at("layer0.engram.layerscale").value;
  for (int j = 0; j < 16; ++j) {
    double ve = 0;
    for (int i = 0; i < 8; ++i) ve += e1[i] * wv(i, j);
    CHECK(out[j] == doctest::Approx(h1[j] + ls[j] * ve).epsilon(1e-12));
  }
}

TEST_CASE("engram conv refinement is causal in the retrievals") {
  EngramRig rig;
  CounterRng rng(2);
  for (auto& v : rig.params.at("layer0.engram.conv").value.values()) v = rng.normal();
  const auto h = random_tensor({6, 16}, 3);
  auto e = random_tensor({6, 8}, 4);
  const auto base = rig.run(h, e, std::nullopt);
  e(3, 2) += 1.0;
  const auto moved = rig.run(h, e, std::nullopt);
  for (std::size_t t = 0; t < 6; ++t)
    for (std::size_t c = 0; c < 16; ++c)
      if (t < 3) CHECK(moved(t, c) == base(t, c));
  CHECK(moved.row(3)[0] != base.row(3)[0]);
}

TEST_CASE("value MLP kicks in when d_mem exceeds d") {
  EngramModuleConfig cfg;
  cfg.banks = banks_for_variant(BankVariant::seq1d);
  cfg.num_heads = 4;
  cfg.d_head = 64;
  CHECK(cfg.d_mem() == 512);
  CHECK(cfg.value_mlp(256));
  CHECK_FALSE(cfg.value_mlp(512));
  ParamSet<double> p;
  cfg.table_size = 3;
  init_engram_params(cfg, 256, p, 1);
  CHECK(p.contains("layer0.engram.wv1"));
  CHECK(p.at("layer0.engram.wv2").value.shape() == Shape{256, 256});
  for (double v : p.at("layer0.engram.conv").value.values()) CHECK(v == 0.0);
  for (double v : p.at("layer0.engram.layerscale").value.values()) CHECK(v == 1e-4);
}

// --- full model ------------------------------------------------------------

TEST_CASE("forward is causal") {
  for (auto variant : {BankVariant::seq1d, BankVariant::spatial2d}) {
    const Model<double> model(tiny_model(variant, {0, 1}));
    const auto params = lively_params(model, 1);
    const auto seq = random_sequence(model.backbone(), 2);
    const auto base = model.logits(params, seq);
    for (std::size_t t : {2u, 7u, 12u, 17u}) {
      auto mutated = seq;
      mutated[t] = (mutated[t] + 1) % 32;
      const auto out = model.logits(params, mutated);
      for (std::size_t r = 0; r < t; ++r)
        for (std::size_t c = 0; c < out.cols(); ++c) CHECK(out(r, c) == base(r, c));
      bool changed = false;
      for (std::size_t c = 0; c < out.cols(); ++c) changed |= out(t, c) != base(t, c);
      CHECK(changed);
    }
  }
}

TEST_CASE("untrained loss is near ln(vocab)") {
  const Model<double> model(tiny_model());
  const auto params = model.init_params(3);
  double mean = 0;
  for (int i = 0; i < 10; ++i) {
    Graph<double> g(&params, false);
    mean += g.value(model.loss(g, random_sequence(model.backbone(), 50 + i)))[0] / 10;
  }
  const double ln_v = std::log(static_cast<double>(model.backbone().vocab_size_total()));
  CHECK(std::abs(mean - ln_v) / ln_v < 0.15);
}

TEST_CASE("clamp 0 equals the bypassed forward bitwise") {
  for (auto variant : {BankVariant::seq1d, BankVariant::spatial2d}) {
    const Model<float> model(tiny_model(variant, {0, 1}));
    const auto params = lively_params(model, 4);
    const auto seq = random_sequence(model.backbone(), 5);
    ForwardOptions clamp0, bypass;
    clamp0.gate_clamp = 0.0;
    bypass.bypass_engram = true;
    CHECK(model.logits(params, seq, clamp0) == model.logits(params, seq, bypass));
    CHECK_FALSE(model.logits(params, seq) == model.logits(params, seq, bypass));
  }
}

TEST_CASE("logits are finite after init") {
  const Model<float> model(tiny_model(BankVariant::spatial2d, {0, 1}));
  const auto params = model.init_params(7);
  for (int i = 0; i < 100; ++i)
    for (float v : model.logits(params, random_sequence(model.backbone(), 900 + i)).values()) REQUIRE(std::isfinite(v));
}

TEST_CASE("forward validates its input") {
  const Model<float> model(tiny_model());
  const auto params = model.init_params(1);
  auto seq = random_sequence(model.backbone(), 1);
  seq.push_back(0);
  CHECK_THROWS_AS(model.logits(params, seq), DomainError);
  seq.pop_back();
  seq[5] = model.layout().sentinel();
  CHECK_THROWS_AS(model.logits(params, seq), DomainError);
}

TEST_CASE("parameter count matches the allocated tensors") {
  for (auto variant : {BankVariant::seq1d, BankVariant::spatial2d})
    for (int heads : {1, 2, 4}) {
      const auto cfg = tiny_model(variant, {0, 1}, heads, 8, 101);
      const Model<float> model(cfg);
      const auto params = model.init_params(0);
      const auto r = count_params(cfg.backbone, cfg.engram);
      std::int64_t backbone = 0, memory = 0, glue = 0;
      for (const auto& p : params) {
        const auto n = static_cast<std::int64_t>(p.value.size());
        if (p.group == ParamGroup::table)
          memory += n;
        else if (p.name.find(".engram.") != std::string::npos)
          glue += n;
        else
          backbone += n;
      }
      CHECK(r.backbone_params == backbone);
      CHECK(r.memory_params == memory);
      CHECK(r.engram_glue_params == glue);
      CHECK(r.total == static_cast<std::int64_t>(params.total_elements()));
    }
}

TEST_CASE("tensor naming scheme") {
  const Model<float> model(tiny_model());
  const auto params = model.init_params(0);
  for (const auto& p : params) {
    const bool ok = p.name.starts_with("layer") || p.name.starts_with("embed.") || p.name.starts_with("final_norm") ||
                    p.name.starts_with("head.");
    CHECK_MESSAGE(ok, p.name);
  }
  CHECK(params.contains("layer0.engram.table.b0.h0"));
  CHECK(params.contains("layer1.attn.wq"));
  CHECK(params.contains("layer1.ffn.w2"));
}

TEST_CASE("model gradients pass a finite-difference check") {
  const Model<double> model(tiny_model(BankVariant::seq1d, {0}, 2, 8, 101));
  auto params = fixture::random_checkpoint(model, 8);
  const auto seq = random_sequence(model.backbone(), 9);
  ScalarFn f = [&](Graph<double>& g) { return model.loss(g, seq); };
  const auto coords = sample_coordinates(params, 4, 1);
  const auto r = grad_check(f, params, 1e-3, coords);
  CAPTURE(params[r.worst.param].name);
  CHECK(r.max_rel_error <= 1e-4);
}
