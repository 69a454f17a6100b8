#include <doctest.h>

#include <cmath>

#include "engram_ar/autodiff.hpp"
#include "engram_ar/grad_check.hpp"
#include "engram_ar/kernels.hpp"
#include "engram_ar/rng.hpp"

using namespace engram_ar;

namespace {

Tensor<double> random_tensor(Shape shape, std::uint64_t key, double scale = 1.0) {
  Tensor<double> t(std::move(shape));
  CounterRng rng(key);
  for (auto& v : t.values()) v = scale * rng.normal();
  return t;
}

// Scalar probe: sum(x * W) with fixed random weights, so every element matters.
Var reduce(Graph<double>& g, Var x, std::uint64_t key = 99) {
  const std::size_t rows = g.value(x).rows(), cols = g.value(x).cols();
  Var w = g.constant(random_tensor({rows, cols}, key));
  Var ones = g.constant(Tensor<double>({1, rows}, 1.0));
  return matmul(g, ones, sum_cols(g, mul(g, x, w)));
}

double check_op(ParamSet<double>& params, const ScalarFn& f) {
  const auto coords = sample_coordinates(params, 64, 3);
  return grad_check(f, params, 1e-5, coords).max_rel_error;
}

}  // namespace

TEST_CASE("elementary values") {
  Graph<double> g;
  Var z = g.constant(Tensor<double>({1, 1}, 0.0));
  CHECK(g.value(sigmoid(g, z))[0] == 0.5);

  Var c = g.constant(Tensor<double>({1, 6}, 3.5));
  Var unit = g.constant(Tensor<double>({6}, 1.0));
  for (double v : g.value(rms_norm(g, c, unit)).values()) CHECK(v == doctest::Approx(1.0).epsilon(1e-6));

  Var zeros = g.constant(Tensor<double>({5, 3}, 0.0));
  Var w = g.constant(random_tensor({3, 4}, 1));
  for (double v : g.value(depthwise_causal_conv1d(g, zeros, w)).values()) CHECK(v == 0.0);

  Var logits = g.constant(random_tensor({4, 7}, 2, 3.0));
  const auto& p = g.value(softmax(g, logits));
  for (std::size_t r = 0; r < 4; ++r) {
    double s = 0;
    for (double v : p.row(r)) s += v;
    CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
  }
  std::vector<std::int32_t> tg = {1, 0, 6, -1};
  CHECK(g.value(cross_entropy(g, logits, tg))[0] >= 0.0);
  Var flat = g.constant(Tensor<double>({3, 7}, 0.25));
  std::vector<std::int32_t> t3 = {0, 3, 6};
  CHECK(g.value(cross_entropy(g, flat, t3))[0] == doctest::Approx(std::log(7.0)).epsilon(1e-12));
}

TEST_CASE("shape errors name both shapes") {
  Graph<double> g;
  Var a = g.constant(Tensor<double>({2, 3}));
  Var b = g.constant(Tensor<double>({4, 5}));
  try {
    matmul(g, a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("2") != std::string::npos);
    CHECK(msg.find("4") != std::string::npos);
  }
  CHECK_THROWS_AS(add(g, a, b), ShapeError);
}

TEST_CASE("causal conv only looks back") {
  Graph<double> g;
  auto x = random_tensor({6, 3}, 4);
  Var w = g.constant(random_tensor({3, 4}, 5));
  const auto base = g.value(depthwise_causal_conv1d(g, g.constant(x), w));
  x(3, 1) += 1.0;
  const auto moved = g.value(depthwise_causal_conv1d(g, g.constant(x), w));
  for (std::size_t t = 0; t < 6; ++t)
    for (std::size_t c = 0; c < 3; ++c) {
      if (t < 3 || c != 1) CHECK(moved(t, c) == base(t, c));
    }
  CHECK(moved(3, 1) != base(3, 1));
}

TEST_CASE("grad_check basics") {
  ParamSet<double> params;
  params.add("x", Tensor<double>({1, 1}, 3.0), ParamGroup::weight);
  ScalarFn square = [](Graph<double>& g) {
    Var x = g.param("x");
    return mul(g, x, x);
  };
  std::vector<ParamCoordinate> coords = {{0, 0}};
  const auto r = grad_check(square, params, 1e-4, coords);
  CHECK(r.worst_analytic == doctest::Approx(6.0).epsilon(1e-12));
  CHECK(r.max_rel_error < 1e-9);

  ScalarFn constant = [](Graph<double>& g) { return g.constant(Tensor<double>({1, 1}, 2.0)); };
  const auto c = grad_check(constant, params, 1e-4, coords);
  CHECK(c.worst_analytic == 0.0);
  CHECK(c.worst_numeric == 0.0);

  ScalarFn bad = [](Graph<double>& g) { return g.constant(Tensor<double>({1, 1}, NAN)); };
  CHECK_THROWS_AS(grad_check(bad, params, 1e-4, coords), NumericError);
}

TEST_CASE("every op passes a 64-bit gradient check") {
  ParamSet<double> p;
  p.add("a", random_tensor({4, 6}, 10), ParamGroup::weight);
  p.add("b", random_tensor({6, 5}, 11), ParamGroup::weight);
  p.add("c", random_tensor({4, 6}, 12), ParamGroup::weight);
  p.add("r", random_tensor({4, 1}, 13), ParamGroup::weight);
  p.add("s", random_tensor({6}, 14), ParamGroup::norm);
  p.add("table", random_tensor({9, 6}, 15), ParamGroup::table);
  p.add("k", random_tensor({6, 4}, 16, 0.5), ParamGroup::weight);
  p.add("q", random_tensor({5, 8}, 17), ParamGroup::weight);
  p.add("kk", random_tensor({5, 8}, 18), ParamGroup::weight);
  p.add("v", random_tensor({5, 8}, 19), ParamGroup::weight);

  const std::vector<std::pair<const char*, ScalarFn>> cases = {
      {"matmul", [](Graph<double>& g) { return reduce(g, matmul(g, g.param("a"), g.param("b"))); }},
      {"add", [](Graph<double>& g) { return reduce(g, add(g, g.param("a"), g.param("c"))); }},
      {"mul", [](Graph<double>& g) { return reduce(g, mul(g, g.param("a"), g.param("c"))); }},
      {"mul_row", [](Graph<double>& g) { return reduce(g, mul(g, g.param("a"), g.param("r"))); }},
      {"mul_col", [](Graph<double>& g) { return reduce(g, mul(g, g.param("a"), g.param("s"))); }},
      {"scale", [](Graph<double>& g) { return reduce(g, scale(g, g.param("a"), -1.7)); }},
      {"concat_cols",
       [](Graph<double>& g) {
         const Var parts[] = {g.param("a"), g.param("r")};
         return reduce(g, concat_cols<double>(g, parts));
       }},
      {"concat_rows",
       [](Graph<double>& g) {
         const Var parts[] = {g.param("a"), g.param("c")};
         return reduce(g, concat_rows<double>(g, parts));
       }},
      {"slice_rows", [](Graph<double>& g) { return reduce(g, slice_rows(g, g.param("a"), 1, 3)); }},
      {"softmax", [](Graph<double>& g) { return reduce(g, softmax(g, g.param("a"))); }},
      {"sigmoid", [](Graph<double>& g) { return reduce(g, sigmoid(g, g.param("a"))); }},
      {"silu", [](Graph<double>& g) { return reduce(g, silu(g, g.param("a"))); }},
      {"rms_norm", [](Graph<double>& g) { return reduce(g, rms_norm(g, g.param("a"), g.param("s"))); }},
      {"embedding_gather",
       [](Graph<double>& g) {
         const std::int64_t rows[] = {3, 0, 3, 8};
         return reduce(g, embedding_gather<double>(g, g.param("table"), rows));
       }},
      {"conv", [](Graph<double>& g) { return reduce(g, depthwise_causal_conv1d(g, g.param("a"), g.param("k"))); }},
      {"cross_entropy",
       [](Graph<double>& g) {
         const std::int32_t t[] = {2, -1, 5, 0};
         return cross_entropy<double>(g, g.param("a"), t);
       }},
      {"attention",
       [](Graph<double>& g) { return reduce(g, causal_attention(g, g.param("q"), g.param("kk"), g.param("v"), 2)); }},
      {"sum_cols", [](Graph<double>& g) { return reduce(g, sum_cols(g, g.param("a"))); }},
  };
  for (const auto& [name, f] : cases) {
    CAPTURE(name);
    CHECK(check_op(p, f) <= 1e-6);
  }
}

TEST_CASE("gradient accumulates over repeated parameter use") {
  ParamSet<double> p;
  p.add("x", random_tensor({3, 3}, 1), ParamGroup::weight);
  ScalarFn f = [](Graph<double>& g) {
    Var x = g.param("x");
    return reduce(g, add(g, matmul(g, x, x), x));
  };
  CHECK(check_op(p, f) <= 1e-6);
}

TEST_CASE("frozen parameters get no gradient") {
  ParamSet<double> p;
  p.add("x", random_tensor({2, 2}, 1), ParamGroup::table, /*trainable=*/false);
  Graph<double> g(&p);
  Var x = g.param("x");
  CHECK_FALSE(g.requires_grad(x));
  GradSet<double> grads(p);
  Var loss = reduce(g, mul(g, x, x));
  CHECK_FALSE(g.requires_grad(loss));
}
