#include "engram_ar/model.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "engram_ar/rng.hpp"

namespace engram_ar {

void ModelConfig::validate() const {
  backbone.validate();
  for (std::size_t i = 0; i < engram.size(); ++i) {
    engram[i].validate(backbone.hidden);
    if (engram[i].layer_index < 0 || engram[i].layer_index >= backbone.num_layers)
      throw ConfigError("engram layer " + std::to_string(engram[i].layer_index) + " outside backbone depth");
    for (std::size_t j = 0; j < i; ++j)
      if (engram[j].layer_index == engram[i].layer_index)
        throw ConfigError("two engram modules at layer " + std::to_string(engram[i].layer_index));
  }
}

const EngramModuleConfig* ModelConfig::engram_at(int layer) const {
  for (const auto& e : engram)
    if (e.layer_index == layer) return &e;
  return nullptr;
}

std::vector<EngramModuleConfig> engram_layers(std::span<const int> layers, BankVariant variant, int num_heads,
                                              int d_head, std::int64_t table_size, double layerscale_init,
                                              TableMode mode) {
  std::vector<EngramModuleConfig> out;
  for (int layer : layers) {
    EngramModuleConfig c;
    c.layer_index = layer;
    c.banks = banks_for_variant(variant);
    c.num_heads = num_heads;
    c.d_head = d_head;
    c.table_size = table_size;
    c.layerscale_init = layerscale_init;
    c.table_mode = mode;
    out.push_back(std::move(c));
  }
  return out;
}

template <typename Real>
Model<Real>::Model(ModelConfig config) : config_(std::move(config)) {
  std::sort(config_.engram.begin(), config_.engram.end(),
            [](const auto& a, const auto& b) { return a.layer_index < b.layer_index; });
  // Tables bind in bank order; keep it identical to the hash layout's order.
  for (auto& e : config_.engram)
    std::sort(e.banks.begin(), e.banks.end(), [](const auto& a, const auto& b) { return a.bank_id < b.bank_id; });
  config_.validate();
  layout_ = config_.backbone.layout();
  for (const auto& e : config_.engram)
    hashes_.push_back(HashLayout::make(e.banks, e.num_heads, e.table_size, config_.hash_seed));
  rope_ = RopeTables<Real>::build(config_.backbone, layout_.sequence_length());
}

namespace {

template <typename Real>
Tensor<Real> init_normal(Shape shape, double stddev, std::uint64_t seed, const std::string& name) {
  Tensor<Real> t(std::move(shape));
  CounterRng rng(seed, "init", {fnv1a(name)});
  for (auto& v : t.values()) v = static_cast<Real>(rng.truncated_normal(stddev));
  return t;
}

}  // namespace

template <typename Real>
ParamSet<Real> Model<Real>::init_params(std::uint64_t seed) const {
  const auto& b = config_.backbone;
  const auto d = static_cast<std::size_t>(b.hidden);
  const auto f = static_cast<std::size_t>(b.ffn_inner);
  const auto V = static_cast<std::size_t>(b.vocab_size_total());
  const auto hd = static_cast<std::size_t>(b.head_dim());
  const double std0 = 0.02;
  const double std_res = 0.02 / std::sqrt(2.0 * std::max(1, b.num_layers));

  ParamSet<Real> p;
  p.add("embed.tokens", init_normal<Real>({V, d}, std0, seed, "embed.tokens"), ParamGroup::weight);
  for (int l = 0; l < b.num_layers; ++l) {
    if (const auto* e = config_.engram_at(l)) init_engram_params<Real>(*e, b.hidden, p, seed);
    const std::string L = "layer" + std::to_string(l);
    p.add(L + ".attn.norm", Tensor<Real>({d}, Real{1}), ParamGroup::norm);
    for (const char* w : {".attn.wq", ".attn.wk", ".attn.wv"})
      p.add(L + w, init_normal<Real>({d, d}, std0, seed, L + w), ParamGroup::weight);
    p.add(L + ".attn.wo", init_normal<Real>({d, d}, std_res, seed, L + ".attn.wo"), ParamGroup::weight);
    p.add(L + ".attn.q_norm", Tensor<Real>({hd}, Real{1}), ParamGroup::norm);
    p.add(L + ".attn.k_norm", Tensor<Real>({hd}, Real{1}), ParamGroup::norm);
    p.add(L + ".ffn.norm", Tensor<Real>({d}, Real{1}), ParamGroup::norm);
    p.add(L + ".ffn.w1", init_normal<Real>({d, f}, std0, seed, L + ".ffn.w1"), ParamGroup::weight);
    p.add(L + ".ffn.w3", init_normal<Real>({d, f}, std0, seed, L + ".ffn.w3"), ParamGroup::weight);
    p.add(L + ".ffn.w2", init_normal<Real>({f, d}, std_res, seed, L + ".ffn.w2"), ParamGroup::weight);
  }
  p.add("final_norm", Tensor<Real>({d}, Real{1}), ParamGroup::norm);
  p.add("head.out", init_normal<Real>({d, V}, std0, seed, "head.out"), ParamGroup::weight);
  return p;
}

template <typename Real>
std::vector<std::vector<std::int64_t>> Model<Real>::buckets(std::size_t engram_index, std::span<const TokenId> context,
                                                            std::size_t image_positions, bool collapse) const {
  std::vector<std::vector<std::int64_t>> out(image_positions);
  for (std::size_t i = 0; i < image_positions; ++i) {
    const int row = static_cast<int>(i) / layout_.grid_width;
    const int col = static_cast<int>(i) % layout_.grid_width;
    out[i] = bucket_indices(context, layout_, row, col, hashes_[engram_index], collapse);
  }
  return out;
}

template <typename Real>
Var Model<Real>::forward(Graph<Real>& g, std::span<const TokenId> sequence, const ForwardOptions& opts) const {
  const auto& b = config_.backbone;
  const std::size_t T = sequence.size();
  if (T == 0) throw DomainError("forward: empty sequence");
  if (T > static_cast<std::size_t>(layout_.sequence_length()))
    throw DomainError("forward: sequence length " + std::to_string(T) + " exceeds capacity " +
                      std::to_string(layout_.sequence_length()));
  for (TokenId t : sequence)
    if (t < 0 || t >= layout_.sentinel()) throw DomainError("forward: token id " + std::to_string(t) + " not a valid input");
  std::span<const TokenId> context = sequence;
  if (!opts.hash_context.empty()) {
    if (opts.hash_context.size() < T) throw DomainError("forward: hash context shorter than sequence");
    context = opts.hash_context;
  }

  const auto P = static_cast<std::size_t>(layout_.prefix_len);
  const auto hd = static_cast<std::size_t>(b.head_dim());
  std::vector<std::int64_t> ids(sequence.begin(), sequence.end());
  Var x = embedding_gather(g, g.param("embed.tokens"), std::span<const std::int64_t>(ids));

  Tensor<Real> cos_t = Tensor<Real>::matrix(T, hd / 2);
  Tensor<Real> sin_t = Tensor<Real>::matrix(T, hd / 2);
  std::copy_n(rope_.cos.data(), cos_t.size(), cos_t.data());
  std::copy_n(rope_.sin.data(), sin_t.size(), sin_t.data());

  std::size_t engram_index = 0;
  for (int l = 0; l < b.num_layers; ++l) {
    const std::string L = "layer" + std::to_string(l);
    const EngramModuleConfig* ecfg = config_.engram_at(l);
    if (ecfg != nullptr) {
      if (!opts.bypass_engram && T > P) {
        const EngramVars vars = bind_engram(g, *ecfg, b.hidden);
        const auto bk = buckets(engram_index, context, T - P, opts.collapse_buckets);
        const Var e = gather_memory(g, vars, bk);
        const auto clamp = opts.gate_clamp ? opts.gate_clamp : ecfg->gate_clamp;
        const Var fused = engram_fuse(g, slice_rows(g, x, P, T), e, vars, clamp);
        if (P == 0) {
          x = fused;
        } else {
          const std::array<Var, 2> parts{slice_rows(g, x, 0, P), fused};
          x = concat_rows(g, std::span<const Var>(parts));
        }
      }
      ++engram_index;
    }
    const Var a = rms_norm(g, x, g.param(L + ".attn.norm"));
    Var q = rms_norm(g, matmul(g, a, g.param(L + ".attn.wq")), g.param(L + ".attn.q_norm"));
    Var k = rms_norm(g, matmul(g, a, g.param(L + ".attn.wk")), g.param(L + ".attn.k_norm"));
    const Var v = matmul(g, a, g.param(L + ".attn.wv"));
    q = rotary(g, q, hd, cos_t, sin_t);
    k = rotary(g, k, hd, cos_t, sin_t);
    const Var o = causal_attention(g, q, k, v, static_cast<std::size_t>(b.num_heads));
    x = add(g, x, matmul(g, o, g.param(L + ".attn.wo")));

    const Var fin = rms_norm(g, x, g.param(L + ".ffn.norm"));
    const Var gate = silu(g, matmul(g, fin, g.param(L + ".ffn.w1")));
    const Var up = matmul(g, fin, g.param(L + ".ffn.w3"));
    x = add(g, x, matmul(g, mul(g, gate, up), g.param(L + ".ffn.w2")));
  }
  x = rms_norm(g, x, g.param("final_norm"));
  return matmul(g, x, g.param("head.out"));
}

template <typename Real>
std::vector<std::int32_t> Model<Real>::image_targets(std::span<const TokenId> sequence) const {
  const int P = layout_.prefix_len;
  const int T = static_cast<int>(sequence.size());
  std::vector<std::int32_t> targets(static_cast<std::size_t>(T), -1);
  for (int t = std::max(0, P - 1); t + 1 < T; ++t) targets[t] = sequence[t + 1];
  return targets;
}

template <typename Real>
Var Model<Real>::loss(Graph<Real>& g, std::span<const TokenId> sequence, const ForwardOptions& opts) const {
  const Var logits = forward(g, sequence, opts);
  const auto targets = image_targets(sequence);
  return cross_entropy(g, logits, std::span<const std::int32_t>(targets));
}

template <typename Real>
Tensor<Real> Model<Real>::logits(const ParamSet<Real>& params, std::span<const TokenId> sequence,
                                 const ForwardOptions& opts) const {
  Graph<Real> g(&params, /*record=*/false);
  return g.value(forward(g, sequence, opts));
}

template class Model<float>;
template class Model<double>;

}  // namespace engram_ar
