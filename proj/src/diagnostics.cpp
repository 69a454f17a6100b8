#include "engram_ar/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

#include "engram_ar/parallel.hpp"
#include "engram_ar/rng.hpp"
#include "engram_ar/training.hpp"

namespace engram_ar {

// ---------------------------------------------------------------------------
// Jaccard

std::vector<PatchShape> default_patch_shapes() { return {{1, 2}, {2, 1}, {1, 3}, {3, 1}, {2, 2}}; }

namespace {

void check_fits(const TokenGrid& g, PatchShape s) {
  if (s.rows < 1 || s.cols < 1 || s.rows > g.height || s.cols > g.width)
    throw DomainError("patch " + s.label() + " does not fit a " + std::to_string(g.height) + "x" +
                      std::to_string(g.width) + " grid");
}

// Up to four 16-bit ids pack into one word, which covers every shape the
// analysis uses; larger patches fall back to sorted token vectors.
bool packable(const TokenGrid& g, PatchShape s) { return s.rows * s.cols <= 4 && g.vocab_size <= 65536; }

std::vector<std::uint64_t> packed_patches(const TokenGrid& g, PatchShape s) {
  std::vector<std::uint64_t> keys;
  keys.reserve(static_cast<std::size_t>((g.height - s.rows + 1) * (g.width - s.cols + 1)));
  for (int r = 0; r + s.rows <= g.height; ++r)
    for (int c = 0; c + s.cols <= g.width; ++c) {
      std::uint64_t k = 0;
      for (int dr = 0; dr < s.rows; ++dr)
        for (int dc = 0; dc < s.cols; ++dc) k = (k << 16) | static_cast<std::uint16_t>(g.at(r + dr, c + dc));
      keys.push_back(k);
    }
  std::sort(keys.begin(), keys.end());
  return keys;
}

std::vector<std::vector<TokenId>> vector_patches(const TokenGrid& g, PatchShape s) {
  std::vector<std::vector<TokenId>> keys;
  for (int r = 0; r + s.rows <= g.height; ++r)
    for (int c = 0; c + s.cols <= g.width; ++c) {
      std::vector<TokenId> k;
      for (int dr = 0; dr < s.rows; ++dr)
        for (int dc = 0; dc < s.cols; ++dc) k.push_back(g.at(r + dr, c + dc));
      keys.push_back(std::move(k));
    }
  std::sort(keys.begin(), keys.end());
  return keys;
}

// Multiset intersection size of two sorted sequences.
template <typename Key>
std::size_t sorted_intersection(const std::vector<Key>& a, const std::vector<Key>& b) {
  std::size_t i = 0, j = 0, n = 0;
  while (i < a.size() && j < b.size()) {
    if (a[i] < b[j]) {
      ++i;
    } else if (b[j] < a[i]) {
      ++j;
    } else {
      ++n, ++i, ++j;
    }
  }
  return n;
}

}  // namespace

double jaccard(const TokenGrid& a, const TokenGrid& b, PatchShape shape) {
  check_fits(a, shape);
  check_fits(b, shape);
  std::size_t inter, na, nb;
  if (packable(a, shape) && packable(b, shape)) {
    const auto ka = packed_patches(a, shape), kb = packed_patches(b, shape);
    inter = sorted_intersection(ka, kb), na = ka.size(), nb = kb.size();
  } else {
    const auto ka = vector_patches(a, shape), kb = vector_patches(b, shape);
    inter = sorted_intersection(ka, kb), na = ka.size(), nb = kb.size();
  }
  // sum of max counts = |A| + |B| - sum of min counts
  const std::size_t uni = na + nb - inter;
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

const JaccardBin* JaccardShapeRow::top_bin() const {
  for (auto it = bins.rbegin(); it != bins.rend(); ++it)
    if (it->pairs > 0) return &*it;
  return nullptr;
}

JaccardReport stratified_jaccard(std::span<const TokenGrid> corpus, std::span<const PatchShape> shapes, int bins,
                                 std::int64_t max_pairs_per_bin, std::uint64_t seed) {
  if (corpus.size() < 2) throw DomainError("stratified_jaccard needs at least two grids");
  if (bins < 1 || max_pairs_per_bin < 1) throw DomainError("stratified_jaccard: bad binning");
  const std::size_t n = corpus.size();
  const double lo = 0.5, width = 0.5 / bins;

  // Candidate pairs: every pair when affordable, else a seeded sample.
  constexpr std::size_t kMaxCandidates = 2'000'000;
  std::vector<std::pair<std::uint32_t, std::uint32_t>> candidates;
  const std::size_t all_pairs = n * (n - 1) / 2;
  CounterRng rng(seed, "jaccard-pairs");
  if (all_pairs <= kMaxCandidates) {
    candidates.reserve(all_pairs);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j)
        candidates.emplace_back(static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(j));
    for (std::size_t i = candidates.size(); i > 1; --i) std::swap(candidates[i - 1], candidates[rng.below(i)]);
  } else {
    candidates.reserve(kMaxCandidates);
    while (candidates.size() < kMaxCandidates) {
      const auto i = static_cast<std::uint32_t>(rng.below(n));
      const auto j = static_cast<std::uint32_t>(rng.below(n));
      if (i != j) candidates.emplace_back(std::min(i, j), std::max(i, j));
    }
  }

  std::vector<std::vector<std::pair<std::uint32_t, std::uint32_t>>> binned(static_cast<std::size_t>(bins));
  for (const auto& [i, j] : candidates) {
    const double s = pair_similarity(corpus[i], corpus[j]);
    if (s < lo) continue;
    const int b = std::min(bins - 1, static_cast<int>(std::floor((s - lo) / width + 1e-12)));
    auto& slot = binned[static_cast<std::size_t>(b)];
    if (static_cast<std::int64_t>(slot.size()) < max_pairs_per_bin) slot.emplace_back(i, j);
  }

  std::vector<std::pair<std::uint32_t, std::uint32_t>> random_pairs;
  CounterRng rrng(seed, "jaccard-random");
  while (static_cast<std::int64_t>(random_pairs.size()) < max_pairs_per_bin) {
    const auto i = static_cast<std::uint32_t>(rrng.below(n));
    const auto j = static_cast<std::uint32_t>(rrng.below(n));
    if (i != j) random_pairs.emplace_back(i, j);
  }

  JaccardReport report;
  report.grids = static_cast<std::int64_t>(n);
  for (const PatchShape& shape : shapes) {
    JaccardShapeRow row;
    row.shape = shape;
    auto mean_of = [&](const auto& pairs) -> std::optional<double> {
      if (pairs.empty()) return std::nullopt;
      double sum = 0.0;
      for (const auto& [i, j] : pairs) sum += jaccard(corpus[i], corpus[j], shape);
      return sum / static_cast<double>(pairs.size());
    };
    for (int b = 0; b < bins; ++b) {
      const auto& pairs = binned[static_cast<std::size_t>(b)];
      row.bins.push_back({lo + b * width, lo + (b + 1) * width, static_cast<std::int64_t>(pairs.size()), mean_of(pairs)});
    }
    row.random_pairs = static_cast<std::int64_t>(random_pairs.size());
    row.random_mean = mean_of(random_pairs);
    report.rows.push_back(std::move(row));
  }
  return report;
}

Json to_json(const JaccardReport& r) {
  Json rows = Json::array();
  for (const auto& row : r.rows) {
    Json bins = Json::array();
    for (const auto& b : row.bins)
      bins.push_back({{"lo", b.lo}, {"hi", b.hi}, {"pairs", b.pairs}, {"mean", b.mean ? Json(*b.mean) : Json(nullptr)}});
    rows.push_back({{"shape", row.shape.label()},
                    {"rows", row.shape.rows},
                    {"cols", row.shape.cols},
                    {"bins", bins},
                    {"random", {{"pairs", row.random_pairs},
                                {"mean", row.random_mean ? Json(*row.random_mean) : Json(nullptr)}}}});
  }
  return {{"grids", r.grids}, {"shapes", rows}};
}

JaccardReport jaccard_report_from_json(const Json& j) {
  JaccardReport r;
  r.grids = j.at("grids").get<std::int64_t>();
  for (const auto& s : j.at("shapes")) {
    JaccardShapeRow row;
    row.shape = {s.at("rows").get<int>(), s.at("cols").get<int>()};
    for (const auto& b : s.at("bins")) {
      JaccardBin bin{b.at("lo").get<double>(), b.at("hi").get<double>(), b.at("pairs").get<std::int64_t>(), std::nullopt};
      if (!b.at("mean").is_null()) bin.mean = b.at("mean").get<double>();
      row.bins.push_back(bin);
    }
    row.random_pairs = s.at("random").at("pairs").get<std::int64_t>();
    if (!s.at("random").at("mean").is_null()) row.random_mean = s.at("random").at("mean").get<double>();
    r.rows.push_back(std::move(row));
  }
  return r;
}

std::string to_csv(const JaccardReport& r) {
  std::ostringstream out;
  out.precision(9);
  out << "shape,bin_lo,bin_hi,pairs,mean_jaccard\n";
  for (const auto& row : r.rows) {
    for (const auto& b : row.bins) {
      out << row.shape.label() << ',' << b.lo << ',' << b.hi << ',' << b.pairs << ',';
      if (b.mean) out << *b.mean;
      out << '\n';
    }
    out << row.shape.label() << ",random,random," << row.random_pairs << ',';
    if (row.random_mean) out << *row.random_mean;
    out << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Donor probe

namespace {

constexpr std::array<std::pair<std::string_view, DonorCondition>, 6> kConditions{{
    {"real", DonorCondition::real},
    {"matched", DonorCondition::matched},
    {"adversarial", DonorCondition::adversarial},
    {"random", DonorCondition::random},
    {"uniform", DonorCondition::uniform},
    {"randomized", DonorCondition::randomized},
}};

std::vector<double> softmax64(std::span<const float> logits) {
  std::vector<double> p(logits.begin(), logits.end());
  const double mx = *std::max_element(p.begin(), p.end());
  double total = 0.0;
  for (auto& x : p) total += (x = std::exp(x - mx));
  for (auto& x : p) x /= total;
  return p;
}

std::vector<std::size_t> top_indices(const std::vector<double>& p, std::size_t k) {
  std::vector<std::size_t> idx(p.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  k = std::min(k, idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) { return p[a] > p[b] || (p[a] == p[b] && a < b); });
  idx.resize(k);
  return idx;
}

double kl64(const std::vector<double>& p, const std::vector<double>& q) {
  constexpr double kFloor = 1e-12;
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double pi = std::max(p[i], kFloor), qi = std::max(q[i], kFloor);
    kl += pi * std::log(pi / qi);
  }
  return std::max(0.0, kl);
}

struct Accum {
  double rank = 0.0, kl = 0.0, top5 = 0.0;
  std::int64_t positions = 0;
};

Accum compare_rows(const Tensor<float>& real, const Tensor<float>& donor, std::pair<std::size_t, std::size_t> rows) {
  Accum a;
  for (std::size_t r = rows.first; r < rows.second; ++r) {
    const auto p = softmax64(real.row(r));
    const auto q = softmax64(donor.row(r));
    const auto tp = top_indices(p, 5), tq = top_indices(q, 5);
    const double q_top = q[tp[0]];
    std::size_t above = 0;
    for (double x : q)
      if (x > q_top) ++above;
    std::size_t overlap = 0;
    for (auto i : tp)
      if (std::find(tq.begin(), tq.end(), i) != tq.end()) ++overlap;
    a.rank += static_cast<double>(above + 1);
    a.kl += kl64(p, q);
    a.top5 += static_cast<double>(overlap) / static_cast<double>(tp.size());
    ++a.positions;
  }
  return a;
}

DonorProbeRow finish(std::string condition, const std::vector<Accum>& per_ref) {
  DonorProbeRow row;
  row.condition = std::move(condition);
  Accum total;
  for (const auto& a : per_ref) {
    total.rank += a.rank, total.kl += a.kl, total.top5 += a.top5;
    total.positions += a.positions;
  }
  row.sequences = static_cast<std::int64_t>(per_ref.size());
  row.positions = total.positions;
  if (total.positions > 0) {
    const auto n = static_cast<double>(total.positions);
    row.mean_rank = total.rank / n;
    row.kl = total.kl / n;
    row.top5_overlap = total.top5 / n;
  }
  return row;
}

// Runs the real and perturbed passes for each reference. `perturb` fills
// the options (and may swap parameters) for reference i.
template <typename Perturb>
DonorProbeRow run_probe(const Model<float>& model, const ParamSet<float>& params, std::span<const TokenGrid> references,
                        const DonorProbeOptions& opts, std::string condition, Perturb&& perturb) {
  if (model.config().engram.empty()) throw DomainError("donor probe needs a model with engram modules");
  const auto rows = probe_rows(model.layout());
  std::vector<Accum> per_ref(references.size());
  parallel_for(references.size(), opts.threads, [&](std::size_t i) {
    const auto seq = raster_flatten(references[i]);
    ForwardOptions base;
    base.gate_clamp = opts.gate_clamp;
    const Tensor<float> real = model.logits(params, seq, base);
    std::vector<TokenId> context;
    ForwardOptions donor = base;
    const ParamSet<float>* donor_params = &params;
    perturb(i, donor, context, donor_params);
    if (!context.empty()) donor.hash_context = context;
    const Tensor<float> other = model.logits(*donor_params, seq, donor);
    per_ref[i] = compare_rows(real, other, rows);
  });
  return finish(std::move(condition), per_ref);
}

}  // namespace

std::string_view to_string(DonorCondition c) {
  for (const auto& [name, value] : kConditions)
    if (value == c) return name;
  return "?";
}

DonorCondition donor_condition_from_string(std::string_view s) {
  for (const auto& [name, value] : kConditions)
    if (name == s) return value;
  throw ConfigError("unknown donor condition: " + std::string(s));
}

std::vector<DonorCondition> all_donor_conditions() {
  std::vector<DonorCondition> out;
  for (const auto& [_, value] : kConditions) out.push_back(value);
  return out;
}

const DonorProbeRow* DonorProbeReport::find(std::string_view condition) const {
  for (const auto& r : rows)
    if (r.condition == condition) return &r;
  return nullptr;
}

double kl_from_logits(std::span<const float> p_logits, std::span<const float> q_logits) {
  if (p_logits.size() != q_logits.size()) throw ShapeError("kl_from_logits: length mismatch");
  return kl64(softmax64(p_logits), softmax64(q_logits));
}

std::pair<std::size_t, std::size_t> probe_rows(const SequenceLayout& layout) {
  const auto P = static_cast<std::size_t>(layout.prefix_len);
  const auto T = static_cast<std::size_t>(layout.sequence_length());
  return {P, T - 1};
}

int adversarial_class(int class_id, int num_classes) { return (class_id + num_classes / 2) % num_classes; }

ParamSet<float> randomize_tables(const ParamSet<float>& params, std::uint64_t seed) {
  ParamSet<float> out;
  for (const auto& p : params) {
    Tensor<float> v = p.value;
    if (p.group == ParamGroup::table) {
      CounterRng rng(seed, "probe-randomize", {fnv1a(p.name)});
      for (auto& x : v.values()) x = static_cast<float>(rng.normal());
    }
    out.add(p.name, std::move(v), p.group, p.trainable);
  }
  return out;
}

DonorProbeRow donor_probe(const Model<float>& model, const ParamSet<float>& params,
                          std::span<const TokenGrid> references, std::span<const TokenGrid> donor_pool,
                          DonorCondition condition, const DonorProbeOptions& opts) {
  const int nc = model.backbone().num_classes;
  const std::string name(to_string(condition));
  switch (condition) {
    case DonorCondition::real:
      return donor_probe_explicit(model, params, references, references, opts);
    case DonorCondition::uniform:
      return run_probe(model, params, references, opts, name,
                       [](std::size_t, ForwardOptions& o, std::vector<TokenId>&, const ParamSet<float>*&) {
                         o.collapse_buckets = true;
                       });
    case DonorCondition::randomized: {
      const ParamSet<float> noisy = randomize_tables(params, opts.seed);
      return run_probe(model, params, references, opts, name,
                       [&](std::size_t, ForwardOptions&, std::vector<TokenId>&, const ParamSet<float>*& p) {
                         p = &noisy;
                       });
    }
    case DonorCondition::matched:
    case DonorCondition::adversarial:
    case DonorCondition::random: break;
  }

  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < donor_pool.size(); ++i) by_class[donor_pool[i].class_id].push_back(i);
  // Pick every donor up front so the result does not depend on scheduling.
  std::vector<std::size_t> chosen(references.size());
  for (std::size_t i = 0; i < references.size(); ++i) {
    CounterRng rng(opts.seed, "donor", {static_cast<std::uint64_t>(condition), i});
    int cls = references[i].class_id;
    if (condition == DonorCondition::adversarial) cls = adversarial_class(cls, nc);
    if (condition == DonorCondition::random) cls = static_cast<int>(rng.below(static_cast<std::uint64_t>(nc)));
    const auto it = by_class.find(cls);
    if (it == by_class.end() || it->second.empty())
      throw DomainError("donor pool has no grids of class " + std::to_string(cls) + " for condition " + name);
    chosen[i] = it->second[rng.below(it->second.size())];
  }
  return run_probe(model, params, references, opts, name,
                   [&](std::size_t i, ForwardOptions&, std::vector<TokenId>& ctx, const ParamSet<float>*&) {
                     ctx = raster_flatten(donor_pool[chosen[i]]);
                   });
}

DonorProbeRow donor_probe_explicit(const Model<float>& model, const ParamSet<float>& params,
                                   std::span<const TokenGrid> references, std::span<const TokenGrid> donors,
                                   const DonorProbeOptions& opts) {
  if (donors.size() != references.size()) throw DomainError("explicit donor list must match the references");
  const bool identity = std::equal(references.begin(), references.end(), donors.begin(), donors.end());
  return run_probe(model, params, references, opts, identity ? "real" : "explicit",
                   [&](std::size_t i, ForwardOptions&, std::vector<TokenId>& ctx, const ParamSet<float>*&) {
                     ctx = raster_flatten(donors[i]);
                   });
}

DonorProbeReport donor_probe_all(const Model<float>& model, const ParamSet<float>& params,
                                 std::span<const TokenGrid> references, std::span<const TokenGrid> donor_pool,
                                 const DonorProbeOptions& opts) {
  DonorProbeReport r;
  for (DonorCondition c : all_donor_conditions())
    r.rows.push_back(donor_probe(model, params, references, donor_pool, c, opts));
  return r;
}

Json to_json(const DonorProbeReport& r) {
  Json rows = Json::array();
  for (const auto& row : r.rows)
    rows.push_back({{"condition", row.condition},
                    {"mean_rank", row.mean_rank},
                    {"kl", row.kl},
                    {"top5_overlap", row.top5_overlap},
                    {"sequences", row.sequences},
                    {"positions", row.positions}});
  return {{"conditions", rows}};
}

DonorProbeReport donor_report_from_json(const Json& j) {
  DonorProbeReport r;
  for (const auto& row : j.at("conditions"))
    r.rows.push_back({row.at("condition").get<std::string>(), row.at("mean_rank").get<double>(),
                      row.at("kl").get<double>(), row.at("top5_overlap").get<double>(),
                      row.at("sequences").get<std::int64_t>(), row.at("positions").get<std::int64_t>()});
  return r;
}

std::string to_csv(const DonorProbeReport& r) {
  std::ostringstream out;
  out.precision(9);
  out << "condition,mean_rank,kl,top5_overlap,sequences,positions\n";
  for (const auto& row : r.rows)
    out << row.condition << ',' << row.mean_rank << ',' << row.kl << ',' << row.top5_overlap << ',' << row.sequences
        << ',' << row.positions << '\n';
  return out.str();
}

// ---------------------------------------------------------------------------
// Gate-clamp sweep

const ClampRow* GateClampReport::find_clamp(double clamp) const {
  for (const auto& r : rows)
    if (r.clamp && *r.clamp == clamp) return &r;
  return nullptr;
}

const ClampRow* GateClampReport::learned() const {
  for (const auto& r : rows)
    if (!r.clamp) return &r;
  return nullptr;
}

GateClampReport gate_clamp_sweep(const Model<float>& model, const ParamSet<float>& params,
                                 std::span<const TokenGrid> eval_set, std::span<const double> clamps, int threads) {
  GateClampReport r;
  r.sequences = static_cast<std::int64_t>(eval_set.size());
  r.rows.push_back({"learned", std::nullopt, evaluate_ce(model, params, eval_set, {}, threads)});
  for (double c : clamps) {
    if (!(c >= 0.0 && c <= 1.0)) throw DomainError("gate clamp must lie in [0, 1]");
    ForwardOptions o;
    o.gate_clamp = c;
    std::ostringstream label;
    label << c;
    r.rows.push_back({label.str(), c, evaluate_ce(model, params, eval_set, o, threads)});
  }
  return r;
}

Json to_json(const GateClampReport& r) {
  Json rows = Json::array();
  for (const auto& row : r.rows)
    rows.push_back({{"label", row.label}, {"clamp", row.clamp ? Json(*row.clamp) : Json(nullptr)}, {"ce", row.ce}});
  return {{"sequences", r.sequences}, {"rows", rows}};
}

GateClampReport gate_clamp_report_from_json(const Json& j) {
  GateClampReport r;
  r.sequences = j.at("sequences").get<std::int64_t>();
  for (const auto& row : j.at("rows")) {
    ClampRow c{row.at("label").get<std::string>(), std::nullopt, row.at("ce").get<double>()};
    if (!row.at("clamp").is_null()) c.clamp = row.at("clamp").get<double>();
    r.rows.push_back(c);
  }
  return r;
}

std::string to_csv(const GateClampReport& r) {
  std::ostringstream out;
  out.precision(9);
  out << "condition,clamp,ce\n";
  for (const auto& row : r.rows) {
    out << row.label << ',';
    if (row.clamp) out << *row.clamp;
    out << ',' << row.ce << '\n';
  }
  return out.str();
}

}  // namespace engram_ar
