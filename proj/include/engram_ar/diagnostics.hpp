#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "engram_ar/config.hpp"
#include "engram_ar/model.hpp"

namespace engram_ar {

// ---------------------------------------------------------------------------
// n-gram Jaccard analysis

struct PatchShape {
  int rows = 1;
  int cols = 2;
  std::string label() const { return std::to_string(rows) + "x" + std::to_string(cols); }
  friend bool operator==(const PatchShape&, const PatchShape&) = default;
};

/// 1x2, 2x1, 1x3, 3x1, 2x2.
std::vector<PatchShape> default_patch_shapes();

/// Multiset Jaccard of all stride-1 patches of the given shape. Throws
/// DomainError when the shape does not fit either grid.
double jaccard(const TokenGrid& a, const TokenGrid& b, PatchShape shape);

struct JaccardBin {
  double lo = 0.0;
  double hi = 0.0;
  std::int64_t pairs = 0;
  std::optional<double> mean;  // empty when no pairs landed here
};

struct JaccardShapeRow {
  PatchShape shape;
  std::vector<JaccardBin> bins;
  std::int64_t random_pairs = 0;
  std::optional<double> random_mean;

  /// Highest bin holding at least one pair.
  const JaccardBin* top_bin() const;
};

struct JaccardReport {
  std::int64_t grids = 0;
  std::vector<JaccardShapeRow> rows;
};

/// Bins pairs by pair_similarity into `bins` equal bins over [0.5, 1.0],
/// keeps at most `max_pairs_per_bin` per bin, and adds a random-pair
/// baseline of the same size cap drawn without regard to similarity.
JaccardReport stratified_jaccard(std::span<const TokenGrid> corpus, std::span<const PatchShape> shapes, int bins = 10,
                                 std::int64_t max_pairs_per_bin = 500, std::uint64_t seed = 0);

Json to_json(const JaccardReport& r);
JaccardReport jaccard_report_from_json(const Json& j);
std::string to_csv(const JaccardReport& r);

// ---------------------------------------------------------------------------
// Donor probe

enum class DonorCondition { real, matched, adversarial, random, uniform, randomized };
std::string_view to_string(DonorCondition c);
DonorCondition donor_condition_from_string(std::string_view s);
/// The reference row plus the five perturbations.
std::vector<DonorCondition> all_donor_conditions();

struct DonorProbeRow {
  std::string condition;
  double mean_rank = 1.0;    // 1-based rank of the real top-1 token under the donor distribution
  double kl = 0.0;           // KL(P_real || P_donor), nats
  double top5_overlap = 1.0;
  std::int64_t sequences = 0;
  std::int64_t positions = 0;
};

struct DonorProbeReport {
  std::vector<DonorProbeRow> rows;
  const DonorProbeRow* find(std::string_view condition) const;
};

/// KL(p || q) in nats over softmax(logits); probabilities floored at 1e-12.
double kl_from_logits(std::span<const float> p_logits, std::span<const float> q_logits);

/// Rows whose logits depend on engram retrieval: image positions that
/// predict another image token.
std::pair<std::size_t, std::size_t> probe_rows(const SequenceLayout& layout);

struct DonorProbeOptions {
  std::optional<double> gate_clamp;  // applied to both passes
  std::uint64_t seed = 0;
  int threads = 1;
};

/// One condition over all references. Attention always sees the reference;
/// only the engram hash context (or table contents / bucket addressing) is
/// replaced. Throws DomainError when a needed donor class is missing.
DonorProbeRow donor_probe(const Model<float>& model, const ParamSet<float>& params,
                          std::span<const TokenGrid> references, std::span<const TokenGrid> donor_pool,
                          DonorCondition condition, const DonorProbeOptions& opts = {});

/// Probe with an explicit donor per reference (identity checks, custom sets).
DonorProbeRow donor_probe_explicit(const Model<float>& model, const ParamSet<float>& params,
                                   std::span<const TokenGrid> references, std::span<const TokenGrid> donors,
                                   const DonorProbeOptions& opts = {});

DonorProbeReport donor_probe_all(const Model<float>& model, const ParamSet<float>& params,
                                 std::span<const TokenGrid> references, std::span<const TokenGrid> donor_pool,
                                 const DonorProbeOptions& opts = {});

/// Same parameters with every engram table resampled standard-normal.
ParamSet<float> randomize_tables(const ParamSet<float>& params, std::uint64_t seed);

/// (c + num_classes / 2) mod num_classes.
int adversarial_class(int class_id, int num_classes);

Json to_json(const DonorProbeReport& r);
DonorProbeReport donor_report_from_json(const Json& j);
std::string to_csv(const DonorProbeReport& r);

// ---------------------------------------------------------------------------
// Gate-clamp sweep

struct ClampRow {
  std::string label;  // "learned" or the clamp value
  std::optional<double> clamp;
  double ce = 0.0;
};

struct GateClampReport {
  std::vector<ClampRow> rows;  // learned first, then clamps in the given order
  std::int64_t sequences = 0;
  const ClampRow* find_clamp(double clamp) const;
  const ClampRow* learned() const;
};

GateClampReport gate_clamp_sweep(const Model<float>& model, const ParamSet<float>& params,
                                 std::span<const TokenGrid> eval_set, std::span<const double> clamps, int threads = 1);

Json to_json(const GateClampReport& r);
GateClampReport gate_clamp_report_from_json(const Json& j);
std::string to_csv(const GateClampReport& r);

}  // namespace engram_ar
