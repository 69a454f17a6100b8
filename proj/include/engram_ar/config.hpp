#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "engram_ar/inference.hpp"
#include "engram_ar/training.hpp"

namespace engram_ar {

using Json = nlohmann::json;

/// Probe and analysis settings shared by the diagnostic commands.
struct ProbeSettings {
  std::int64_t references = 32;        // teacher-forced reference sequences
  std::int64_t donor_pool = 400;       // corpus samples donors are drawn from
  std::int64_t eval_samples = 128;     // held-out grids for CE sweeps
  std::vector<double> clamps = {0.0, 0.10, 0.25, 0.50, 0.75, 1.00};
  std::int64_t jaccard_samples = 400;  // grids drawn for the Jaccard analysis
  int jaccard_bins = 10;
  std::int64_t max_pairs_per_bin = 500;
  std::uint64_t seed = 7;
};

/// Everything a run needs besides the command itself. Persisted verbatim
/// next to every output.
struct ExperimentConfig {
  CorpusSpec corpus;
  std::int64_t train_samples = 4000;
  std::int64_t val_samples = 64;
  ModelConfig model;
  TrainConfig train;
  SamplerConfig sampler;
  ProbeSettings probe;
  std::string output_dir = "runs/default";

  /// Desk-scale reference: d=64, L=4, V=64, 8x8 grid, engram at {0, 2}.
  static ExperimentConfig toy();
  /// The paper's AR-B backbone with engram at {0, 6, 12, 18}.
  static ExperimentConfig ar_b();

  /// Backbone vocabulary/grid must agree with the corpus; throws ConfigError.
  void validate() const;
};

/// Backbone fields derived from the corpus (vocab, classes, grid, prefix).
void sync_backbone_with_corpus(BackboneConfig& backbone, const CorpusSpec& corpus);

Json to_json(const CorpusSpec& c);
Json to_json(const BackboneConfig& c);
Json to_json(const EngramModuleConfig& c);
Json to_json(const ModelConfig& c);
Json to_json(const TrainConfig& c);
Json to_json(const SamplerConfig& c);
Json to_json(const ProbeSettings& c);
Json to_json(const ExperimentConfig& c);
Json to_json(const ParamReport& r);

// Parsers reject unknown keys and fill omitted ones with defaults.
CorpusSpec corpus_spec_from_json(const Json& j);
BackboneConfig backbone_from_json(const Json& j);
EngramModuleConfig engram_module_from_json(const Json& j);
ModelConfig model_config_from_json(const Json& j);
TrainConfig train_config_from_json(const Json& j);
SamplerConfig sampler_config_from_json(const Json& j);
ProbeSettings probe_settings_from_json(const Json& j);
ExperimentConfig experiment_from_json(const Json& j);
ParamReport param_report_from_json(const Json& j);

ExperimentConfig load_experiment(const std::string& path);

/// Version string stamped into artifacts (git describe at build time).
const char* version_string();

}  // namespace engram_ar
