#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "engram_ar/config.hpp"
#include "engram_ar/training.hpp"

namespace engram_ar {

namespace fs = std::filesystem;

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Token grids plus, when generated, the spec that produced them.
struct Corpus {
  std::vector<TokenGrid> grids;
  std::optional<CorpusSpec> spec;
};

/// Writes `dir`/corpus.bin and `dir`/manifest.json. Each record is a header
/// of five little-endian uint32 (height, width, vocab_size, prefix_len,
/// class_id) followed by uint16 tokens: prefix, then cells in raster order.
/// Generator ground truth (motif instances) lives in the manifest.
void save_corpus(const fs::path& dir, const Corpus& corpus);
Corpus load_corpus(const fs::path& dir);

/// Writes `dir`/manifest.json (configs, step, tensor index), params.bin
/// (float32 tensors in parameter order) and optimizer.bin (Adam moments of
/// trainable tensors). Table entries record their hash-head parameters.
void save_checkpoint(const fs::path& dir, const Checkpoint& ck);
Checkpoint load_checkpoint(const fs::path& dir);

void write_json(const fs::path& path, const Json& j);
Json read_json(const fs::path& path);
void write_text(const fs::path& path, const std::string& text);

/// Records the exact config and version string next to a run's outputs.
void stamp_artifact_dir(const fs::path& dir, const ExperimentConfig& cfg);

Json to_json(const LossRow& r);
std::string loss_curve_csv(const std::vector<LossRow>& curve);

}  // namespace engram_ar
