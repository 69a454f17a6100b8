#include "engram_ar/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#ifndef ENGRAM_AR_VERSION
#define ENGRAM_AR_VERSION "unknown"
#endif

namespace engram_ar {

const char* version_string() { return ENGRAM_AR_VERSION; }

namespace {

/// Reads fields from a JSON object and rejects keys nobody asked for.
class Fields {
 public:
  Fields(const Json& j, std::string what) : j_(j), what_(std::move(what)) {
    if (!j_.is_object()) throw ConfigError(what_ + ": expected a JSON object");
  }
  void finish() const {
    for (const auto& [key, _] : j_.items())
      if (!seen_.contains(key)) throw ConfigError(what_ + ": unknown key '" + key + "'");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(what_ + "." + key + ": " + e.what());
    }
  }

  template <typename T>
  void get_optional(const char* key, std::optional<T>& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    if (j_.at(key).is_null()) {
      out.reset();
      return;
    }
    T v{};
    get(key, v);
    out = v;
  }

  const Json* sub(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

 private:
  const Json& j_;
  std::string what_;
  std::set<std::string> seen_;
};

template <typename T>
Json optional_json(const std::optional<T>& v) {
  return v ? Json(*v) : Json(nullptr);
}

}  // namespace

// --- presets ---------------------------------------------------------------

void sync_backbone_with_corpus(BackboneConfig& b, const CorpusSpec& c) {
  b.image_vocab = c.vocab_size;
  b.num_classes = c.num_classes;
  b.aux_tokens = c.aux_tokens;
  b.grid_height = c.grid_height;
  b.grid_width = c.grid_width;
}

ExperimentConfig ExperimentConfig::toy() {
  ExperimentConfig x;
  x.corpus = CorpusSpec{};
  auto& b = x.model.backbone;
  b.num_layers = 4;
  b.hidden = 64;
  b.num_heads = 4;
  b.ffn_inner = BackboneConfig::default_ffn_inner(64);
  sync_backbone_with_corpus(b, x.corpus);
  const int layers[] = {0, 2};
  x.model.engram = engram_layers(layers, BankVariant::seq1d, 2, 16, 2003, 1e-4, TableMode::learned);
  x.train.lr = 3e-3;
  x.train.batch_size = 16;
  x.train.total_steps = 2000;
  x.train.log_interval = 100;
  x.output_dir = "runs/toy";
  return x;
}

ExperimentConfig ExperimentConfig::ar_b() {
  ExperimentConfig x;
  x.corpus.num_classes = 1000;
  x.corpus.grid_height = 16;
  x.corpus.grid_width = 16;
  x.corpus.vocab_size = 4096;
  x.corpus.aux_tokens = 16;
  auto& b = x.model.backbone;
  b.num_layers = 24;
  b.hidden = 768;
  b.num_heads = 16;
  b.ffn_inner = BackboneConfig::default_ffn_inner(768);
  sync_backbone_with_corpus(b, x.corpus);
  const int layers[] = {0, 6, 12, 18};
  x.model.engram = engram_layers(layers, BankVariant::seq1d, 4, 64, 36715, 1e-4, TableMode::learned);
  x.output_dir = "runs/ar_b";
  return x;
}

void ExperimentConfig::validate() const {
  corpus.validate();
  model.validate();
  train.validate();
  sampler.validate();
  const auto& b = model.backbone;
  if (b.image_vocab != corpus.vocab_size || b.num_classes != corpus.num_classes || b.aux_tokens != corpus.aux_tokens ||
      b.grid_height != corpus.grid_height || b.grid_width != corpus.grid_width)
    throw ConfigError("backbone vocabulary, classes, aux tokens and grid must match the corpus spec");
  if (train_samples < 1 || val_samples < 0) throw ConfigError("sample counts must be positive");
  if (probe.references < 1 || probe.donor_pool < 1 || probe.eval_samples < 1 || probe.jaccard_samples < 2)
    throw ConfigError("probe sample counts too small");
  if (probe.jaccard_bins < 1 || probe.max_pairs_per_bin < 1) throw ConfigError("bad Jaccard binning");
}

// --- serialization ---------------------------------------------------------

Json to_json(const CorpusSpec& c) {
  Json shapes = Json::array();
  for (const auto& s : c.motif_shapes) shapes.push_back({s.rows, s.cols});
  return {{"num_classes", c.num_classes},
          {"grid_height", c.grid_height},
          {"grid_width", c.grid_width},
          {"vocab_size", c.vocab_size},
          {"motifs_per_class", c.motifs_per_class},
          {"motif_shapes", shapes},
          {"motif_fill_fraction", c.motif_fill_fraction},
          {"noise_rate", c.noise_rate},
          {"seed", c.seed},
          {"aux_tokens", c.aux_tokens}};
}

CorpusSpec corpus_spec_from_json(const Json& j) {
  CorpusSpec c;
  Fields f(j, "corpus");
  f.get("num_classes", c.num_classes);
  f.get("grid_height", c.grid_height);
  f.get("grid_width", c.grid_width);
  f.get("vocab_size", c.vocab_size);
  f.get("motifs_per_class", c.motifs_per_class);
  if (const Json* shapes = f.sub("motif_shapes")) {
    c.motif_shapes.clear();
    for (const auto& s : *shapes) {
      if (!s.is_array() || s.size() != 2) throw ConfigError("corpus.motif_shapes entries must be [rows, cols]");
      c.motif_shapes.push_back({s[0].get<int>(), s[1].get<int>()});
    }
  }
  f.get("motif_fill_fraction", c.motif_fill_fraction);
  f.get("noise_rate", c.noise_rate);
  f.get("seed", c.seed);
  f.get("aux_tokens", c.aux_tokens);
  f.finish();
  return c;
}

Json to_json(const BackboneConfig& c) {
  return {{"num_layers", c.num_layers},   {"hidden", c.hidden},           {"num_heads", c.num_heads},
          {"ffn_inner", c.ffn_inner},     {"image_vocab", c.image_vocab}, {"num_classes", c.num_classes},
          {"aux_tokens", c.aux_tokens},   {"grid_height", c.grid_height}, {"grid_width", c.grid_width},
          {"rope_base", c.rope_base}};
}

BackboneConfig backbone_from_json(const Json& j) {
  BackboneConfig c;
  Fields f(j, "backbone");
  f.get("num_layers", c.num_layers);
  f.get("hidden", c.hidden);
  f.get("num_heads", c.num_heads);
  c.ffn_inner = BackboneConfig::default_ffn_inner(c.hidden);
  f.get("ffn_inner", c.ffn_inner);
  f.get("image_vocab", c.image_vocab);
  f.get("num_classes", c.num_classes);
  f.get("aux_tokens", c.aux_tokens);
  f.get("grid_height", c.grid_height);
  f.get("grid_width", c.grid_width);
  f.get("rope_base", c.rope_base);
  f.finish();
  return c;
}

Json to_json(const EngramModuleConfig& c) {
  Json banks = Json::array();
  for (const auto& b : c.banks) banks.push_back({{"bank_id", b.bank_id}, {"label", std::string(to_string(b.label))}});
  return {{"layer_index", c.layer_index},
          {"banks", banks},
          {"num_heads", c.num_heads},
          {"d_head", c.d_head},
          {"table_size", c.table_size},
          {"gate_clamp", optional_json(c.gate_clamp)},
          {"layerscale_init", c.layerscale_init},
          {"table_mode", std::string(to_string(c.table_mode))}};
}

EngramModuleConfig engram_module_from_json(const Json& j) {
  EngramModuleConfig c;
  Fields f(j, "engram");
  f.get("layer_index", c.layer_index);
  if (const Json* banks = f.sub("banks")) {
    c.banks.clear();
    if (banks->is_string()) {
      c.banks = banks_for_variant(bank_variant_from_string(banks->get<std::string>()));
    } else {
      for (const auto& b : *banks) {
        Fields bf(b, "engram.banks[]");
        int id = static_cast<int>(c.banks.size());
        std::string label;
        bf.get("bank_id", id);
        bf.get("label", label);
        bf.finish();
        c.banks.push_back(BankSpec::make(bank_label_from_string(label), id));
      }
    }
  } else {
    c.banks = banks_for_variant(BankVariant::seq1d);
  }
  f.get("num_heads", c.num_heads);
  f.get("d_head", c.d_head);
  f.get("table_size", c.table_size);
  f.get_optional("gate_clamp", c.gate_clamp);
  f.get("layerscale_init", c.layerscale_init);
  std::string mode(to_string(c.table_mode));
  f.get("table_mode", mode);
  c.table_mode = table_mode_from_string(mode);
  f.finish();
  return c;
}

Json to_json(const ModelConfig& c) {
  Json engram = Json::array();
  for (const auto& e : c.engram) engram.push_back(to_json(e));
  return {{"backbone", to_json(c.backbone)}, {"engram", engram}, {"hash_seed", c.hash_seed}};
}

ModelConfig model_config_from_json(const Json& j) {
  ModelConfig c;
  Fields f(j, "model");
  if (const Json* b = f.sub("backbone")) c.backbone = backbone_from_json(*b);
  if (const Json* e = f.sub("engram"))
    for (const auto& m : *e) c.engram.push_back(engram_module_from_json(m));
  f.get("hash_seed", c.hash_seed);
  f.finish();
  return c;
}

Json to_json(const TrainConfig& c) {
  return {{"lr", c.lr},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"adam_eps", c.adam_eps},
          {"weight_decay", c.weight_decay},
          {"warmup_fraction", c.warmup_fraction},
          {"grad_clip", c.grad_clip},
          {"class_dropout", c.class_dropout},
          {"batch_size", c.batch_size},
          {"total_steps", c.total_steps},
          {"log_interval", c.log_interval},
          {"seed", c.seed},
          {"table_mode", std::string(to_string(c.table_mode))},
          {"banks_variant", std::string(to_string(c.banks_variant))},
          {"threads", c.threads}};
}

TrainConfig train_config_from_json(const Json& j) {
  TrainConfig c;
  Fields f(j, "train");
  f.get("lr", c.lr);
  f.get("beta1", c.beta1);
  f.get("beta2", c.beta2);
  f.get("adam_eps", c.adam_eps);
  f.get("weight_decay", c.weight_decay);
  f.get("warmup_fraction", c.warmup_fraction);
  f.get("grad_clip", c.grad_clip);
  f.get("class_dropout", c.class_dropout);
  f.get("batch_size", c.batch_size);
  f.get("total_steps", c.total_steps);
  f.get("log_interval", c.log_interval);
  f.get("seed", c.seed);
  std::string mode(to_string(c.table_mode)), variant(to_string(c.banks_variant));
  f.get("table_mode", mode);
  f.get("banks_variant", variant);
  c.table_mode = table_mode_from_string(mode);
  c.banks_variant = bank_variant_from_string(variant);
  f.get("threads", c.threads);
  f.finish();
  return c;
}

Json to_json(const SamplerConfig& c) {
  return {{"temperature", c.temperature}, {"top_k", optional_json(c.top_k)},
          {"cfg_max", c.cfg_max},         {"cfg_alpha", c.cfg_alpha},
          {"gate_clamp", optional_json(c.gate_clamp)}, {"seed", c.seed}};
}

SamplerConfig sampler_config_from_json(const Json& j) {
  SamplerConfig c;
  Fields f(j, "sampler");
  f.get("temperature", c.temperature);
  f.get_optional("top_k", c.top_k);
  f.get("cfg_max", c.cfg_max);
  f.get("cfg_alpha", c.cfg_alpha);
  f.get_optional("gate_clamp", c.gate_clamp);
  f.get("seed", c.seed);
  f.finish();
  return c;
}

Json to_json(const ProbeSettings& c) {
  return {{"references", c.references},
          {"donor_pool", c.donor_pool},
          {"eval_samples", c.eval_samples},
          {"clamps", c.clamps},
          {"jaccard_samples", c.jaccard_samples},
          {"jaccard_bins", c.jaccard_bins},
          {"max_pairs_per_bin", c.max_pairs_per_bin},
          {"seed", c.seed}};
}

ProbeSettings probe_settings_from_json(const Json& j) {
  ProbeSettings c;
  Fields f(j, "probe");
  f.get("references", c.references);
  f.get("donor_pool", c.donor_pool);
  f.get("eval_samples", c.eval_samples);
  f.get("clamps", c.clamps);
  f.get("jaccard_samples", c.jaccard_samples);
  f.get("jaccard_bins", c.jaccard_bins);
  f.get("max_pairs_per_bin", c.max_pairs_per_bin);
  f.get("seed", c.seed);
  f.finish();
  return c;
}

Json to_json(const ExperimentConfig& c) {
  return {{"corpus", to_json(c.corpus)},     {"train_samples", c.train_samples}, {"val_samples", c.val_samples},
          {"model", to_json(c.model)},       {"train", to_json(c.train)},        {"sampler", to_json(c.sampler)},
          {"probe", to_json(c.probe)},       {"output_dir", c.output_dir}};
}

ExperimentConfig experiment_from_json(const Json& j) {
  ExperimentConfig c = ExperimentConfig::toy();
  Fields f(j, "experiment");
  if (const Json* x = f.sub("corpus")) {
    c.corpus = corpus_spec_from_json(*x);
    sync_backbone_with_corpus(c.model.backbone, c.corpus);
  }
  f.get("train_samples", c.train_samples);
  f.get("val_samples", c.val_samples);
  if (const Json* x = f.sub("model")) {
    c.model = model_config_from_json(*x);
    if (!x->contains("backbone") || !x->at("backbone").contains("image_vocab"))
      sync_backbone_with_corpus(c.model.backbone, c.corpus);
  }
  if (const Json* x = f.sub("train")) c.train = train_config_from_json(*x);
  if (const Json* x = f.sub("sampler")) c.sampler = sampler_config_from_json(*x);
  if (const Json* x = f.sub("probe")) c.probe = probe_settings_from_json(*x);
  f.get("output_dir", c.output_dir);
  f.finish();
  return c;
}

Json to_json(const ParamReport& r) {
  return {{"backbone_params", r.backbone_params},
          {"memory_params", r.memory_params},
          {"engram_glue_params", r.engram_glue_params},
          {"total", r.total},
          {"rho", r.rho},
          {"glue_counted_in", "total_only"}};
}

ParamReport param_report_from_json(const Json& j) {
  ParamReport r;
  Fields f(j, "param_report");
  f.get("backbone_params", r.backbone_params);
  f.get("memory_params", r.memory_params);
  f.get("engram_glue_params", r.engram_glue_params);
  f.get("total", r.total);
  f.get("rho", r.rho);
  std::string glue;
  f.get("glue_counted_in", glue);
  f.finish();
  return r;
}

ExperimentConfig load_experiment(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  Json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
  return experiment_from_json(j);
}

}  // namespace engram_ar
