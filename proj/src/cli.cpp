#include "engram_ar/cli.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <iomanip>
#include <optional>
#include <sstream>

#include "engram_ar/config.hpp"
#include "engram_ar/diagnostics.hpp"
#include "engram_ar/inference.hpp"
#include "engram_ar/io.hpp"
#include "engram_ar/parallel.hpp"
#include "engram_ar/rng.hpp"
#include "engram_ar/training.hpp"

namespace engram_ar {

namespace {

const std::vector<double> kPaperRhos = {0.17, 0.32, 0.41, 0.51, 0.63, 0.76, 0.90, 1.0};

struct Common {
  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  int threads = 0;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "Experiment config (JSON); defaults to the toy preset");
  cmd->add_option("--out", c.out_dir, "Output directory (overrides the config)");
  cmd->add_option("--seed", c.seed, "Root seed; splits into corpus/train/sampler/probe seeds");
  cmd->add_option("--threads", c.threads, "Worker threads (capped by ENGRAM_AR_THREADS)")->check(CLI::NonNegativeNumber);
}

/// Loads the config (explicit path, else next to a checkpoint, else the toy
/// preset) and applies command-line overrides.
ExperimentConfig resolve_config(const Common& c, const std::string& checkpoint = {}) {
  ExperimentConfig cfg = ExperimentConfig::toy();
  if (!c.config_path.empty()) {
    cfg = load_experiment(c.config_path);
  } else if (!checkpoint.empty()) {
    const fs::path beside = fs::path(checkpoint).parent_path() / "config.json";
    if (fs::exists(beside)) cfg = load_experiment(beside.string());
  }
  if (!c.out_dir.empty()) cfg.output_dir = c.out_dir;
  if (c.seed) {
    cfg.corpus.seed = derive_seed(*c.seed, "corpus");
    cfg.train.seed = derive_seed(*c.seed, "train");
    cfg.sampler.seed = derive_seed(*c.seed, "sampler");
    cfg.probe.seed = derive_seed(*c.seed, "probe");
  }
  if (c.threads > 0) cfg.train.threads = c.threads;
  return cfg;
}

void announce(std::ostream& out, const std::string& command, const ExperimentConfig& cfg, const Common& c) {
  out << "command: " << command << "\n";
  out << "version: " << version_string() << "\n";
  if (c.seed)
    out << "root seed: " << *c.seed << "\n";
  else
    out << "root seed: none (component seeds from config)\n";
  out << "seeds: corpus=" << cfg.corpus.seed << " train=" << cfg.train.seed << " sampler=" << cfg.sampler.seed
      << " probe=" << cfg.probe.seed << "\n";
  out << "resolved config:\n" << to_json(cfg).dump(2) << "\n";
}

std::vector<TokenGrid> train_grids(const ExperimentConfig& cfg, const std::string& data_dir) {
  if (!data_dir.empty()) return load_corpus(fs::path(data_dir) / "train").grids;
  return generate_corpus(cfg.corpus, cfg.train_samples);
}

std::vector<TokenGrid> val_grids(const ExperimentConfig& cfg, const std::string& data_dir) {
  if (!data_dir.empty()) {
    const fs::path val = fs::path(data_dir) / "val";
    return fs::exists(val / "manifest.json") ? load_corpus(val).grids : std::vector<TokenGrid>{};
  }
  return generate_corpus(cfg.corpus, cfg.val_samples, cfg.train_samples);
}

/// Held-out grids after the training and validation ranges.
std::vector<TokenGrid> held_out(const ExperimentConfig& cfg, std::int64_t offset, std::int64_t count) {
  return generate_corpus(cfg.corpus, count, cfg.train_samples + cfg.val_samples + offset);
}

std::string fixed(double v, int digits = 9) {
  std::ostringstream s;
  s << std::setprecision(digits) << v;
  return s.str();
}

// --- commands --------------------------------------------------------------

int cmd_gen_data(const Common& c, std::optional<double> noise, std::ostream& out) {
  ExperimentConfig cfg = resolve_config(c);
  if (noise) cfg.corpus.noise_rate = *noise;
  cfg.validate();
  announce(out, "gen-data", cfg, c);
  const fs::path dir(cfg.output_dir);
  save_corpus(dir / "train", {generate_corpus(cfg.corpus, cfg.train_samples), cfg.corpus});
  save_corpus(dir / "val", {generate_corpus(cfg.corpus, cfg.val_samples, cfg.train_samples), cfg.corpus});
  stamp_artifact_dir(dir, cfg);
  out << "wrote " << cfg.train_samples << " training and " << cfg.val_samples << " validation grids to " << dir.string()
      << "\n";
  return kExitOk;
}

int cmd_params(const Common& c, std::optional<double> target_rho, std::ostream& out) {
  ExperimentConfig cfg = resolve_config(c);
  Json result;
  if (target_rho) {
    if (cfg.model.engram.empty()) throw ConfigError("--target-rho needs at least one engram module in the config");
    if (*target_rho >= 1.0) {
      cfg.model.engram.clear();
    } else {
      const auto& e = cfg.model.engram.front();
      const auto m = solve_table_size(*target_rho, cfg.model.backbone, e.banks, e.num_heads, e.d_head,
                                      static_cast<int>(cfg.model.engram.size()));
      for (auto& mod : cfg.model.engram) mod.table_size = m;
      result["table_size"] = m;
    }
    result["target_rho"] = *target_rho;
  }
  cfg.validate();
  announce(out, "params", cfg, c);
  result["report"] = to_json(count_params(cfg.model.backbone, cfg.model.engram));
  const fs::path dir(cfg.output_dir);
  stamp_artifact_dir(dir, cfg);
  write_json(dir / "params.json", result);
  out << result.dump(2) << "\n";
  return kExitOk;
}

struct TrainArgs {
  std::string data_dir;
  std::string table_mode;
  std::string banks;
  std::optional<std::int64_t> steps;
};

int run_training(ExperimentConfig cfg, const std::string& data_dir, std::ostream& out) {
  const fs::path dir(cfg.output_dir);
  stamp_artifact_dir(dir, cfg);
  const auto train_set = train_grids(cfg, data_dir);
  const auto val_set = val_grids(cfg, data_dir);
  TrainResult result = train(train_set, val_set, init_checkpoint(cfg.model, cfg.train), [&](const LossRow& r) {
    out << "step " << r.step << " lr " << fixed(r.lr, 4) << " train_ce " << fixed(r.train_ce, 6);
    if (r.val_ce) out << " val_ce " << fixed(*r.val_ce, 6);
    out << "\n" << std::flush;
  });
  save_checkpoint(dir / "checkpoint", result.checkpoint);
  write_text(dir / "loss.csv", loss_curve_csv(result.curve));

  const Model<float> model(result.checkpoint.model);
  const int threads = resolve_threads(cfg.train.threads);
  const std::size_t probe_n = std::min<std::size_t>(train_set.size(), 256);
  Json summary = {{"steps", result.checkpoint.optimizer.step},
                  {"final_train_ce", evaluate_ce(model, result.checkpoint.params,
                                                 std::span<const TokenGrid>(train_set).first(probe_n), {}, threads)},
                  {"train_ce_sequences", probe_n},
                  {"ln_vocab", std::log(static_cast<double>(cfg.model.backbone.image_vocab))}};
  summary["final_val_ce"] = val_set.empty() ? Json(nullptr) : Json(evaluate_ce(model, result.checkpoint.params, val_set, {}, threads));
  summary["report"] = to_json(count_params(cfg.model.backbone, cfg.model.engram));
  write_json(dir / "train_summary.json", summary);
  out << summary.dump(2) << "\n";
  return kExitOk;
}

int cmd_train(const Common& c, const TrainArgs& a, std::ostream& out) {
  ExperimentConfig cfg = resolve_config(c);
  if (!a.table_mode.empty()) cfg.train.table_mode = table_mode_from_string(a.table_mode);
  if (!a.banks.empty()) cfg.train.banks_variant = bank_variant_from_string(a.banks);
  if (a.steps) cfg.train.total_steps = *a.steps;
  apply_condition(cfg.model, cfg.train);
  cfg.validate();
  announce(out, "train", cfg, c);
  return run_training(cfg, a.data_dir, out);
}

struct CheckpointArgs {
  std::string checkpoint;
};

Checkpoint load_for(const ExperimentConfig& cfg, const std::string& path) {
  Checkpoint ck = load_checkpoint(path);
  const auto& b = ck.model.backbone;
  if (b.image_vocab != cfg.corpus.vocab_size || b.grid_height != cfg.corpus.grid_height ||
      b.grid_width != cfg.corpus.grid_width || b.num_classes != cfg.corpus.num_classes)
    throw ConfigError("checkpoint backbone does not match the config's corpus spec");
  return ck;
}

struct SampleArgs {
  std::string checkpoint;
  std::optional<int> class_id;
  std::int64_t count = 10;
  std::optional<double> gate_clamp, cfg_max, cfg_alpha, temperature;
  std::optional<int> top_k;
};

int cmd_sample(const Common& c, const SampleArgs& a, std::ostream& out) {
  ExperimentConfig cfg = resolve_config(c, a.checkpoint);
  if (a.gate_clamp) cfg.sampler.gate_clamp = a.gate_clamp;
  if (a.cfg_max) cfg.sampler.cfg_max = *a.cfg_max;
  if (a.cfg_alpha) cfg.sampler.cfg_alpha = *a.cfg_alpha;
  if (a.temperature) cfg.sampler.temperature = *a.temperature;
  if (a.top_k) cfg.sampler.top_k = a.top_k;
  cfg.validate();
  announce(out, "sample", cfg, c);
  const Checkpoint ck = load_for(cfg, a.checkpoint);
  const Model<float> model(ck.model);
  std::vector<TokenGrid> grids(static_cast<std::size_t>(a.count));
  parallel_for(grids.size(), resolve_threads(cfg.train.threads), [&](std::size_t i) {
    const int cls = a.class_id ? *a.class_id : static_cast<int>(i % static_cast<std::size_t>(cfg.corpus.num_classes));
    grids[i] = sample(model, ck.params, cls, cfg.sampler, static_cast<std::int64_t>(i));
  });
  const fs::path dir(cfg.output_dir);
  stamp_artifact_dir(dir, cfg);
  save_corpus(dir / "samples", {grids, std::nullopt});
  out << "wrote " << grids.size() << " sampled grids to " << (dir / "samples").string() << "\n";
  return kExitOk;
}

struct ProbeArgs {
  std::string checkpoint;
  std::string references_dir;
  std::optional<double> gate_clamp;
};

int cmd_probe_donor(const Common& c, const ProbeArgs& a, std::ostream& out) {
  ExperimentConfig cfg = resolve_config(c, a.checkpoint);
  cfg.validate();
  announce(out, "probe-donor", cfg, c);
  const Checkpoint ck = load_for(cfg, a.checkpoint);
  const Model<float> model(ck.model);
  const auto references = a.references_dir.empty() ? held_out(cfg, 0, cfg.probe.references)
                                                    : load_corpus(a.references_dir).grids;
  const auto pool = held_out(cfg, cfg.probe.references, cfg.probe.donor_pool);
  DonorProbeOptions opts;
  opts.gate_clamp = a.gate_clamp;
  opts.seed = cfg.probe.seed;
  opts.threads = resolve_threads(cfg.train.threads);
  const DonorProbeReport report = donor_probe_all(model, ck.params, references, pool, opts);
  const fs::path dir(cfg.output_dir);
  stamp_artifact_dir(dir, cfg);
  write_json(dir / "donor_probe.json", to_json(report));
  write_text(dir / "donor_probe.csv", to_csv(report));
  out << to_csv(report);
  return kExitOk;
}

int cmd_probe_gate_clamp(const Common& c, const ProbeArgs& a, std::ostream& out) {
  ExperimentConfig cfg = resolve_config(c, a.checkpoint);
  cfg.validate();
  announce(out, "probe-gate-clamp", cfg, c);
  const Checkpoint ck = load_for(cfg, a.checkpoint);
  const Model<float> model(ck.model);
  const auto eval = a.references_dir.empty() ? held_out(cfg, 0, cfg.probe.eval_samples)
                                             : load_corpus(a.references_dir).grids;
  const GateClampReport report =
      gate_clamp_sweep(model, ck.params, eval, cfg.probe.clamps, resolve_threads(cfg.train.threads));
  const fs::path dir(cfg.output_dir);
  stamp_artifact_dir(dir, cfg);
  write_json(dir / "gate_clamp.json", to_json(report));
  write_text(dir / "gate_clamp.csv", to_csv(report));
  out << to_csv(report);
  return kExitOk;
}

int cmd_analyze_jaccard(const Common& c, const std::string& data_dir, std::optional<double> noise, std::ostream& out) {
  ExperimentConfig cfg = resolve_config(c);
  if (noise) cfg.corpus.noise_rate = *noise;
  cfg.validate();
  announce(out, "analyze-jaccard", cfg, c);
  std::vector<TokenGrid> grids;
  if (!data_dir.empty()) {
    grids = load_corpus(data_dir).grids;
    if (static_cast<std::int64_t>(grids.size()) > cfg.probe.jaccard_samples)
      grids.resize(static_cast<std::size_t>(cfg.probe.jaccard_samples));
  } else {
    grids = generate_corpus(cfg.corpus, cfg.probe.jaccard_samples);
  }
  const auto shapes = default_patch_shapes();
  const JaccardReport report =
      stratified_jaccard(grids, shapes, cfg.probe.jaccard_bins, cfg.probe.max_pairs_per_bin, cfg.probe.seed);
  const fs::path dir(cfg.output_dir);
  stamp_artifact_dir(dir, cfg);
  write_json(dir / "jaccard.json", to_json(report));
  write_text(dir / "jaccard.csv", to_csv(report));
  out << to_csv(report);
  return kExitOk;
}

int cmd_sweep_rho(const Common& c, std::vector<double> targets, std::optional<std::int64_t> steps,
                  const std::string& data_dir, std::ostream& out) {
  ExperimentConfig base = resolve_config(c);
  if (steps) base.train.total_steps = *steps;
  if (base.model.engram.empty()) throw ConfigError("sweep-rho needs engram modules in the config to scale");
  base.validate();
  announce(out, "sweep-rho", base, c);
  if (targets.empty()) targets = kPaperRhos;

  const fs::path root(base.output_dir);
  stamp_artifact_dir(root, base);
  std::ostringstream summary;
  summary << "target_rho,table_size,rho,backbone_params,memory_params,engram_glue_params,total,final_val_ce\n";
  for (double target : targets) {
    ExperimentConfig cfg = base;
    std::int64_t m = 0;
    if (target >= 1.0) {
      cfg.model.engram.clear();
    } else {
      const auto& e = cfg.model.engram.front();
      m = solve_table_size(target, cfg.model.backbone, e.banks, e.num_heads, e.d_head,
                           static_cast<int>(cfg.model.engram.size()));
      for (auto& mod : cfg.model.engram) mod.table_size = m;
    }
    std::ostringstream name;
    name << "rho_" << std::fixed << std::setprecision(2) << target;
    cfg.output_dir = (root / name.str()).string();
    const ParamReport report = count_params(cfg.model.backbone, cfg.model.engram);
    out << "== " << name.str() << " table_size " << m << " rho " << fixed(report.rho, 6) << "\n";
    write_json(fs::path(cfg.output_dir) / "params.json",
               {{"target_rho", target}, {"table_size", m}, {"report", to_json(report)}});
    std::ostringstream sink;
    run_training(cfg, data_dir, sink);
    const Json ts = read_json(fs::path(cfg.output_dir) / "train_summary.json");
    summary << fixed(target) << ',' << m << ',' << fixed(report.rho) << ',' << report.backbone_params << ','
            << report.memory_params << ',' << report.engram_glue_params << ',' << report.total << ',';
    if (!ts.at("final_val_ce").is_null()) summary << fixed(ts.at("final_val_ce").get<double>());
    summary << '\n';
  }
  write_text(root / "summary.csv", summary.str());
  out << summary.str();
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Engram memory in a causal token-grid transformer: data, training, sampling and probes", "engram_ar"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(version_string()));

  Common common;
  std::optional<double> noise, target_rho;
  TrainArgs train_args;
  SampleArgs sample_args;
  ProbeArgs probe_args;
  std::string data_dir;
  std::vector<double> targets;
  std::optional<std::int64_t> sweep_steps;

  auto* gen = app.add_subcommand("gen-data", "Generate the planted-motif corpus (train/ and val/)");
  add_common(gen, common);
  gen->add_option("--noise", noise, "Override the corpus noise rate")->check(CLI::Range(0.0, 1.0));

  auto* params = app.add_subcommand("params", "Parameter accounting (backbone ratio rho)");
  add_common(params, common);
  params->add_option("--target-rho", target_rho, "Solve the table size for this rho")->check(CLI::Range(0.0, 1.0));

  auto* trn = app.add_subcommand("train", "Train a model; writes checkpoint/, loss.csv, train_summary.json");
  add_common(trn, common);
  trn->add_option("--data", train_args.data_dir, "Corpus directory from gen-data (default: generate in memory)");
  trn->add_option("--table-mode", train_args.table_mode, "learned | frozen-noise")
      ->check(CLI::IsMember({"learned", "frozen-noise", "frozen_noise"}));
  trn->add_option("--banks", train_args.banks, "seq1d | spatial2d")
      ->check(CLI::IsMember({"seq1d", "spatial2d", "seq-1d", "spatial-2d"}));
  trn->add_option("--steps", train_args.steps, "Total optimizer steps")->check(CLI::NonNegativeNumber);

  auto* smp = app.add_subcommand("sample", "Sample grids from a checkpoint");
  add_common(smp, common);
  smp->add_option("--checkpoint", sample_args.checkpoint, "Checkpoint directory")->required();
  smp->add_option("--class", sample_args.class_id, "Class id (default: round-robin)");
  smp->add_option("--count", sample_args.count, "Number of grids")->check(CLI::PositiveNumber);
  smp->add_option("--gate-clamp", sample_args.gate_clamp, "Clamp every engram gate")->check(CLI::Range(0.0, 1.0));
  smp->add_option("--cfg-max", sample_args.cfg_max, "Peak guidance scale");
  smp->add_option("--cfg-alpha", sample_args.cfg_alpha, "Guidance ramp exponent");
  smp->add_option("--temperature", sample_args.temperature, "Sampling temperature");
  smp->add_option("--top-k", sample_args.top_k, "Keep the k most likely tokens")->check(CLI::PositiveNumber);

  auto* donor = app.add_subcommand("probe-donor", "Donor probe over all conditions");
  add_common(donor, common);
  donor->add_option("--checkpoint", probe_args.checkpoint, "Checkpoint directory")->required();
  donor->add_option("--references", probe_args.references_dir, "Reference corpus directory (e.g. sampled grids)");
  donor->add_option("--gate-clamp", probe_args.gate_clamp, "Clamp gates in both passes")->check(CLI::Range(0.0, 1.0));

  auto* clamp = app.add_subcommand("probe-gate-clamp", "Teacher-forced CE under clamped gates");
  add_common(clamp, common);
  clamp->add_option("--checkpoint", probe_args.checkpoint, "Checkpoint directory")->required();
  clamp->add_option("--references", probe_args.references_dir, "Evaluation corpus directory");

  auto* jac = app.add_subcommand("analyze-jaccard", "Similarity-stratified n-gram Jaccard analysis");
  add_common(jac, common);
  jac->add_option("--data", data_dir, "Corpus directory (default: generate from the config)");
  jac->add_option("--noise", noise, "Override the corpus noise rate")->check(CLI::Range(0.0, 1.0));

  auto* sweep = app.add_subcommand("sweep-rho", "Solve, train and summarize each backbone ratio");
  add_common(sweep, common);
  sweep->add_option("--targets", targets, "Rho targets (default: 0.17 0.32 0.41 0.51 0.63 0.76 0.90 1.0)");
  sweep->add_option("--steps", sweep_steps, "Training steps per point")->check(CLI::NonNegativeNumber);
  sweep->add_option("--data", data_dir, "Corpus directory from gen-data");

  std::vector<std::string> args(argv.begin() + (argv.empty() ? 0 : 1), argv.end());
  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    out << version_string() << "\n";
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n";
    if (const auto* sub = app.get_subcommands().empty() ? nullptr : app.get_subcommands().front())
      err << sub->help();
    else
      err << app.help();
    return kExitUsage;
  }

  try {
    if (*gen) return cmd_gen_data(common, noise, out);
    if (*params) return cmd_params(common, target_rho, out);
    if (*trn) return cmd_train(common, train_args, out);
    if (*smp) return cmd_sample(common, sample_args, out);
    if (*donor) return cmd_probe_donor(common, probe_args, out);
    if (*clamp) return cmd_probe_gate_clamp(common, probe_args, out);
    if (*jac) return cmd_analyze_jaccard(common, data_dir, noise, out);
    if (*sweep) return cmd_sweep_rho(common, targets, sweep_steps, data_dir, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace engram_ar
