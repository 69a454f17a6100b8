#include <doctest.h>

#include <fstream>
#include <sstream>

#include "engram_ar/cli.hpp"
#include "engram_ar/config.hpp"
#include "engram_ar/io.hpp"
#include "fixtures.hpp"

using namespace engram_ar;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("engram_ar_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

/// Small experiment: 4x4 grid, tiny backbone, short runs.
ExperimentConfig small_experiment(const fs::path& out) {
  ExperimentConfig x = ExperimentConfig::toy();
  x.corpus.grid_height = x.corpus.grid_width = 4;
  x.corpus.vocab_size = 16;
  x.corpus.num_classes = 4;
  x.corpus.motifs_per_class = 2;
  x.corpus.motif_shapes = {{2, 2}, {1, 3}};
  x.model.backbone.num_layers = 2;
  x.model.backbone.hidden = 16;
  x.model.backbone.num_heads = 2;
  x.model.backbone.ffn_inner = 32;
  sync_backbone_with_corpus(x.model.backbone, x.corpus);
  for (auto& e : x.model.engram) {
    e.layer_index = std::min(e.layer_index, 1);
    e.d_head = 4;
    e.table_size = 31;
  }
  x.train_samples = 32;
  x.val_samples = 4;
  x.train.total_steps = 4;
  x.train.batch_size = 2;
  x.train.log_interval = 2;
  x.probe.references = 4;
  x.probe.donor_pool = 16;
  x.probe.eval_samples = 4;
  x.probe.jaccard_samples = 20;
  x.probe.max_pairs_per_bin = 10;
  x.output_dir = out.string();
  return x;
}

int cli(std::vector<std::string> args, std::string* out_text = nullptr, std::string* err_text = nullptr) {
  args.insert(args.begin(), "engram_ar");
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  if (out_text) *out_text = out.str();
  if (err_text) *err_text = err.str();
  return code;
}

}  // namespace

TEST_CASE("corpus round trip") {
  const auto dir = scratch("corpus");
  CorpusSpec spec;
  Corpus c{generate_corpus(spec, 25), spec};
  save_corpus(dir, c);
  const auto back = load_corpus(dir);
  CHECK(back.grids == c.grids);
  CHECK(back.spec == spec);
  // 5 header words + 2 prefix + 64 cells per record, 16-bit tokens.
  CHECK(fs::file_size(dir / "corpus.bin") == 25u * (5 * 4 + (2 + 64) * 2));
  std::ofstream(dir / "corpus.bin", std::ios::app) << 'x';
  CHECK_THROWS_AS(load_corpus(dir), IoError);
}

TEST_CASE("checkpoint round trip") {
  const auto dir = scratch("ckpt");
  auto model_cfg = fixture::tiny_model(BankVariant::spatial2d, {0, 1});
  TrainConfig tc;
  tc.table_mode = TableMode::frozen_noise;
  apply_condition(model_cfg, tc);
  auto ck = init_checkpoint(model_cfg, tc);
  ck.optimizer.step = 12;
  ck.optimizer.m[0][3] = 0.25f;
  save_checkpoint(dir, ck);
  const auto back = load_checkpoint(dir);
  CHECK(back.optimizer.step == 12);
  CHECK(back.optimizer.m[0][3] == 0.25f);
  CHECK(back.init_seed == ck.init_seed);
  REQUIRE(back.params.size() == ck.params.size());
  for (std::size_t i = 0; i < ck.params.size(); ++i) {
    CHECK(back.params[i].name == ck.params[i].name);
    CHECK(back.params[i].value == ck.params[i].value);
    CHECK(back.params[i].trainable == ck.params[i].trainable);
  }
  const Model<float> model(back.model);
  const auto seq = fixture::random_sequence(model.backbone(), 3);
  CHECK(model.logits(back.params, seq) == Model<float>(ck.model).logits(ck.params, seq));

  const auto manifest = read_json(dir / "manifest.json");
  bool saw_hash = false;
  for (const auto& t : manifest.at("tensors"))
    if (t.contains("hash")) {
      saw_hash = true;
      CHECK(t.at("hash").at("multiplier").get<std::uint64_t>() % 2 == 1);
      CHECK(t.at("hash").at("mode") == "frozen_noise");
    }
  CHECK(saw_hash);
}

TEST_CASE("config json round trip and strictness") {
  for (const auto& x : {ExperimentConfig::toy(), ExperimentConfig::ar_b()}) {
    const Json j = to_json(x);
    CHECK(to_json(experiment_from_json(j)) == j);
  }
  Json j = to_json(ExperimentConfig::toy());
  j["train"]["learning_rate_typo"] = 1.0;
  CHECK_THROWS_AS(experiment_from_json(j), ConfigError);
  ParamReport r{1, 2, 3, 6, 1.0 / 6};
  CHECK(to_json(param_report_from_json(to_json(r))) == to_json(r));
  CHECK_NOTHROW(ExperimentConfig::toy().validate());
  CHECK_NOTHROW(ExperimentConfig::ar_b().validate());
}

TEST_CASE("cli usage errors") {
  std::string out, err;
  CHECK(cli({"no-such-command"}, &out, &err) == kExitUsage);
  CHECK(cli({"params", "--bogus"}, &out, &err) == kExitUsage);
  CHECK(cli({}, &out, &err) == kExitUsage);
  CHECK(cli({"train", "--table-mode", "sometimes"}, &out, &err) == kExitUsage);
  CHECK(cli({"--help"}, &out, &err) == kExitOk);
  CHECK(out.find("sweep-rho") != std::string::npos);
  CHECK(cli({"probe-donor", "--checkpoint", "/nonexistent/ckpt"}, &out, &err) == kExitFailure);
  CHECK(err.find("error") != std::string::npos);
}

TEST_CASE("cli params without engram reports rho 1") {
  const auto dir = scratch("cli_params");
  auto x = small_experiment(dir / "out");
  x.model.engram.clear();
  write_json(dir / "cfg.json", to_json(x));
  std::string out;
  REQUIRE(cli({"params", "--config", (dir / "cfg.json").string()}, &out) == kExitOk);
  CHECK(out.find("resolved config") != std::string::npos);
  CHECK(out.find("seed") != std::string::npos);
  const auto report = read_json(dir / "out" / "params.json");
  CHECK(report.at("report").at("rho").get<double>() == 1.0);
  CHECK(fs::exists(dir / "out" / "config.json"));
  CHECK(fs::exists(dir / "out" / "VERSION"));
}

TEST_CASE("cli train with zero steps writes the initialization") {
  const auto dir = scratch("cli_train0");
  const auto x = small_experiment(dir / "out");
  write_json(dir / "cfg.json", to_json(x));
  REQUIRE(cli({"train", "--config", (dir / "cfg.json").string(), "--steps", "0"}) == kExitOk);
  const auto ck = load_checkpoint(dir / "out" / "checkpoint");
  auto model_cfg = x.model;
  apply_condition(model_cfg, x.train);
  const auto init = init_checkpoint(model_cfg, x.train);
  for (std::size_t i = 0; i < init.params.size(); ++i) CHECK(ck.params[i].value == init.params[i].value);
}

TEST_CASE("cli pipeline is byte-reproducible") {
  const auto dir = scratch("cli_repro");
  for (const char* run : {"a", "b"}) {
    const auto out = dir / run;
    write_json(dir / (std::string(run) + ".json"), to_json(small_experiment(out)));
    const std::string cfg = (dir / (std::string(run) + ".json")).string();
    REQUIRE(cli({"gen-data", "--config", cfg, "--seed", "9", "--out", (out / "data").string()}) == kExitOk);
    REQUIRE(cli({"train", "--config", cfg, "--seed", "9", "--threads", "2", "--data", (out / "data").string(),
                 "--out", (out / "train").string()}) == kExitOk);
    const std::string ckpt = (out / "train" / "checkpoint").string();
    REQUIRE(cli({"sample", "--checkpoint", ckpt, "--count", "3", "--out", (out / "samples").string()}) == kExitOk);
    REQUIRE(cli({"probe-donor", "--checkpoint", ckpt, "--out", (out / "donor").string()}) == kExitOk);
    REQUIRE(cli({"probe-gate-clamp", "--checkpoint", ckpt, "--out", (out / "clamp").string()}) == kExitOk);
    REQUIRE(cli({"analyze-jaccard", "--config", cfg, "--out", (out / "jac").string()}) == kExitOk);
  }
  for (const char* f : {"data/train/corpus.bin", "train/checkpoint/params.bin", "train/checkpoint/optimizer.bin",
                        "train/loss.csv", "train/train_summary.json", "samples/samples/corpus.bin",
                        "donor/donor_probe.json", "clamp/gate_clamp.json", "jac/jaccard.json"}) {
    CAPTURE(f);
    REQUIRE(fs::exists(dir / "a" / f));
    CHECK(slurp(dir / "a" / f) == slurp(dir / "b" / f));
  }
  // Samples decode back into valid grids usable as donor references.
  const auto samples = load_corpus(dir / "a" / "samples" / "samples");
  CHECK(samples.grids.size() == 3u);
}

TEST_CASE("cli sweep-rho") {
  const auto dir = scratch("cli_sweep");
  write_json(dir / "cfg.json", to_json(small_experiment(dir / "out")));
  REQUIRE(cli({"sweep-rho", "--config", (dir / "cfg.json").string(), "--steps", "0", "--targets", "0.5", "0.9",
               "1.0"}) == kExitOk);
  const std::string csv = slurp(dir / "out" / "summary.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
  const auto p = read_json(dir / "out" / "rho_0.50" / "params.json");
  CHECK(std::abs(p.at("report").at("rho").get<double>() - 0.5) <= 0.01);
}
