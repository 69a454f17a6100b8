#include "engram_ar/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace engram_ar {

static_assert(std::endian::native == std::endian::little, "serialization assumes a little-endian host");

namespace {

constexpr const char* kCorpusFormat = "engram-ar-corpus/1";
constexpr const char* kCheckpointFormat = "engram-ar-checkpoint/1";

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

std::ifstream open_in(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  return in;
}

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(std::istream& in, const fs::path& path) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) throw IoError("truncated file " + path.string());
  return v;
}

void put_floats(std::ostream& out, const std::vector<float>& v) {
  out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
}

void take_floats(std::istream& in, std::vector<float>& v, const fs::path& path) {
  if (!in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float))))
    throw IoError("truncated file " + path.string());
}

std::string group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::weight: return "weight";
    case ParamGroup::norm: return "norm";
    case ParamGroup::layerscale: return "layerscale";
    case ParamGroup::table: return "table";
  }
  return "weight";
}

ParamGroup group_from_name(const std::string& s) {
  if (s == "weight") return ParamGroup::weight;
  if (s == "norm") return ParamGroup::norm;
  if (s == "layerscale") return ParamGroup::layerscale;
  if (s == "table") return ParamGroup::table;
  throw IoError("unknown parameter group " + s);
}

}  // namespace

void write_json(const fs::path& path, const Json& j) {
  auto out = open_out(path);
  out << j.dump(2) << '\n';
}

Json read_json(const fs::path& path) {
  auto in = open_in(path);
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  auto out = open_out(path);
  out << text;
}

void stamp_artifact_dir(const fs::path& dir, const ExperimentConfig& cfg) {
  write_json(dir / "config.json", to_json(cfg));
  write_text(dir / "VERSION", std::string(version_string()) + "\n");
}

// --- corpus ----------------------------------------------------------------

void save_corpus(const fs::path& dir, const Corpus& corpus) {
  Json origins = Json::array();
  bool any_origin = false;
  {
    auto out = open_out(dir / "corpus.bin");
    for (const auto& g : corpus.grids) {
      g.validate();
      if (g.vocab_size + g.prefix_vocab + 1 > 65536) throw IoError("token ids do not fit 16 bits");
      put<std::uint32_t>(out, static_cast<std::uint32_t>(g.height));
      put<std::uint32_t>(out, static_cast<std::uint32_t>(g.width));
      put<std::uint32_t>(out, static_cast<std::uint32_t>(g.vocab_size));
      put<std::uint32_t>(out, static_cast<std::uint32_t>(g.prefix.size()));
      put<std::uint32_t>(out, static_cast<std::uint32_t>(g.class_id));
      for (TokenId t : g.prefix) put<std::uint16_t>(out, static_cast<std::uint16_t>(t));
      for (TokenId t : g.cells) put<std::uint16_t>(out, static_cast<std::uint16_t>(t));
      if (g.origin) {
        any_origin = true;
        Json motifs = Json::array();
        for (const auto& m : g.origin->motifs) motifs.push_back({m.motif_id, m.row, m.col});
        origins.push_back({{"fingerprint", g.origin->spec_fingerprint},
                           {"sample_index", g.origin->sample_index},
                           {"motifs", motifs}});
      } else {
        origins.push_back(nullptr);
      }
    }
  }
  Json manifest = {{"format", kCorpusFormat},
                   {"version", version_string()},
                   {"count", corpus.grids.size()},
                   {"prefix_vocab", corpus.grids.empty() ? 0 : corpus.grids.front().prefix_vocab},
                   {"spec", corpus.spec ? to_json(*corpus.spec) : Json(nullptr)},
                   {"origins", any_origin ? origins : Json(nullptr)}};
  write_json(dir / "manifest.json", manifest);
}

Corpus load_corpus(const fs::path& dir) {
  const Json manifest = read_json(dir / "manifest.json");
  if (manifest.value("format", "") != kCorpusFormat) throw IoError(dir.string() + " is not a corpus directory");
  Corpus corpus;
  if (!manifest.at("spec").is_null()) corpus.spec = corpus_spec_from_json(manifest.at("spec"));
  const auto count = manifest.at("count").get<std::size_t>();
  const int prefix_vocab = manifest.at("prefix_vocab").get<int>();
  const Json& origins = manifest.at("origins");

  const fs::path bin = dir / "corpus.bin";
  auto in = open_in(bin);
  for (std::size_t i = 0; i < count; ++i) {
    TokenGrid g;
    g.height = static_cast<int>(take<std::uint32_t>(in, bin));
    g.width = static_cast<int>(take<std::uint32_t>(in, bin));
    g.vocab_size = static_cast<int>(take<std::uint32_t>(in, bin));
    const auto plen = take<std::uint32_t>(in, bin);
    g.class_id = static_cast<int>(take<std::uint32_t>(in, bin));
    g.prefix_vocab = prefix_vocab;
    for (std::uint32_t k = 0; k < plen; ++k) g.prefix.push_back(take<std::uint16_t>(in, bin));
    const auto cells = static_cast<std::size_t>(g.height) * static_cast<std::size_t>(g.width);
    for (std::size_t k = 0; k < cells; ++k) g.cells.push_back(take<std::uint16_t>(in, bin));
    if (!origins.is_null() && !origins.at(i).is_null()) {
      const Json& o = origins.at(i);
      GridOrigin origin;
      origin.spec_fingerprint = o.at("fingerprint").get<std::uint64_t>();
      origin.sample_index = o.at("sample_index").get<std::int64_t>();
      for (const auto& m : o.at("motifs")) origin.motifs.push_back({m[0].get<int>(), m[1].get<int>(), m[2].get<int>()});
      g.origin = std::move(origin);
    }
    g.validate();
    corpus.grids.push_back(std::move(g));
  }
  if (in.peek() != std::char_traits<char>::eof()) throw IoError(bin.string() + " has trailing bytes");
  return corpus;
}

// --- checkpoints -----------------------------------------------------------

void save_checkpoint(const fs::path& dir, const Checkpoint& ck) {
  const Model<float> model(ck.model);
  Json tensors = Json::array();
  std::size_t offset = 0;
  {
    auto out = open_out(dir / "params.bin");
    for (const auto& p : ck.params) {
      Json t = {{"name", p.name},
                {"shape", p.value.shape()},
                {"group", group_name(p.group)},
                {"trainable", p.trainable},
                {"offset", offset},
                {"count", p.value.size()}};
      if (p.group == ParamGroup::table) {
        // layer{i}.engram.table.b{b}.h{k}: record the addressing hash.
        for (std::size_t e = 0; e < ck.model.engram.size(); ++e) {
          const auto& cfg = model.config().engram[e];
          const auto& hashes = model.hashes(e);
          for (int b = 0; b < hashes.num_banks(); ++b)
            for (int k = 0; k < hashes.heads_per_bank(); ++k)
              if (cfg.table_name(hashes.banks[b].bank_id, k) == p.name) {
                const HashHead& h = hashes.heads[b][k];
                t["hash"] = {{"table_size", h.table_size},
                             {"d_head", cfg.d_head},
                             {"mode", std::string(to_string(cfg.table_mode))},
                             {"seed", h.seed},
                             {"multiplier", h.multiplier}};
              }
        }
      }
      tensors.push_back(t);
      put_floats(out, p.value.values());
      offset += p.value.size();
    }
  }
  {
    auto out = open_out(dir / "optimizer.bin");
    put<std::int64_t>(out, ck.optimizer.step);
    for (std::size_t i = 0; i < ck.params.size(); ++i) {
      if (!ck.params[i].trainable) continue;
      put_floats(out, ck.optimizer.m[i].values());
      put_floats(out, ck.optimizer.v[i].values());
    }
  }
  Json manifest = {{"format", kCheckpointFormat},
                   {"version", version_string()},
                   {"model", to_json(ck.model)},
                   {"train", to_json(ck.train)},
                   {"init_seed", ck.init_seed},
                   {"step", ck.optimizer.step},
                   {"tensors", tensors}};
  write_json(dir / "manifest.json", manifest);
}

Checkpoint load_checkpoint(const fs::path& dir) {
  const Json manifest = read_json(dir / "manifest.json");
  if (manifest.value("format", "") != kCheckpointFormat) throw IoError(dir.string() + " is not a checkpoint directory");
  Checkpoint ck;
  ck.model = model_config_from_json(manifest.at("model"));
  ck.train = train_config_from_json(manifest.at("train"));
  ck.init_seed = manifest.at("init_seed").get<std::uint64_t>();

  const Model<float> model(ck.model);
  ck.model = model.config();
  const ParamSet<float> expected = model.init_params(0);
  const Json& tensors = manifest.at("tensors");
  if (tensors.size() != expected.size())
    throw IoError("checkpoint holds " + std::to_string(tensors.size()) + " tensors, model expects " +
                  std::to_string(expected.size()));

  const fs::path pbin = dir / "params.bin";
  auto in = open_in(pbin);
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const Json& t = tensors.at(i);
    const auto name = t.at("name").get<std::string>();
    const auto shape = t.at("shape").get<Shape>();
    if (name != expected[i].name || shape != expected[i].value.shape())
      throw IoError("tensor " + std::to_string(i) + " is " + name + " " + shape_string(shape) + ", model expects " +
                    expected[i].name + " " + shape_string(expected[i].value.shape()));
    Tensor<float> value(shape);
    take_floats(in, value.values(), pbin);
    ck.params.add(name, std::move(value), group_from_name(t.at("group").get<std::string>()),
                  t.at("trainable").get<bool>());
  }

  const fs::path obin = dir / "optimizer.bin";
  auto oin = open_in(obin);
  ck.optimizer = AdamState<float>::zeros(ck.params);
  ck.optimizer.step = take<std::int64_t>(oin, obin);
  for (std::size_t i = 0; i < ck.params.size(); ++i) {
    if (!ck.params[i].trainable) continue;
    take_floats(oin, ck.optimizer.m[i].values(), obin);
    take_floats(oin, ck.optimizer.v[i].values(), obin);
  }
  return ck;
}

// --- loss curves -----------------------------------------------------------

Json to_json(const LossRow& r) {
  return {{"step", r.step}, {"lr", r.lr}, {"train_ce", r.train_ce},
          {"val_ce", r.val_ce ? Json(*r.val_ce) : Json(nullptr)}};
}

std::string loss_curve_csv(const std::vector<LossRow>& curve) {
  std::ostringstream out;
  out.precision(9);
  out << "step,lr,train_ce,val_ce\n";
  for (const auto& r : curve) {
    out << r.step << ',' << r.lr << ',' << r.train_ce << ',';
    if (r.val_ce) out << *r.val_ce;
    out << '\n';
  }
  return out.str();
}

}  // namespace engram_ar
