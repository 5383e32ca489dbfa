// ctrlcap: corpus generation, training, evaluation, generation and sorting.
//
// Exit codes: 0 success, 1 unexpected error, 2 usage or config error,
// 3 I/O error, 4 corpus or checkpoint error, 5 unknown id, 6 numeric error.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "ctrlcap/ctrlcap.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ctrlcap;

namespace {

constexpr int kExitUnexpected = 1;
constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitData = 4;
constexpr int kExitLookup = 5;
constexpr int kExitNumeric = 6;

// ---------------------------------------------------------------------------
// Files and hashing

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot read '" + p.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IoError("cannot write '" + p.string() + "'");
  out << text;
  if (!out) throw IoError("failed writing '" + p.string() + "'");
}

void ensure_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec || !fs::is_directory(p)) throw IoError("cannot create directory '" + p.string() + "'");
}

std::uint64_t fnv1a(const std::string& s, std::uint64_t h = 1469598103934665603ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string corpus_hash(const fs::path& dir) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const char* f : {"lexicon.json", "train.jsonl", "val.jsonl", "test.jsonl"})
    if (fs::exists(dir / f)) h = fnv1a(read_file(dir / f), h);
  return hex(h);
}

void write_manifest(const fs::path& dir, const std::string& command, const json& config, std::uint64_t seed,
                    const std::string& corpus) {
  json m = {{"command", command},
            {"config_hash", hex(fnv1a(config.dump()))},
            {"seed", seed},
            {"corpus_hash", corpus},
            {"checkpoint_format", kCheckpointFormat},
            {"checkpoint_version", kCheckpointVersion}};
  write_file(dir / "manifest.json", m.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Corpus access

struct CorpusDir {
  fs::path dir;
  std::shared_ptr<const Lexicon> lexicon;

  explicit CorpusDir(fs::path d) : dir(std::move(d)), lexicon(load_lexicon((dir / "lexicon.json").string())) {}

  Corpus split(const std::string& name) const {
    if (name != "train" && name != "val" && name != "test")
      throw UsageError("unknown split '" + name + "' (expected train, val or test)");
    return load_corpus((dir / (name + ".jsonl")).string(), lexicon);
  }

  /// One-image corpus holding `id`, searched in every split.
  Corpus with_image(const std::string& id) const {
    for (const char* s : {"train", "val", "test"}) {
      Corpus c = split(s);
      for (const auto& im : c.images)
        if (im.id == id) {
          Corpus one;
          one.lexicon = lexicon;
          one.images.push_back(im);
          return one;
        }
    }
    throw LookupError("unknown image id '" + id + "'");
  }
};

// ---------------------------------------------------------------------------
// Run configuration

struct RunConfig {
  std::string corpus_dir;
  std::string out_dir = "run";
  std::string init_ckpt;
  std::uint64_t seed = 1;
  ModelConfig model;
  TrainConfig train;
  SortNetConfig sorter;
  SortTrainConfig sorter_train;

  RunConfig() {
    model.embed_dim = 16;
    model.hidden = 32;
    model.att_dim = 16;
  }

  json to_json() const {
    return {{"corpus_dir", corpus_dir},
            {"out_dir", out_dir},
            {"init_ckpt", init_ckpt},
            {"seed", seed},
            {"model",
             {{"embed_dim", model.embed_dim},
              {"hidden", model.hidden},
              {"att_dim", model.att_dim},
              {"init_range", model.init_range}}},
            {"train",
             {{"lr_xe", train.lr_xe},
              {"lr_decay", train.lr_decay},
              {"lr_rl", train.lr_rl},
              {"batch_size", train.batch_size},
              {"word_weight", train.word_weight},
              {"gate_weight", train.gate_weight},
              {"lambda_cider", train.lambda_cider},
              {"lambda_nw", train.lambda_nw},
              {"clip_norm", train.clip_norm},
              {"xe_clip_norm", train.xe_clip_norm},
              {"xe_epochs", train.xe_epochs},
              {"patience", train.patience},
              {"rl_steps", train.rl_steps},
              {"max_len", train.max_len}}},
            {"sorter",
             {{"visual1", sorter.visual1},
              {"visual2", sorter.visual2},
              {"textual", sorter.textual},
              {"merge", sorter.merge},
              {"n_max", sorter.n_max},
              {"sinkhorn_iters", sorter.sinkhorn_iters},
              {"temperature", sorter.temperature},
              {"lr", sorter_train.lr},
              {"epochs", sorter_train.epochs},
              {"batch_size", sorter_train.batch_size},
              {"patience", sorter_train.patience},
              {"max_set_size", sorter_train.max_set_size}}}};
  }
};

template <class T>
void take(const json& obj, const char* key, T& dst, const std::string& section) {
  if (!obj.contains(key)) return;
  try {
    dst = obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config key '" + section + key + "' has the wrong type");
  }
}

void reject_unknown(const json& obj, const std::vector<std::string>& known, const std::string& section) {
  if (!obj.is_object()) throw ConfigError("config section '" + section + "' must be an object");
  for (const auto& [k, _] : obj.items())
    if (std::find(known.begin(), known.end(), k) == known.end())
      throw ConfigError("unknown config key '" + section + k + "'");
}

RunConfig load_run_config(const std::string& path) {
  RunConfig rc;
  if (path.empty()) return rc;
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
  reject_unknown(j, {"corpus_dir", "out_dir", "init_ckpt", "seed", "model", "train", "sorter"}, "");
  take(j, "corpus_dir", rc.corpus_dir, "");
  take(j, "out_dir", rc.out_dir, "");
  take(j, "init_ckpt", rc.init_ckpt, "");
  take(j, "seed", rc.seed, "");
  if (j.contains("model")) {
    const auto& m = j["model"];
    reject_unknown(m, {"embed_dim", "hidden", "att_dim", "init_range"}, "model.");
    take(m, "embed_dim", rc.model.embed_dim, "model.");
    take(m, "hidden", rc.model.hidden, "model.");
    take(m, "att_dim", rc.model.att_dim, "model.");
    take(m, "init_range", rc.model.init_range, "model.");
  }
  if (j.contains("train")) {
    const auto& t = j["train"];
    reject_unknown(t,
                   {"lr_xe", "lr_decay", "lr_rl", "batch_size", "word_weight", "gate_weight", "lambda_cider",
                    "lambda_nw", "clip_norm", "xe_clip_norm", "xe_epochs", "patience", "rl_steps", "max_len"},
                   "train.");
    take(t, "lr_xe", rc.train.lr_xe, "train.");
    take(t, "lr_decay", rc.train.lr_decay, "train.");
    take(t, "lr_rl", rc.train.lr_rl, "train.");
    take(t, "batch_size", rc.train.batch_size, "train.");
    take(t, "word_weight", rc.train.word_weight, "train.");
    take(t, "gate_weight", rc.train.gate_weight, "train.");
    take(t, "lambda_cider", rc.train.lambda_cider, "train.");
    take(t, "lambda_nw", rc.train.lambda_nw, "train.");
    take(t, "clip_norm", rc.train.clip_norm, "train.");
    take(t, "xe_clip_norm", rc.train.xe_clip_norm, "train.");
    take(t, "xe_epochs", rc.train.xe_epochs, "train.");
    take(t, "patience", rc.train.patience, "train.");
    take(t, "rl_steps", rc.train.rl_steps, "train.");
    take(t, "max_len", rc.train.max_len, "train.");
  }
  if (j.contains("sorter")) {
    const auto& s = j["sorter"];
    reject_unknown(s,
                   {"visual1", "visual2", "textual", "merge", "n_max", "sinkhorn_iters", "temperature", "lr", "epochs",
                    "batch_size", "patience", "max_set_size"},
                   "sorter.");
    take(s, "visual1", rc.sorter.visual1, "sorter.");
    take(s, "visual2", rc.sorter.visual2, "sorter.");
    take(s, "textual", rc.sorter.textual, "sorter.");
    take(s, "merge", rc.sorter.merge, "sorter.");
    take(s, "n_max", rc.sorter.n_max, "sorter.");
    take(s, "sinkhorn_iters", rc.sorter.sinkhorn_iters, "sorter.");
    take(s, "temperature", rc.sorter.temperature, "sorter.");
    take(s, "lr", rc.sorter_train.lr, "sorter.");
    take(s, "epochs", rc.sorter_train.epochs, "sorter.");
    take(s, "batch_size", rc.sorter_train.batch_size, "sorter.");
    take(s, "patience", rc.sorter_train.patience, "sorter.");
    take(s, "max_set_size", rc.sorter_train.max_set_size, "sorter.");
  }
  return rc;
}

// ---------------------------------------------------------------------------
// Subcommands

struct GenArgs {
  std::uint64_t seed = 1;
  long n_images = 100;
  std::string out;
  std::string order = "random";
  int max_chunks = 4;
};

int cmd_gen(const GenArgs& a) {
  if (a.n_images <= 0) throw ConfigError("--n-images must be positive");
  GrammarConfig g = GrammarConfig::standard();
  if (a.order == "left_to_right")
    g.order = MentionOrder::left_to_right;
  else if (a.order != "random")
    throw ConfigError("--order must be random or left_to_right");
  g.max_chunks = a.max_chunks;
  g.validate();
  const fs::path out(a.out);
  ensure_dir(out);
  const Corpus all = generate_corpus(a.seed, static_cast<std::size_t>(a.n_images), g);
  const auto sp = split_corpus(all);
  save_lexicon(*all.lexicon, (out / "lexicon.json").string());
  save_corpus(sp.train, (out / "train.jsonl").string());
  save_corpus(sp.val, (out / "val.jsonl").string());
  save_corpus(sp.test, (out / "test.jsonl").string());
  const json cfg = {{"seed", a.seed}, {"n_images", a.n_images}, {"order", a.order}, {"max_chunks", a.max_chunks}};
  write_file(out / "gen_config.json", cfg.dump(2) + "\n");
  write_manifest(out, "gen", cfg, a.seed, corpus_hash(out));
  std::cout << "wrote " << sp.train.images.size() << "/" << sp.val.images.size() << "/" << sp.test.images.size()
            << " train/val/test images to " << out.string() << "\n";
  return 0;
}

struct TrainArgs {
  std::string config;
  std::string phase = "xe";
  std::optional<std::string> corpus, out, init;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs, rl_steps;
};

int cmd_train(const TrainArgs& a) {
  RunConfig rc = load_run_config(a.config);
  if (a.corpus) rc.corpus_dir = *a.corpus;
  if (a.out) rc.out_dir = *a.out;
  if (a.init) rc.init_ckpt = *a.init;
  if (a.seed) rc.seed = *a.seed;
  if (a.epochs) (a.phase == "sort" ? rc.sorter_train.epochs : rc.train.xe_epochs) = *a.epochs;
  if (a.rl_steps) rc.train.rl_steps = *a.rl_steps;
  rc.train.seed = rc.seed;
  rc.model.seed = rc.seed;
  rc.sorter.seed = rc.seed;
  rc.sorter_train.seed = rc.seed;

  // Everything is validated before any work starts.
  if (a.phase != "xe" && a.phase != "rl" && a.phase != "sort") throw ConfigError("--phase must be xe, rl or sort");
  if (rc.corpus_dir.empty()) throw ConfigError("corpus_dir is required (config key or --corpus)");
  if (a.phase == "rl" && rc.init_ckpt.empty()) throw ConfigError("phase rl needs an XE checkpoint (init_ckpt or --init)");
  rc.train.validate();
  rc.sorter_train.validate();
  const CorpusDir cd(rc.corpus_dir);
  rc.model.vocab_size = cd.lexicon->size();
  rc.model.feat_dim = cd.lexicon->feat_dim;
  rc.model.validate();
  rc.sorter.feat_dim = cd.lexicon->feat_dim;
  rc.sorter.emb_dim = cd.lexicon->emb_dim;
  rc.sorter.validate();
  std::optional<Checkpoint> init;
  if (!rc.init_ckpt.empty()) init = load_checkpoint(rc.init_ckpt);
  if (a.phase == "rl" && !init->model) throw CheckpointError("checkpoint '" + rc.init_ckpt + "' holds no model");

  const Corpus train = cd.split("train");
  const Corpus val = cd.split("val");
  const fs::path out(rc.out_dir);
  ensure_dir(out);
  const json effective = rc.to_json();
  write_file(out / "effective_config.json", effective.dump(2) + "\n");
  write_manifest(out, "train --phase " + a.phase, effective, rc.seed, corpus_hash(rc.corpus_dir));

  std::ofstream log(out / "metrics.jsonl", std::ios::binary);
  if (!log) throw IoError("cannot write '" + (out / "metrics.jsonl").string() + "'");
  Checkpoint ck = init ? *init : Checkpoint{};
  if (a.phase == "xe") {
    auto res = train_xe(ModelParams::init(rc.model), train, val.images.empty() ? nullptr : &val, rc.train, &log);
    ck.model = std::move(res.params);
  } else if (a.phase == "rl") {
    auto res = train_rl(*ck.model, train, val.images.empty() ? nullptr : &val, rc.train, &log);
    ck.model = std::move(res.params);
  } else {
    auto res = train_sorter(SortNetParams::init(rc.sorter), train, val.images.empty() ? nullptr : &val,
                            rc.sorter_train, &log);
    ck.sorter = std::move(res.params);
  }
  ck.meta["phase"] = a.phase;
  ck.meta["config"] = effective;
  save_checkpoint(ck, (out / "checkpoint.json").string());
  std::cout << "wrote " << (out / "checkpoint.json").string() << "\n";
  return 0;
}

struct EvalArgs {
  std::string ckpt, corpus, split = "test", mode = "sequence", out;
  std::size_t beam = 1, max_len = kDefaultMaxLen;
  std::uint64_t seed = 1;
};

int cmd_eval(const EvalArgs& a) {
  if (a.mode != "sequence" && a.mode != "set") throw ConfigError("--mode must be sequence or set");
  if (a.beam == 0) throw ConfigError("--beam must be at least 1");
  const Checkpoint ck = load_checkpoint(a.ckpt);
  if (!ck.model) throw CheckpointError("checkpoint '" + a.ckpt + "' holds no captioning model");
  if (a.mode == "set" && !ck.sorter) throw CheckpointError("checkpoint '" + a.ckpt + "' holds no sorter");
  const CorpusDir cd(a.corpus);
  const Corpus corpus = cd.split(a.split);
  const EvalOptions opt{a.beam, a.max_len, a.seed};
  const EvalReport rep =
      a.mode == "sequence" ? evaluate_sequence(*ck.model, corpus, opt) : evaluate_set(*ck.model, *ck.sorter, corpus, opt);
  json j = rep.to_json();
  j["split"] = a.split;
  const std::string text = j.dump(2) + "\n";
  if (a.out.empty()) {
    std::cout << text;
  } else {
    write_file(a.out, text);
    std::cout << "cider_d " << rep.cider_d << " nw " << rep.nw << " iou " << rep.iou;
    if (rep.tau) std::cout << " tau " << *rep.tau << " accuracy " << *rep.accuracy;
    std::cout << "\n";
  }
  return 0;
}

struct GenerateArgs {
  std::string ckpt, corpus, image_id, control;
  std::size_t beam = 1, max_len = kDefaultMaxLen;
};

int cmd_generate(const GenerateArgs& a) {
  const auto sets = parse_control(a.control);
  const Checkpoint ck = load_checkpoint(a.ckpt);
  if (!ck.model) throw CheckpointError("checkpoint '" + a.ckpt + "' holds no captioning model");
  const CorpusDir cd(a.corpus);
  const Corpus one = cd.with_image(a.image_id);
  const Image& im = one.images.front();
  const ControlSignal control = im.control(sets);
  const auto out = decode(*ck.model, im.descriptor(), control, EvalOptions{a.beam, a.max_len, 1});
  std::cout << cd.lexicon->join(out.tokens) << "\n";
  for (const auto& line : grounding_trace(out, control, *cd.lexicon)) std::cout << line << "\n";
  return 0;
}

struct SortArgs {
  std::string ckpt, corpus, image_id, control, out;
  std::uint64_t seed = 1;
};

int cmd_sort(const SortArgs& a) {
  const Checkpoint ck = load_checkpoint(a.ckpt);
  if (!ck.sorter) throw CheckpointError("checkpoint '" + a.ckpt + "' holds no sorter");
  const CorpusDir cd(a.corpus);
  const Corpus one = cd.with_image(a.image_id);
  const Image& im = one.images.front();

  // Inputs: the given sets, or every reference control of the image in a
  // seeded shuffled order.
  std::vector<std::vector<std::vector<int>>> inputs;
  if (!a.control.empty()) {
    inputs.push_back(parse_control(a.control));
  } else {
    Rng rng(a.seed);
    for (const auto& g : reference_groups(one)) {
      auto s = g.sets;
      rng.shuffle(s);
      inputs.push_back(std::move(s));
    }
  }
  std::ostringstream rows;
  for (const auto& in : inputs) {
    const auto r = sort_control(*ck.sorter, im.control(in).sets);
    json row = {{"image_id", im.id},
                {"input", in},
                {"order", r.order},
                {"control", r.control.index_lists()},
                {"control_text", format_control(r.control.index_lists())}};
    rows << row.dump() << "\n";
  }
  if (a.out.empty())
    std::cout << rows.str();
  else
    write_file(a.out, rows.str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Controllable grounded captioning: corpus generation, training, evaluation, generation, sorting"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "Generate a synthetic corpus with train/val/test splits");
  g->add_option("--seed", gen.seed, "Random seed");
  g->add_option("--n-images", gen.n_images, "Number of images")->required();
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_option("--order", gen.order, "Mention order: random or left_to_right");
  g->add_option("--max-chunks", gen.max_chunks, "Largest number of chunks per caption");

  TrainArgs tr;
  std::string tr_corpus, tr_out, tr_init;
  std::uint64_t tr_seed = 0;
  std::size_t tr_epochs = 0, tr_rl = 0;
  auto* t = app.add_subcommand("train", "Train the captioner (xe, rl) or the sorter (sort)");
  t->add_option("--config", tr.config, "JSON run configuration");
  t->add_option("--phase", tr.phase, "xe, rl or sort");
  auto* o_corpus = t->add_option("--corpus", tr_corpus, "Corpus directory (overrides corpus_dir)");
  auto* o_out = t->add_option("--out", tr_out, "Run directory (overrides out_dir)");
  auto* o_init = t->add_option("--init", tr_init, "Starting checkpoint (overrides init_ckpt)");
  auto* o_seed = t->add_option("--seed", tr_seed, "Seed (overrides seed)");
  auto* o_epochs = t->add_option("--epochs", tr_epochs, "XE epochs, or sorter epochs with --phase sort");
  auto* o_rl = t->add_option("--rl-steps", tr_rl, "SCST steps");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Score a checkpoint on a split");
  e->add_option("--ckpt", ev.ckpt, "Checkpoint")->required();
  e->add_option("--corpus", ev.corpus, "Corpus directory")->required();
  e->add_option("--split", ev.split, "train, val or test");
  e->add_option("--mode", ev.mode, "sequence or set");
  e->add_option("--beam", ev.beam, "Beam width (1 = greedy)");
  e->add_option("--max-len", ev.max_len, "Longest decoded caption");
  e->add_option("--seed", ev.seed, "Seed for scrambling in set mode");
  e->add_option("--out", ev.out, "Report file (default: stdout)");

  GenerateArgs ge;
  auto* gn = app.add_subcommand("generate", "Caption one image under a control signal");
  gn->add_option("--ckpt", ge.ckpt, "Checkpoint")->required();
  gn->add_option("--corpus", ge.corpus, "Corpus directory")->required();
  gn->add_option("--image-id", ge.image_id, "Image id")->required();
  gn->add_option("--control", ge.control, "Region sets, e.g. \"[0,2];[1]\"")->required();
  gn->add_option("--beam", ge.beam, "Beam width (1 = greedy)");
  gn->add_option("--max-len", ge.max_len, "Longest decoded caption");

  SortArgs so;
  auto* s = app.add_subcommand("sort", "Order the region sets of an image with the sorter");
  s->add_option("--ckpt", so.ckpt, "Checkpoint")->required();
  s->add_option("--corpus", so.corpus, "Corpus directory")->required();
  s->add_option("--image-id", so.image_id, "Image id")->required();
  s->add_option("--control", so.control, "Sets to order (default: every reference control, shuffled)");
  s->add_option("--seed", so.seed, "Shuffle seed");
  s->add_option("--out", so.out, "JSONL output file (default: stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int rc = app.exit(err);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    if (*g) return cmd_gen(gen);
    if (*t) {
      if (*o_corpus) tr.corpus = tr_corpus;
      if (*o_out) tr.out = tr_out;
      if (*o_init) tr.init = tr_init;
      if (*o_seed) tr.seed = tr_seed;
      if (*o_epochs) tr.epochs = tr_epochs;
      if (*o_rl) tr.rl_steps = tr_rl;
      return cmd_train(tr);
    }
    if (*e) return cmd_eval(ev);
    if (*gn) return cmd_generate(ge);
    if (*s) return cmd_sort(so);
  } catch (const ConfigError& ex) {
    std::cerr << "config error: " << ex.what() << "\n";
    return kExitConfig;
  } catch (const UsageError& ex) {
    std::cerr << "usage error: " << ex.what() << "\n";
    return kExitConfig;
  } catch (const IoError& ex) {
    std::cerr << "io error: " << ex.what() << "\n";
    return kExitIo;
  } catch (const CorpusError& ex) {
    std::cerr << "corpus error: " << ex.what() << "\n";
    return kExitData;
  } catch (const CheckpointError& ex) {
    std::cerr << "checkpoint error: " << ex.what() << "\n";
    return kExitData;
  } catch (const LookupError& ex) {
    std::cerr << "lookup error: " << ex.what() << "\n";
    return kExitLookup;
  } catch (const NumericError& ex) {
    std::cerr << "numeric error: " << ex.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return kExitUnexpected;
  }
  return kExitUnexpected;
}
