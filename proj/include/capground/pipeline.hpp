#pragma once

// End-to-end orchestration: generate -> parse -> train-captioner -> ground ->
// train-relclf -> eval. Stages exchange files only; run_pipeline chains them
// in a run directory and records a manifest of content hashes.

#include <openssl/evp.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "capground/captioner.hpp"
#include "capground/data_model.hpp"
#include "capground/eval.hpp"
#include "capground/relclf.hpp"
#include "capground/sgparser.hpp"
#include "capground/synthgen.hpp"

namespace capground {

// ---------------------------------------------------------------------------
// Hashing

inline std::string to_hex(const unsigned char* p, std::size_t n) {
  static const char* kDigits = "0123456789abcdef";
  std::string out;
  for (std::size_t i = 0; i < n; ++i) {
    out += kDigits[p[i] >> 4];
    out += kDigits[p[i] & 15];
  }
  return out;
}

inline std::string sha1_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha1(), nullptr) != 1) {
    throw Error("SHA-1 digest failed");
  }
  return to_hex(md, len);
}

// Same id `git hash-object` prints for a file with these contents.
inline std::string git_blob_sha1(const std::string& bytes) {
  return sha1_hex("blob " + std::to_string(bytes.size()) + '\0' + bytes);
}

inline std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path);
  return std::string((std::istreambuf_iterator<char>(is)),
                     std::istreambuf_iterator<char>());
}

// ---------------------------------------------------------------------------
// Configuration

struct EvalConfig {
  std::vector<int> ks = {50, 100};
  bool baseline = true;
  int confusion_top_m = 5;
};

struct PipelineConfig {
  std::string profile = "desk";
  std::uint64_t seed = 42;
  int feature_dim = 64;
  std::uint64_t world_seed = 1234;
  GeneratorConfig generator;
  CaptionerConfig captioner;
  RelClfConfig classifier;
  EvalConfig eval;
  std::string mapping_path;  // empty: the mapping written by generate

  void validate() const {
    if (feature_dim <= 0) throw ConfigError("feature_dim must be positive");
    generator.validate();
    captioner.validate();
    classifier.validate();
    if (eval.ks.empty()) throw ConfigError("eval.ks must not be empty");
    for (int k : eval.ks) {
      if (k <= 0) throw ConfigError("eval.ks must be positive");
    }
    if (eval.confusion_top_m <= 0) throw ConfigError("confusion_top_m must be positive");
  }
};

inline void apply_seed(PipelineConfig& c, std::uint64_t seed) {
  c.seed = seed;
  c.generator.seed = seed;
  c.captioner.seed = seed;
  c.classifier.seed = seed;
}

inline PipelineConfig profile_defaults(const std::string& name) {
  PipelineConfig c;
  c.profile = name;
  c.generator.num_scenes = 2000;
  if (name == "desk") {
    c.captioner.attention_dim = 64;
    c.captioner.hidden = 128;
    c.captioner.embed_dim = 64;
    c.captioner.lr = 1e-3;
    c.captioner.epochs = 40;
    c.captioner.batch_size = 16;
  } else if (name == "paper") {
    c.captioner.attention_dim = 512;
    c.captioner.hidden = 1000;
    c.captioner.embed_dim = 300;
    c.captioner.lr = 1e-4;
    c.captioner.epochs = 75;
    c.captioner.batch_size = 100;
  } else {
    throw ConfigError("unknown profile \"" + name + "\" (expected desk or paper)");
  }
  c.classifier.hidden = {64, 64};
  c.classifier.dropout = 0.5;
  c.classifier.lr = 1e-3;
  c.classifier.epochs = 50;
  c.classifier.batch_size = 64;
  apply_seed(c, c.seed);
  return c;
}

inline json config_to_json(const PipelineConfig& c) {
  const auto& g = c.generator;
  const auto& cap = c.captioner;
  const auto& clf = c.classifier;
  return {{"profile", c.profile},
          {"seed", c.seed},
          {"mapping", c.mapping_path},
          {"world", {{"feature_dim", c.feature_dim}, {"world_seed", c.world_seed}}},
          {"generator",
           {{"num_scenes", g.num_scenes},
            {"min_objects", g.min_objects},
            {"max_objects", g.max_objects},
            {"box_min", g.box_min},
            {"box_max", g.box_max},
            {"noise_sigma", g.noise_sigma},
            {"coverage", g.coverage},
            {"captions_per_scene", g.captions_per_scene},
            {"color_attribute_prob", g.color_attribute_prob},
            {"small_area", g.small_area},
            {"large_area", g.large_area},
            {"seed", g.seed}}},
          {"captioner",
           {{"embed_dim", cap.embed_dim},
            {"lstm_hidden", cap.hidden},
            {"attention_dim", cap.attention_dim},
            {"lr", cap.lr},
            {"epochs", cap.epochs},
            {"batch_size", cap.batch_size},
            {"min_count", cap.min_count},
            {"clip_norm", cap.clip_norm},
            {"embed_sigma", cap.embed_sigma},
            {"seed", cap.seed}}},
          {"classifier",
           {{"mlp_hidden", clf.hidden},
            {"dropout", clf.dropout},
            {"lr", clf.lr},
            {"epochs", clf.epochs},
            {"batch_size", clf.batch_size},
            {"val_fraction", clf.val_fraction},
            {"clip_norm", clf.clip_norm},
            {"seed", clf.seed}}},
          {"eval",
           {{"ks", c.eval.ks},
            {"baseline", c.eval.baseline},
            {"confusion_top_m", c.eval.confusion_top_m}}}};
}

namespace detail {

template <typename T>
void override_from(const json& section, const char* key, T& target) {
  if (!section.contains(key)) return;
  try {
    target = section.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config key ") + key + ": " + e.what());
  }
}

inline void reject_unknown(const json& section, const std::string& where,
                           std::initializer_list<const char*> known) {
  if (!section.is_object()) throw ConfigError(where + " must be an object");
  for (auto it = section.begin(); it != section.end(); ++it) {
    bool ok = false;
    for (const char* k : known) ok = ok || it.key() == k;
    if (!ok) throw ConfigError("unknown config key " + where + "." + it.key());
  }
}

}  // namespace detail

// The profile is resolved first; the top-level seed then reaches every
// section, and explicit section values override last.
inline PipelineConfig config_from_json(const json& j,
                                       const std::string& default_profile = "desk") {
  using detail::override_from;
  using detail::reject_unknown;
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  reject_unknown(j, "config",
                 {"profile", "seed", "mapping", "world", "generator", "captioner",
                  "classifier", "eval"});
  PipelineConfig c = profile_defaults(j.value("profile", default_profile));
  if (j.contains("seed")) apply_seed(c, j.at("seed").get<std::uint64_t>());
  override_from(j, "mapping", c.mapping_path);
  if (j.contains("world")) {
    const json& w = j.at("world");
    reject_unknown(w, "world", {"feature_dim", "world_seed"});
    override_from(w, "feature_dim", c.feature_dim);
    override_from(w, "world_seed", c.world_seed);
  }
  if (j.contains("generator")) {
    const json& g = j.at("generator");
    reject_unknown(g, "generator",
                   {"num_scenes", "min_objects", "max_objects", "box_min", "box_max",
                    "noise_sigma", "coverage", "captions_per_scene",
                    "color_attribute_prob", "small_area", "large_area", "seed"});
    auto& t = c.generator;
    override_from(g, "num_scenes", t.num_scenes);
    override_from(g, "min_objects", t.min_objects);
    override_from(g, "max_objects", t.max_objects);
    override_from(g, "box_min", t.box_min);
    override_from(g, "box_max", t.box_max);
    override_from(g, "noise_sigma", t.noise_sigma);
    override_from(g, "coverage", t.coverage);
    override_from(g, "captions_per_scene", t.captions_per_scene);
    override_from(g, "color_attribute_prob", t.color_attribute_prob);
    override_from(g, "small_area", t.small_area);
    override_from(g, "large_area", t.large_area);
    override_from(g, "seed", t.seed);
  }
  if (j.contains("captioner")) {
    const json& s = j.at("captioner");
    reject_unknown(s, "captioner",
                   {"embed_dim", "lstm_hidden", "attention_dim", "lr", "epochs",
                    "batch_size", "min_count", "clip_norm", "embed_sigma", "seed"});
    auto& t = c.captioner;
    override_from(s, "embed_dim", t.embed_dim);
    override_from(s, "lstm_hidden", t.hidden);
    override_from(s, "attention_dim", t.attention_dim);
    override_from(s, "lr", t.lr);
    override_from(s, "epochs", t.epochs);
    override_from(s, "batch_size", t.batch_size);
    override_from(s, "min_count", t.min_count);
    override_from(s, "clip_norm", t.clip_norm);
    override_from(s, "embed_sigma", t.embed_sigma);
    override_from(s, "seed", t.seed);
  }
  if (j.contains("classifier")) {
    const json& s = j.at("classifier");
    reject_unknown(s, "classifier",
                   {"mlp_hidden", "dropout", "lr", "epochs", "batch_size",
                    "val_fraction", "clip_norm", "seed"});
    auto& t = c.classifier;
    override_from(s, "mlp_hidden", t.hidden);
    override_from(s, "dropout", t.dropout);
    override_from(s, "lr", t.lr);
    override_from(s, "epochs", t.epochs);
    override_from(s, "batch_size", t.batch_size);
    override_from(s, "val_fraction", t.val_fraction);
    override_from(s, "clip_norm", t.clip_norm);
    override_from(s, "seed", t.seed);
  }
  if (j.contains("eval")) {
    const json& s = j.at("eval");
    reject_unknown(s, "eval", {"ks", "baseline", "confusion_top_m"});
    override_from(s, "ks", c.eval.ks);
    override_from(s, "baseline", c.eval.baseline);
    override_from(s, "confusion_top_m", c.eval.confusion_top_m);
  }
  c.validate();
  return c;
}

inline PipelineConfig load_config(const std::string& path,
                                  const std::string& default_profile = "desk") {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return config_from_json(j, default_profile);
}

inline std::string config_hash(const PipelineConfig& c) {
  return sha1_hex(config_to_json(c).dump());
}

inline WorldSpec make_world(const PipelineConfig& c) {
  return WorldSpec::make_default(c.feature_dim, c.world_seed);
}

// ---------------------------------------------------------------------------
// Stage helpers shared by the CLI subcommands and run_pipeline.

inline void write_json_file(const std::string& path, const json& j) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path);
  os << j.dump(2) << '\n';
  if (!os) throw IoError("write failed: " + path);
}

inline WorldSpec load_world(const std::string& path) {
  try {
    return world_from_json(json::parse(read_file(path)));
  } catch (const json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

inline PredicateMapping load_mapping(const std::string& path,
                                     const CorpusHeader& header) {
  if (!std::filesystem::exists(path)) {
    throw IoError("predicate mapping not found: " + path);
  }
  return PredicateMapping::load(path, header.relation_names);
}

inline void stage_generate(const PipelineConfig& cfg, const std::string& corpus_path,
                           const std::string& world_path,
                           const std::string& mapping_path) {
  const WorldSpec world = make_world(cfg);
  const Corpus corpus = generate_corpus(world, cfg.generator);
  save_corpus(corpus, corpus_path);
  write_json_file(world_path, world_to_json(world));
  write_json_file(mapping_path, default_mapping(world).to_json());
}

inline ParsedTriplets stage_parse(const Corpus& corpus, const WorldSpec& world,
                                  const PredicateMapping& mapping,
                                  const std::string& out_path) {
  const RuleBasedParser parser = RuleBasedParser::for_world(world, mapping);
  std::ofstream os(out_path, std::ios::binary);
  if (!os) throw IoError("cannot write " + out_path);
  write_triplets(os, corpus, parser, mapping);
  if (!os) throw IoError("write failed: " + out_path);
  os.close();
  return load_triplets(out_path);
}

inline void write_curve(const std::string& path, const std::string& name,
                        const std::vector<std::vector<double>>& columns,
                        const std::vector<std::string>& headers) {
  json j = {{"model", name}};
  for (std::size_t i = 0; i < columns.size(); ++i) j[headers[i]] = columns[i];
  write_json_file(path, j);
}

// ---------------------------------------------------------------------------
// Pipeline

struct PipelineOptions {
  std::string out_dir = "run";
  bool skip_existing = false;
  std::ostream* log = nullptr;
};

struct ManifestEntry {
  std::string name;
  std::string path;  // relative to the run directory
  std::string sha1;
  std::uintmax_t bytes = 0;
};

struct PipelineResult {
  std::string run_dir;
  std::vector<ManifestEntry> artifacts;
  json report;
};

inline const std::vector<std::pair<std::string, std::string>>& pipeline_artifacts() {
  static const std::vector<std::pair<std::string, std::string>> kArtifacts = {
      {"corpus", "corpus.jsonl"},         {"triplets", "triplets.jsonl"},
      {"captioner", "captioner.ckpt"},    {"grounded", "grounded.jsonl"},
      {"relclf", "relclf.ckpt"},          {"report", "report/report.json"}};
  return kArtifacts;
}

inline ManifestEntry hash_artifact(const std::filesystem::path& dir,
                                   const std::string& name, const std::string& rel) {
  const std::string bytes = read_file((dir / rel).string());
  return {name, rel, git_blob_sha1(bytes), bytes.size()};
}

inline PipelineResult run_pipeline(const PipelineConfig& cfg,
                                   const PipelineOptions& opt) {
  namespace fs = std::filesystem;
  cfg.validate();
  const fs::path dir(opt.out_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create run directory " + opt.out_dir);
  std::ostream* log = opt.log;
  json runtime = json::object();

  auto path = [&](const char* rel) { return (dir / rel).string(); };
  auto stage = [&](const std::string& name, std::initializer_list<std::string> outputs,
                   auto&& body) {
    bool present = opt.skip_existing;
    for (const std::string& o : outputs) present = present && fs::exists(o);
    if (present) {
      if (log) *log << "[" << name << "] outputs exist, skipping\n";
      runtime[name] = "skipped";
      return;
    }
    if (log) *log << "[" << name << "] running\n";
    const auto t0 = std::chrono::steady_clock::now();
    try {
      body();
    } catch (const StageError&) {
      throw;
    } catch (const std::exception& e) {
      throw StageError(name, e.what());
    }
    runtime[name] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                        .count();
  };

  const std::string corpus_path = path("corpus.jsonl");
  const std::string world_path = path("world.json");
  const std::string default_mapping_path = path("mapping.json");
  const std::string mapping_path =
      cfg.mapping_path.empty() ? default_mapping_path : cfg.mapping_path;
  const std::string triplets_path = path("triplets.jsonl");
  const std::string captioner_path = path("captioner.ckpt");
  const std::string grounded_path = path("grounded.jsonl");
  const std::string relclf_path = path("relclf.ckpt");
  const std::string report_dir = path("report");

  write_json_file(path("config.json"), config_to_json(cfg));

  stage("generate", {corpus_path, world_path, default_mapping_path},
        [&] { stage_generate(cfg, corpus_path, world_path, default_mapping_path); });

  std::optional<Corpus> corpus_cache;
  auto corpus = [&]() -> const Corpus& {
    if (!corpus_cache) corpus_cache = load_corpus(corpus_path);
    return *corpus_cache;
  };

  stage("parse", {triplets_path}, [&] {
    stage_parse(corpus(), load_world(world_path),
                load_mapping(mapping_path, corpus().header), triplets_path);
  });

  stage("train-captioner", {captioner_path}, [&] {
    const Corpus train = corpus().subset("train");
    CaptionerTraining t = train_captioner(train, cfg.captioner, log);
    t.model->save(captioner_path);
    write_curve(path("captioner_curve.json"), "captioner", {t.loss_curve}, {"loss"});
  });

  stage("ground", {grounded_path}, [&] {
    const Captioner model = Captioner::load(captioner_path);
    const PredicateMapping mapping = load_mapping(mapping_path, corpus().header);
    const ParsedTriplets table = load_triplets(triplets_path);
    const Corpus train = corpus().subset("train");
    CaptionerGrounder grounder(model);
    save_grounded(build_grounded_dataset(grounder, train, table_source(table), mapping),
                  grounded_path);
    const Corpus test = corpus().subset("test");
    bool has_oracle = !test.scenes.empty();
    for (const Scene& s : test.scenes) has_oracle = has_oracle && s.oracle.has_value();
    if (has_oracle) {
      const GroundingAccuracy acc = grounding_accuracy(grounder, test);
      write_json_file(path("grounding.json"),
                      {{"split", "test"},
                       {"entity_accuracy", acc.entity_accuracy},
                       {"pair_accuracy", acc.pair_accuracy},
                       {"chance", acc.chance},
                       {"entity_mentions", acc.entity_mentions},
                       {"pair_mentions", acc.pair_mentions}});
    }
  });

  stage("train-relclf", {relclf_path}, [&] {
    const GroundedDataset ds = load_grounded(grounded_path);
    RelClfTraining t = train_relclf(ds, cfg.classifier, log);
    t.model->save(relclf_path);
    write_curve(path("relclf_curve.json"), "relclf",
                {t.loss_curve, t.train_accuracy, t.val_accuracy},
                {"loss", "train_accuracy", "val_accuracy"});
  });

  stage("eval", {path("report/report.json")}, [&] {
    const RelationClassifier model = RelationClassifier::load(relclf_path);
    const Corpus test = corpus().subset("test");
    const WorldSpec world = load_world(world_path);
    const PredicateMapping mapping = load_mapping(mapping_path, corpus().header);
    const RuleBasedParser parser = RuleBasedParser::for_world(world, mapping);
    const GroundedDataset ds = load_grounded(grounded_path);

    EvalReport report;
    report.relation_names = corpus().header.relation_names;
    report.model = evaluate_predcls(model, test, cfg.eval.ks);
    if (cfg.eval.baseline) {
      report.caption_baseline = caption_only_baseline(test, parser, mapping, cfg.eval.ks);
      report.caption_baseline_pooled = caption_only_baseline(
          test, parser, mapping, cfg.eval.ks, BaselineMode::kPooled);
      report.random_baseline = random_ranking_baseline(test, cfg.eval.ks);
    }
    std::vector<std::size_t> val;
    for (std::size_t i = 0; i < ds.examples.size(); ++i) {
      if (is_validation_scene(ds.examples[i].scene_id, cfg.classifier.seed,
                              cfg.classifier.val_fraction)) {
        val.push_back(i);
      }
    }
    report.confusion = confusion_table(model, ds, val,
                                       static_cast<std::size_t>(cfg.eval.confusion_top_m));
    report.frequencies = predicate_frequency_histogram(corpus(), parser, mapping);
    report.grounding = ds.diagnostics;
    report.config = config_to_json(cfg);
    emit_report(report, report_dir);
    // Extra sections produced by earlier stages.
    json full = json::parse(read_file(path("report/report.json")));
    for (const char* extra : {"grounding.json", "captioner_curve.json",
                              "relclf_curve.json"}) {
      if (fs::exists(dir / extra)) {
        std::string key = extra;
        key = key.substr(0, key.size() - 5);
        if (key == "grounding") key = "grounding_accuracy";
        full[key] = json::parse(read_file(path(extra)));
      }
    }
    write_json_file(path("report/report.json"), full);
  });

  PipelineResult result;
  result.run_dir = dir.string();
  json artifacts = json::array();
  for (const auto& [name, rel] : pipeline_artifacts()) {
    ManifestEntry e = hash_artifact(dir, name, rel);
    artifacts.push_back(
        {{"name", e.name}, {"path", e.path}, {"sha1", e.sha1}, {"bytes", e.bytes}});
    result.artifacts.push_back(std::move(e));
  }
  write_json_file(path("manifest.json"), {{"config_hash", config_hash(cfg)},
                                          {"profile", cfg.profile},
                                          {"seed", cfg.seed},
                                          {"artifacts", artifacts}});
  write_json_file(path("runtime.json"), runtime);
  result.report = json::parse(read_file(path("report/report.json")));
  return result;
}

}  // namespace capground
