// capground: command-line front end for the caption-grounded relation
// detection pipeline. Each subcommand runs one stage on files; `run` chains
// them all.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "capground/captioner.hpp"
#include "capground/eval.hpp"
#include "capground/gradcheck.hpp"
#include "capground/pipeline.hpp"
#include "capground/relclf.hpp"
#include "capground/sgparser.hpp"
#include "capground/synthgen.hpp"

namespace fs = std::filesystem;
using namespace capground;

namespace {

struct Globals {
  std::optional<std::uint64_t> seed;
  std::string profile = "desk";
  std::string out;
  std::string config;
};

PipelineConfig resolve_config(const Globals& g) {
  PipelineConfig c = g.config.empty() ? profile_defaults(g.profile)
                                      : load_config(g.config, g.profile);
  if (g.seed) apply_seed(c, *g.seed);
  c.validate();
  return c;
}

std::string require_out(const Globals& g, const char* what) {
  if (g.out.empty()) throw ConfigError(std::string("--out is required for ") + what);
  return g.out;
}

// world.json / mapping.json default to siblings of the corpus file.
std::string sibling(const std::string& corpus, const std::string& explicit_path,
                    const char* name) {
  if (!explicit_path.empty()) return explicit_path;
  return (fs::path(corpus).parent_path() / name).string();
}

std::vector<int> parse_ks(const std::string& s) {
  std::vector<int> ks;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      const int k = std::stoi(item);
      if (k <= 0) throw ConfigError("k must be positive");
      ks.push_back(k);
    } catch (const std::logic_error&) {
      throw ConfigError("cannot parse k list \"" + s + "\"");
    }
  }
  if (ks.empty()) throw ConfigError("empty k list");
  return ks;
}

void print_recall(const char* name, const RecallSummary& r) {
  std::printf("%-18s", name);
  for (std::size_t i = 0; i < r.ks.size(); ++i) {
    std::printf("  R@%d=%.4f", r.ks[i], r.recall[i]);
  }
  std::printf("  (scenes=%d, empty_gt=%d)\n", r.scenes_evaluated, r.scenes_without_gt);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Weakly supervised visual relation detection from captions"};
  app.require_subcommand(1);
  Globals g;
  std::uint64_t seed_value = 0;
  auto* seed_opt = app.add_option("--seed", seed_value, "Master seed")->group("Global");
  app.add_option("--profile", g.profile, "Hyperparameter profile: desk or paper")
      ->check(CLI::IsMember({"desk", "paper"}))
      ->group("Global");
  app.add_option("--out", g.out, "Output file or directory")->group("Global");
  app.add_option("--config", g.config, "JSON config (profile + overrides)")
      ->group("Global");

  // generate
  auto* gen = app.add_subcommand("generate", "Generate a synthetic corpus");
  gen->fallthrough();
  std::optional<int> gen_scenes;
  std::optional<double> gen_sigma, gen_coverage;
  std::string gen_world, gen_mapping;
  gen->add_option("--scenes", gen_scenes, "Number of scenes");
  gen->add_option("--sigma", gen_sigma, "Feature noise");
  gen->add_option("--coverage", gen_coverage, "Caption coverage rho");
  gen->add_option("--world", gen_world, "World spec output (default: beside corpus)");
  gen->add_option("--mapping", gen_mapping, "Mapping output (default: beside corpus)");

  // parse
  auto* parse = app.add_subcommand("parse", "Extract triplets from captions");
  parse->fallthrough();
  std::string parse_corpus, parse_world, parse_mapping;
  parse->add_option("--corpus", parse_corpus)->required();
  parse->add_option("--world", parse_world);
  parse->add_option("--mapping", parse_mapping);

  // train-captioner
  auto* tcap = app.add_subcommand("train-captioner", "Train the attention captioner");
  tcap->fallthrough();
  std::string tcap_corpus, tcap_split = "train";
  tcap->add_option("--corpus", tcap_corpus)->required();
  tcap->add_option("--split", tcap_split, "Corpus split to train on (or all)");

  // ground
  auto* ground = app.add_subcommand("ground", "Build the grounded relation dataset");
  ground->fallthrough();
  std::string ground_ckpt, ground_corpus, ground_world, ground_mapping,
      ground_split = "train";
  bool ground_oracle = false;
  ground->add_option("--ckpt", ground_ckpt)->required();
  ground->add_option("--corpus", ground_corpus)->required();
  ground->add_option("--world", ground_world);
  ground->add_option("--mapping", ground_mapping);
  ground->add_option("--split", ground_split);
  ground->add_flag("--oracle", ground_oracle,
                   "Use the oracle alignment instead of the captioner");

  // train-relclf
  auto* trel = app.add_subcommand("train-relclf", "Train the relation classifier");
  trel->fallthrough();
  std::string trel_grounded;
  trel->add_option("--grounded", trel_grounded)->required();

  // eval
  auto* ev = app.add_subcommand("eval", "PredCls Recall@K evaluation and report");
  ev->fallthrough();
  std::string ev_relclf, ev_corpus, ev_world, ev_mapping, ev_grounded,
      ev_k = "50,100", ev_split = "test";
  bool ev_baseline = false;
  ev->add_option("--relclf", ev_relclf)->required();
  ev->add_option("--corpus", ev_corpus)->required();
  ev->add_option("--k", ev_k, "Comma-separated K values");
  ev->add_flag("--baseline", ev_baseline, "Also score caption-only and random baselines");
  ev->add_option("--world", ev_world);
  ev->add_option("--mapping", ev_mapping);
  ev->add_option("--grounded", ev_grounded, "Grounded dataset for the confusion table");
  ev->add_option("--split", ev_split);

  // run
  auto* run = app.add_subcommand("run", "Run the whole pipeline");
  run->fallthrough();
  bool run_skip = false;
  run->add_flag("--skip-existing", run_skip, "Skip stages whose outputs exist");

  // check-grads
  auto* grads = app.add_subcommand("check-grads", "Finite-difference gradient checks");
  grads->fallthrough();
  double grads_tol = 1e-4;
  grads->add_option("--tol", grads_tol);

  CLI11_PARSE(app, argc, argv);
  if (seed_opt->count() > 0) g.seed = seed_value;

  try {
    if (*gen) {
      PipelineConfig c = resolve_config(g);
      if (gen_scenes) c.generator.num_scenes = *gen_scenes;
      if (gen_sigma) c.generator.noise_sigma = *gen_sigma;
      if (gen_coverage) c.generator.coverage = *gen_coverage;
      const std::string out = require_out(g, "generate");
      stage_generate(c, out, sibling(out, gen_world, "world.json"),
                     sibling(out, gen_mapping, "mapping.json"));
      std::printf("wrote %d scenes to %s\n", c.generator.num_scenes, out.c_str());
    } else if (*parse) {
      const std::string out = require_out(g, "parse");
      const Corpus corpus = load_corpus(parse_corpus);
      const WorldSpec world = load_world(sibling(parse_corpus, parse_world, "world.json"));
      const PredicateMapping mapping = load_mapping(
          sibling(parse_corpus, parse_mapping, "mapping.json"), corpus.header);
      const ParsedTriplets table = stage_parse(corpus, world, mapping, out);
      std::size_t triplets = 0, unmapped = 0;
      for (const auto& [key, r] : table) {
        triplets += r.triplets.size();
        for (const Triplet& t : r.triplets) {
          if (!mapping.canonicalize(t.predicate.surface)) ++unmapped;
        }
      }
      const RuleBasedParser parser = RuleBasedParser::for_world(world, mapping);
      const FrequencyHistogram h = predicate_frequency_histogram(corpus, parser, mapping);
      std::printf("captions=%zu triplets=%zu unmapped=%zu spearman=%s\n", table.size(),
                  triplets, unmapped,
                  h.spearman ? std::to_string(*h.spearman).c_str() : "undefined");
    } else if (*tcap) {
      const PipelineConfig c = resolve_config(g);
      const std::string out = require_out(g, "train-captioner");
      const Corpus train = load_corpus(tcap_corpus).subset(tcap_split);
      CaptionerTraining t = train_captioner(train, c.captioner, &std::cout);
      t.model->save(out);
      std::printf("saved captioner to %s\n", out.c_str());
    } else if (*ground) {
      const std::string out = require_out(g, "ground");
      const Corpus corpus = load_corpus(ground_corpus).subset(ground_split);
      const WorldSpec world = load_world(sibling(ground_corpus, ground_world, "world.json"));
      const PredicateMapping mapping = load_mapping(
          sibling(ground_corpus, ground_mapping, "mapping.json"), corpus.header);
      const RuleBasedParser parser = RuleBasedParser::for_world(world, mapping);
      std::optional<Captioner> model;
      std::unique_ptr<Grounder> grounder;
      if (ground_oracle) {
        grounder = std::make_unique<OracleGrounder>();
      } else {
        model.emplace(Captioner::load(ground_ckpt));
        grounder = std::make_unique<CaptionerGrounder>(*model);
      }
      const GroundedDataset ds = build_grounded_dataset(*grounder, corpus, parser, mapping);
      save_grounded(ds, out);
      const auto& d = ds.diagnostics;
      std::printf(
          "examples=%d triplets=%d unmapped=%d alignment_errors=%d self_pairs=%d\n",
          d.examples, d.triplets, d.unmapped, d.alignment_errors, d.self_pairs);
      bool has_oracle = !corpus.scenes.empty();
      for (const Scene& s : corpus.scenes) has_oracle = has_oracle && s.oracle;
      if (has_oracle) {
        const GroundingAccuracy acc = grounding_accuracy(*grounder, corpus);
        std::printf("entity_accuracy=%.4f pair_accuracy=%.4f chance=%.4f\n",
                    acc.entity_accuracy, acc.pair_accuracy, acc.chance);
      }
    } else if (*trel) {
      const PipelineConfig c = resolve_config(g);
      const std::string out = require_out(g, "train-relclf");
      const GroundedDataset ds = load_grounded(trel_grounded);
      RelClfTraining t = train_relclf(ds, c.classifier, &std::cout);
      t.model->save(out);
      std::printf("saved classifier to %s\n", out.c_str());
    } else if (*ev) {
      const std::string out = require_out(g, "eval");
      const PipelineConfig c = resolve_config(g);
      const std::vector<int> ks = parse_ks(ev_k);
      const Corpus full = load_corpus(ev_corpus);
      const Corpus test = full.subset(ev_split);
      const RelationClassifier model = RelationClassifier::load(ev_relclf);
      EvalReport report;
      report.relation_names = full.header.relation_names;
      report.model = evaluate_predcls(model, test, ks);
      print_recall("model", report.model);
      const std::string world_path = sibling(ev_corpus, ev_world, "world.json");
      const std::string mapping_path = sibling(ev_corpus, ev_mapping, "mapping.json");
      if (ev_baseline || fs::exists(world_path)) {
        const WorldSpec world = load_world(world_path);
        const PredicateMapping mapping = load_mapping(mapping_path, full.header);
        const RuleBasedParser parser = RuleBasedParser::for_world(world, mapping);
        if (ev_baseline) {
          report.caption_baseline = caption_only_baseline(test, parser, mapping, ks);
          report.caption_baseline_pooled =
              caption_only_baseline(test, parser, mapping, ks, BaselineMode::kPooled);
          report.random_baseline = random_ranking_baseline(test, ks);
          print_recall("caption_baseline", *report.caption_baseline);
          print_recall("caption_pooled", *report.caption_baseline_pooled);
          print_recall("random_baseline", *report.random_baseline);
        }
        report.frequencies = predicate_frequency_histogram(full, parser, mapping);
      }
      if (!ev_grounded.empty()) {
        const GroundedDataset ds = load_grounded(ev_grounded);
        std::vector<std::size_t> val;
        for (std::size_t i = 0; i < ds.examples.size(); ++i) {
          if (is_validation_scene(ds.examples[i].scene_id, c.classifier.seed,
                                  c.classifier.val_fraction)) {
            val.push_back(i);
          }
        }
        report.confusion = confusion_table(
            model, ds, val, static_cast<std::size_t>(c.eval.confusion_top_m));
        report.grounding = ds.diagnostics;
      }
      report.config = config_to_json(c);
      emit_report(report, out);
      std::printf("report written to %s\n", out.c_str());
    } else if (*run) {
      const PipelineConfig c = resolve_config(g);
      PipelineOptions opt;
      opt.out_dir = g.out.empty() ? "run" : g.out;
      opt.skip_existing = run_skip;
      opt.log = &std::cout;
      const PipelineResult r = run_pipeline(c, opt);
      std::printf("run directory: %s\n", r.run_dir.c_str());
      for (const ManifestEntry& e : r.artifacts) {
        std::printf("  %-10s %s  %s\n", e.name.c_str(), e.sha1.c_str(), e.path.c_str());
      }
    } else if (*grads) {
      bool ok = true;
      for (const GradCheckCase& k : run_gradient_suite(grads_tol, g.seed.value_or(7))) {
        std::printf("%-20s %s  max_rel_err=%.3e  coords=%zu  worst=%s[%zu]\n",
                    k.name.c_str(), k.report.passed ? "PASS" : "FAIL",
                    k.report.max_rel_error, k.report.coordinates_checked,
                    k.report.worst_param.c_str(), k.report.worst_index);
        ok = ok && k.report.passed;
      }
      return ok ? 0 : 1;
    }
  } catch (const StageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
