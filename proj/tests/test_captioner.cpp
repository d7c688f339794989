#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "capground/captioner.hpp"
#include "capground/sgparser.hpp"
#include "capground/synthgen.hpp"

using namespace capground;

namespace {

CaptionerConfig small_config(std::uint64_t seed = 42) {
  CaptionerConfig cfg;
  cfg.embed_dim = 8;
  cfg.hidden = 12;
  cfg.attention_dim = 6;
  cfg.seed = seed;
  return cfg;
}

Corpus make_corpus(int scenes, std::uint64_t seed, double coverage = 0.4, int dim = 16) {
  GeneratorConfig cfg;
  cfg.num_scenes = scenes;
  cfg.seed = seed;
  cfg.coverage = coverage;
  return generate_corpus(WorldSpec::make_default(dim), cfg);
}

Vocabulary vocab_of(const Corpus& c) { return Vocabulary::build(all_captions(c), 1); }

AttentionTrace rows(std::vector<std::vector<double>> r) { return AttentionTrace{std::move(r)}; }

Triplet trip(int sh, int oh) { return {{"cube", sh}, {"above", sh + 1, sh + 2}, {"table", oh}}; }

}  // namespace

TEST(ArgmaxLowest, TieBreak) {
  EXPECT_EQ(argmax_lowest({0.25, 0.25, 0.25, 0.25}), 0);
  EXPECT_EQ(argmax_lowest({0.1, 0.4, 0.4, 0.1}), 1);
  EXPECT_EQ(argmax_lowest({0, 0, 1}), 2);
  EXPECT_THROW(argmax_lowest({}), EmptyKeysError);
}

TEST(CaptionNll, UntrainedIsNearLogV) {
  const Corpus c = make_corpus(10, 1);
  const Vocabulary v = vocab_of(c);
  const double ln_v = std::log(static_cast<double>(v.size()));
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Captioner m(v, 16, small_config(seed));
    const double nll = m.caption_nll(c.scenes[seed % 10], c.scenes[seed % 10].captions[0]);
    EXPECT_NEAR(nll, ln_v, 0.5) << seed;
    EXPECT_GE(nll, 0.0);
  }
}

TEST(CaptionNll, SingleTokenAveragesTwoSteps) {
  const Corpus c = make_corpus(10, 2);
  const Vocabulary v = vocab_of(c);
  Captioner m(v, 16, small_config());
  // Rig the output layer so every step has the same distribution.
  Tensor& w = m.params().get("output.weight").value;
  w.fill(0.0);
  Tensor& b = m.params().get("output.bias").value;
  std::mt19937_64 rng(3);
  b = gaussian_init(1, b.cols(), 1.0, rng);
  const int cube = v.encode("cube");
  auto log_p = [&](int id) {
    double mx = -INFINITY;
    for (double x : b.values()) mx = std::max(mx, x);
    double s = 0;
    for (double x : b.values()) s += std::exp(x - mx);
    return b[static_cast<std::size_t>(id)] - mx - std::log(s);
  };
  const double expected = -(log_p(cube) + log_p(Vocabulary::kEos)) / 2.0;
  EXPECT_NEAR(m.caption_nll(c.scenes[0], std::vector<int>{cube}), expected, 1e-12);
}

TEST(CaptionNll, OutOfRangeTokenIsVocabError) {
  const Corpus c = make_corpus(10, 2);
  const Captioner m(vocab_of(c), 16, small_config());
  EXPECT_THROW(m.caption_nll(c.scenes[0], std::vector<int>{4, m.vocab().size()}), VocabError);
  EXPECT_THROW(m.caption_nll(c.scenes[0], std::vector<int>{-1}), VocabError);
}

TEST(CaptionNll, IndependentOfBatchCompanions) {
  const Corpus c = make_corpus(12, 4);
  const Captioner m(vocab_of(c), 16, small_config());
  std::vector<Captioner::Item> items;
  for (const Scene& s : c.scenes) {
    for (const Caption& cap : s.captions) items.push_back({&s, m.encode(cap)});
  }
  Graph g(false);
  const auto batch = m.forward(g, items, false);
  double mean = 0;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const double alone = m.caption_nll(*items[i].scene, items[i].tokens);
    EXPECT_NEAR(batch.item_nll[i], alone, 1e-12) << i;
    mean += alone;
  }
  EXPECT_NEAR(batch.loss.value()[0], mean / static_cast<double>(items.size()), 1e-12);
}

TEST(CaptionNll, Deterministic) {
  const Corpus c = make_corpus(10, 5);
  const Captioner a(vocab_of(c), 16, small_config(9));
  const Captioner b(vocab_of(c), 16, small_config(9));
  for (const Scene& s : c.scenes) {
    EXPECT_EQ(a.caption_nll(s, s.captions[0]), b.caption_nll(s, s.captions[0]));
  }
}

TEST(Traces, RowsSumToOneWithOneRowPerPrediction) {
  const Corpus c = make_corpus(20, 6);
  const Captioner m(vocab_of(c), 16, small_config());
  for (const Scene& s : c.scenes) {
    const auto ts = m.traces(s);
    ASSERT_EQ(ts.size(), s.captions.size());
    for (std::size_t k = 0; k < ts.size(); ++k) {
      EXPECT_EQ(ts[k].rows.size(), s.captions[k].tokens.size() + 1);
      for (const auto& row : ts[k].rows) {
        ASSERT_EQ(row.size(), s.objects.size());
        EXPECT_NEAR(std::accumulate(row.begin(), row.end(), 0.0), 1.0, 1e-6);
      }
      const AttentionTrace single = m.trace(s, s.captions[k]);
      for (std::size_t t = 0; t < single.rows.size(); ++t) {
        for (std::size_t i = 0; i < s.objects.size(); ++i) {
          EXPECT_NEAR(single.rows[t][i], ts[k].rows[t][i], 1e-12);
        }
      }
    }
  }
}

TEST(Traces, SingleObjectAndIdenticalFeatures) {
  const Corpus c = make_corpus(10, 7);
  const Captioner m(vocab_of(c), 16, small_config());
  Scene one = c.scenes[0];
  one.objects.resize(1);
  for (const auto& row : m.trace(one, one.captions[0]).rows) EXPECT_EQ(row, std::vector<double>{1.0});

  Scene same = c.scenes[0];
  for (auto& o : same.objects) o.feature = same.objects[0].feature;
  const double u = 1.0 / static_cast<double>(same.objects.size());
  for (const auto& row : m.trace(same, same.captions[0]).rows) {
    for (double p : row) EXPECT_NEAR(p, u, 1e-12);
  }
  Scene empty = c.scenes[0];
  empty.objects.clear();
  EXPECT_THROW(m.trace(empty, empty.captions[0]), EmptyKeysError);
}

TEST(Traces, PermutationCovariant) {
  const Corpus c = make_corpus(20, 8);
  const Captioner m(vocab_of(c), 16, small_config());
  std::mt19937_64 rng(1);
  for (const Scene& s : c.scenes) {
    std::vector<int> perm(s.objects.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Scene p = s;
    for (std::size_t i = 0; i < perm.size(); ++i) p.objects[i] = s.objects[static_cast<std::size_t>(perm[i])];
    const AttentionTrace a = m.trace(s, s.captions[0]);
    const AttentionTrace b = m.trace(p, s.captions[0]);
    for (std::size_t t = 0; t < a.rows.size(); ++t) {
      for (std::size_t i = 0; i < perm.size(); ++i) {
        EXPECT_NEAR(b.rows[t][i], a.rows[t][static_cast<std::size_t>(perm[i])], 1e-10);
      }
      EXPECT_EQ(perm[static_cast<std::size_t>(argmax_lowest(b.rows[t]))], argmax_lowest(a.rows[t]));
    }
  }
}

TEST(GroundCaption, OneHotUniformAndComposition) {
  const std::vector<double> uniform(4, 0.25);
  std::vector<std::vector<double>> r(6, uniform);
  r[1] = {0, 0, 1, 0};
  auto g = ground_caption(rows(r), {trip(1, 4)});
  ASSERT_EQ(g.entities.size(), 2u);
  EXPECT_EQ(g.entities[0].object, 2);
  EXPECT_EQ(g.entities[1].object, 0);  // uniform row ties to object 0

  r[1] = {0.7, 0.1, 0.1, 0.1};
  r[4] = {0.1, 0.1, 0.1, 0.7};
  g = ground_caption(rows(r), {trip(1, 4)});
  ASSERT_EQ(g.relations.size(), 1u);
  EXPECT_EQ(g.relations[0].subject_object, 0);
  EXPECT_EQ(g.relations[0].object_object, 3);
  EXPECT_EQ(g.relations[0].triplet.predicate.surface, "above");
}

TEST(GroundCaption, OutOfRangeHeadCountsAlignmentError) {
  std::vector<std::vector<double>> r(3, std::vector<double>{0.5, 0.5});
  const auto g = ground_caption(rows(r), {trip(0, 2), trip(0, 7), trip(-1, 1)});
  EXPECT_EQ(g.relations.size(), 1u);
  EXPECT_EQ(g.alignment_errors, 2);
}

TEST(GroundedDataset, FullCoverageOracleCountingIdentity) {
  const Corpus c = make_corpus(60, 9, 1.0);
  const WorldSpec world = WorldSpec::make_default(16);
  const PredicateMapping mapping = default_mapping(world);
  const RuleBasedParser parser = RuleBasedParser::for_world(world, mapping);
  const GroundedDataset ds = build_grounded_dataset(OracleGrounder{}, c, parser, mapping);
  std::size_t gt = 0;
  for (const Scene& s : c.scenes) gt += s.gt_relations.size() * s.captions.size();
  EXPECT_EQ(ds.examples.size(), gt);
  EXPECT_EQ(ds.diagnostics.unmapped, 0);
  EXPECT_EQ(ds.diagnostics.self_pairs, 0);
  EXPECT_EQ(ds.diagnostics.alignment_errors, 0);
  EXPECT_EQ(build_oracle_dataset(c).examples.size(), gt);
  for (const GroundedExample& ex : ds.examples) {
    const Scene& s = *std::find_if(c.scenes.begin(), c.scenes.end(),
                                   [&](const Scene& x) { return x.scene_id == ex.scene_id; });
    const Relation r{ex.subject_object, ex.relation, ex.object_object};
    EXPECT_TRUE(std::binary_search(s.gt_relations.begin(), s.gt_relations.end(), r));
    EXPECT_EQ(ex.subj_feature, s.objects[static_cast<std::size_t>(ex.subject_object)].feature);
  }
}

TEST(GroundedDataset, UnmappedPredicateAndSelfPair) {
  const Corpus base = make_corpus(10, 10);
  Corpus c;
  c.header = base.header;
  Scene s = base.scenes[0];
  s.captions = {make_caption("a cube gazes toward a table and a cube above a mat")};
  const int n = static_cast<int>(s.objects.size());
  CaptionOracle o;
  o.entities = {{1, 0}, {5, 1}, {8, 3 % n}, {11, 3 % n}};
  s.oracle = OracleAlignment{{o}};
  c.scenes.push_back(s);
  const WorldSpec world = WorldSpec::make_default(16);
  PredicateMapping mapping = default_mapping(world);
  RuleBasedParser parser({"gazes toward", "above"}, world.attribute_words(), world.class_names);
  const GroundedDataset ds = build_grounded_dataset(OracleGrounder{}, c, parser, mapping);
  EXPECT_EQ(ds.diagnostics.triplets, 2);
  EXPECT_EQ(ds.diagnostics.unmapped, 1);
  EXPECT_EQ(ds.diagnostics.self_pairs, 1);
  EXPECT_TRUE(ds.examples.empty());
}

TEST(GroundedDataset, SingleObjectSceneYieldsOnlySelfPairs) {
  const Corpus base = make_corpus(10, 11);
  Corpus c;
  c.header = base.header;
  Scene s = base.scenes[0];
  s.objects.resize(1);
  s.gt_relations.clear();
  s.oracle.reset();
  s.captions = {make_caption("a cube above a table")};
  c.scenes.push_back(s);
  const Captioner m(vocab_of(base), 16, small_config());
  const WorldSpec world = WorldSpec::make_default(16);
  const PredicateMapping mapping = default_mapping(world);
  const RuleBasedParser parser = RuleBasedParser::for_world(world, mapping);
  const GroundedDataset ds = build_grounded_dataset(CaptionerGrounder{m}, c, parser, mapping);
  EXPECT_EQ(ds.diagnostics.self_pairs, 1);
  EXPECT_TRUE(ds.examples.empty());
}

TEST(GroundedDataset, TableSourceMatchesParser) {
  const Corpus c = make_corpus(15, 12);
  const WorldSpec world = WorldSpec::make_default(16);
  const PredicateMapping mapping = default_mapping(world);
  const RuleBasedParser parser = RuleBasedParser::for_world(world, mapping);
  std::stringstream ss;
  write_triplets(ss, c, parser, mapping);
  const ParsedTriplets table = read_triplets(ss);
  const Captioner m(vocab_of(c), 16, small_config());
  const CaptionerGrounder g(m);
  const GroundedDataset a = build_grounded_dataset(g, c, parser, mapping);
  const GroundedDataset b = build_grounded_dataset(g, c, table_source(table), mapping);
  EXPECT_EQ(a.examples, b.examples);
  ParsedTriplets partial = table;
  partial.erase(partial.begin());
  EXPECT_THROW(build_grounded_dataset(g, c, table_source(partial), mapping), ContractError);
}

TEST(GroundingAccuracy, OracleIsPerfect) {
  const Corpus c = make_corpus(30, 13);
  const GroundingAccuracy acc = grounding_accuracy(OracleGrounder{}, c);
  EXPECT_EQ(acc.entity_accuracy, 1.0);
  EXPECT_EQ(acc.pair_accuracy, 1.0);
  EXPECT_GT(acc.entity_mentions, 0);
}

TEST(GroundingAccuracy, UntrainedIsNearChance) {
  GeneratorConfig gc;
  gc.num_scenes = 200;
  gc.min_objects = gc.max_objects = 4;
  const Corpus c = generate_corpus(WorldSpec::make_default(16), gc);
  double mean = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Captioner m(vocab_of(c), 16, small_config(seed));
    const GroundingAccuracy acc = grounding_accuracy(CaptionerGrounder{m}, c);
    EXPECT_DOUBLE_EQ(acc.chance, 0.25);
    mean += acc.entity_accuracy / 5;
  }
  EXPECT_NEAR(mean, 0.25, 0.1);
}

TEST(GroundingAccuracy, MissingOracle) {
  Corpus c = make_corpus(10, 14);
  c.scenes[3].oracle.reset();
  EXPECT_THROW(grounding_accuracy(OracleGrounder{}, c), OracleMissing);
  EXPECT_THROW(build_oracle_dataset(c), OracleMissing);
  Corpus empty;
  EXPECT_THROW(grounding_accuracy(OracleGrounder{}, empty), OracleMissing);
}

TEST(Training, ZeroEpochsKeepsInitialization) {
  const Corpus c = make_corpus(10, 15);
  CaptionerConfig cfg = small_config(5);
  cfg.epochs = 0;
  const CaptionerTraining t = train_captioner(c, cfg);
  const Captioner fresh(vocab_of(c), 16, cfg);
  EXPECT_TRUE(t.loss_curve.empty());
  for (std::size_t i = 0; i < fresh.params().size(); ++i) {
    EXPECT_EQ(t.model->params()[i].value.storage(), fresh.params()[i].value.storage());
  }
}

TEST(Training, SameSeedSameCurve) {
  const Corpus c = make_corpus(20, 16);
  CaptionerConfig cfg = small_config(3);
  cfg.epochs = 3;
  cfg.batch_size = 4;
  const auto a = train_captioner(c, cfg);
  const auto b = train_captioner(c, cfg);
  EXPECT_EQ(a.loss_curve, b.loss_curve);
  EXPECT_EQ(a.model->params()[0].value.storage(), b.model->params()[0].value.storage());
}

TEST(Training, FiftySceneLossHalves) {
  const Corpus c = make_corpus(50, 17);
  CaptionerConfig cfg;
  cfg.epochs = 30;
  const auto t = train_captioner(c, cfg);
  ASSERT_EQ(t.loss_curve.size(), 30u);
  EXPECT_LT(t.loss_curve.back(), 0.5 * t.loss_curve.front());
}

TEST(Training, InvalidConfig) {
  const Corpus c = make_corpus(10, 18);
  CaptionerConfig cfg = small_config();
  cfg.batch_size = 0;
  EXPECT_THROW(train_captioner(c, cfg), ConfigError);
  cfg = small_config();
  cfg.hidden = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Checkpoint, CaptionerRoundTrip) {
  const Corpus c = make_corpus(10, 19);
  CaptionerConfig cfg = small_config(2);
  cfg.epochs = 1;
  const auto t = train_captioner(c, cfg);
  const std::string path = ::testing::TempDir() + "cap.ckpt";
  t.model->save(path);
  const Captioner back = Captioner::load(path);
  EXPECT_EQ(back.vocab(), t.model->vocab());
  EXPECT_EQ(back.feature_dim(), 16);
  for (const Scene& s : c.scenes) {
    EXPECT_EQ(back.caption_nll(s, s.captions[0]), t.model->caption_nll(s, s.captions[0]));
  }
}
