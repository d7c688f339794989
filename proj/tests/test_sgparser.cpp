#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "capground/sgparser.hpp"
#include "capground/synthgen.hpp"

using namespace capground;

namespace {

using Tokens = std::vector<std::string>;

struct Fixture {
  WorldSpec world = WorldSpec::make_default(8);
  PredicateMapping mapping = default_mapping(world);
  RuleBasedParser parser = RuleBasedParser::for_world(world, mapping);
};

const Fixture& fx() {
  static const Fixture f;
  return f;
}

Triplet trip(std::string s, int sh, std::string p, int pb, int pe, std::string o, int oh) {
  return {{std::move(s), sh}, {std::move(p), pb, pe}, {std::move(o), oh}};
}

}  // namespace

TEST(Parser, SingleClause) {
  const ParseResult r = fx().parser.parse({"a", "cube", "above", "a", "table"});
  ASSERT_EQ(r.triplets.size(), 1u);
  EXPECT_EQ(r.triplets[0], trip("cube", 1, "above", 2, 3, "table", 4));
  EXPECT_EQ(r.skipped_clauses, 0);
}

TEST(Parser, LongestPredicateMatch) {
  const ParseResult r =
      fx().parser.parse({"a", "red", "cube", "on", "top", "of", "a", "mat"});
  ASSERT_EQ(r.triplets.size(), 1u);
  EXPECT_EQ(r.triplets[0], trip("cube", 2, "on top of", 3, 6, "mat", 7));
}

TEST(Parser, UnparseableClauseIsSkipped) {
  const ParseResult r = fx().parser.parse({"the", "weather", "is", "nice"});
  EXPECT_TRUE(r.triplets.empty());
  EXPECT_EQ(r.skipped_clauses, 1);
}

TEST(Parser, ClausesJoinedByAnd) {
  const ParseResult r = fx().parser.parse(
      tokenize("a dog beside a ball and the weather is nice and a large person riding a dog"));
  ASSERT_EQ(r.triplets.size(), 2u);
  EXPECT_EQ(r.triplets[0], trip("dog", 1, "beside", 2, 3, "ball", 4));
  EXPECT_EQ(r.triplets[1], trip("person", 13, "riding", 14, 15, "dog", 16));
  EXPECT_EQ(r.skipped_clauses, 1);
}

TEST(Parser, OpenNounFallback) {
  const ParseResult r = fx().parser.parse(tokenize("a zebra next to the fence"));
  ASSERT_EQ(r.triplets.size(), 1u);
  EXPECT_EQ(r.triplets[0], trip("zebra", 1, "next to", 2, 4, "fence", 5));
}

TEST(Parser, TrailingWordsRejectClause) {
  EXPECT_TRUE(fx().parser.parse(tokenize("a cube above a table today")).triplets.empty());
  EXPECT_TRUE(fx().parser.parse(tokenize("a cube a table")).triplets.empty());
  EXPECT_EQ(fx().parser.parse(tokenize("and")).skipped_clauses, 1);
}

TEST(EntityRelationSets, Unions) {
  const auto one = extract_entity_relation_sets({trip("cube", 1, "above", 2, 3, "table", 4)});
  ASSERT_EQ(one.entities.size(), 2u);
  EXPECT_EQ(one.entities[0].lemma, "cube");
  EXPECT_EQ(one.entities[1].lemma, "table");
  ASSERT_EQ(one.relations.size(), 1u);
  EXPECT_EQ(one.relations[0].surface, "above");

  const auto two = extract_entity_relation_sets(
      {trip("cube", 1, "above", 2, 3, "table", 4), trip("table", 4, "near", 5, 6, "mat", 8)});
  ASSERT_EQ(two.entities.size(), 3u);
  EXPECT_EQ(two.entities[2].lemma, "mat");
  ASSERT_EQ(two.relations.size(), 2u);
  EXPECT_EQ(two.relations[1].surface, "near");

  const auto none = extract_entity_relation_sets({});
  EXPECT_TRUE(none.entities.empty());
  EXPECT_TRUE(none.relations.empty());
}

TEST(EntityRelationSets, MembershipAndBound) {
  GeneratorConfig cfg;
  cfg.num_scenes = 50;
  cfg.coverage = 1.0;
  const Corpus c = generate_corpus(fx().world, cfg);
  for (const Scene& s : c.scenes) {
    for (const Caption& cap : s.captions) {
      const auto trips = fx().parser.parse(cap.tokens).triplets;
      const auto sets = extract_entity_relation_sets(trips);
      EXPECT_LE(sets.entities.size(), 2 * trips.size());
      for (const Triplet& t : trips) {
        EXPECT_NE(std::find(sets.entities.begin(), sets.entities.end(), t.subject),
                  sets.entities.end());
        EXPECT_NE(std::find(sets.entities.begin(), sets.entities.end(), t.object),
                  sets.entities.end());
        EXPECT_NE(std::find(sets.relations.begin(), sets.relations.end(), t.predicate),
                  sets.relations.end());
      }
    }
  }
}

TEST(Mapping, Lookups) {
  const PredicateMapping& m = fx().mapping;
  EXPECT_EQ(m.canonicalize("sitting in")->name, "in");
  EXPECT_EQ(m.canonicalize("inside")->name, "in");
  EXPECT_EQ(m.canonicalize("on")->name, "on");
  EXPECT_EQ(m.canonicalize("  On   TOP of ")->name, "on");
  EXPECT_FALSE(m.canonicalize("gazes toward").has_value());
  EXPECT_FALSE(canonicalize("", m).has_value());
}

TEST(Mapping, IdempotentOnCanonicalNames) {
  const PredicateMapping& m = fx().mapping;
  for (std::size_t i = 0; i < m.relation_names().size(); ++i) {
    const auto c = m.canonicalize(m.relation_names()[i]);
    ASSERT_TRUE(c.has_value());
    EXPECT_EQ(c->id, static_cast<int>(i));
    EXPECT_EQ(m.canonicalize(c->name), c);
  }
}

TEST(Mapping, TotalOverGeneratorSurfaceForms) {
  const WorldSpec& w = fx().world;
  for (std::size_t r = 0; r < w.surface_forms.size(); ++r) {
    for (const auto& s : w.surface_forms[r]) {
      const auto c = fx().mapping.canonicalize(s);
      ASSERT_TRUE(c.has_value()) << s;
      EXPECT_EQ(c->id, static_cast<int>(r));
    }
  }
}

TEST(Mapping, JsonRoundTripAndErrors) {
  const PredicateMapping& m = fx().mapping;
  const PredicateMapping back = PredicateMapping::from_json(m.to_json(), m.relation_names());
  EXPECT_EQ(back.surfaces(), m.surfaces());
  EXPECT_THROW(PredicateMapping::from_json(json{{"gazes", "stares"}}, m.relation_names()),
               ConfigError);
  EXPECT_THROW(PredicateMapping::from_json(json{{"gazes", 3}}, m.relation_names()),
               ConfigError);
  EXPECT_THROW(PredicateMapping::from_json(json::array(), m.relation_names()), ConfigError);
  EXPECT_THROW(PredicateMapping::load("/nonexistent/map.json", m.relation_names()), IoError);
}

TEST(Parser, RecoversOracleTriplets) {
  GeneratorConfig cfg;
  cfg.num_scenes = 400;
  cfg.coverage = 0.7;
  cfg.seed = 3;
  const Corpus c = generate_corpus(fx().world, cfg);
  std::size_t checked = 0;
  for (const Scene& s : c.scenes) {
    for (std::size_t k = 0; k < s.captions.size(); ++k) {
      const CaptionOracle& o = s.oracle->captions[k];
      const CaptionParse p = parse_and_canonicalize(fx().parser, fx().mapping, s.captions[k]);
      EXPECT_TRUE(p.unmapped.empty());
      EXPECT_EQ(p.skipped_clauses, o.relations.empty() ? 1 : 0);
      ASSERT_EQ(p.mapped.size(), o.relations.size()) << s.captions[k].raw;
      for (std::size_t m = 0; m < o.relations.size(); ++m) {
        const OracleMention& om = o.relations[m];
        const CanonicalTriplet& ct = p.mapped[m];
        EXPECT_EQ(ct.relation.id, om.relation);
        EXPECT_EQ(ct.triplet.subject.head, om.subject_token);
        EXPECT_EQ(ct.triplet.object.head, om.object_token);
        EXPECT_EQ(ct.triplet.predicate.begin, om.predicate_begin);
        EXPECT_EQ(ct.triplet.predicate.end, om.predicate_end);
        EXPECT_EQ(ct.triplet.subject.lemma,
                  c.header.class_names[static_cast<std::size_t>(s.objects[om.subject].class_id)]);
        EXPECT_EQ(ct.triplet.object.lemma,
                  c.header.class_names[static_cast<std::size_t>(s.objects[om.object].class_id)]);
        ++checked;
      }
    }
  }
  EXPECT_GT(checked, 1000u);
}

TEST(Parser, InvariantToAttributeWords) {
  GeneratorConfig cfg;
  cfg.num_scenes = 100;
  cfg.color_attribute_prob = 1.0;
  const Corpus c = generate_corpus(fx().world, cfg);
  const auto attrs = fx().world.attribute_words();
  const std::set<std::string> attr_set(attrs.begin(), attrs.end());
  auto strip = [&](const Tokens& t) {
    Tokens out;
    for (const auto& w : t) {
      if (!attr_set.count(w)) out.push_back(w);
    }
    return out;
  };
  auto shape = [](const ParseResult& r) {
    std::vector<std::tuple<std::string, std::string, std::string>> v;
    for (const Triplet& t : r.triplets) {
      v.emplace_back(t.subject.lemma, t.predicate.surface, t.object.lemma);
    }
    return v;
  };
  for (const Scene& s : c.scenes) {
    for (const Caption& cap : s.captions) {
      EXPECT_EQ(shape(fx().parser.parse(cap.tokens)),
                shape(fx().parser.parse(strip(cap.tokens))));
    }
  }
}

TEST(Parser, HeadIndicesRespectClauseOrder) {
  GeneratorConfig cfg;
  cfg.num_scenes = 100;
  const Corpus c = generate_corpus(fx().world, cfg);
  for (const Scene& s : c.scenes) {
    for (const Caption& cap : s.captions) {
      for (const Triplet& t : fx().parser.parse(cap.tokens).triplets) {
        EXPECT_LT(t.subject.head, t.predicate.begin);
        EXPECT_LT(t.predicate.begin, t.predicate.end);
        EXPECT_LE(t.predicate.end, t.object.head);
        EXPECT_LT(static_cast<std::size_t>(t.object.head), cap.tokens.size());
      }
    }
  }
}

TEST(Frequencies, FullCoverageMatchesGroundTruth) {
  GeneratorConfig cfg;
  cfg.num_scenes = 200;
  cfg.coverage = 1.0;
  cfg.captions_per_scene = 1;
  const Corpus c = generate_corpus(fx().world, cfg);
  const FrequencyHistogram h = predicate_frequency_histogram(c, fx().parser, fx().mapping);
  EXPECT_EQ(h.caption_counts, h.gt_counts);
  ASSERT_TRUE(h.spearman.has_value());
  EXPECT_NEAR(*h.spearman, 1.0, 1e-12);
}

TEST(Frequencies, SingleClassIsUndefined) {
  EXPECT_FALSE(stats::spearman({3.0}, {5.0}).has_value());
  EXPECT_FALSE(stats::spearman({1, 1, 1}, {1, 2, 3}).has_value());
}

TEST(Frequencies, SpearmanHandValues) {
  EXPECT_NEAR(*stats::spearman({1, 2, 3, 4}, {10, 20, 30, 40}), 1.0, 1e-12);
  EXPECT_NEAR(*stats::spearman({1, 2, 3, 4}, {4, 3, 2, 1}), -1.0, 1e-12);
  // Ranks {1.5,1.5,3,4} vs {1,2,3,4}.
  const double expected = 0.9486832980505138;
  EXPECT_NEAR(*stats::spearman({5, 5, 7, 9}, {1, 2, 3, 4}), expected, 1e-12);
  EXPECT_EQ(stats::average_ranks({5, 5, 7, 9}), (std::vector<double>{1.5, 1.5, 3, 4}));
}

TEST(TripletFile, RoundTrip) {
  GeneratorConfig cfg;
  cfg.num_scenes = 20;
  const Corpus c = generate_corpus(fx().world, cfg);
  std::stringstream ss;
  write_triplets(ss, c, fx().parser, fx().mapping);
  const ParsedTriplets back = read_triplets(ss);
  EXPECT_EQ(back.size(), 40u);
  for (const Scene& s : c.scenes) {
    for (std::size_t k = 0; k < s.captions.size(); ++k) {
      const ParseResult& r = back.at({s.scene_id, static_cast<int>(k)});
      EXPECT_EQ(r.triplets, fx().parser.parse(s.captions[k].tokens).triplets);
    }
  }
  std::stringstream bad("{\"scene_id\": \"x\"}\n");
  EXPECT_THROW(read_triplets(bad), ParseError);
}
