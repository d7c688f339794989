#pragma once

// Rule-based caption parser: splits a caption into "and"-joined clauses and
// matches each against  [det] [attr]* NOUN PREDICATE [det] [attr]* NOUN,
// taking the longest predicate-lexicon match. Also holds the surface ->
// canonical predicate mapping and the caption/ground-truth frequency
// comparison.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "capground/data_model.hpp"
#include "capground/error.hpp"
#include "capground/synthgen.hpp"

namespace capground {

struct EntityMention {
  std::string lemma;
  int head = 0;  // token index in the caption

  bool operator==(const EntityMention&) const = default;
};

struct PredicateMention {
  std::string surface;
  int begin = 0;  // token span [begin, end)
  int end = 0;

  bool operator==(const PredicateMention&) const = default;
};

struct Triplet {
  EntityMention subject;
  PredicateMention predicate;
  EntityMention object;

  bool operator==(const Triplet&) const = default;
};

struct ParseResult {
  std::vector<Triplet> triplets;
  int skipped_clauses = 0;
};

struct EntityRelationSets {
  std::vector<EntityMention> entities;
  std::vector<PredicateMention> relations;
};

// Exact unions, first-appearance order, duplicates removed.
inline EntityRelationSets extract_entity_relation_sets(
    const std::vector<Triplet>& triplets) {
  EntityRelationSets out;
  auto add_entity = [&](const EntityMention& e) {
    if (std::find(out.entities.begin(), out.entities.end(), e) ==
        out.entities.end()) {
      out.entities.push_back(e);
    }
  };
  for (const Triplet& t : triplets) {
    add_entity(t.subject);
    add_entity(t.object);
    if (std::find(out.relations.begin(), out.relations.end(), t.predicate) ==
        out.relations.end()) {
      out.relations.push_back(t.predicate);
    }
  }
  return out;
}

// Lowercase, whitespace-collapsed form used for all predicate lookups.
inline std::string normalize_predicate(std::string_view s) {
  std::string out;
  bool pending_space = false;
  for (char ch : s) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out += ' ';
    pending_space = false;
    out += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  }
  return out;
}

struct RelationClass {
  int id = 0;
  std::string name;

  bool operator==(const RelationClass&) const = default;
};

class PredicateMapping {
 public:
  PredicateMapping() = default;

  // Canonical names always map to themselves.
  explicit PredicateMapping(std::vector<std::string> relation_names)
      : relation_names_(std::move(relation_names)) {
    for (std::size_t i = 0; i < relation_names_.size(); ++i) {
      table_[normalize_predicate(relation_names_[i])] = static_cast<int>(i);
    }
  }

  void add(const std::string& surface, const std::string& canonical) {
    auto it =
        std::find(relation_names_.begin(), relation_names_.end(), canonical);
    if (it == relation_names_.end()) {
      throw ConfigError("mapping target \"" + canonical +
                        "\" is not a relation class");
    }
    table_[normalize_predicate(surface)] =
        static_cast<int>(it - relation_names_.begin());
  }

  std::optional<RelationClass> canonicalize(std::string_view surface) const {
    auto it = table_.find(normalize_predicate(surface));
    if (it == table_.end()) return std::nullopt;
    return RelationClass{it->second,
                         relation_names_[static_cast<std::size_t>(it->second)]};
  }

  std::vector<std::string> surfaces() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : table_) out.push_back(k);
    return out;
  }

  const std::vector<std::string>& relation_names() const {
    return relation_names_;
  }

  json to_json() const {
    json j = json::object();
    for (const auto& [k, v] : table_) {
      j[k] = relation_names_[static_cast<std::size_t>(v)];
    }
    return j;
  }

  static PredicateMapping from_json(const json& j,
                                    std::vector<std::string> relation_names) {
    if (!j.is_object()) throw ConfigError("mapping file must be an object");
    PredicateMapping m(std::move(relation_names));
    for (const auto& [surface, target] : j.items()) {
      if (!target.is_string()) {
        throw ConfigError("mapping value for \"" + surface +
                          "\" is not a string");
      }
      m.add(surface, target.get<std::string>());
    }
    return m;
  }

  static PredicateMapping load(const std::string& path,
                               std::vector<std::string> relation_names) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot read mapping " + path);
    json j;
    try {
      j = json::parse(is);
    } catch (const json::parse_error& e) {
      throw ConfigError("mapping " + path + ": " + e.what());
    }
    return from_json(j, std::move(relation_names));
  }

 private:
  std::vector<std::string> relation_names_;
  std::map<std::string, int> table_;
};

inline std::optional<RelationClass> canonicalize(std::string_view surface,
                                                 const PredicateMapping& m) {
  return m.canonicalize(surface);
}

inline PredicateMapping default_mapping(const WorldSpec& world) {
  PredicateMapping m(world.relation_names);
  for (std::size_t r = 0; r < world.surface_forms.size(); ++r) {
    for (const auto& s : world.surface_forms[r]) {
      m.add(s, world.relation_names[r]);
    }
  }
  return m;
}

// Seam for alternative parsers (e.g. an adapter over a statistical parser).
class TripletParser {
 public:
  virtual ~TripletParser() = default;
  virtual ParseResult parse(const std::vector<std::string>& tokens) const = 0;
};

class RuleBasedParser : public TripletParser {
 public:
  RuleBasedParser(const std::vector<std::string>& predicates,
                  const std::vector<std::string>& attributes,
                  const std::vector<std::string>& nouns = {}) {
    for (const auto& p : predicates) {
      std::vector<std::string> words;
      std::istringstream is(normalize_predicate(p));
      std::string w;
      while (is >> w) words.push_back(w);
      if (words.empty()) continue;
      max_predicate_len_ = std::max(max_predicate_len_, words.size());
      for (const auto& x : words) predicate_words_.insert(x);
      predicates_.insert(std::move(words));
    }
    for (const auto& a : attributes) attributes_.insert(a);
    for (const auto& n : nouns) nouns_.insert(n);
  }

  static RuleBasedParser for_world(const WorldSpec& world,
                                   const PredicateMapping& mapping) {
    std::vector<std::string> preds = mapping.surfaces();
    for (const auto& forms : world.surface_forms) {
      preds.insert(preds.end(), forms.begin(), forms.end());
    }
    return RuleBasedParser(preds, world.attribute_words(), world.class_names);
  }

  ParseResult parse(const std::vector<std::string>& tokens) const override {
    ParseResult result;
    const int n = static_cast<int>(tokens.size());
    int start = 0;
    for (int i = 0; i <= n; ++i) {
      if (i == n || tokens[static_cast<std::size_t>(i)] == "and") {
        if (i > start) {
          if (auto t = parse_clause(tokens, start, i)) {
            result.triplets.push_back(std::move(*t));
          } else {
            ++result.skipped_clauses;
          }
        } else if (i < n) {
          ++result.skipped_clauses;
        }
        start = i + 1;
      }
    }
    return result;
  }

 private:
  static bool is_determiner(const std::string& w) {
    return w == "a" || w == "an" || w == "the";
  }

  bool is_noun(const std::string& w) const {
    if (nouns_.count(w)) return true;
    return !is_determiner(w) && w != "and" && !attributes_.count(w) &&
           !predicate_words_.count(w);
  }

  // [det] [attr]* NOUN starting at pos; returns the noun index or -1.
  int match_noun_phrase(const std::vector<std::string>& t, int pos,
                        int end) const {
    if (pos < end && is_determiner(t[static_cast<std::size_t>(pos)])) ++pos;
    while (pos < end && attributes_.count(t[static_cast<std::size_t>(pos)]) &&
           !nouns_.count(t[static_cast<std::size_t>(pos)])) {
      ++pos;
    }
    if (pos < end && is_noun(t[static_cast<std::size_t>(pos)])) return pos;
    return -1;
  }

  int match_predicate(const std::vector<std::string>& t, int pos,
                      int end) const {
    const int longest =
        std::min(static_cast<int>(max_predicate_len_), end - pos);
    for (int len = longest; len >= 1; --len) {
      std::vector<std::string> words(t.begin() + pos, t.begin() + pos + len);
      if (predicates_.count(words)) return len;
    }
    return 0;
  }

  std::optional<Triplet> parse_clause(const std::vector<std::string>& t,
                                      int begin, int end) const {
    const int subj = match_noun_phrase(t, begin, end);
    if (subj < 0) return std::nullopt;
    const int pred_begin = subj + 1;
    const int pred_len = match_predicate(t, pred_begin, end);
    if (pred_len == 0) return std::nullopt;
    const int obj = match_noun_phrase(t, pred_begin + pred_len, end);
    if (obj < 0 || obj != end - 1) return std::nullopt;
    Triplet trip;
    trip.subject = {t[static_cast<std::size_t>(subj)], subj};
    std::string surface;
    for (int k = pred_begin; k < pred_begin + pred_len; ++k) {
      if (k > pred_begin) surface += ' ';
      surface += t[static_cast<std::size_t>(k)];
    }
    trip.predicate = {surface, pred_begin, pred_begin + pred_len};
    trip.object = {t[static_cast<std::size_t>(obj)], obj};
    return trip;
  }

  std::set<std::vector<std::string>> predicates_;
  std::set<std::string> predicate_words_;
  std::set<std::string> attributes_;
  std::set<std::string> nouns_;
  std::size_t max_predicate_len_ = 0;
};

inline ParseResult parse_triplets(const TripletParser& parser,
                                  const std::vector<std::string>& tokens) {
  return parser.parse(tokens);
}

// A parsed triplet whose predicate resolved to a canonical class.
struct CanonicalTriplet {
  Triplet triplet;
  RelationClass relation;
};

struct CaptionParse {
  std::vector<CanonicalTriplet> mapped;
  std::vector<Triplet> unmapped;
  int skipped_clauses = 0;
};

inline CaptionParse parse_and_canonicalize(const TripletParser& parser,
                                           const PredicateMapping& mapping,
                                           const Caption& caption) {
  CaptionParse out;
  ParseResult r = parser.parse(caption.tokens);
  out.skipped_clauses = r.skipped_clauses;
  for (Triplet& t : r.triplets) {
    if (auto c = mapping.canonicalize(t.predicate.surface)) {
      out.mapped.push_back({std::move(t), *c});
    } else {
      out.unmapped.push_back(std::move(t));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Frequency comparison

namespace stats {

// Ranks with ties assigned their average rank (1-based).
inline std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

inline std::optional<double> pearson(const std::vector<double>& a,
                                     const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) return std::nullopt;
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa <= 0 || sbb <= 0) return std::nullopt;
  return sab / std::sqrt(saa * sbb);
}

inline std::optional<double> spearman(const std::vector<double>& a,
                                      const std::vector<double>& b) {
  return pearson(average_ranks(a), average_ranks(b));
}

}  // namespace stats

struct FrequencyHistogram {
  std::vector<std::string> relation_names;
  std::vector<double> caption_counts;
  std::vector<double> gt_counts;
  std::optional<double> spearman;
};

// Classes absent from both sources are left out of the correlation.
inline FrequencyHistogram predicate_frequency_histogram(
    const Corpus& corpus, const TripletParser& parser,
    const PredicateMapping& mapping) {
  const std::size_t c = static_cast<std::size_t>(corpus.header.num_relations);
  FrequencyHistogram h;
  h.relation_names = corpus.header.relation_names;
  h.caption_counts.assign(c, 0.0);
  h.gt_counts.assign(c, 0.0);
  for (const Scene& s : corpus.scenes) {
    for (const Relation& r : s.gt_relations) {
      h.gt_counts[static_cast<std::size_t>(r.relation)] += 1.0;
    }
    for (const Caption& cap : s.captions) {
      for (const auto& ct : parse_and_canonicalize(parser, mapping, cap).mapped) {
        if (ct.relation.id >= 0 && static_cast<std::size_t>(ct.relation.id) < c) {
          h.caption_counts[static_cast<std::size_t>(ct.relation.id)] += 1.0;
        }
      }
    }
  }
  std::vector<double> a, b;
  for (std::size_t i = 0; i < c; ++i) {
    if (h.caption_counts[i] > 0 || h.gt_counts[i] > 0) {
      a.push_back(h.caption_counts[i]);
      b.push_back(h.gt_counts[i]);
    }
  }
  h.spearman = stats::spearman(a, b);
  return h;
}

// ---------------------------------------------------------------------------
// Triplet file (parse subcommand output)

inline json triplet_to_json(const Triplet& t,
                            const std::optional<RelationClass>& cls) {
  return {{"subject", {{"lemma", t.subject.lemma}, {"head", t.subject.head}}},
          {"predicate",
           {{"surface", t.predicate.surface},
            {"span", {t.predicate.begin, t.predicate.end}}}},
          {"object", {{"lemma", t.object.lemma}, {"head", t.object.head}}},
          {"class", cls ? json(cls->name) : json(nullptr)}};
}

inline Triplet triplet_from_json(const json& j) {
  Triplet t;
  t.subject = {j.at("subject").at("lemma").get<std::string>(),
               j.at("subject").at("head").get<int>()};
  t.predicate = {j.at("predicate").at("surface").get<std::string>(),
                 j.at("predicate").at("span").at(0).get<int>(),
                 j.at("predicate").at("span").at(1).get<int>()};
  t.object = {j.at("object").at("lemma").get<std::string>(),
              j.at("object").at("head").get<int>()};
  return t;
}

// Parse results keyed by (scene id, caption index).
using ParsedTriplets = std::map<std::pair<std::string, int>, ParseResult>;

inline ParsedTriplets read_triplets(std::istream& is) {
  ParsedTriplets out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      ParseResult r;
      for (const json& t : j.at("triplets")) r.triplets.push_back(triplet_from_json(t));
      r.skipped_clauses = j.value("skipped_clauses", 0);
      out[{j.at("scene_id").get<std::string>(), j.at("caption_index").get<int>()}] =
          std::move(r);
    } catch (const json::exception& e) {
      throw ParseError(line_no, e.what());
    }
  }
  return out;
}

inline ParsedTriplets load_triplets(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path);
  return read_triplets(is);
}

inline void write_triplets(std::ostream& os, const Corpus& corpus,
                           const TripletParser& parser,
                           const PredicateMapping& mapping) {
  for (const Scene& s : corpus.scenes) {
    for (std::size_t c = 0; c < s.captions.size(); ++c) {
      ParseResult r = parser.parse(s.captions[c].tokens);
      json trips = json::array();
      for (const Triplet& t : r.triplets) {
        trips.push_back(
            triplet_to_json(t, mapping.canonicalize(t.predicate.surface)));
      }
      os << json{{"scene_id", s.scene_id},
                 {"caption_index", c},
                 {"caption", s.captions[c].raw},
                 {"triplets", trips},
                 {"skipped_clauses", r.skipped_clauses}}
                .dump()
         << '\n';
    }
  }
}

}  // namespace capground
