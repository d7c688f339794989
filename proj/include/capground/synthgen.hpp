#pragma once

// Synthetic scene generator. Objects get boxes and class labels, features
// are a class prototype plus a linear embedding of the box plus Gaussian
// noise, relations follow from geometry and a class-conditioned rules table,
// and captions are templated renderings of a sampled subset of relations with
// an oracle alignment recorded for every rendered token.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "capground/data_model.hpp"
#include "capground/error.hpp"
#include "capground/parallel.hpp"

namespace capground {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) {
  return splitmix64(splitmix64(master) ^ (index * 0xd1b54a32d192ed03ULL));
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Fixed ids of the geometric relations; semantic relations follow them.
enum SpatialRelation : int {
  kAbove = 0,
  kBelow = 1,
  kLeftOf = 2,
  kRightOf = 3,
  kIn = 4,
  kNear = 5,
  kNumSpatial = 6,
};

inline constexpr double kNearDistance = 0.2;

enum class RuleCondition {
  kOverlap,       // boxes intersect, neither contains the other
  kOverlapAbove,  // as kOverlap, and the subject's center is higher
};

struct SemanticRule {
  int relation = 0;
  std::vector<int> subject_classes;
  std::vector<int> object_classes;
  RuleCondition condition = RuleCondition::kOverlap;
};

struct WorldSpec {
  int feature_dim = 64;
  std::uint64_t world_seed = 1234;
  std::vector<std::string> class_names;
  std::vector<std::string> relation_names;
  std::vector<SemanticRule> semantic_rules;
  std::vector<std::vector<std::string>> surface_forms;  // per relation
  std::vector<std::string> size_attributes;   // {small, large}
  std::vector<std::string> color_attributes;
  std::vector<std::vector<double>> prototypes;  // K x d
  std::vector<std::vector<double>> box_embedding;  // d x 4

  int num_classes() const { return static_cast<int>(class_names.size()); }
  int num_relations() const { return static_cast<int>(relation_names.size()); }

  std::vector<std::string> attribute_words() const {
    std::vector<std::string> out = size_attributes;
    out.insert(out.end(), color_attributes.begin(), color_attributes.end());
    return out;
  }

  int class_index(const std::string& name) const {
    for (int i = 0; i < num_classes(); ++i) {
      if (class_names[static_cast<std::size_t>(i)] == name) return i;
    }
    throw ConfigError("unknown class " + name);
  }

  int relation_index(const std::string& name) const {
    for (int i = 0; i < num_relations(); ++i) {
      if (relation_names[static_cast<std::size_t>(i)] == name) return i;
    }
    throw ConfigError("unknown relation " + name);
  }

  CorpusHeader header() const {
    return {feature_dim, num_classes(), num_relations(), class_names,
            relation_names};
  }

  // Draws prototypes and the box embedding from world_seed.
  void draw_parameters() {
    std::mt19937_64 rng(splitmix64(world_seed));
    std::normal_distribution<double> gauss(0.0, 1.0);
    const auto d = static_cast<std::size_t>(feature_dim);
    prototypes.assign(class_names.size(), std::vector<double>(d));
    for (auto& p : prototypes) {
      for (double& v : p) v = gauss(rng);
    }
    box_embedding.assign(d, std::vector<double>(4));
    for (auto& row : box_embedding) {
      for (double& v : row) v = gauss(rng);
    }
  }

  void validate() const {
    if (feature_dim <= 0) throw ConfigError("feature_dim must be positive");
    if (num_classes() < 1) throw ConfigError("world needs object classes");
    if (num_relations() < kNumSpatial) {
      throw ConfigError("world must include the six spatial relations");
    }
    if (surface_forms.size() != relation_names.size()) {
      throw ConfigError("surface form table must cover every relation");
    }
    std::set<std::string> seen;
    for (std::size_t r = 0; r < surface_forms.size(); ++r) {
      if (surface_forms[r].empty()) {
        throw ConfigError("relation " + relation_names[r] +
                          " has no surface form");
      }
      for (const auto& s : surface_forms[r]) {
        if (!seen.insert(s).second) {
          throw ConfigError("surface form \"" + s +
                            "\" maps to more than one relation");
        }
      }
    }
    for (const SemanticRule& rule : semantic_rules) {
      if (rule.relation < kNumSpatial || rule.relation >= num_relations()) {
        throw ConfigError("semantic rule references a non-semantic relation");
      }
      for (int c : rule.subject_classes) {
        if (c < 0 || c >= num_classes()) throw ConfigError("rule class id");
      }
      for (int c : rule.object_classes) {
        if (c < 0 || c >= num_classes()) throw ConfigError("rule class id");
      }
    }
    if (prototypes.size() != class_names.size() ||
        box_embedding.size() != static_cast<std::size_t>(feature_dim)) {
      throw ConfigError("world parameters not drawn");
    }
  }

  static WorldSpec make_default(int feature_dim = 64,
                                std::uint64_t world_seed = 1234) {
    WorldSpec w;
    w.feature_dim = feature_dim;
    w.world_seed = world_seed;
    w.class_names = {"cube", "table", "mat", "person",
                     "cup",  "dog",   "ball", "box"};
    w.relation_names = {"above", "below", "left of", "right of", "in",
                        "near",  "on",    "holding", "riding",   "has"};
    w.surface_forms = {
        {"above", "over"},
        {"below", "under", "beneath"},
        {"left of", "to the left of"},
        {"right of", "to the right of"},
        {"in", "inside", "sitting in"},
        {"near", "next to", "beside"},
        {"on", "on top of", "sitting on"},
        {"holding", "holds"},
        {"riding", "rides"},
        {"has", "with"},
    };
    auto cls = [&](std::initializer_list<const char*> names) {
      std::vector<int> ids;
      for (const char* n : names) ids.push_back(w.class_index(n));
      return ids;
    };
    w.semantic_rules = {
        {w.relation_index("on"), cls({"cube", "cup", "ball", "box", "dog"}),
         cls({"table", "mat"}), RuleCondition::kOverlapAbove},
        {w.relation_index("holding"), cls({"person"}), cls({"cup", "ball"}),
         RuleCondition::kOverlap},
        {w.relation_index("riding"), cls({"person"}), cls({"dog"}),
         RuleCondition::kOverlapAbove},
        {w.relation_index("has"), cls({"dog"}), cls({"ball", "box"}),
         RuleCondition::kOverlap},
    };
    w.size_attributes = {"small", "large"};
    w.color_attributes = {"red", "blue", "green", "white"};
    w.draw_parameters();
    return w;
  }
};

inline json world_to_json(const WorldSpec& w) {
  json rules = json::array();
  for (const SemanticRule& r : w.semantic_rules) {
    std::vector<std::string> subj, obj;
    for (int c : r.subject_classes) subj.push_back(w.class_names[c]);
    for (int c : r.object_classes) obj.push_back(w.class_names[c]);
    rules.push_back({{"relation", w.relation_names[r.relation]},
                     {"subjects", subj},
                     {"objects", obj},
                     {"condition", r.condition == RuleCondition::kOverlap
                                       ? "overlap"
                                       : "overlap_above"}});
  }
  json surfaces = json::object();
  for (std::size_t r = 0; r < w.relation_names.size(); ++r) {
    surfaces[w.relation_names[r]] = w.surface_forms[r];
  }
  return {{"feature_dim", w.feature_dim},
          {"world_seed", w.world_seed},
          {"classes", w.class_names},
          {"relations", w.relation_names},
          {"surface_forms", surfaces},
          {"semantic_rules", rules},
          {"size_attributes", w.size_attributes},
          {"color_attributes", w.color_attributes}};
}

// Missing keys fall back to the default world.
inline WorldSpec world_from_json(const json& j) {
  WorldSpec base = WorldSpec::make_default();
  WorldSpec w;
  try {
    w.feature_dim = j.value("feature_dim", base.feature_dim);
    w.world_seed = j.value("world_seed", base.world_seed);
    w.class_names = j.value("classes", base.class_names);
    w.relation_names = j.value("relations", base.relation_names);
    w.size_attributes = j.value("size_attributes", base.size_attributes);
    w.color_attributes = j.value("color_attributes", base.color_attributes);
    const std::vector<std::string> spatial(base.relation_names.begin(),
                                           base.relation_names.begin() +
                                               kNumSpatial);
    if (w.relation_names.size() < spatial.size() ||
        !std::equal(spatial.begin(), spatial.end(), w.relation_names.begin())) {
      throw ConfigError("relations must start with the six spatial relations");
    }
    if (j.contains("surface_forms")) {
      const json& sf = j.at("surface_forms");
      for (const auto& name : w.relation_names) {
        w.surface_forms.push_back(
            sf.contains(name) ? sf.at(name).get<std::vector<std::string>>()
                              : std::vector<std::string>{name});
      }
    } else if (w.relation_names == base.relation_names) {
      w.surface_forms = base.surface_forms;
    } else {
      for (const auto& name : w.relation_names) w.surface_forms.push_back({name});
    }
    if (j.contains("semantic_rules")) {
      for (const json& r : j.at("semantic_rules")) {
        SemanticRule rule;
        rule.relation = w.relation_index(r.at("relation").get<std::string>());
        for (const auto& c : r.at("subjects").get<std::vector<std::string>>()) {
          rule.subject_classes.push_back(w.class_index(c));
        }
        for (const auto& c : r.at("objects").get<std::vector<std::string>>()) {
          rule.object_classes.push_back(w.class_index(c));
        }
        const std::string cond = r.value("condition", std::string("overlap"));
        if (cond == "overlap") {
          rule.condition = RuleCondition::kOverlap;
        } else if (cond == "overlap_above") {
          rule.condition = RuleCondition::kOverlapAbove;
        } else {
          throw ConfigError("unknown rule condition " + cond);
        }
        w.semantic_rules.push_back(std::move(rule));
      }
    } else if (w.class_names == base.class_names &&
               w.relation_names == base.relation_names) {
      w.semantic_rules = base.semantic_rules;
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("world spec: ") + e.what());
  }
  w.draw_parameters();
  w.validate();
  return w;
}

struct GeneratorConfig {
  int num_scenes = 100;
  int min_objects = 3;
  int max_objects = 6;
  double box_min = 0.1;  // side length range
  double box_max = 0.4;
  double noise_sigma = 0.1;
  double coverage = 0.4;
  int captions_per_scene = 2;
  double color_attribute_prob = 0.3;
  double small_area = 0.03;  // area at or below -> "small"
  double large_area = 0.1;   // area at or above -> "large"
  std::uint64_t seed = 42;

  void validate() const {
    if (!(coverage > 0.0 && coverage <= 1.0)) {
      throw ConfigError("coverage must lie in (0, 1]");
    }
    if (min_objects < 2 || max_objects < min_objects) {
      throw ConfigError("object count range must satisfy 2 <= min <= max");
    }
    if (!(box_min > 0.0 && box_max >= box_min && box_max <= 1.0)) {
      throw ConfigError("box side range must satisfy 0 < min <= max <= 1");
    }
    if (noise_sigma < 0.0) throw ConfigError("noise sigma must be >= 0");
    if (captions_per_scene < 1) throw ConfigError("need >= 1 caption");
    if (color_attribute_prob < 0.0 || color_attribute_prob > 1.0) {
      throw ConfigError("color attribute probability outside [0, 1]");
    }
  }
};

// ---------------------------------------------------------------------------
// Geometry

namespace geometry {

inline double horizontal_overlap(const Box& a, const Box& b) {
  return std::min(a.right(), b.right()) - std::max(a.x, b.x);
}

inline double vertical_overlap(const Box& a, const Box& b) {
  return std::min(a.bottom(), b.bottom()) - std::max(a.y, b.y);
}

// a lies within b and the boxes differ.
inline bool inside(const Box& a, const Box& b) {
  return a.x >= b.x && a.y >= b.y && a.right() <= b.right() &&
         a.bottom() <= b.bottom() && !(a == b);
}

inline double center_distance(const Box& a, const Box& b) {
  return std::hypot(a.center_x() - b.center_x(), a.center_y() - b.center_y());
}

// The non-near spatial relation of (a, b), or -1. Precedence: in, then the
// four directional rules, which are mutually exclusive by construction.
inline int directional_relation(const Box& a, const Box& b) {
  if (inside(a, b)) return kIn;
  if (a.bottom() <= b.y && horizontal_overlap(a, b) > 0) return kAbove;
  if (b.bottom() <= a.y && horizontal_overlap(a, b) > 0) return kBelow;
  if (a.right() <= b.x && vertical_overlap(a, b) > 0) return kLeftOf;
  if (b.right() <= a.x && vertical_overlap(a, b) > 0) return kRightOf;
  return -1;
}

inline bool overlapping(const Box& a, const Box& b) {
  return horizontal_overlap(a, b) > 0 && vertical_overlap(a, b) > 0 &&
         !inside(a, b) && !inside(b, a) && !(a == b);
}

}  // namespace geometry

inline std::vector<Relation> derive_spatial_relations(
    const std::vector<SceneObject>& objects) {
  if (objects.size() < 2) {
    throw ContractError("spatial relations need at least two objects");
  }
  std::vector<Relation> out;
  const int n = static_cast<int>(objects.size());
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (i == j) continue;
      const Box& a = objects[i].box;
      const Box& b = objects[j].box;
      int rel = geometry::directional_relation(a, b);
      if (rel >= 0) {
        out.push_back({i, rel, j});
      } else if (geometry::directional_relation(b, a) < 0 &&
                 geometry::center_distance(a, b) < kNearDistance) {
        out.push_back({i, kNear, j});
      }
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

// Spatial relations plus the class-conditioned rules. A semantic rule fires
// only on pairs with no directional relation and replaces "near" there.
inline std::vector<Relation> derive_relations(
    const WorldSpec& world, const std::vector<SceneObject>& objects) {
  std::vector<Relation> rels = derive_spatial_relations(objects);
  const int n = static_cast<int>(objects.size());
  auto contains = [](const std::vector<int>& v, int x) {
    return std::find(v.begin(), v.end(), x) != v.end();
  };
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (i == j) continue;
      const SceneObject& a = objects[i];
      const SceneObject& b = objects[j];
      if (!geometry::overlapping(a.box, b.box)) continue;
      for (const SemanticRule& rule : world.semantic_rules) {
        if (!contains(rule.subject_classes, a.class_id) ||
            !contains(rule.object_classes, b.class_id)) {
          continue;
        }
        if (rule.condition == RuleCondition::kOverlapAbove &&
            !(a.box.center_y() < b.box.center_y())) {
          continue;
        }
        rels.erase(std::remove(rels.begin(), rels.end(), Relation{i, kNear, j}),
                   rels.end());
        rels.push_back({i, rule.relation, j});
        break;
      }
    }
  }
  std::sort(rels.begin(), rels.end());
  rels.erase(std::unique(rels.begin(), rels.end()), rels.end());
  return rels;
}

inline std::vector<double> object_feature(const WorldSpec& world, int class_id,
                                          const Box& box, double sigma,
                                          std::mt19937_64& rng) {
  const auto d = static_cast<std::size_t>(world.feature_dim);
  std::vector<double> f(d);
  const double b[4] = {box.x, box.y, box.w, box.h};
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (std::size_t k = 0; k < d; ++k) {
    double v = world.prototypes[static_cast<std::size_t>(class_id)][k];
    for (int c = 0; c < 4; ++c) v += world.box_embedding[k][c] * b[c];
    f[k] = v;
  }
  if (sigma > 0.0) {
    for (double& v : f) v += sigma * gauss(rng);
  }
  return f;
}

// ---------------------------------------------------------------------------
// Captions

struct RenderedCaption {
  Caption caption;
  CaptionOracle oracle;
};

namespace detail {

inline void append_words(std::vector<std::string>& tokens,
                         const std::string& phrase) {
  std::istringstream is(phrase);
  std::string w;
  while (is >> w) tokens.push_back(w);
}

inline void render_entity(const WorldSpec& world, const GeneratorConfig& cfg,
                          const SceneObject& obj, std::mt19937_64& rng,
                          std::vector<std::string>& tokens,
                          CaptionOracle& oracle, int object_index) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  tokens.push_back("a");
  const double area = obj.box.area();
  const double roll = unit(rng);
  if (world.size_attributes.size() >= 2 && area <= cfg.small_area) {
    tokens.push_back(world.size_attributes[0]);
  } else if (world.size_attributes.size() >= 2 && area >= cfg.large_area) {
    tokens.push_back(world.size_attributes[1]);
  } else if (!world.color_attributes.empty() &&
             roll < cfg.color_attribute_prob) {
    std::uniform_int_distribution<std::size_t> pick(
        0, world.color_attributes.size() - 1);
    tokens.push_back(world.color_attributes[pick(rng)]);
  }
  oracle.entities.emplace_back(static_cast<int>(tokens.size()), object_index);
  tokens.push_back(world.class_names[static_cast<std::size_t>(obj.class_id)]);
}

inline std::string join(const std::vector<std::string>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

}  // namespace detail

// Renders the given relations (in order) as "a [attr] X pred a [attr] Y"
// clauses joined by "and". An empty list yields an existence caption.
inline RenderedCaption render_caption(const WorldSpec& world,
                                      const GeneratorConfig& cfg,
                                      const Scene& scene,
                                      const std::vector<Relation>& mentioned,
                                      std::mt19937_64& rng) {
  RenderedCaption out;
  std::vector<std::string> tokens;
  if (mentioned.empty()) {
    std::uniform_int_distribution<std::size_t> pick(0,
                                                    scene.objects.size() - 1);
    const std::size_t idx = pick(rng);
    detail::render_entity(world, cfg, scene.objects[idx], rng, tokens,
                          out.oracle, static_cast<int>(idx));
  }
  for (std::size_t m = 0; m < mentioned.size(); ++m) {
    const Relation& r = mentioned[m];
    if (m) tokens.push_back("and");
    OracleMention mention{r.subject, r.relation, r.object, 0, 0, 0, 0};
    detail::render_entity(world, cfg, scene.objects[r.subject], rng, tokens,
                          out.oracle, r.subject);
    mention.subject_token = out.oracle.entities.back().first;
    const auto& forms = world.surface_forms[static_cast<std::size_t>(r.relation)];
    std::uniform_int_distribution<std::size_t> pick(0, forms.size() - 1);
    mention.predicate_begin = static_cast<int>(tokens.size());
    detail::append_words(tokens, forms[pick(rng)]);
    mention.predicate_end = static_cast<int>(tokens.size());
    detail::render_entity(world, cfg, scene.objects[r.object], rng, tokens,
                          out.oracle, r.object);
    mention.object_token = out.oracle.entities.back().first;
    out.oracle.relations.push_back(mention);
  }
  out.caption.raw = detail::join(tokens);
  out.caption.tokens = std::move(tokens);
  return out;
}

inline int mentions_for(double coverage, std::size_t num_relations) {
  return static_cast<int>(
      std::ceil(coverage * static_cast<double>(num_relations) - 1e-12));
}

inline RenderedCaption generate_caption(const WorldSpec& world,
                                        const GeneratorConfig& cfg,
                                        const Scene& scene,
                                        std::mt19937_64& rng) {
  std::vector<Relation> pool = scene.gt_relations;
  std::shuffle(pool.begin(), pool.end(), rng);
  pool.resize(static_cast<std::size_t>(
      std::min<int>(mentions_for(cfg.coverage, pool.size()),
                    static_cast<int>(pool.size()))));
  return render_caption(world, cfg, scene, pool, rng);
}

// Scene from explicit objects: relations are derived, captions generated.
inline Scene make_scene(const WorldSpec& world, const GeneratorConfig& cfg,
                        std::string scene_id, std::vector<SceneObject> objects,
                        std::mt19937_64& rng) {
  Scene scene;
  scene.scene_id = std::move(scene_id);
  scene.objects = std::move(objects);
  scene.gt_relations = derive_relations(world, scene.objects);
  OracleAlignment oracle;
  for (int c = 0; c < cfg.captions_per_scene; ++c) {
    RenderedCaption rc = generate_caption(world, cfg, scene, rng);
    scene.captions.push_back(std::move(rc.caption));
    oracle.captions.push_back(std::move(rc.oracle));
  }
  scene.oracle = std::move(oracle);
  return scene;
}

inline Scene generate_scene(const WorldSpec& world, const GeneratorConfig& cfg,
                            std::mt19937_64& rng, std::string scene_id = "") {
  std::uniform_int_distribution<int> count(cfg.min_objects, cfg.max_objects);
  std::uniform_int_distribution<int> cls(0, world.num_classes() - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const int n = count(rng);
  std::vector<SceneObject> objects;
  for (int i = 0; i < n; ++i) {
    SceneObject o;
    o.id = i;
    o.class_id = cls(rng);
    o.box.w = cfg.box_min + (cfg.box_max - cfg.box_min) * unit(rng);
    o.box.h = cfg.box_min + (cfg.box_max - cfg.box_min) * unit(rng);
    o.box.x = (1.0 - o.box.w) * unit(rng);
    o.box.y = (1.0 - o.box.h) * unit(rng);
    o.feature = object_feature(world, o.class_id, o.box, cfg.noise_sigma, rng);
    objects.push_back(std::move(o));
  }
  return make_scene(world, cfg, std::move(scene_id), std::move(objects), rng);
}

struct SplitCounts {
  int train = 0;
  int val = 0;
  int test = 0;
};

inline SplitCounts split_counts(int num_scenes) {
  SplitCounts c;
  c.train = static_cast<int>(std::lround(0.70 * num_scenes));
  c.val = static_cast<int>(std::lround(0.15 * num_scenes));
  c.test = num_scenes - c.train - c.val;
  return c;
}

inline Corpus generate_corpus(const WorldSpec& world,
                              const GeneratorConfig& cfg) {
  cfg.validate();
  world.validate();
  if (cfg.num_scenes < 10) {
    throw ConfigError("too few scenes: need at least 10, got " +
                      std::to_string(cfg.num_scenes));
  }
  Corpus corpus;
  corpus.header = world.header();
  corpus.scenes.resize(static_cast<std::size_t>(cfg.num_scenes));
  const SplitCounts counts = split_counts(cfg.num_scenes);
  parallel_for(corpus.scenes.size(), [&](std::size_t i) {
    std::mt19937_64 rng(derive_seed(cfg.seed, i));
    char id[32];
    std::snprintf(id, sizeof(id), "scene_%06zu", i);
    Scene s = generate_scene(world, cfg, rng, id);
    const int idx = static_cast<int>(i);
    s.split = idx < counts.train               ? "train"
              : idx < counts.train + counts.val ? "val"
                                                : "test";
    corpus.scenes[i] = std::move(s);
  });
  return corpus;
}

}  // namespace capground
