#pragma once

// Core domain types shared by every stage: scenes, captions, vocabulary and
// the JSON Lines corpus format.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <compare>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "capground/error.hpp"

namespace capground {

using json = nlohmann::json;

// Normalized (x, y, w, h), y grows downward.
struct Box {
  double x = 0.0;
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;

  double center_x() const { return x + w / 2.0; }
  double center_y() const { return y + h / 2.0; }
  double right() const { return x + w; }
  double bottom() const { return y + h; }
  double area() const { return w * h; }

  bool operator==(const Box&) const = default;
};

struct SceneObject {
  int id = 0;
  int class_id = 0;
  Box box;
  std::vector<double> feature;

  bool operator==(const SceneObject&) const = default;
};

// A directed (subject, relation class, object) triple over object indices.
struct Relation {
  int subject = 0;
  int relation = 0;
  int object = 0;

  auto operator<=>(const Relation&) const = default;
};

struct Caption {
  std::string raw;
  std::vector<std::string> tokens;

  bool operator==(const Caption&) const = default;
};

// One relation mention inside a caption together with where it was rendered.
struct OracleMention {
  int subject = 0;
  int relation = 0;
  int object = 0;
  int subject_token = 0;
  int object_token = 0;
  int predicate_begin = 0;
  int predicate_end = 0;

  bool operator==(const OracleMention&) const = default;
};

struct CaptionOracle {
  std::vector<std::pair<int, int>> entities;  // token index -> object index
  std::vector<OracleMention> relations;

  bool operator==(const CaptionOracle&) const = default;
};

struct OracleAlignment {
  std::vector<CaptionOracle> captions;  // parallel to Scene::captions

  bool operator==(const OracleAlignment&) const = default;
};

struct Scene {
  std::string scene_id;
  std::string split;  // "train", "val", "test" or empty
  std::vector<SceneObject> objects;
  std::vector<Relation> gt_relations;  // sorted, unique
  std::vector<Caption> captions;
  std::optional<OracleAlignment> oracle;

  bool operator==(const Scene&) const = default;
};

struct CorpusHeader {
  int feature_dim = 0;
  int num_classes = 0;
  int num_relations = 0;
  std::vector<std::string> class_names;
  std::vector<std::string> relation_names;

  bool operator==(const CorpusHeader&) const = default;
};

struct Corpus {
  CorpusHeader header;
  std::vector<Scene> scenes;

  bool operator==(const Corpus&) const = default;

  // Scenes whose split equals `split`; "all" or "" keeps everything.
  Corpus subset(std::string_view split) const {
    Corpus out;
    out.header = header;
    for (const Scene& s : scenes) {
      if (split.empty() || split == "all" || s.split == split) {
        out.scenes.push_back(s);
      }
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Tokenization

inline std::vector<std::string> tokenize(std::string_view raw) {
  std::vector<std::string> tokens;
  std::string current;
  auto flush = [&] {
    while (!current.empty() &&
           (current.back() == '.' || current.back() == ',' ||
            current.back() == '!')) {
      current.pop_back();
    }
    if (!current.empty()) tokens.push_back(current);
    current.clear();
  };
  for (char ch : raw) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      flush();
    } else {
      current.push_back(
          static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  flush();
  if (tokens.empty()) throw EmptyCaption();
  return tokens;
}

inline Caption make_caption(std::string raw) {
  Caption c;
  c.tokens = tokenize(raw);
  c.raw = std::move(raw);
  return c;
}

// ---------------------------------------------------------------------------
// Vocabulary

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;
  static constexpr int kNumReserved = 4;

  Vocabulary() {
    for (const char* w : {"<pad>", "<bos>", "<eos>", "<unk>"}) add(w);
  }

  // Frequency-descending, ties broken lexicographically.
  static Vocabulary build(const std::vector<Caption>& corpus, int min_count) {
    if (min_count < 1) throw ConfigError("min_count must be >= 1");
    std::map<std::string, int> counts;
    for (const Caption& c : corpus) {
      for (const std::string& t : c.tokens) ++counts[t];
    }
    std::vector<std::pair<std::string, int>> ordered(counts.begin(),
                                                     counts.end());
    std::stable_sort(ordered.begin(), ordered.end(),
                     [](const auto& a, const auto& b) {
                       return a.second > b.second;
                     });
    Vocabulary v;
    for (const auto& [word, count] : ordered) {
      if (count >= min_count && !v.contains(word)) v.add(word);
    }
    return v;
  }

  // Rebuilds a vocabulary from an explicit id -> word listing.
  static Vocabulary from_words(const std::vector<std::string>& words) {
    Vocabulary v;
    if (words.size() < kNumReserved) {
      throw ConfigError("vocabulary listing lacks reserved symbols");
    }
    for (std::size_t i = 0; i < kNumReserved; ++i) {
      if (words[i] != v.words_[i]) {
        throw ConfigError("vocabulary reserved symbol mismatch");
      }
    }
    for (std::size_t i = kNumReserved; i < words.size(); ++i) {
      if (v.contains(words[i])) throw ConfigError("duplicate vocabulary word");
      v.add(words[i]);
    }
    return v;
  }

  int size() const { return static_cast<int>(words_.size()); }
  bool contains(const std::string& w) const { return ids_.count(w) != 0; }

  int encode(const std::string& w) const {
    auto it = ids_.find(w);
    return it == ids_.end() ? kUnk : it->second;
  }

  const std::string& decode(int id) const {
    if (id < 0 || id >= size()) {
      throw VocabError("token id " + std::to_string(id) + " out of range");
    }
    return words_[static_cast<std::size_t>(id)];
  }

  std::vector<int> encode(const std::vector<std::string>& tokens) const {
    std::vector<int> ids;
    ids.reserve(tokens.size());
    for (const auto& t : tokens) ids.push_back(encode(t));
    return ids;
  }

  const std::vector<std::string>& words() const { return words_; }

  bool operator==(const Vocabulary& o) const { return words_ == o.words_; }

 private:
  void add(const std::string& w) {
    ids_.emplace(w, size());
    words_.push_back(w);
  }

  std::vector<std::string> words_;
  std::unordered_map<std::string, int> ids_;
};

inline std::vector<Caption> all_captions(const Corpus& corpus) {
  std::vector<Caption> out;
  for (const Scene& s : corpus.scenes) {
    out.insert(out.end(), s.captions.begin(), s.captions.end());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Validation

inline bool is_finite(const std::vector<double>& v) {
  return std::all_of(v.begin(), v.end(),
                     [](double x) { return std::isfinite(x); });
}

inline void validate_scene(const Scene& scene, const CorpusHeader& header) {
  const int n = static_cast<int>(scene.objects.size());
  if (n < 1) throw ContractError(scene.scene_id + ": scene has no objects");
  for (const SceneObject& o : scene.objects) {
    const Box& b = o.box;
    if (!(b.w > 0 && b.h > 0 && b.x >= 0 && b.y >= 0 && b.x + b.w <= 1.0 + 1e-12 &&
          b.y + b.h <= 1.0 + 1e-12)) {
      throw ContractError(scene.scene_id + ": degenerate box");
    }
    if (static_cast<int>(o.feature.size()) != header.feature_dim) {
      throw DimensionMismatch(scene.scene_id + ": feature dimension " +
                              std::to_string(o.feature.size()) + " != " +
                              std::to_string(header.feature_dim));
    }
    if (!is_finite(o.feature)) {
      throw NumericalError(scene.scene_id + ": non-finite feature");
    }
  }
  for (const Relation& r : scene.gt_relations) {
    if (r.subject < 0 || r.subject >= n || r.object < 0 || r.object >= n ||
        r.subject == r.object || r.relation < 0 ||
        (header.num_relations > 0 && r.relation >= header.num_relations)) {
      throw ContractError(scene.scene_id + ": invalid relation indices");
    }
  }
  if (scene.captions.empty()) {
    throw ContractError(scene.scene_id + ": scene has no captions");
  }
  if (scene.oracle) {
    if (scene.oracle->captions.size() != scene.captions.size()) {
      throw ContractError(scene.scene_id + ": oracle/caption count mismatch");
    }
    for (const CaptionOracle& co : scene.oracle->captions) {
      for (const auto& [tok, obj] : co.entities) {
        if (obj < 0 || obj >= n || tok < 0) {
          throw ContractError(scene.scene_id + ": oracle entity out of range");
        }
      }
      for (const OracleMention& m : co.relations) {
        if (m.subject < 0 || m.subject >= n || m.object < 0 || m.object >= n) {
          throw ContractError(scene.scene_id + ": oracle relation out of range");
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Serialization

namespace detail {

inline void append_double(std::string& out, double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  out += buf;
}

inline void append_doubles(std::string& out, const std::vector<double>& v) {
  out += '[';
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    append_double(out, v[i]);
  }
  out += ']';
}

inline void append_string(std::string& out, const std::string& s) {
  out += json(s).dump();
}

template <typename T>
T require(const json& j, const char* key, std::size_t line) {
  if (!j.is_object() || !j.contains(key)) {
    throw ParseError(line, std::string("missing key \"") + key + "\"");
  }
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ParseError(line, std::string("bad value for \"") + key + "\": " +
                               e.what());
  }
}

}  // namespace detail

inline std::string header_to_line(const CorpusHeader& h) {
  json j = {{"format", "capground-corpus"},
            {"version", 1},
            {"feature_dim", h.feature_dim},
            {"num_classes", h.num_classes},
            {"num_relations", h.num_relations},
            {"class_names", h.class_names},
            {"relation_names", h.relation_names}};
  return j.dump();
}

inline std::string scene_to_line(const Scene& s) {
  using detail::append_double;
  using detail::append_doubles;
  using detail::append_string;
  std::string out = "{\"scene_id\":";
  append_string(out, s.scene_id);
  if (!s.split.empty()) {
    out += ",\"split\":";
    append_string(out, s.split);
  }
  out += ",\"objects\":[";
  for (std::size_t i = 0; i < s.objects.size(); ++i) {
    const SceneObject& o = s.objects[i];
    if (i) out += ',';
    out += "{\"class_id\":" + std::to_string(o.class_id) + ",\"box\":";
    append_doubles(out, {o.box.x, o.box.y, o.box.w, o.box.h});
    out += ",\"feature\":";
    append_doubles(out, o.feature);
    out += '}';
  }
  out += "],\"gt_relations\":[";
  for (std::size_t i = 0; i < s.gt_relations.size(); ++i) {
    const Relation& r = s.gt_relations[i];
    if (i) out += ',';
    out += '[' + std::to_string(r.subject) + ',' + std::to_string(r.relation) +
           ',' + std::to_string(r.object) + ']';
  }
  out += "],\"captions\":[";
  for (std::size_t i = 0; i < s.captions.size(); ++i) {
    if (i) out += ',';
    append_string(out, s.captions[i].raw);
  }
  out += "],\"oracle\":";
  if (!s.oracle) {
    out += "null";
  } else {
    json captions = json::array();
    for (const CaptionOracle& co : s.oracle->captions) {
      json ents = json::array();
      for (const auto& [tok, obj] : co.entities) ents.push_back({tok, obj});
      json rels = json::array();
      for (const OracleMention& m : co.relations) {
        rels.push_back({{"subject", m.subject},
                        {"relation", m.relation},
                        {"object", m.object},
                        {"subject_token", m.subject_token},
                        {"object_token", m.object_token},
                        {"predicate", {m.predicate_begin, m.predicate_end}}});
      }
      captions.push_back({{"entities", ents}, {"relations", rels}});
    }
    out += json{{"captions", captions}}.dump();
  }
  out += '}';
  return out;
}

inline CorpusHeader header_from_json(const json& j, std::size_t line) {
  using detail::require;
  if (!j.is_object() || require<std::string>(j, "format", line) !=
                            "capground-corpus") {
    throw ParseError(line, "not a capground corpus header");
  }
  if (require<int>(j, "version", line) != 1) {
    throw ParseError(line, "unsupported corpus version");
  }
  CorpusHeader h;
  h.feature_dim = require<int>(j, "feature_dim", line);
  h.num_classes = require<int>(j, "num_classes", line);
  h.num_relations = require<int>(j, "num_relations", line);
  if (j.contains("class_names")) {
    h.class_names = require<std::vector<std::string>>(j, "class_names", line);
  }
  if (j.contains("relation_names")) {
    h.relation_names =
        require<std::vector<std::string>>(j, "relation_names", line);
  }
  if (h.feature_dim <= 0) throw ParseError(line, "feature_dim must be > 0");
  return h;
}

inline Scene scene_from_json(const json& j, std::size_t line) {
  using detail::require;
  if (!j.is_object()) throw ParseError(line, "scene record is not an object");
  Scene s;
  s.scene_id = require<std::string>(j, "scene_id", line);
  if (j.contains("split")) s.split = require<std::string>(j, "split", line);
  const json objects = require<json>(j, "objects", line);
  if (!objects.is_array()) throw ParseError(line, "\"objects\" is not a list");
  int idx = 0;
  for (const json& o : objects) {
    SceneObject obj;
    obj.id = idx++;
    obj.class_id = require<int>(o, "class_id", line);
    auto box = require<std::vector<double>>(o, "box", line);
    if (box.size() != 4) throw ParseError(line, "box must have 4 values");
    obj.box = {box[0], box[1], box[2], box[3]};
    obj.feature = require<std::vector<double>>(o, "feature", line);
    s.objects.push_back(std::move(obj));
  }
  for (const auto& r :
       require<std::vector<std::vector<int>>>(j, "gt_relations", line)) {
    if (r.size() != 3) throw ParseError(line, "relation must be [s,c,o]");
    s.gt_relations.push_back({r[0], r[1], r[2]});
  }
  std::sort(s.gt_relations.begin(), s.gt_relations.end());
  s.gt_relations.erase(
      std::unique(s.gt_relations.begin(), s.gt_relations.end()),
      s.gt_relations.end());
  for (const auto& raw : require<std::vector<std::string>>(j, "captions", line)) {
    try {
      s.captions.push_back(make_caption(raw));
    } catch (const EmptyCaption&) {
      throw ParseError(line, "empty caption");
    }
  }
  if (j.contains("oracle") && !j.at("oracle").is_null()) {
    OracleAlignment oracle;
    for (const json& c : require<json>(j.at("oracle"), "captions", line)) {
      CaptionOracle co;
      for (const auto& e :
           require<std::vector<std::vector<int>>>(c, "entities", line)) {
        if (e.size() != 2) throw ParseError(line, "entity must be [tok,obj]");
        co.entities.emplace_back(e[0], e[1]);
      }
      for (const json& r : require<json>(c, "relations", line)) {
        OracleMention m;
        m.subject = require<int>(r, "subject", line);
        m.relation = require<int>(r, "relation", line);
        m.object = require<int>(r, "object", line);
        m.subject_token = require<int>(r, "subject_token", line);
        m.object_token = require<int>(r, "object_token", line);
        auto span = require<std::vector<int>>(r, "predicate", line);
        if (span.size() != 2) throw ParseError(line, "predicate span");
        m.predicate_begin = span[0];
        m.predicate_end = span[1];
        co.relations.push_back(m);
      }
      oracle.captions.push_back(std::move(co));
    }
    s.oracle = std::move(oracle);
  }
  return s;
}

inline void write_corpus(std::ostream& os, const Corpus& corpus) {
  os << header_to_line(corpus.header) << '\n';
  for (const Scene& s : corpus.scenes) os << scene_to_line(s) << '\n';
}

inline void save_corpus(const Corpus& corpus, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path);
  write_corpus(os, corpus);
  if (!os) throw IoError("write failed: " + path);
}

inline Corpus read_corpus(std::istream& is) {
  Corpus corpus;
  std::string line;
  std::size_t line_no = 0;
  bool have_header = false;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(line_no, e.what());
    }
    if (!have_header) {
      corpus.header = header_from_json(j, line_no);
      have_header = true;
      continue;
    }
    Scene s = scene_from_json(j, line_no);
    for (const SceneObject& o : s.objects) {
      if (static_cast<int>(o.feature.size()) != corpus.header.feature_dim) {
        throw DimensionMismatch("line " + std::to_string(line_no) +
                                ": feature dimension " +
                                std::to_string(o.feature.size()) +
                                " in a corpus of dimension " +
                                std::to_string(corpus.header.feature_dim));
      }
    }
    try {
      validate_scene(s, corpus.header);
    } catch (const DimensionMismatch&) {
      throw;
    } catch (const Error& e) {
      throw ParseError(line_no, e.what());
    }
    corpus.scenes.push_back(std::move(s));
  }
  if (!have_header) throw ParseError(line_no, "missing corpus header");
  return corpus;
}

inline Corpus load_corpus(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path);
  return read_corpus(is);
}

}  // namespace capground
