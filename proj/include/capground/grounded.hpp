#pragma once

// Grounded relation examples: (subject feature, object feature, class)
// tuples with provenance, and their JSONL file format.

#include <fstream>
#include <string>
#include <vector>

#include "capground/data_model.hpp"

namespace capground {

struct GroundedExample {
  std::string scene_id;
  std::vector<double> subj_feature;
  std::vector<double> obj_feature;
  int relation = 0;
  int caption_index = 0;
  int subject_object = 0;
  int object_object = 0;
  int subject_token = 0;
  int object_token = 0;
  std::string predicate;

  bool operator==(const GroundedExample&) const = default;
};

struct GroundingDiagnostics {
  int captions = 0;
  int triplets = 0;
  int skipped_clauses = 0;
  int unmapped = 0;
  int alignment_errors = 0;
  int self_pairs = 0;
  int examples = 0;

  bool operator==(const GroundingDiagnostics&) const = default;
};

struct GroundedDataset {
  int feature_dim = 0;
  std::vector<std::string> relation_names;
  std::vector<GroundedExample> examples;
  GroundingDiagnostics diagnostics;

  int num_relations() const { return static_cast<int>(relation_names.size()); }
};

// ---------------------------------------------------------------------------
// Grounded dataset file: header line, then one example per line.

inline void save_grounded(const GroundedDataset& ds, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path);
  const auto& d = ds.diagnostics;
  os << json{{"format", "capground-grounded"},
             {"version", 1},
             {"feature_dim", ds.feature_dim},
             {"num_relations", ds.num_relations()},
             {"relation_names", ds.relation_names},
             {"diagnostics",
              {{"captions", d.captions},
               {"triplets", d.triplets},
               {"skipped_clauses", d.skipped_clauses},
               {"unmapped", d.unmapped},
               {"alignment_errors", d.alignment_errors},
               {"self_pairs", d.self_pairs},
               {"examples", d.examples}}}}
            .dump()
     << '\n';
  for (const GroundedExample& ex : ds.examples) {
    std::string line = "{\"scene_id\":";
    detail::append_string(line, ex.scene_id);
    line += ",\"subj_feature\":";
    detail::append_doubles(line, ex.subj_feature);
    line += ",\"obj_feature\":";
    detail::append_doubles(line, ex.obj_feature);
    line += ",\"class\":" + std::to_string(ex.relation) + ",\"provenance\":";
    line += json{{"caption_index", ex.caption_index},
                 {"subject_object", ex.subject_object},
                 {"object_object", ex.object_object},
                 {"subject_token", ex.subject_token},
                 {"object_token", ex.object_token},
                 {"predicate", ex.predicate}}
                .dump();
    line += '}';
    os << line << '\n';
  }
  if (!os) throw IoError("write failed: " + path);
}

inline GroundedDataset load_grounded(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path);
  GroundedDataset ds;
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
    using detail::require;
    if (!have_header) {
      if (j.value("format", std::string()) != "capground-grounded") {
        throw ParseError(line_no, "not a grounded dataset header");
      }
      ds.feature_dim = require<int>(j, "feature_dim", line_no);
      ds.relation_names =
          require<std::vector<std::string>>(j, "relation_names", line_no);
      if (j.contains("diagnostics")) {
        const json& d = j.at("diagnostics");
        auto& g = ds.diagnostics;
        g.captions = d.value("captions", 0);
        g.triplets = d.value("triplets", 0);
        g.skipped_clauses = d.value("skipped_clauses", 0);
        g.unmapped = d.value("unmapped", 0);
        g.alignment_errors = d.value("alignment_errors", 0);
        g.self_pairs = d.value("self_pairs", 0);
        g.examples = d.value("examples", 0);
      }
      have_header = true;
      continue;
    }
    GroundedExample ex;
    ex.scene_id = require<std::string>(j, "scene_id", line_no);
    ex.subj_feature = require<std::vector<double>>(j, "subj_feature", line_no);
    ex.obj_feature = require<std::vector<double>>(j, "obj_feature", line_no);
    ex.relation = require<int>(j, "class", line_no);
    if (static_cast<int>(ex.subj_feature.size()) != ds.feature_dim ||
        static_cast<int>(ex.obj_feature.size()) != ds.feature_dim) {
      throw DimensionMismatch("line " + std::to_string(line_no) +
                              ": grounded feature dimension mismatch");
    }
    if (ex.relation < 0 || ex.relation >= ds.num_relations()) {
      throw ParseError(line_no, "class outside relation range");
    }
    if (j.contains("provenance")) {
      const json& p = j.at("provenance");
      ex.caption_index = p.value("caption_index", 0);
      ex.subject_object = p.value("subject_object", 0);
      ex.object_object = p.value("object_object", 0);
      ex.subject_token = p.value("subject_token", 0);
      ex.object_token = p.value("object_token", 0);
      ex.predicate = p.value("predicate", std::string());
    }
    ds.examples.push_back(std::move(ex));
  }
  if (!have_header) throw ParseError(line_no, "missing grounded header");
  return ds;
}

}  // namespace capground
