#pragma once

// PredCls evaluation: Recall@K over ranked prediction lists, the caption-only
// and random-ranking baselines, confusion analysis, and report files.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "capground/data_model.hpp"
#include "capground/grounded.hpp"
#include "capground/parallel.hpp"
#include "capground/relclf.hpp"
#include "capground/sgparser.hpp"

namespace capground {

inline bool is_sorted_predictions(const PredictionList& list) {
  for (std::size_t i = 1; i < list.size(); ++i) {
    if (ranks_before(list[i], list[i - 1])) return false;
  }
  return true;
}

// |top-k ∩ gt| / |gt|, matching on (subject, relation, object).
inline double recall_at_k(const PredictionList& predictions,
                          const std::vector<Relation>& gt, std::size_t k) {
  if (!is_sorted_predictions(predictions)) {
    throw ContractError("recall_at_k: predictions are not sorted");
  }
  if (gt.empty()) throw ContractError("recall_at_k: empty ground truth");
  const std::set<Relation> truth(gt.begin(), gt.end());
  std::set<Relation> hit;
  const std::size_t top = std::min(k, predictions.size());
  for (std::size_t i = 0; i < top; ++i) {
    const ScoredTriplet& p = predictions[i];
    Relation r{p.subject, p.relation, p.object};
    if (truth.count(r)) hit.insert(r);
  }
  return static_cast<double>(hit.size()) / static_cast<double>(truth.size());
}

struct RecallSummary {
  std::vector<int> ks;
  std::vector<double> recall;  // parallel to ks
  int scenes_evaluated = 0;
  int scenes_without_gt = 0;

  double at(int k) const {
    for (std::size_t i = 0; i < ks.size(); ++i) {
      if (ks[i] == k) return recall[i];
    }
    throw ContractError("recall not computed for k=" + std::to_string(k));
  }
};

// Macro average over scenes with non-empty ground truth.
inline RecallSummary macro_recall(const std::vector<PredictionList>& predictions,
                                  const Corpus& corpus, const std::vector<int>& ks) {
  if (predictions.size() != corpus.scenes.size()) {
    throw ContractError("one prediction list per scene required");
  }
  RecallSummary out;
  out.ks = ks;
  out.recall.assign(ks.size(), 0.0);
  for (std::size_t s = 0; s < corpus.scenes.size(); ++s) {
    const auto& gt = corpus.scenes[s].gt_relations;
    if (gt.empty()) {
      ++out.scenes_without_gt;
      continue;
    }
    ++out.scenes_evaluated;
    for (std::size_t i = 0; i < ks.size(); ++i) {
      out.recall[i] +=
          recall_at_k(predictions[s], gt, static_cast<std::size_t>(ks[i]));
    }
  }
  if (out.scenes_evaluated > 0) {
    for (double& r : out.recall) r /= out.scenes_evaluated;
  }
  return out;
}

inline std::vector<PredictionList> predict_corpus(const RelationClassifier& model,
                                                  const Corpus& corpus) {
  std::vector<PredictionList> out(corpus.scenes.size());
  parallel_for(corpus.scenes.size(), [&](std::size_t i) {
    out[i] = predict_relations(model, corpus.scenes[i]);
  });
  return out;
}

inline RecallSummary evaluate_predcls(const RelationClassifier& model,
                                      const Corpus& test,
                                      const std::vector<int>& ks = {50, 100}) {
  return macro_recall(predict_corpus(model, test), test, ks);
}

// Entities ground to the first object whose class word equals the lemma;
// every resulting triplet scores 1.0.
inline PredictionList caption_only_predictions(const Scene& scene,
                                               const std::vector<const Caption*>& captions,
                                               const CorpusHeader& header,
                                               const TripletParser& parser,
                                               const PredicateMapping& mapping) {
  auto ground = [&](const std::string& lemma) -> std::optional<int> {
    for (std::size_t i = 0; i < scene.objects.size(); ++i) {
      const auto cls = static_cast<std::size_t>(scene.objects[i].class_id);
      if (cls < header.class_names.size() && header.class_names[cls] == lemma) {
        return static_cast<int>(i);
      }
    }
    return std::nullopt;
  };
  std::set<Relation> seen;
  PredictionList out;
  for (const Caption* c : captions) {
    for (const CanonicalTriplet& ct : parse_and_canonicalize(parser, mapping, *c).mapped) {
      const auto s = ground(ct.triplet.subject.lemma);
      const auto o = ground(ct.triplet.object.lemma);
      if (!s || !o || *s == *o) continue;
      const Relation r{*s, ct.relation.id, *o};
      if (seen.insert(r).second) out.push_back({*s, *o, ct.relation.id, 1.0});
    }
  }
  sort_predictions(out);
  return out;
}

enum class BaselineMode {
  kPerCaption,  // each caption is its own scene graph; recalls averaged
  kPooled,      // one graph from the union of a scene's captions
};

inline RecallSummary caption_only_baseline(const Corpus& test,
                                           const TripletParser& parser,
                                           const PredicateMapping& mapping,
                                           const std::vector<int>& ks = {50, 100},
                                           BaselineMode mode = BaselineMode::kPerCaption) {
  RecallSummary out;
  out.ks = ks;
  out.recall.assign(ks.size(), 0.0);
  std::vector<std::vector<double>> per_scene(test.scenes.size());
  parallel_for(test.scenes.size(), [&](std::size_t i) {
    const Scene& s = test.scenes[i];
    if (s.gt_relations.empty()) return;
    std::vector<std::vector<const Caption*>> groups;
    if (mode == BaselineMode::kPooled || s.captions.empty()) {
      groups.emplace_back();
      for (const Caption& c : s.captions) groups.back().push_back(&c);
    } else {
      for (const Caption& c : s.captions) groups.push_back({&c});
    }
    std::vector<double> r(ks.size(), 0.0);
    for (const auto& group : groups) {
      const PredictionList p =
          caption_only_predictions(s, group, test.header, parser, mapping);
      for (std::size_t k = 0; k < ks.size(); ++k) {
        r[k] += recall_at_k(p, s.gt_relations, static_cast<std::size_t>(ks[k]));
      }
    }
    for (double& v : r) v /= static_cast<double>(groups.size());
    per_scene[i] = std::move(r);
  });
  for (std::size_t i = 0; i < test.scenes.size(); ++i) {
    if (test.scenes[i].gt_relations.empty()) {
      ++out.scenes_without_gt;
      continue;
    }
    ++out.scenes_evaluated;
    for (std::size_t k = 0; k < ks.size(); ++k) out.recall[k] += per_scene[i][k];
  }
  if (out.scenes_evaluated > 0) {
    for (double& r : out.recall) r /= out.scenes_evaluated;
  }
  return out;
}

// Expected recall of a uniformly random ranking of all n(n-1)C candidates:
// each gt triplet lands in the top k with probability min(k, N) / N.
inline double random_ranking_recall(std::size_t n, std::size_t num_relations,
                                    std::size_t k) {
  const std::size_t N = n < 2 ? 0 : n * (n - 1) * num_relations;
  if (N == 0) return 0.0;
  return static_cast<double>(std::min(k, N)) / static_cast<double>(N);
}

inline RecallSummary random_ranking_baseline(const Corpus& test,
                                             const std::vector<int>& ks = {50, 100}) {
  RecallSummary out;
  out.ks = ks;
  out.recall.assign(ks.size(), 0.0);
  const auto C = static_cast<std::size_t>(test.header.num_relations);
  for (const Scene& s : test.scenes) {
    if (s.gt_relations.empty()) {
      ++out.scenes_without_gt;
      continue;
    }
    ++out.scenes_evaluated;
    for (std::size_t i = 0; i < ks.size(); ++i) {
      out.recall[i] += random_ranking_recall(s.objects.size(), C,
                                             static_cast<std::size_t>(ks[i]));
    }
  }
  if (out.scenes_evaluated > 0) {
    for (double& r : out.recall) r /= out.scenes_evaluated;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Confusion analysis

struct ConfusionRow {
  int true_class = 0;
  int support = 0;
  int correct = 0;
  std::vector<std::pair<int, int>> confused;  // (predicted class, count)
};

struct ConfusionTable {
  std::vector<ConfusionRow> rows;
  std::vector<int> omitted;  // classes without examples
};

inline ConfusionTable confusion_table(const RelationClassifier& model,
                                      const GroundedDataset& ds,
                                      const std::vector<std::size_t>& indices,
                                      std::size_t top_m = 5) {
  const auto C = static_cast<std::size_t>(model.num_relations());
  std::vector<std::vector<int>> counts(C, std::vector<int>(C, 0));
  if (!indices.empty()) {
    const Tensor L = model.logits(pair_matrix(ds, indices));
    for (std::size_t r = 0; r < indices.size(); ++r) {
      const double* row = L.data() + r * C;
      const auto pred = static_cast<std::size_t>(std::max_element(row, row + C) - row);
      counts[static_cast<std::size_t>(ds.examples[indices[r]].relation)][pred]++;
    }
  }
  ConfusionTable out;
  for (std::size_t t = 0; t < C; ++t) {
    int support = 0;
    for (int v : counts[t]) support += v;
    if (support == 0) {
      out.omitted.push_back(static_cast<int>(t));
      continue;
    }
    ConfusionRow row;
    row.true_class = static_cast<int>(t);
    row.support = support;
    row.correct = counts[t][t];
    for (std::size_t p = 0; p < C; ++p) {
      if (p != t && counts[t][p] > 0) {
        row.confused.emplace_back(static_cast<int>(p), counts[t][p]);
      }
    }
    std::stable_sort(row.confused.begin(), row.confused.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    if (row.confused.size() > top_m) row.confused.resize(top_m);
    out.rows.push_back(std::move(row));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Report

struct EvalReport {
  std::vector<std::string> relation_names;
  RecallSummary model;
  std::optional<RecallSummary> caption_baseline;
  std::optional<RecallSummary> caption_baseline_pooled;
  std::optional<RecallSummary> random_baseline;
  std::optional<ConfusionTable> confusion;
  std::optional<FrequencyHistogram> frequencies;
  std::optional<GroundingDiagnostics> grounding;
  json config = json::object();
};

namespace detail {

inline json recall_json(const RecallSummary& r) {
  json recalls = json::object();
  for (std::size_t i = 0; i < r.ks.size(); ++i) {
    recalls[std::to_string(r.ks[i])] = r.recall[i];
  }
  return {{"recall", recalls},
          {"scenes_evaluated", r.scenes_evaluated},
          {"scenes_without_gt", r.scenes_without_gt}};
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
  if (!os) throw IoError("write failed: " + path.string());
}

}  // namespace detail

inline json report_to_json(const EvalReport& r) {
  json j;
  j["model"] = detail::recall_json(r.model);
  if (r.caption_baseline) j["caption_baseline"] = detail::recall_json(*r.caption_baseline);
  if (r.caption_baseline_pooled) {
    j["caption_baseline_pooled"] = detail::recall_json(*r.caption_baseline_pooled);
  }
  if (r.random_baseline) j["random_baseline"] = detail::recall_json(*r.random_baseline);
  j["relation_names"] = r.relation_names;
  auto name = [&](int c) {
    return static_cast<std::size_t>(c) < r.relation_names.size()
               ? r.relation_names[static_cast<std::size_t>(c)]
               : std::to_string(c);
  };
  if (r.confusion) {
    json rows = json::array();
    for (const ConfusionRow& row : r.confusion->rows) {
      json confused = json::array();
      for (const auto& [c, n] : row.confused) {
        confused.push_back({{"class", name(c)}, {"count", n}});
      }
      rows.push_back({{"class", name(row.true_class)},
                      {"support", row.support},
                      {"correct", row.correct},
                      {"confused_with", confused}});
    }
    json omitted = json::array();
    for (int c : r.confusion->omitted) omitted.push_back(name(c));
    j["confusion"] = {{"rows", rows}, {"omitted_no_examples", omitted}};
  }
  if (r.frequencies) {
    const FrequencyHistogram& h = *r.frequencies;
    j["frequency_correlation"] = {
        {"caption_counts", h.caption_counts},
        {"gt_counts", h.gt_counts},
        {"spearman", h.spearman ? json(*h.spearman) : json(nullptr)}};
  }
  if (r.grounding) {
    const GroundingDiagnostics& d = *r.grounding;
    j["grounding"] = {{"captions", d.captions},
                      {"triplets", d.triplets},
                      {"skipped_clauses", d.skipped_clauses},
                      {"unmapped", d.unmapped},
                      {"alignment_errors", d.alignment_errors},
                      {"self_pairs", d.self_pairs},
                      {"examples", d.examples}};
  }
  j["config"] = r.config;
  return j;
}

struct Bar {
  std::string label;
  std::vector<double> values;  // one per series
};

// Grouped vertical bar chart as standalone SVG.
inline std::string bar_chart_svg(const std::string& title,
                                 const std::vector<std::string>& series,
                                 const std::vector<Bar>& bars) {
  static const char* kColors[] = {"#4c72b0", "#dd8452", "#55a868", "#c44e52"};
  double vmax = 0.0;
  for (const Bar& b : bars) {
    for (double v : b.values) vmax = std::max(vmax, v);
  }
  if (vmax <= 0.0) vmax = 1.0;
  const double bar_w = 18.0, gap = 14.0, left = 50.0, top = 40.0, plot_h = 200.0;
  const double group_w = bar_w * static_cast<double>(series.size()) + gap;
  const double width = left + group_w * static_cast<double>(bars.size()) + 20.0;
  const double height = top + plot_h + 70.0 + 18.0 * static_cast<double>(series.size());
  std::ostringstream os;
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
     << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << detail::fmt(width)
     << "\" height=\"" << detail::fmt(height) << "\">\n"
     << "  <text x=\"" << detail::fmt(left) << "\" y=\"20\" font-size=\"14\">"
     << detail::xml_escape(title) << "</text>\n"
     << "  <line x1=\"" << detail::fmt(left) << "\" y1=\"" << detail::fmt(top + plot_h)
     << "\" x2=\"" << detail::fmt(width - 10) << "\" y2=\"" << detail::fmt(top + plot_h)
     << "\" stroke=\"black\"/>\n"
     << "  <text x=\"4\" y=\"" << detail::fmt(top + 4) << "\" font-size=\"10\">"
     << detail::fmt(vmax) << "</text>\n";
  for (std::size_t b = 0; b < bars.size(); ++b) {
    const double x0 = left + group_w * static_cast<double>(b) + gap / 2;
    for (std::size_t s = 0; s < bars[b].values.size() && s < series.size(); ++s) {
      const double h = plot_h * bars[b].values[s] / vmax;
      os << "  <rect x=\"" << detail::fmt(x0 + bar_w * static_cast<double>(s))
         << "\" y=\"" << detail::fmt(top + plot_h - h) << "\" width=\""
         << detail::fmt(bar_w - 2) << "\" height=\"" << detail::fmt(h)
         << "\" fill=\"" << kColors[s % 4] << "\"><title>"
         << detail::xml_escape(bars[b].label + " " + series[s] + ": " +
                               detail::fmt(bars[b].values[s]))
         << "</title></rect>\n";
    }
    os << "  <text x=\"" << detail::fmt(x0) << "\" y=\"" << detail::fmt(top + plot_h + 14)
       << "\" font-size=\"10\">" << detail::xml_escape(bars[b].label) << "</text>\n";
  }
  for (std::size_t s = 0; s < series.size(); ++s) {
    const double y = top + plot_h + 40 + 18.0 * static_cast<double>(s);
    os << "  <rect x=\"" << detail::fmt(left) << "\" y=\"" << detail::fmt(y - 10)
       << "\" width=\"10\" height=\"10\" fill=\"" << kColors[s % 4] << "\"/>\n"
       << "  <text x=\"" << detail::fmt(left + 16) << "\" y=\"" << detail::fmt(y)
       << "\" font-size=\"11\">" << detail::xml_escape(series[s]) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

// Writes report.json, recall.csv, confusion.csv, correlation.csv, recall.svg
// and frequency.svg into out_dir.
inline void emit_report(const EvalReport& r, const std::string& out_dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir)) {
    throw IoError("cannot create report directory " + out_dir);
  }
  const fs::path dir(out_dir);
  detail::write_text(dir / "report.json", report_to_json(r).dump(2) + "\n");

  std::vector<std::pair<std::string, const RecallSummary*>> methods = {
      {"model", &r.model}};
  if (r.caption_baseline) methods.emplace_back("caption_baseline", &*r.caption_baseline);
  if (r.caption_baseline_pooled) {
    methods.emplace_back("caption_baseline_pooled", &*r.caption_baseline_pooled);
  }
  if (r.random_baseline) methods.emplace_back("random_baseline", &*r.random_baseline);
  std::string recall_csv = "k,method,recall\n";
  for (const auto& [name, rs] : methods) {
    for (std::size_t i = 0; i < rs->ks.size(); ++i) {
      recall_csv += std::to_string(rs->ks[i]) + "," + name + "," +
                    detail::fmt(rs->recall[i]) + "\n";
    }
  }
  detail::write_text(dir / "recall.csv", recall_csv);

  auto name = [&](int c) {
    return static_cast<std::size_t>(c) < r.relation_names.size()
               ? r.relation_names[static_cast<std::size_t>(c)]
               : std::to_string(c);
  };
  std::string conf_csv = "class,rank,confused_with,count\n";
  if (r.confusion) {
    for (const ConfusionRow& row : r.confusion->rows) {
      for (std::size_t i = 0; i < row.confused.size(); ++i) {
        conf_csv += detail::csv_field(name(row.true_class)) + "," +
                    std::to_string(i + 1) + "," +
                    detail::csv_field(name(row.confused[i].first)) + "," +
                    std::to_string(row.confused[i].second) + "\n";
      }
    }
  }
  detail::write_text(dir / "confusion.csv", conf_csv);

  std::string corr_csv = "class,caption_count,gt_count\n";
  if (r.frequencies) {
    const FrequencyHistogram& h = *r.frequencies;
    for (std::size_t c = 0; c < h.caption_counts.size(); ++c) {
      corr_csv += detail::csv_field(name(static_cast<int>(c))) + "," +
                  detail::fmt(h.caption_counts[c]) + "," + detail::fmt(h.gt_counts[c]) +
                  "\n";
    }
    corr_csv += "spearman,";
    corr_csv += h.spearman ? detail::fmt(*h.spearman) : std::string("nan");
    corr_csv += ",\n";
  }
  detail::write_text(dir / "correlation.csv", corr_csv);

  std::vector<std::string> series;
  for (const auto& m : methods) series.push_back(m.first);
  std::vector<Bar> bars;
  for (std::size_t i = 0; i < r.model.ks.size(); ++i) {
    Bar b{"R@" + std::to_string(r.model.ks[i]), {}};
    for (const auto& m : methods) {
      b.values.push_back(i < m.second->recall.size() ? m.second->recall[i] : 0.0);
    }
    bars.push_back(std::move(b));
  }
  detail::write_text(dir / "recall.svg",
                     bar_chart_svg("PredCls recall", series, bars));
  if (r.frequencies) {
    std::vector<Bar> fbars;
    for (std::size_t c = 0; c < r.frequencies->caption_counts.size(); ++c) {
      fbars.push_back({name(static_cast<int>(c)),
                       {r.frequencies->caption_counts[c], r.frequencies->gt_counts[c]}});
    }
    detail::write_text(dir / "frequency.svg",
                       bar_chart_svg("Relation frequency", {"captions", "ground truth"},
                                     fbars));
  }
}

}  // namespace capground
