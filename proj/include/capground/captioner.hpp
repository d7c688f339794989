#pragma once

// Grounding module: a two-layer LSTM captioner with top-down attention over
// object features. The lower (attention) LSTM reads [embed(w_{t-1}); mean
// feature; h_lm], its hidden state queries the object features, and the upper
// (language) LSTM reads [h_att; context] and predicts w_t. Entity groundings
// are the argmax of the attention distribution recorded at the step that
// predicts the entity word under teacher forcing.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "capground/data_model.hpp"
#include "capground/grounded.hpp"
#include "capground/nn.hpp"
#include "capground/parallel.hpp"
#include "capground/sgparser.hpp"
#include "capground/tensor.hpp"

namespace capground {

struct CaptionerConfig {
  int embed_dim = 64;
  int hidden = 128;
  int attention_dim = 64;
  double lr = 1e-3;
  int epochs = 40;
  int batch_size = 16;
  int min_count = 1;
  double clip_norm = 5.0;
  double embed_sigma = 0.1;
  std::uint64_t seed = 42;

  void validate() const {
    if (embed_dim <= 0 || hidden <= 0 || attention_dim <= 0) {
      throw ConfigError("captioner dimensions must be positive");
    }
    if (!(lr >= 0.0) || epochs < 0 || batch_size <= 0 || min_count < 1 ||
        !(clip_norm > 0.0)) {
      throw ConfigError("invalid captioner training settings");
    }
  }
};

// rows[t] is the attention over the scene's objects at the step whose
// prediction target is token t (rows[k] belongs to <eos>).
struct AttentionTrace {
  std::vector<std::vector<double>> rows;
};

// Lowest index wins ties.
inline int argmax_lowest(const std::vector<double>& v) {
  if (v.empty()) throw EmptyKeysError();
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return static_cast<int>(best);
}

class Captioner {
 public:
  Captioner(Vocabulary vocab, int feature_dim, const CaptionerConfig& cfg)
      : vocab_(std::move(vocab)), feature_dim_(feature_dim), config_(cfg) {
    cfg.validate();
    if (feature_dim <= 0) throw ConfigError("feature_dim must be positive");
    std::mt19937_64 rng(cfg.seed);
    const auto V = static_cast<std::size_t>(vocab_.size());
    const auto e = static_cast<std::size_t>(cfg.embed_dim);
    const auto d = static_cast<std::size_t>(feature_dim);
    const auto H = static_cast<std::size_t>(cfg.hidden);
    const auto A = static_cast<std::size_t>(cfg.attention_dim);
    embedding_ = &params_.add("embed", gaussian_init(V, e, cfg.embed_sigma, rng));
    att_lstm_ = LstmParams::create(params_, "att_lstm", e + d + H, H, rng);
    attention_ = AttentionParams::create(params_, "attention", H, d, A, rng);
    lm_lstm_ = LstmParams::create(params_, "lm_lstm", H + d, H, rng);
    output_ = LinearParams::create(params_, "output", H, V, rng);
  }

  const Vocabulary& vocab() const { return vocab_; }
  int feature_dim() const { return feature_dim_; }
  const CaptionerConfig& config() const { return config_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }

  // One item of a teacher-forced batch: the scene's object features and the
  // caption as token ids (without <bos>/<eos>).
  struct Item {
    const Scene* scene = nullptr;
    std::vector<int> tokens;
  };

  struct BatchResult {
    Var loss;                                   // mean over items of mean NLL
    std::vector<double> item_nll;               // per-item mean NLL
    std::vector<AttentionTrace> traces;         // filled when requested
  };

  std::vector<int> encode(const Caption& c) const { return vocab_.encode(c.tokens); }

  BatchResult forward(Graph& g, std::span<const Item> items,
                      bool record_traces) const {
    if (items.empty()) throw ContractError("empty caption batch");
    const std::size_t B = items.size();
    const auto d = static_cast<std::size_t>(feature_dim_);
    const auto H = static_cast<std::size_t>(config_.hidden);
    const int V = vocab_.size();
    std::size_t n_max = 0, steps = 0;
    for (const Item& it : items) {
      if (it.scene->objects.empty()) throw EmptyKeysError();
      n_max = std::max(n_max, it.scene->objects.size());
      steps = std::max(steps, it.tokens.size() + 1);
      for (int id : it.tokens) {
        if (id < 0 || id >= V) {
          throw VocabError("token id " + std::to_string(id) +
                           " outside vocabulary of " + std::to_string(V));
        }
      }
    }

    Tensor keys = Tensor::matrix(B * n_max, d);
    Tensor mean_feature = Tensor::matrix(B, d);
    std::vector<std::uint8_t> mask(B * n_max, 0);
    for (std::size_t b = 0; b < B; ++b) {
      const auto& objs = items[b].scene->objects;
      for (std::size_t i = 0; i < objs.size(); ++i) {
        if (objs[i].feature.size() != d) {
          throw DimensionMismatch("object feature dimension " +
                                  std::to_string(objs[i].feature.size()) +
                                  " != " + std::to_string(d));
        }
        std::copy(objs[i].feature.begin(), objs[i].feature.end(),
                  keys.data() + (b * n_max + i) * d);
        mask[b * n_max + i] = 1;
        for (std::size_t k = 0; k < d; ++k) {
          mean_feature[b * d + k] += objs[i].feature[k];
        }
      }
      for (std::size_t k = 0; k < d; ++k) {
        mean_feature[b * d + k] /= static_cast<double>(objs.size());
      }
    }

    const auto e = static_cast<std::size_t>(config_.embed_dim);
    const auto embed = g.param(*embedding_);
    const auto att = att_lstm_.bind(g);
    const auto attn = attention_.bind(g);
    const auto lm = lm_lstm_.bind(g);
    const auto out = output_.bind(g);
    Var fbar = g.constant(std::move(mean_feature));
    AttentionKeys attn_keys =
        prepare_keys(g.constant(std::move(keys)), n_max, std::move(mask), attn);
    // Step-invariant gate terms of the attention LSTM: the embedding rows
    // become a V x 4H lookup table and the mean feature a per-row offset.
    Var embed_gates = ops::matmul(embed, ops::slice_rows(att.weight, 0, e));
    Var fbar_gates = ops::matmul(fbar, ops::slice_rows(att.weight, e, d));

    LstmState att_state{g.constant(Tensor::matrix(B, H)),
                        g.constant(Tensor::matrix(B, H))};
    LstmState lm_state{g.constant(Tensor::matrix(B, H)),
                       g.constant(Tensor::matrix(B, H))};

    BatchResult result;
    result.item_nll.assign(B, 0.0);
    if (record_traces) result.traces.resize(B);
    std::vector<Var> step_losses;
    std::vector<int> inputs(B), targets(B);
    std::vector<double> weights(B), unit_weights(B);
    for (std::size_t t = 0; t < steps; ++t) {
      for (std::size_t b = 0; b < B; ++b) {
        const auto& toks = items[b].tokens;
        const std::size_t len = toks.size() + 1;
        inputs[b] = t == 0 ? Vocabulary::kBos
                           : (t - 1 < toks.size() ? toks[t - 1] : Vocabulary::kPad);
        if (t < len) {
          targets[b] = t < toks.size() ? toks[t] : Vocabulary::kEos;
          unit_weights[b] = 1.0 / static_cast<double>(len);
          weights[b] = unit_weights[b] / static_cast<double>(B);
        } else {
          targets[b] = Vocabulary::kPad;
          unit_weights[b] = 0.0;
          weights[b] = 0.0;
        }
      }
      Var extra = ops::add(ops::embedding(embed_gates, inputs), fbar_gates);
      att_state = lstm_cell_blocks({{lm_state.h, e + d}, {att_state.h, e + d + H}},
                                   att_state.c, att, &extra);
      AttentionResult a = additive_attention(att_state.h, attn_keys, attn);
      lm_state = lstm_cell_blocks(
          {{att_state.h, 0}, {a.context, H}, {lm_state.h, H + d}}, lm_state.c, lm);
      Var logits = linear(lm_state.h, out);
      step_losses.push_back(ops::cross_entropy(logits, targets, weights));

      // Per-item NLL bookkeeping, evaluated on values only.
      const Tensor& L = logits.value();
      const std::size_t Vs = L.cols();
      for (std::size_t b = 0; b < B; ++b) {
        if (unit_weights[b] == 0.0) continue;
        const double* row = L.data() + b * Vs;
        const double mx = *std::max_element(row, row + Vs);
        double s = 0.0;
        for (std::size_t j = 0; j < Vs; ++j) s += std::exp(row[j] - mx);
        result.item_nll[b] +=
            unit_weights[b] *
            (mx + std::log(s) - row[static_cast<std::size_t>(targets[b])]);
        if (record_traces) {
          const Tensor& P = a.probs.value();
          const std::size_t n = items[b].scene->objects.size();
          result.traces[b].rows.emplace_back(P.data() + b * n_max,
                                             P.data() + b * n_max + n);
        }
      }
    }
    Var total = step_losses.front();
    for (std::size_t i = 1; i < step_losses.size(); ++i) {
      total = ops::add(total, step_losses[i]);
    }
    result.loss = total;
    return result;
  }

  // Mean negative log-likelihood of <bos> w_1..w_k <eos> under teacher forcing.
  double caption_nll(const Scene& scene, const std::vector<int>& tokens) const {
    Graph g(false);
    Item item{&scene, tokens};
    return forward(g, std::span<const Item>(&item, 1), false).loss.value()[0];
  }

  double caption_nll(const Scene& scene, const Caption& caption) const {
    return caption_nll(scene, encode(caption));
  }

  AttentionTrace trace(const Scene& scene, const Caption& caption) const {
    Graph g(false);
    Item item{&scene, encode(caption)};
    return std::move(
        forward(g, std::span<const Item>(&item, 1), true).traces.front());
  }

  // Traces for every caption of a scene in one batch.
  std::vector<AttentionTrace> traces(const Scene& scene) const {
    Graph g(false);
    std::vector<Item> items;
    for (const Caption& c : scene.captions) items.push_back({&scene, encode(c)});
    return std::move(forward(g, items, true).traces);
  }

  std::vector<NamedTensor> to_tensors() const {
    std::vector<NamedTensor> out = parameters_to_tensors(params_);
    for (int id = 0; id < vocab_.size(); ++id) {
      out.push_back({"vocab/" + vocab_.decode(id),
                     Tensor({}, std::vector<double>{static_cast<double>(id)})});
    }
    return out;
  }

  static Captioner from_tensors(const std::vector<NamedTensor>& tensors) {
    std::vector<std::pair<int, std::string>> entries;
    auto find = [&](const std::string& name) -> const Tensor& {
      for (const auto& t : tensors) {
        if (t.name == name) return t.tensor;
      }
      throw IoError("captioner checkpoint lacks " + name);
    };
    for (const auto& t : tensors) {
      if (t.name.rfind("vocab/", 0) == 0) {
        entries.emplace_back(static_cast<int>(t.tensor[0]), t.name.substr(6));
      }
    }
    std::sort(entries.begin(), entries.end());
    std::vector<std::string> words;
    for (std::size_t i = 0; i < entries.size(); ++i) {
      if (entries[i].first != static_cast<int>(i)) {
        throw IoError("captioner checkpoint has a gap in vocabulary ids");
      }
      words.push_back(entries[i].second);
    }
    CaptionerConfig cfg;
    cfg.embed_dim = static_cast<int>(find("embed").cols());
    cfg.hidden = static_cast<int>(find("att_lstm.bias").cols() / 4);
    cfg.attention_dim = static_cast<int>(find("attention.query").cols());
    const int d = static_cast<int>(find("attention.key").rows());
    Captioner model(Vocabulary::from_words(words), d, cfg);
    load_parameters(model.params_, tensors);
    return model;
  }

  void save(const std::string& path) const { save_checkpoint(path, to_tensors()); }
  static Captioner load(const std::string& path) {
    return from_tensors(load_checkpoint(path));
  }

 private:
  Vocabulary vocab_;
  int feature_dim_;
  CaptionerConfig config_;
  ParameterSet params_;
  Parameter* embedding_ = nullptr;
  LstmParams att_lstm_;
  AttentionParams attention_;
  LstmParams lm_lstm_;
  LinearParams output_;
};

// ---------------------------------------------------------------------------
// Training

struct CaptionerTraining {
  std::unique_ptr<Captioner> model;
  std::vector<double> loss_curve;  // mean training NLL per epoch
};

inline CaptionerTraining train_captioner(const Corpus& train,
                                         const CaptionerConfig& cfg,
                                         std::ostream* log = nullptr) {
  cfg.validate();
  std::vector<Caption> caps = all_captions(train);
  if (caps.empty()) throw ConfigError("training corpus has no captions");
  CaptionerTraining out;
  out.model = std::make_unique<Captioner>(
      Vocabulary::build(caps, cfg.min_count), train.header.feature_dim, cfg);
  Captioner& model = *out.model;

  std::vector<Captioner::Item> items;
  for (const Scene& s : train.scenes) {
    for (const Caption& c : s.captions) items.push_back({&s, model.encode(c)});
  }
  std::mt19937_64 rng(derive_seed(cfg.seed, 1));
  AdamState adam;
  std::vector<std::size_t> order(items.size());
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    // Length bucketing: sort windows of 8 batches by caption length, then
    // visit the resulting batches in shuffled order.
    const std::size_t window = 8 * bs;
    for (std::size_t w = 0; w < order.size(); w += window) {
      std::stable_sort(order.begin() + static_cast<std::ptrdiff_t>(w),
                       order.begin() + static_cast<std::ptrdiff_t>(
                                           std::min(order.size(), w + window)),
                       [&](std::size_t a, std::size_t b) {
                         return items[a].tokens.size() < items[b].tokens.size();
                       });
    }
    std::vector<std::size_t> starts;
    for (std::size_t s = 0; s < order.size(); s += bs) starts.push_back(s);
    std::shuffle(starts.begin(), starts.end(), rng);
    double total = 0.0;
    for (const std::size_t start : starts) {
      const std::size_t end = std::min(order.size(), start + bs);
      std::vector<Captioner::Item> batch;
      for (std::size_t i = start; i < end; ++i) batch.push_back(items[order[i]]);
      model.params().zero_grad();
      double loss = 0.0;
      try {
        Graph g;
        auto r = model.forward(g, batch, false);
        loss = r.loss.value()[0];
        g.backward(r.loss);
      } catch (const NumericalError& e) {
        throw NumericalError("captioner diverged in epoch " +
                             std::to_string(epoch) + ": " + e.what());
      }
      if (!std::isfinite(loss)) {
        throw NumericalError("captioner loss is not finite in epoch " +
                             std::to_string(epoch));
      }
      clip_grad_norm(model.params(), cfg.clip_norm);
      adam_step(model.params(), adam, cfg.lr);
      total += loss * static_cast<double>(end - start);
    }
    out.loss_curve.push_back(total / static_cast<double>(items.size()));
    if (log) {
      *log << "captioner epoch " << epoch + 1 << "/" << cfg.epochs
           << " loss " << out.loss_curve.back() << "\n";
      log->flush();
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Grounding

struct EntityGrounding {
  int token = 0;
  int object = 0;
};

struct RelationGrounding {
  Triplet triplet;
  int subject_object = 0;
  int object_object = 0;
};

struct GroundedRelations {
  std::vector<EntityGrounding> entities;
  std::vector<RelationGrounding> relations;
  int alignment_errors = 0;
};

// Source of per-token attention rows for a caption.
class Grounder {
 public:
  virtual ~Grounder() = default;
  virtual std::vector<AttentionTrace> traces(const Scene& scene) const = 0;
};

class CaptionerGrounder : public Grounder {
 public:
  explicit CaptionerGrounder(const Captioner& model) : model_(model) {}
  std::vector<AttentionTrace> traces(const Scene& scene) const override {
    return model_.traces(scene);
  }

 private:
  const Captioner& model_;
};

// One-hot rows at oracle entity tokens, uniform elsewhere.
class OracleGrounder : public Grounder {
 public:
  std::vector<AttentionTrace> traces(const Scene& scene) const override {
    if (!scene.oracle) throw OracleMissing();
    const std::size_t n = scene.objects.size();
    std::vector<AttentionTrace> out;
    for (std::size_t c = 0; c < scene.captions.size(); ++c) {
      AttentionTrace t;
      t.rows.assign(scene.captions[c].tokens.size() + 1,
                    std::vector<double>(n, 1.0 / static_cast<double>(n)));
      for (const auto& [tok, obj] : scene.oracle->captions[c].entities) {
        auto& row = t.rows[static_cast<std::size_t>(tok)];
        std::fill(row.begin(), row.end(), 0.0);
        row[static_cast<std::size_t>(obj)] = 1.0;
      }
      out.push_back(std::move(t));
    }
    return out;
  }
};

inline GroundedRelations ground_caption(const AttentionTrace& trace,
                                        const std::vector<Triplet>& triplets) {
  GroundedRelations out;
  const int k = static_cast<int>(trace.rows.size());
  auto in_range = [&](int tok) { return tok >= 0 && tok < k; };
  for (const EntityMention& e : extract_entity_relation_sets(triplets).entities) {
    if (!in_range(e.head)) continue;
    out.entities.push_back(
        {e.head, argmax_lowest(trace.rows[static_cast<std::size_t>(e.head)])});
  }
  for (const Triplet& t : triplets) {
    try {
      if (!in_range(t.subject.head) || !in_range(t.object.head)) {
        throw AlignmentError("triplet head index outside caption");
      }
      out.relations.push_back(
          {t, argmax_lowest(trace.rows[static_cast<std::size_t>(t.subject.head)]),
           argmax_lowest(trace.rows[static_cast<std::size_t>(t.object.head)])});
    } catch (const AlignmentError&) {
      ++out.alignment_errors;
    }
  }
  return out;
}

inline GroundedRelations ground_caption(const Captioner& model,
                                        const Scene& scene,
                                        const Caption& caption,
                                        const std::vector<Triplet>& triplets) {
  return ground_caption(model.trace(scene, caption), triplets);
}

// ---------------------------------------------------------------------------
// Grounded dataset

// Supplies the parse of caption c of a scene.
using TripletSource = std::function<ParseResult(const Scene&, std::size_t)>;

inline TripletSource parser_source(const TripletParser& parser) {
  return [&parser](const Scene& s, std::size_t c) {
    return parser.parse(s.captions[c].tokens);
  };
}

inline TripletSource table_source(const ParsedTriplets& table) {
  return [&table](const Scene& s, std::size_t c) {
    auto it = table.find({s.scene_id, static_cast<int>(c)});
    if (it == table.end()) {
      throw ContractError("no parsed triplets for " + s.scene_id + " caption " +
                          std::to_string(c));
    }
    return it->second;
  };
}

inline GroundedDataset build_grounded_dataset(const Grounder& grounder,
                                              const Corpus& corpus,
                                              const TripletSource& triplets,
                                              const PredicateMapping& mapping) {
  struct SceneOut {
    std::vector<GroundedExample> examples;
    GroundingDiagnostics diag;
  };
  std::vector<SceneOut> per_scene(corpus.scenes.size());
  parallel_for(corpus.scenes.size(), [&](std::size_t si) {
    const Scene& scene = corpus.scenes[si];
    SceneOut& so = per_scene[si];
    const std::vector<AttentionTrace> traces = grounder.traces(scene);
    for (std::size_t c = 0; c < scene.captions.size(); ++c) {
      ++so.diag.captions;
      ParseResult parsed = triplets(scene, c);
      so.diag.skipped_clauses += parsed.skipped_clauses;
      so.diag.triplets += static_cast<int>(parsed.triplets.size());
      std::vector<Triplet> mapped;
      std::vector<RelationClass> classes;
      for (const Triplet& t : parsed.triplets) {
        if (auto cls = mapping.canonicalize(t.predicate.surface)) {
          mapped.push_back(t);
          classes.push_back(*cls);
        } else {
          ++so.diag.unmapped;
        }
      }
      GroundedRelations gr = ground_caption(traces[c], mapped);
      so.diag.alignment_errors += gr.alignment_errors;
      // Relations are emitted in triplet order, skipping alignment errors.
      std::size_t r = 0;
      for (std::size_t t = 0; t < mapped.size() && r < gr.relations.size(); ++t) {
        if (!(gr.relations[r].triplet == mapped[t])) continue;
        const RelationGrounding& rg = gr.relations[r++];
        if (rg.subject_object == rg.object_object) {
          ++so.diag.self_pairs;
          continue;
        }
        GroundedExample ex;
        ex.scene_id = scene.scene_id;
        ex.subj_feature =
            scene.objects[static_cast<std::size_t>(rg.subject_object)].feature;
        ex.obj_feature =
            scene.objects[static_cast<std::size_t>(rg.object_object)].feature;
        ex.relation = classes[t].id;
        ex.caption_index = static_cast<int>(c);
        ex.subject_object = rg.subject_object;
        ex.object_object = rg.object_object;
        ex.subject_token = rg.triplet.subject.head;
        ex.object_token = rg.triplet.object.head;
        ex.predicate = rg.triplet.predicate.surface;
        so.examples.push_back(std::move(ex));
      }
    }
  });
  GroundedDataset out;
  out.feature_dim = corpus.header.feature_dim;
  out.relation_names = corpus.header.relation_names;
  if (out.relation_names.empty()) {
    for (int i = 0; i < corpus.header.num_relations; ++i) {
      out.relation_names.push_back("r" + std::to_string(i));
    }
  }
  for (SceneOut& so : per_scene) {
    auto& d = out.diagnostics;
    d.captions += so.diag.captions;
    d.triplets += so.diag.triplets;
    d.skipped_clauses += so.diag.skipped_clauses;
    d.unmapped += so.diag.unmapped;
    d.alignment_errors += so.diag.alignment_errors;
    d.self_pairs += so.diag.self_pairs;
    for (auto& ex : so.examples) out.examples.push_back(std::move(ex));
  }
  out.diagnostics.examples = static_cast<int>(out.examples.size());
  return out;
}

inline GroundedDataset build_grounded_dataset(const Grounder& grounder,
                                              const Corpus& corpus,
                                              const TripletParser& parser,
                                              const PredicateMapping& mapping) {
  return build_grounded_dataset(grounder, corpus, parser_source(parser), mapping);
}

// Oracle-bypassed dataset: every oracle relation mention with true objects.
inline GroundedDataset build_oracle_dataset(const Corpus& corpus) {
  GroundedDataset out;
  out.feature_dim = corpus.header.feature_dim;
  out.relation_names = corpus.header.relation_names;
  for (const Scene& s : corpus.scenes) {
    if (!s.oracle) throw OracleMissing();
    for (std::size_t c = 0; c < s.captions.size(); ++c) {
      ++out.diagnostics.captions;
      for (const OracleMention& m : s.oracle->captions[c].relations) {
        ++out.diagnostics.triplets;
        GroundedExample ex;
        ex.scene_id = s.scene_id;
        ex.subj_feature = s.objects[static_cast<std::size_t>(m.subject)].feature;
        ex.obj_feature = s.objects[static_cast<std::size_t>(m.object)].feature;
        ex.relation = m.relation;
        ex.caption_index = static_cast<int>(c);
        ex.subject_object = m.subject;
        ex.object_object = m.object;
        ex.subject_token = m.subject_token;
        ex.object_token = m.object_token;
        for (int k = m.predicate_begin; k < m.predicate_end; ++k) {
          if (k > m.predicate_begin) ex.predicate += ' ';
          ex.predicate += s.captions[c].tokens[static_cast<std::size_t>(k)];
        }
        out.examples.push_back(std::move(ex));
      }
    }
  }
  out.diagnostics.examples = static_cast<int>(out.examples.size());
  return out;
}

struct GroundingAccuracy {
  double entity_accuracy = 0.0;
  double pair_accuracy = 0.0;
  double chance = 0.0;  // mean over scenes of 1/n
  int entity_mentions = 0;
  int pair_mentions = 0;
};

inline GroundingAccuracy grounding_accuracy(const Grounder& grounder,
                                            const Corpus& corpus) {
  for (const Scene& s : corpus.scenes) {
    if (!s.oracle) throw OracleMissing();
  }
  if (corpus.scenes.empty()) throw OracleMissing();
  struct Counts {
    int ent_ok = 0, ent = 0, pair_ok = 0, pair = 0;
  };
  std::vector<Counts> per(corpus.scenes.size());
  parallel_for(corpus.scenes.size(), [&](std::size_t si) {
    const Scene& s = corpus.scenes[si];
    const auto traces = grounder.traces(s);
    Counts& c = per[si];
    for (std::size_t ci = 0; ci < s.captions.size(); ++ci) {
      const auto& rows = traces[ci].rows;
      const CaptionOracle& o = s.oracle->captions[ci];
      for (const auto& [tok, obj] : o.entities) {
        ++c.ent;
        if (argmax_lowest(rows[static_cast<std::size_t>(tok)]) == obj) ++c.ent_ok;
      }
      for (const OracleMention& m : o.relations) {
        ++c.pair;
        if (argmax_lowest(rows[static_cast<std::size_t>(m.subject_token)]) ==
                m.subject &&
            argmax_lowest(rows[static_cast<std::size_t>(m.object_token)]) ==
                m.object) {
          ++c.pair_ok;
        }
      }
    }
  });
  GroundingAccuracy acc;
  int ent_ok = 0, pair_ok = 0;
  double chance = 0.0;
  for (std::size_t i = 0; i < per.size(); ++i) {
    ent_ok += per[i].ent_ok;
    acc.entity_mentions += per[i].ent;
    pair_ok += per[i].pair_ok;
    acc.pair_mentions += per[i].pair;
    chance += 1.0 / static_cast<double>(corpus.scenes[i].objects.size());
  }
  acc.chance = chance / static_cast<double>(corpus.scenes.size());
  if (acc.entity_mentions > 0) {
    acc.entity_accuracy = static_cast<double>(ent_ok) / acc.entity_mentions;
  }
  if (acc.pair_mentions > 0) {
    acc.pair_accuracy = static_cast<double>(pair_ok) / acc.pair_mentions;
  }
  return acc;
}

}  // namespace capground
