#pragma once

// Relation classifier: an MLP over the ordered pair [f_i; f_j] with two relu
// hidden layers and dropout, trained on grounded tuples; all-pairs inference
// produces the ranked prediction list used by Recall@K.

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "capground/data_model.hpp"
#include "capground/grounded.hpp"
#include "capground/nn.hpp"
#include "capground/synthgen.hpp"
#include "capground/tensor.hpp"

namespace capground {

struct RelClfConfig {
  std::vector<int> hidden = {64, 64};
  double dropout = 0.5;
  double lr = 1e-3;
  int epochs = 50;
  int batch_size = 64;
  double val_fraction = 0.15;
  double clip_norm = 5.0;
  std::uint64_t seed = 42;

  void validate() const {
    if (hidden.empty()) throw ConfigError("classifier needs a hidden layer");
    for (int h : hidden) {
      if (h <= 0) throw ConfigError("hidden layer sizes must be positive");
    }
    if (!(dropout >= 0.0 && dropout < 1.0)) {
      throw ConfigError("dropout must lie in [0, 1)");
    }
    if (!(lr >= 0.0) || epochs < 0 || batch_size <= 0 ||
        !(val_fraction >= 0.0 && val_fraction < 1.0) || !(clip_norm > 0.0)) {
      throw ConfigError("invalid classifier training settings");
    }
  }
};

class RelationClassifier {
 public:
  RelationClassifier(int feature_dim, std::vector<std::string> relation_names,
                     const RelClfConfig& cfg)
      : feature_dim_(feature_dim),
        relation_names_(std::move(relation_names)),
        dropout_(cfg.dropout) {
    cfg.validate();
    if (feature_dim <= 0 || relation_names_.empty()) {
      throw ConfigError("classifier needs positive feature_dim and relations");
    }
    std::mt19937_64 rng(cfg.seed);
    std::size_t in = 2 * static_cast<std::size_t>(feature_dim);
    for (std::size_t l = 0; l < cfg.hidden.size(); ++l) {
      const auto out = static_cast<std::size_t>(cfg.hidden[l]);
      layers_.push_back(
          LinearParams::create(params_, "mlp." + std::to_string(l), in, out, rng));
      in = out;
    }
    layers_.push_back(LinearParams::create(params_, "mlp.out", in,
                                           relation_names_.size(), rng));
  }

  int feature_dim() const { return feature_dim_; }
  int num_relations() const { return static_cast<int>(relation_names_.size()); }
  const std::vector<std::string>& relation_names() const { return relation_names_; }
  double dropout() const { return dropout_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }

  // pairs: B x 2d rows of [f_i; f_j]. Dropout only when rng is given.
  Var forward(Graph& g, Var pairs, std::mt19937_64* rng) const {
    if (pairs.cols() != 2 * static_cast<std::size_t>(feature_dim_)) {
      throw ShapeError("relation classifier expects pair width " +
                       std::to_string(2 * feature_dim_) + ", got " +
                       std::to_string(pairs.cols()));
    }
    Var x = pairs;
    for (std::size_t l = 0; l + 1 < layers_.size(); ++l) {
      x = ops::relu(linear(x, layers_[l].bind(g)));
      if (rng) x = ops::dropout(x, dropout_, *rng, true);
    }
    return linear(x, layers_.back().bind(g));
  }

  Tensor logits(const Tensor& pairs) const {
    Graph g(false);
    return forward(g, g.view(pairs), nullptr).value();
  }

  std::vector<double> logits(const std::vector<double>& fi,
                             const std::vector<double>& fj) const {
    if (fi.size() != static_cast<std::size_t>(feature_dim_) ||
        fj.size() != static_cast<std::size_t>(feature_dim_)) {
      throw ShapeError("feature dimension mismatch: " + std::to_string(fi.size()) +
                       ", " + std::to_string(fj.size()) + " vs " +
                       std::to_string(feature_dim_));
    }
    Tensor t = Tensor::matrix(1, fi.size() + fj.size());
    std::copy(fi.begin(), fi.end(), t.data());
    std::copy(fj.begin(), fj.end(), t.data() + fi.size());
    const Tensor out = logits(t);
    return {out.data(), out.data() + out.size()};
  }

  std::vector<NamedTensor> to_tensors() const {
    std::vector<NamedTensor> out = parameters_to_tensors(params_);
    out.push_back({"config/dropout", Tensor({}, std::vector<double>{dropout_})});
    for (std::size_t i = 0; i < relation_names_.size(); ++i) {
      out.push_back({"relation/" + relation_names_[i],
                     Tensor({}, std::vector<double>{static_cast<double>(i)})});
    }
    return out;
  }

  static RelationClassifier from_tensors(const std::vector<NamedTensor>& tensors) {
    std::vector<std::pair<int, std::string>> rels;
    RelClfConfig cfg;
    cfg.hidden.clear();
    int in_dim = -1;
    for (const auto& t : tensors) {
      if (t.name.rfind("relation/", 0) == 0) {
        rels.emplace_back(static_cast<int>(t.tensor[0]), t.name.substr(9));
      } else if (t.name == "config/dropout") {
        cfg.dropout = t.tensor[0];
      }
    }
    for (std::size_t l = 0;; ++l) {
      auto it = std::find_if(tensors.begin(), tensors.end(), [&](const NamedTensor& t) {
        return t.name == "mlp." + std::to_string(l) + ".weight";
      });
      if (it == tensors.end()) break;
      if (l == 0) in_dim = static_cast<int>(it->tensor.rows());
      cfg.hidden.push_back(static_cast<int>(it->tensor.cols()));
    }
    if (in_dim <= 0 || in_dim % 2 != 0) {
      throw IoError("classifier checkpoint lacks a valid input layer");
    }
    std::sort(rels.begin(), rels.end());
    std::vector<std::string> names;
    for (std::size_t i = 0; i < rels.size(); ++i) {
      if (rels[i].first != static_cast<int>(i)) {
        throw IoError("classifier checkpoint has a gap in relation ids");
      }
      names.push_back(rels[i].second);
    }
    RelationClassifier model(in_dim / 2, std::move(names), cfg);
    load_parameters(model.params_, tensors);
    return model;
  }

  void save(const std::string& path) const { save_checkpoint(path, to_tensors()); }
  static RelationClassifier load(const std::string& path) {
    return from_tensors(load_checkpoint(path));
  }

 private:
  int feature_dim_;
  std::vector<std::string> relation_names_;
  double dropout_;
  ParameterSet params_;
  std::vector<LinearParams> layers_;
};

// ---------------------------------------------------------------------------
// Training

// Scene-level membership of the held-out split.
inline bool is_validation_scene(const std::string& scene_id, std::uint64_t seed,
                                double fraction) {
  const std::uint64_t h = splitmix64(fnv1a64(scene_id) ^ seed);
  return static_cast<double>(h % 1000000) < fraction * 1000000.0;
}

struct RelClfTraining {
  std::unique_ptr<RelationClassifier> model;
  std::vector<double> loss_curve;
  std::vector<double> train_accuracy;
  std::vector<double> val_accuracy;
  std::vector<std::size_t> train_indices;
  std::vector<std::size_t> val_indices;
};

inline Tensor pair_matrix(const GroundedDataset& ds,
                          const std::vector<std::size_t>& idx) {
  const auto d = static_cast<std::size_t>(ds.feature_dim);
  Tensor t = Tensor::matrix(idx.size(), 2 * d);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const GroundedExample& ex = ds.examples[idx[r]];
    std::copy(ex.subj_feature.begin(), ex.subj_feature.end(), t.data() + r * 2 * d);
    std::copy(ex.obj_feature.begin(), ex.obj_feature.end(),
              t.data() + r * 2 * d + d);
  }
  return t;
}

inline double classification_accuracy(const RelationClassifier& model,
                                      const GroundedDataset& ds,
                                      const std::vector<std::size_t>& idx) {
  if (idx.empty()) return 0.0;
  const Tensor L = model.logits(pair_matrix(ds, idx));
  const std::size_t C = L.cols();
  std::size_t ok = 0;
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const double* row = L.data() + r * C;
    const auto pred = static_cast<int>(std::max_element(row, row + C) - row);
    if (pred == ds.examples[idx[r]].relation) ++ok;
  }
  return static_cast<double>(ok) / static_cast<double>(idx.size());
}

inline RelClfTraining train_relclf(const GroundedDataset& ds,
                                   const RelClfConfig& cfg,
                                   std::ostream* log = nullptr) {
  cfg.validate();
  if (ds.examples.empty()) throw ConfigError("grounded dataset is empty");
  RelClfTraining out;
  for (std::size_t i = 0; i < ds.examples.size(); ++i) {
    const GroundedExample& ex = ds.examples[i];
    if (static_cast<int>(ex.subj_feature.size()) != ds.feature_dim ||
        static_cast<int>(ex.obj_feature.size()) != ds.feature_dim) {
      throw DimensionMismatch("grounded example " + std::to_string(i) +
                              " has the wrong feature dimension");
    }
    if (ex.relation < 0 || ex.relation >= ds.num_relations()) {
      throw ConfigError("grounded example " + std::to_string(i) +
                        " has an out-of-range class");
    }
    (is_validation_scene(ex.scene_id, cfg.seed, cfg.val_fraction)
         ? out.val_indices
         : out.train_indices)
        .push_back(i);
  }
  if (out.train_indices.empty()) {
    std::swap(out.train_indices, out.val_indices);
  }
  out.model = std::make_unique<RelationClassifier>(ds.feature_dim,
                                                   ds.relation_names, cfg);
  RelationClassifier& model = *out.model;
  std::mt19937_64 rng(derive_seed(cfg.seed, 2));
  AdamState adam;
  std::vector<std::size_t> order = out.train_indices;
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t end = std::min(order.size(), start + bs);
      std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                   order.begin() + static_cast<std::ptrdiff_t>(end));
      std::vector<int> targets;
      for (std::size_t i : idx) targets.push_back(ds.examples[i].relation);
      const std::vector<double> weights(idx.size(),
                                        1.0 / static_cast<double>(idx.size()));
      model.params().zero_grad();
      double loss = 0.0;
      try {
        Graph g;
        Var logits = model.forward(g, g.constant(pair_matrix(ds, idx)), &rng);
        Var l = ops::cross_entropy(logits, targets, weights);
        loss = l.value()[0];
        g.backward(l);
      } catch (const NumericalError& e) {
        throw NumericalError("classifier diverged in epoch " +
                             std::to_string(epoch) + ": " + e.what());
      }
      clip_grad_norm(model.params(), cfg.clip_norm);
      adam_step(model.params(), adam, cfg.lr);
      total += loss * static_cast<double>(idx.size());
    }
    out.loss_curve.push_back(total / static_cast<double>(order.size()));
    out.train_accuracy.push_back(classification_accuracy(model, ds, out.train_indices));
    out.val_accuracy.push_back(classification_accuracy(model, ds, out.val_indices));
    if (log) {
      *log << "relclf epoch " << epoch + 1 << "/" << cfg.epochs << " loss "
           << out.loss_curve.back() << " train_acc " << out.train_accuracy.back()
           << " val_acc " << out.val_accuracy.back() << "\n";
      log->flush();
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Inference

struct ScoredTriplet {
  int subject = 0;
  int object = 0;
  int relation = 0;
  double confidence = 0.0;

  bool operator==(const ScoredTriplet&) const = default;
};

// Confidence descending, then (subject, object, relation) ascending.
inline bool ranks_before(const ScoredTriplet& a, const ScoredTriplet& b) {
  if (a.confidence != b.confidence) return a.confidence > b.confidence;
  if (a.subject != b.subject) return a.subject < b.subject;
  if (a.object != b.object) return a.object < b.object;
  return a.relation < b.relation;
}

using PredictionList = std::vector<ScoredTriplet>;

inline void sort_predictions(PredictionList& list) {
  std::sort(list.begin(), list.end(), ranks_before);
}

inline PredictionList predict_relations(const RelationClassifier& model,
                                        const Scene& scene) {
  const std::size_t n = scene.objects.size();
  PredictionList out;
  if (n < 2) return out;
  const auto d = static_cast<std::size_t>(model.feature_dim());
  Tensor pairs = Tensor::matrix(n * (n - 1), 2 * d);
  std::size_t r = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const auto& fi = scene.objects[i].feature;
      const auto& fj = scene.objects[j].feature;
      if (fi.size() != d || fj.size() != d) {
        throw ShapeError("scene " + scene.scene_id +
                         " features do not match classifier dimension");
      }
      std::copy(fi.begin(), fi.end(), pairs.data() + r * 2 * d);
      std::copy(fj.begin(), fj.end(), pairs.data() + r * 2 * d + d);
      ++r;
    }
  }
  const Tensor L = model.logits(pairs);
  const std::size_t C = L.cols();
  out.reserve(n * (n - 1) * C);
  r = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const double* row = L.data() + r * C;
      const double mx = *std::max_element(row, row + C);
      double z = 0.0;
      for (std::size_t c = 0; c < C; ++c) z += std::exp(row[c] - mx);
      for (std::size_t c = 0; c < C; ++c) {
        out.push_back({static_cast<int>(i), static_cast<int>(j), static_cast<int>(c),
                       std::exp(row[c] - mx) / z});
      }
      ++r;
    }
  }
  sort_predictions(out);
  return out;
}

}  // namespace capground
