#pragma once

// Finite-difference verification of every differentiable building block:
// linear layer, LSTM cell, batched additive attention, a full captioner
// step, and the relation-classifier MLP. Inputs are registered as parameters
// so their gradients are checked too.

#include <random>
#include <string>
#include <vector>

#include "capground/captioner.hpp"
#include "capground/nn.hpp"
#include "capground/relclf.hpp"
#include "capground/tensor.hpp"

namespace capground {

struct GradCheckCase {
  std::string name;
  GradCheckReport report;
};

namespace detail {

inline Tensor random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng,
                            double scale = 1.0) {
  return gaussian_init(r, c, scale, rng);
}

// sum(a .* R) for a fixed random R: a scalar with generic gradients.
inline Var probe_sum(Var a, const Tensor& R) {
  return ops::sum(ops::mul(a, a.graph->view(R)));
}

}  // namespace detail

inline GradCheckCase check_linear(double tol, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParameterSet ps;
  LinearParams lp = LinearParams::create(ps, "linear", 5, 4, rng);
  ps.get("linear.bias").value = detail::random_matrix(1, 4, rng, 0.5);
  Parameter& x = ps.add("x", detail::random_matrix(3, 5, rng));
  const std::vector<int> targets = {0, 2, 3};
  const std::vector<double> weights = {1.0 / 3, 1.0 / 3, 1.0 / 3};
  auto loss = [&](bool grad) {
    Graph g(grad);
    Var l = ops::cross_entropy(linear(g.param(x), lp.bind(g)), targets, weights);
    if (grad) g.backward(l);
    return l.value()[0];
  };
  return {"linear", finite_diff_check(ps, loss, tol)};
}

inline GradCheckCase check_lstm(double tol, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParameterSet ps;
  LstmParams lp = LstmParams::create(ps, "lstm", 4, 5, rng);
  ps.get("lstm.bias").value = detail::random_matrix(1, 20, rng, 0.5);
  Parameter& x = ps.add("x", detail::random_matrix(3, 4, rng));
  Parameter& h = ps.add("h", detail::random_matrix(3, 5, rng, 0.5));
  Parameter& c = ps.add("c", detail::random_matrix(3, 5, rng, 0.5));
  const Tensor Rh = detail::random_matrix(3, 5, rng);
  const Tensor Rc = detail::random_matrix(3, 5, rng);
  auto loss = [&](bool grad) {
    Graph g(grad);
    LstmState s = lstm_cell(g.param(x), g.param(h), g.param(c), lp.bind(g));
    Var l = ops::add(detail::probe_sum(s.h, Rh), detail::probe_sum(s.c, Rc));
    if (grad) g.backward(l);
    return l.value()[0];
  };
  return {"lstm_cell", finite_diff_check(ps, loss, tol)};
}

inline GradCheckCase check_attention(double tol, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParameterSet ps;
  AttentionParams ap = AttentionParams::create(ps, "attention", 6, 5, 4, rng);
  Parameter& q = ps.add("query", detail::random_matrix(2, 6, rng));
  Parameter& k = ps.add("keys", detail::random_matrix(6, 5, rng));
  // Second row has one padded key.
  const std::vector<std::uint8_t> mask = {1, 1, 1, 1, 1, 0};
  const Tensor Rc = detail::random_matrix(2, 5, rng);
  const Tensor Rp = detail::random_matrix(2, 3, rng);
  auto loss = [&](bool grad) {
    Graph g(grad);
    const auto bound = ap.bind(g);
    AttentionKeys keys = prepare_keys(g.param(k), 3, mask, bound);
    AttentionResult a = additive_attention(g.param(q), keys, bound);
    Var l = ops::add(detail::probe_sum(a.context, Rc), detail::probe_sum(a.probs, Rp));
    if (grad) g.backward(l);
    return l.value()[0];
  };
  return {"additive_attention", finite_diff_check(ps, loss, tol)};
}

inline GradCheckCase check_captioner_step(double tol, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const int d = 6;
  std::vector<Scene> scenes(2);
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    scenes[s].scene_id = "g" + std::to_string(s);
    for (int i = 0; i < 3 - static_cast<int>(s); ++i) {
      SceneObject o;
      o.id = i;
      const Tensor f = detail::random_matrix(1, d, rng);
      o.feature.assign(f.data(), f.data() + f.size());
      scenes[s].objects.push_back(std::move(o));
    }
  }
  const Vocabulary vocab =
      Vocabulary::build({make_caption("a red cube on a table")}, 1);
  CaptionerConfig cfg;
  cfg.embed_dim = 4;
  cfg.hidden = 5;
  cfg.attention_dim = 3;
  cfg.embed_sigma = 0.5;
  cfg.seed = seed;
  Captioner model(vocab, d, cfg);
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    Parameter& p = model.params()[i];
    if (p.name.find(".bias") != std::string::npos) {
      p.value = detail::random_matrix(1, p.value.cols(), rng, 0.3);
    }
  }
  const std::vector<Captioner::Item> batch = {
      {&scenes[0], vocab.encode(std::vector<std::string>{"a", "red", "cube", "on", "a", "table"})},
      {&scenes[1], vocab.encode(std::vector<std::string>{"a", "table"})}};
  auto loss = [&](bool grad) {
    Graph g(grad);
    Var l = model.forward(g, batch, false).loss;
    if (grad) g.backward(l);
    return l.value()[0];
  };
  return {"captioner_step", finite_diff_check(model.params(), loss, tol, 1e-5, 60)};
}

inline GradCheckCase check_relclf(double tol, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  RelClfConfig cfg;
  cfg.hidden = {7, 6};
  cfg.seed = seed;
  RelationClassifier model(4, {"r0", "r1", "r2"}, cfg);
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    Parameter& p = model.params()[i];
    if (p.name.find(".bias") != std::string::npos) {
      p.value = detail::random_matrix(1, p.value.cols(), rng, 0.3);
    }
  }
  const Tensor pairs = detail::random_matrix(5, 8, rng);
  const std::vector<int> targets = {0, 1, 2, 1, 0};
  const std::vector<double> weights(5, 0.2);
  auto loss = [&](bool grad) {
    Graph g(grad);
    std::mt19937_64 drop(seed + 1);  // same dropout mask on every evaluation
    Var l = ops::cross_entropy(model.forward(g, g.view(pairs), &drop), targets, weights);
    if (grad) g.backward(l);
    return l.value()[0];
  };
  return {"relclf_mlp", finite_diff_check(model.params(), loss, tol)};
}

inline std::vector<GradCheckCase> run_gradient_suite(double tol = 1e-4,
                                                     std::uint64_t seed = 7) {
  return {check_linear(tol, seed), check_lstm(tol, seed), check_attention(tol, seed),
          check_captioner_step(tol, seed), check_relclf(tol, seed)};
}

}  // namespace capground
