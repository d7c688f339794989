#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "capground/gradcheck.hpp"
#include "capground/nn.hpp"

using namespace capground;

namespace {

// Unfused cell built from graph primitives.
LstmState composite_lstm(Var x, Var h, Var c, const LstmParams::Bound& p) {
  const std::size_t H = p.hidden;
  Var z = ops::add_bias(ops::matmul(ops::concat_cols({x, h}), p.weight), p.bias);
  Var i = ops::sigmoid(ops::slice_cols(z, 0, H));
  Var f = ops::sigmoid(ops::slice_cols(z, H, H));
  Var o = ops::sigmoid(ops::slice_cols(z, 2 * H, H));
  Var g = ops::tanh(ops::slice_cols(z, 3 * H, H));
  Var c2 = ops::add(ops::mul(f, c), ops::mul(i, g));
  return {ops::mul(o, ops::tanh(c2)), c2};
}

struct LstmFixture {
  std::mt19937_64 rng{21};
  ParameterSet ps;
  LstmParams lp;
  LstmFixture(std::size_t in, std::size_t hid) {
    lp = LstmParams::create(ps, "lstm", in, hid, rng);
  }
  void zero_all() {
    for (std::size_t i = 0; i < ps.size(); ++i) ps[i].value.fill(0.0);
  }
};

}  // namespace

TEST(Lstm, ZeroWeightsZeroCell) {
  LstmFixture f(3, 2);
  f.zero_all();
  Graph g;
  LstmState s = lstm_cell(g.constant(Tensor::matrix(1, 3, 0.7)), g.constant(Tensor::matrix(1, 2)),
                          g.constant(Tensor::matrix(1, 2)), f.lp.bind(g));
  for (double v : s.h.value().values()) EXPECT_EQ(v, 0.0);
  for (double v : s.c.value().values()) EXPECT_EQ(v, 0.0);
}

TEST(Lstm, ZeroWeightsCellTwo) {
  LstmFixture f(3, 2);
  f.zero_all();
  Graph g;
  LstmState s = lstm_cell(g.constant(Tensor::matrix(1, 3, -1.0)), g.constant(Tensor::matrix(1, 2)),
                          g.constant(Tensor::matrix(1, 2, 2.0)), f.lp.bind(g));
  for (double v : s.c.value().values()) EXPECT_NEAR(v, 1.0, 1e-15);
  for (double v : s.h.value().values()) EXPECT_NEAR(v, 0.5 * std::tanh(1.0), 1e-15);
  EXPECT_NEAR(s.h.value()[0], 0.3808, 1e-4);
}

TEST(Lstm, SaturatedGatesPreserveMemory) {
  LstmFixture f(2, 3);
  f.zero_all();
  Tensor& b = f.ps.get("lstm.bias").value;
  for (std::size_t k = 0; k < 3; ++k) {
    b[k] = -40.0;     // input gate closed
    b[3 + k] = 40.0;  // forget gate open
  }
  Graph g;
  const Tensor c = Tensor::row({0.3, -1.2, 2.5});
  LstmState s = lstm_cell(g.constant(Tensor::row({1.0, -1.0})), g.constant(Tensor::matrix(1, 3, 0.4)),
                          g.view(c), f.lp.bind(g));
  for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(s.c.value()[k], c[k], 1e-12);
}

TEST(Lstm, ShapeMismatch) {
  LstmFixture f(3, 2);
  Graph g;
  EXPECT_THROW(lstm_cell(g.constant(Tensor::matrix(1, 4)), g.constant(Tensor::matrix(1, 2)),
                         g.constant(Tensor::matrix(1, 2)), f.lp.bind(g)),
               ShapeError);
  EXPECT_THROW(lstm_cell(g.constant(Tensor::matrix(2, 3)), g.constant(Tensor::matrix(1, 2)),
                         g.constant(Tensor::matrix(2, 2)), f.lp.bind(g)),
               ShapeError);
}

TEST(Lstm, FusedMatchesComposite) {
  LstmFixture f(4, 5);
  std::mt19937_64 rng(3);
  f.ps.get("lstm.bias").value = gaussian_init(1, 20, 0.5, rng);
  Parameter& x = f.ps.add("x", gaussian_init(3, 4, 1.0, rng));
  Parameter& h = f.ps.add("h", gaussian_init(3, 5, 0.5, rng));
  Parameter& c = f.ps.add("c", gaussian_init(3, 5, 0.5, rng));
  const Tensor rh = gaussian_init(3, 5, 1.0, rng), rc = gaussian_init(3, 5, 1.0, rng);
  auto run = [&](bool fused) {
    f.ps.zero_grad();
    Graph g;
    const auto bound = f.lp.bind(g);
    LstmState s = fused ? lstm_cell(g.param(x), g.param(h), g.param(c), bound)
                        : composite_lstm(g.param(x), g.param(h), g.param(c), bound);
    g.backward(ops::add(ops::sum(ops::mul(s.h, g.view(rh))), ops::sum(ops::mul(s.c, g.view(rc)))));
    std::vector<double> out(s.h.value().storage());
    out.insert(out.end(), s.c.value().storage().begin(), s.c.value().storage().end());
    for (std::size_t i = 0; i < f.ps.size(); ++i) {
      out.insert(out.end(), f.ps[i].grad.storage().begin(), f.ps[i].grad.storage().end());
    }
    return out;
  };
  const auto a = run(true), b = run(false);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12) << i;
}

TEST(Lstm, SplitBlocksAndExtraMatchSingleInput) {
  LstmFixture f(6, 3);
  std::mt19937_64 rng(4);
  const Tensor x = gaussian_init(2, 6, 1.0, rng), h = gaussian_init(2, 3, 1.0, rng);
  const Tensor c = gaussian_init(2, 3, 1.0, rng);
  const Tensor& W = f.ps.get("lstm.weight").value;
  // Rows 2..3 of the weight applied outside the cell.
  Tensor mid = Tensor::matrix(2, 12);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t k = 0; k < 2; ++k)
      for (std::size_t j = 0; j < 12; ++j) mid(r, j) += x(r, 2 + k) * W(2 + k, j);
  Tensor left = Tensor::matrix(2, 2), right = Tensor::matrix(2, 2);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t k = 0; k < 2; ++k) {
      left(r, k) = x(r, k);
      right(r, k) = x(r, 4 + k);
    }
  Graph g;
  const auto bound = f.lp.bind(g);
  LstmState ref = lstm_cell(g.view(x), g.view(h), g.view(c), bound);
  Var extra = g.view(mid);
  LstmState got = lstm_cell_blocks({{g.view(h), 6}, {g.view(right), 4}, {g.view(left), 0}},
                                   g.view(c), bound, &extra);
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_NEAR(got.h.value()[i], ref.h.value()[i], 1e-13);
    EXPECT_NEAR(got.c.value()[i], ref.c.value()[i], 1e-13);
  }
}

TEST(Attention, IdenticalKeysGiveUniformProbs) {
  std::mt19937_64 rng(5);
  ParameterSet ps;
  AttentionParams ap = AttentionParams::create(ps, "att", 3, 4, 5, rng);
  Tensor keys = Tensor::matrix(4, 4);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) keys(i, j) = 0.1 * static_cast<double>(j) - 0.2;
  Graph g;
  AttentionResult r = additive_attention(g.constant(Tensor::row({0.3, -0.1, 0.9})), g.view(keys),
                                         ap.bind(g));
  for (double p : r.probs.value().values()) EXPECT_NEAR(p, 0.25, 1e-15);
  for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(r.context.value()[j], keys(0, j), 1e-15);
}

TEST(Attention, SingleKey) {
  std::mt19937_64 rng(6);
  ParameterSet ps;
  AttentionParams ap = AttentionParams::create(ps, "att", 2, 3, 4, rng);
  const Tensor key = Tensor::row({1.5, -0.5, 2.0});
  Graph g;
  AttentionResult r = additive_attention(g.constant(Tensor::row({1.0, 2.0})), g.view(key), ap.bind(g));
  EXPECT_EQ(r.probs.value()[0], 1.0);
  EXPECT_EQ(r.context.value().storage(), key.storage());
}

TEST(Attention, HandScores) {
  // With Wk = I, Wq = 0 and v = (1, 0): score_i = tanh(k_i0).
  ParameterSet ps;
  std::mt19937_64 rng(7);
  AttentionParams ap = AttentionParams::create(ps, "att", 2, 2, 2, rng);
  ap.query_weight->value.fill(0.0);
  ap.key_weight->value = Tensor({2, 2}, std::vector<double>{1, 0, 0, 1});
  ap.score->value = Tensor({2, 1}, std::vector<double>{1, 0});
  const double a = std::atanh(std::log(2.0));
  const Tensor keys({2, 2}, std::vector<double>{a, 3.0, 0.0, -3.0});
  Graph g;
  AttentionResult r = additive_attention(g.constant(Tensor::row({5.0, 5.0})), g.view(keys), ap.bind(g));
  EXPECT_NEAR(r.probs.value()[0], 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(r.probs.value()[1], 1.0 / 3.0, 1e-12);
  EXPECT_NEAR(r.context.value()[1], 3.0 * (2.0 / 3.0) - 3.0 / 3.0, 1e-12);
}

TEST(Attention, ProbsSumToOneAndContextInHull) {
  std::mt19937_64 rng(8);
  ParameterSet ps;
  AttentionParams ap = AttentionParams::create(ps, "att", 5, 3, 6, rng);
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 1 + static_cast<std::size_t>(t % 7);
    const Tensor keys = gaussian_init(n, 3, 2.0, rng);
    Graph g;
    AttentionResult r = additive_attention(g.constant(gaussian_init(1, 5, 3.0, rng)), g.view(keys),
                                           ap.bind(g));
    double s = 0;
    for (double p : r.probs.value().values()) {
      EXPECT_GE(p, 0.0);
      s += p;
    }
    EXPECT_NEAR(s, 1.0, 1e-9);
    for (std::size_t j = 0; j < 3; ++j) {
      double lo = keys(0, j), hi = keys(0, j);
      for (std::size_t i = 1; i < n; ++i) {
        lo = std::min(lo, keys(i, j));
        hi = std::max(hi, keys(i, j));
      }
      EXPECT_GE(r.context.value()[j], lo - 1e-12);
      EXPECT_LE(r.context.value()[j], hi + 1e-12);
    }
  }
}

TEST(Attention, EmptyKeys) {
  std::mt19937_64 rng(9);
  ParameterSet ps;
  AttentionParams ap = AttentionParams::create(ps, "att", 2, 3, 4, rng);
  Graph g;
  EXPECT_THROW(additive_attention(g.constant(Tensor::row({1.0, 2.0})),
                                  g.constant(Tensor::matrix(0, 3)), ap.bind(g)),
               EmptyKeysError);
}

TEST(Attention, MaskedBatchMatchesUnbatched) {
  std::mt19937_64 rng(10);
  ParameterSet ps;
  AttentionParams ap = AttentionParams::create(ps, "att", 3, 4, 5, rng);
  const Tensor q = gaussian_init(2, 3, 1.0, rng);
  const Tensor keys = gaussian_init(6, 4, 1.0, rng);
  Graph g;
  const auto bound = ap.bind(g);
  AttentionKeys k = prepare_keys(g.view(keys), 3, {1, 1, 1, 1, 1, 0}, bound);
  AttentionResult batched = additive_attention(g.view(q), k, bound);
  EXPECT_EQ(batched.probs.value()(1, 2), 0.0);
  for (std::size_t b = 0; b < 2; ++b) {
    const std::size_t n = b == 0 ? 3 : 2;
    Tensor qb = Tensor::matrix(1, 3), kb = Tensor::matrix(n, 4);
    for (std::size_t j = 0; j < 3; ++j) qb[j] = q(b, j);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < 4; ++j) kb(i, j) = keys(b * 3 + i, j);
    AttentionResult single = additive_attention(g.view(qb), g.view(kb), bound);
    for (std::size_t i = 0; i < n; ++i) {
      EXPECT_NEAR(single.probs.value()[i], batched.probs.value()(b, i), 1e-14);
    }
    for (std::size_t j = 0; j < 4; ++j) {
      EXPECT_NEAR(single.context.value()[j], batched.context.value()(b, j), 1e-14);
    }
  }
}

TEST(GradientSuite, EveryCompositePasses) {
  for (const GradCheckCase& c : run_gradient_suite(1e-4, 7)) {
    EXPECT_TRUE(c.report.passed) << c.name << " " << c.report.max_rel_error << " at "
                                 << c.report.worst_param;
    EXPECT_GT(c.report.coordinates_checked, 0u) << c.name;
  }
}

TEST(GradientSuite, LinearLayerIsTight) {
  const GradCheckCase c = check_linear(1e-7, 7);
  EXPECT_LT(c.report.max_rel_error, 1e-7);
}

TEST(GradientSuite, OtherSeeds) {
  for (std::uint64_t seed : {1u, 99u}) {
    EXPECT_TRUE(check_lstm(1e-4, seed).report.passed);
    EXPECT_TRUE(check_attention(1e-4, seed).report.passed);
    EXPECT_TRUE(check_relclf(1e-4, seed).report.passed);
  }
}

TEST(Checkpoint, RoundTrip) {
  std::mt19937_64 rng(11);
  std::vector<NamedTensor> ts = {{"a", gaussian_init(3, 4, 1.0, rng)},
                                 {"b.bias", Tensor({5}, std::vector<double>{1, 2, 3, 4, 5})},
                                 {"scalar", Tensor(std::vector<std::size_t>{}, 0.0)}};
  ts[2].tensor.storage() = {std::nextafter(1.0, 2.0)};
  const std::string bytes = encode_checkpoint(ts);
  const auto back = decode_checkpoint(bytes);
  ASSERT_EQ(back.size(), ts.size());
  for (std::size_t i = 0; i < ts.size(); ++i) {
    EXPECT_EQ(back[i].name, ts[i].name);
    EXPECT_EQ(back[i].tensor.shape(), ts[i].tensor.shape());
    EXPECT_EQ(back[i].tensor.storage(), ts[i].tensor.storage());
  }
}

TEST(Checkpoint, CorruptInputs) {
  EXPECT_THROW(decode_checkpoint("XXXX"), IoError);
  EXPECT_THROW(decode_checkpoint(""), IoError);
  std::mt19937_64 rng(12);
  const std::string bytes = encode_checkpoint({{"w", gaussian_init(4, 4, 1.0, rng)}});
  for (std::size_t cut : {5u, 12u, 30u, 100u}) {
    EXPECT_THROW(decode_checkpoint(bytes.substr(0, cut)), IoError) << cut;
  }
  EXPECT_THROW(load_checkpoint("/nonexistent/ckpt"), IoError);
}

TEST(Checkpoint, LoadParametersChecksNamesAndShapes) {
  std::mt19937_64 rng(13);
  ParameterSet ps;
  LinearParams::create(ps, "fc", 3, 2, rng);
  auto ts = parameters_to_tensors(ps);
  ParameterSet other;
  LinearParams::create(other, "fc", 3, 2, rng);
  load_parameters(other, ts);
  EXPECT_EQ(other.get("fc.weight").value.storage(), ps.get("fc.weight").value.storage());
  ts[0].tensor = Tensor::matrix(2, 3);
  EXPECT_THROW(load_parameters(other, ts), ShapeError);
  ts.erase(ts.begin());
  EXPECT_THROW(load_parameters(other, ts), IoError);
}
