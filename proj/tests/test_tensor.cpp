#include <gtest/gtest.h>

#include <array>
#include <cmath>
#include <random>

#include "capground/tensor.hpp"

using namespace capground;

namespace {

Tensor randn(std::size_t r, std::size_t c, std::mt19937_64& rng) {
  return gaussian_init(r, c, 1.0, rng);
}

// Naive triple loop, the reference for the dense kernels.
Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  Tensor c = Tensor::matrix(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  return c;
}

}  // namespace

TEST(TensorBasics, ShapeMustMatchData) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), ShapeError);
  const Tensor t({2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
  EXPECT_EQ(t(1, 2), 6.0);
}

TEST(Backward, Square) {
  ParameterSet ps;
  Parameter& x = ps.add("x", Tensor::scalar(3.0));
  Graph g;
  Var v = g.param(x);
  Var y = ops::mul(v, v);
  EXPECT_EQ(y.value()[0], 9.0);
  g.backward(y);
  EXPECT_EQ(x.grad[0], 6.0);
}

TEST(Backward, Product) {
  ParameterSet ps;
  Parameter& x = ps.add("x", Tensor::scalar(2.0));
  Parameter& y = ps.add("y", Tensor::scalar(5.0));
  Graph g;
  g.backward(ops::mul(g.param(x), g.param(y)));
  EXPECT_EQ(x.grad[0], 5.0);
  EXPECT_EQ(y.grad[0], 2.0);
}

TEST(Backward, AccumulatesAcrossReuse) {
  ParameterSet ps;
  Parameter& x = ps.add("x", Tensor::row({1.0, -2.0}));
  Graph g;
  Var v = g.param(x);
  g.backward(ops::sum(ops::add(ops::scale(v, 3.0), v)));
  EXPECT_EQ(x.grad[0], 4.0);
  EXPECT_EQ(x.grad[1], 4.0);
}

TEST(Backward, NonScalarLossIsContractError) {
  ParameterSet ps;
  Parameter& x = ps.add("x", Tensor::row({1.0, 2.0}));
  Graph g;
  EXPECT_THROW(g.backward(ops::tanh(g.param(x))), ContractError);
  Graph other;
  Var foreign = other.constant(Tensor::scalar(1.0));
  EXPECT_THROW(g.backward(foreign), ContractError);
}

TEST(Backward, NonFiniteValueIsNumericalError) {
  Graph g;
  Var a = g.constant(Tensor::scalar(1e200));
  EXPECT_THROW(ops::mul(a, a), NumericalError);
}

TEST(Backward, InferenceGraphStoresNoGradients) {
  ParameterSet ps;
  Parameter& x = ps.add("x", Tensor::scalar(3.0));
  Graph g(false);
  Var y = ops::mul(g.param(x), g.param(x));
  EXPECT_EQ(y.value()[0], 9.0);
  g.backward(y);
  EXPECT_EQ(x.grad[0], 0.0);
}

TEST(Kernels, MatmulMatchesNaive) {
  std::mt19937_64 rng(1);
  const std::vector<std::array<std::size_t, 3>> dims = {{1, 1, 1}, {3, 5, 2}, {17, 9, 33}, {64, 128, 40}};
  for (auto [m, k, n] : dims) {
    const Tensor a = randn(m, k, rng), b = randn(k, n, rng);
    Graph g;
    const Tensor c = ops::matmul(g.view(a), g.view(b)).value();
    const Tensor ref = naive_matmul(a, b);
    for (std::size_t i = 0; i < c.size(); ++i) EXPECT_NEAR(c[i], ref[i], 1e-12);
  }
  Graph g;
  EXPECT_THROW(ops::matmul(g.constant(Tensor::matrix(2, 3)), g.constant(Tensor::matrix(2, 3))),
               ShapeError);
}

TEST(Softmax, SumsToOneAndPositive) {
  std::mt19937_64 rng(2);
  Graph g;
  Tensor x = randn(20, 7, rng);
  for (double& v : x.values()) v *= 30;
  const Tensor p = ops::softmax_rows(g.view(x)).value();
  for (std::size_t i = 0; i < 20; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < 7; ++j) {
      EXPECT_GT(p(i, j), 0.0);
      s += p(i, j);
    }
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(Softmax, HandValuesAndMask) {
  Graph g;
  const Tensor p = ops::softmax_rows(g.constant(Tensor::row({std::log(2.0), 0.0}))).value();
  EXPECT_NEAR(p[0], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(p[1], 1.0 / 3.0, 1e-15);
  const Tensor q =
      ops::softmax_rows(g.constant(Tensor::row({5.0, 1.0, 1.0})), {0, 1, 1}).value();
  EXPECT_EQ(q[0], 0.0);
  EXPECT_NEAR(q[1], 0.5, 1e-15);
}

TEST(CrossEntropy, UniformLogitsGiveLogV) {
  Graph g;
  for (std::size_t v : {2u, 10u, 57u}) {
    Var l = ops::cross_entropy(g.constant(Tensor::matrix(1, v, 0.3)), {1}, {1.0});
    EXPECT_NEAR(l.value()[0], std::log(static_cast<double>(v)), 1e-12);
  }
}

TEST(CrossEntropy, NonNegativeAndApproachesZero) {
  std::mt19937_64 rng(3);
  Graph g;
  for (int t = 0; t < 50; ++t) {
    Var l = ops::cross_entropy(g.constant(randn(4, 6, rng)), {0, 1, 5, 2},
                               {0.25, 0.25, 0.25, 0.25});
    EXPECT_GE(l.value()[0], 0.0);
  }
  Var sharp = ops::cross_entropy(g.constant(Tensor::row({60.0, 0.0, 0.0})), {0}, {1.0});
  EXPECT_LT(sharp.value()[0], 1e-20);
  EXPECT_THROW(ops::cross_entropy(g.constant(Tensor::row({0.0, 0.0})), {2}, {1.0}), VocabError);
}

TEST(Dropout, RateZeroIsIdentity) {
  std::mt19937_64 rng(4);
  Graph g;
  const Tensor x = randn(3, 4, rng);
  Var a = g.view(x);
  Var d = ops::dropout(a, 0.0, rng, true);
  EXPECT_EQ(d.value().storage(), x.storage());
  Var e = ops::dropout(a, 0.5, rng, false);
  EXPECT_EQ(e.value().storage(), x.storage());
}

TEST(Dropout, InvertedScalingPreservesMean) {
  std::mt19937_64 rng(5);
  for (double rate : {0.1, 0.3, 0.5}) {
    Graph g;
    const Tensor x = Tensor::matrix(1, 100000, 1.0);
    const Tensor y = ops::dropout(g.view(x), rate, rng, true).value();
    double mean = 0;
    std::size_t zeros = 0;
    for (double v : y.values()) {
      mean += v;
      zeros += v == 0.0;
    }
    mean /= 100000.0;
    EXPECT_NEAR(mean, 1.0, 0.01) << rate;
    EXPECT_NEAR(zeros / 100000.0, rate, 0.01);
  }
}

TEST(Adam, ZeroGradientsLeaveParamsUnchanged) {
  ParameterSet ps;
  Parameter& p = ps.add("p", Tensor::row({1.0, -2.0, 3.0}));
  AdamState st;
  adam_step(ps, st, 0.1);
  EXPECT_EQ(p.value.storage(), (std::vector<double>{1.0, -2.0, 3.0}));
  EXPECT_EQ(st.t, 1);
}

TEST(Adam, FirstStepIsLearningRate) {
  ParameterSet ps;
  Parameter& p = ps.add("p", Tensor::scalar(0.0));
  p.grad[0] = 1.0;
  AdamState st;
  const double step = 0.1 / (1.0 + 1e-8);  // unit gradient: m_hat = v_hat = 1
  adam_step(ps, st, 0.1);
  EXPECT_NEAR(p.value[0], -step, 1e-15);
  adam_step(ps, st, 0.1);
  EXPECT_NEAR(p.value[0], -2 * step, 1e-15);
  EXPECT_EQ(st.t, 2);
}

TEST(Adam, ZeroLearningRate) {
  ParameterSet ps;
  Parameter& p = ps.add("p", Tensor::row({0.5, 0.25}));
  p.grad = Tensor::row({3.0, -1.0});
  AdamState st;
  adam_step(ps, st, 0.0);
  EXPECT_EQ(p.value.storage(), (std::vector<double>{0.5, 0.25}));
}

TEST(Adam, MatchesReferenceOverManySteps) {
  ParameterSet ps;
  Parameter& p = ps.add("p", Tensor::scalar(1.0));
  AdamState st;
  double ref = 1.0, m = 0, v = 0;
  for (int t = 1; t <= 20; ++t) {
    const double g = std::sin(t);
    p.grad[0] = g;
    adam_step(ps, st, 0.01);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    ref -= 0.01 * (m / (1 - std::pow(0.9, t))) /
           (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    EXPECT_NEAR(p.value[0], ref, 1e-14);
  }
}

TEST(Clip, RescalesToMaxNorm) {
  ParameterSet ps;
  Parameter& p = ps.add("p", Tensor::row({0, 0}));
  p.grad = Tensor::row({3.0, 4.0});
  EXPECT_DOUBLE_EQ(clip_grad_norm(ps, 1.0), 5.0);
  EXPECT_NEAR(p.grad[0], 0.6, 1e-15);
  EXPECT_NEAR(p.grad[1], 0.8, 1e-15);
  clip_grad_norm(ps, 10.0);
  EXPECT_NEAR(p.grad[1], 0.8, 1e-15);
}

TEST(GradCheck, PrimitivesMatchFiniteDifferences) {
  std::mt19937_64 rng(6);
  ParameterSet ps;
  Parameter& a = ps.add("a", randn(3, 4, rng));
  Parameter& b = ps.add("b", randn(4, 5, rng));
  Parameter& bias = ps.add("bias", randn(1, 5, rng));
  Parameter& table = ps.add("table", randn(6, 3, rng));
  const Tensor probe = randn(3, 5, rng);
  auto loss = [&](bool grad) {
    Graph g;
    std::mt19937_64 drop(11);
    Var e = ops::embedding(g.param(table), {0, 5, 0});
    Var x = ops::concat_cols({ops::mul(g.param(a), g.param(a)), ops::slice_cols(e, 1, 2)});
    Var h = ops::add_bias(ops::matmul(ops::slice_cols(x, 0, 4), g.param(b)), g.param(bias));
    Var t = ops::add(ops::tanh(h), ops::sigmoid(ops::scale(h, 0.7)));
    Var r = ops::dropout(ops::relu(ops::add(t, g.view(probe))), 0.3, drop, true);
    Var s = ops::softmax_rows(ops::slice_rows(r, 1, 2), {1, 0, 1, 1, 1, 1, 1, 1, 1, 1});
    Var l = ops::add(ops::cross_entropy(r, {0, 3, 4}, {0.2, 0.3, 0.5}),
                     ops::sum(ops::mul(s, s)));
    if (grad) g.backward(l);
    return l.value()[0];
  };
  const GradCheckReport r = finite_diff_check(ps, loss, 1e-6);
  EXPECT_TRUE(r.passed) << r.worst_param << " " << r.max_rel_error;
  EXPECT_GT(r.coordinates_checked, 40u);
}

TEST(GradCheck, AttentionPrimitives) {
  std::mt19937_64 rng(8);
  ParameterSet ps;
  Parameter& k = ps.add("k", randn(6, 4, rng));
  Parameter& q = ps.add("q", randn(2, 4, rng));
  Parameter& v = ps.add("v", randn(4, 1, rng));
  Parameter& vals = ps.add("vals", randn(6, 3, rng));
  const Tensor probe = randn(2, 3, rng);
  auto loss = [&](bool grad) {
    Graph g;
    Var s = ops::attention_scores(g.param(k), g.param(q), g.param(v), 3);
    Var p = ops::softmax_rows(s);
    Var c = ops::attend(p, g.param(vals), 3);
    Var l = ops::sum(ops::mul(c, g.view(probe)));
    if (grad) g.backward(l);
    return l.value()[0];
  };
  const GradCheckReport r = finite_diff_check(ps, loss, 1e-6);
  EXPECT_TRUE(r.passed) << r.worst_param << " " << r.max_rel_error;
}

TEST(GradCheck, TwoLayerMlp) {
  std::mt19937_64 rng(9);
  ParameterSet ps;
  Parameter& w1 = ps.add("w1", uniform_init(5, 8, rng));
  Parameter& b1 = ps.add("b1", randn(1, 8, rng));
  Parameter& w2 = ps.add("w2", uniform_init(8, 3, rng));
  const Tensor x = randn(4, 5, rng);
  auto loss = [&](bool grad) {
    Graph g;
    Var h = ops::tanh(ops::add_bias(ops::matmul(g.view(x), g.param(w1)), g.param(b1)));
    Var l = ops::cross_entropy(ops::matmul(h, g.param(w2)), {0, 2, 1, 1},
                               {0.25, 0.25, 0.25, 0.25});
    if (grad) g.backward(l);
    return l.value()[0];
  };
  EXPECT_LT(finite_diff_check(ps, loss, 1e-4).max_rel_error, 1e-4);
}

TEST(GradCheck, CorruptedGradientFails) {
  std::mt19937_64 rng(10);
  ParameterSet ps;
  Parameter& w = ps.add("w", randn(3, 3, rng));
  const Tensor x = randn(2, 3, rng);
  auto loss = [&](bool grad) {
    Graph g;
    Var l = ops::sum(ops::tanh(ops::matmul(g.view(x), g.param(w))));
    if (grad) {
      g.backward(l);
      for (double& v : w.grad.values()) v *= 2.0;
    }
    return l.value()[0];
  };
  const GradCheckReport r = finite_diff_check(ps, loss, 1e-4);
  EXPECT_FALSE(r.passed);
  EXPECT_EQ(r.worst_param, "w");
  EXPECT_NEAR(r.max_rel_error, 0.5, 1e-6);
}

TEST(Determinism, IdenticalRunsGiveIdenticalParameters) {
  auto run = [] {
    std::mt19937_64 rng(12);
    ParameterSet ps;
    Parameter& w = ps.add("w", uniform_init(6, 4, rng));
    const Tensor x = randn(8, 6, rng);
    AdamState st;
    for (int step = 0; step < 25; ++step) {
      ps.zero_grad();
      Graph g;
      std::mt19937_64 drop(step);
      Var h = ops::dropout(ops::matmul(g.view(x), g.param(w)), 0.5, drop, true);
      g.backward(ops::cross_entropy(h, {0, 1, 2, 3, 0, 1, 2, 3}, std::vector<double>(8, 0.125)));
      adam_step(ps, st, 0.01);
    }
    return w.value.storage();
  };
  EXPECT_EQ(run(), run());
}
