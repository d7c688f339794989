#pragma once

// Dense 64-bit tensors and a define-by-run reverse-mode graph. A Graph is
// rebuilt for every forward pass; Graph::backward walks the nodes in reverse
// creation order, which is a reverse topological order because every node is
// created after its inputs.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "capground/error.hpp"

namespace capground {

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(count(shape_), fill) {}

  Tensor(std::vector<std::size_t> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (count(shape_) != data_.size()) {
      throw ShapeError("tensor data length does not match its shape");
    }
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
    return Tensor({rows, cols}, fill);
  }

  static Tensor row(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor({1, n}, std::move(values));
  }

  static Tensor scalar(double v) { return Tensor({1, 1}, std::vector<double>{v}); }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  // Rank <= 2 view: a rank-1 tensor is a single row.
  std::size_t rows() const {
    return shape_.size() >= 2 ? shape_[0] : (shape_.empty() ? 1 : 1);
  }
  std::size_t cols() const {
    return shape_.size() >= 2 ? shape_[1] : (shape_.empty() ? 1 : shape_[0]);
  }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const {
    return data_[r * cols() + c];
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](double x) { return std::isfinite(x); });
  }

  bool operator==(const Tensor&) const = default;

 private:
  static std::size_t count(const std::vector<std::size_t>& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1},
                           std::multiplies<>());
  }

  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

inline std::string shape_string(const Tensor& t) {
  std::string s = "[";
  for (std::size_t i = 0; i < t.rank(); ++i) {
    if (i) s += "x";
    s += std::to_string(t.shape()[i]);
  }
  return s + "]";
}

// ---------------------------------------------------------------------------
// Parameters

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
};

// Ordered, name-addressable parameter storage with stable addresses.
class ParameterSet {
 public:
  Parameter& add(std::string name, Tensor value) {
    for (const auto& p : params_) {
      if (p->name == name) throw ContractError("duplicate parameter " + name);
    }
    auto p = std::make_unique<Parameter>();
    p->name = std::move(name);
    p->grad = Tensor(value.shape(), 0.0);
    p->value = std::move(value);
    params_.push_back(std::move(p));
    return *params_.back();
  }

  Parameter& get(const std::string& name) {
    for (auto& p : params_) {
      if (p->name == name) return *p;
    }
    throw ContractError("no parameter named " + name);
  }
  const Parameter& get(const std::string& name) const {
    return const_cast<ParameterSet*>(this)->get(name);
  }

  std::size_t size() const { return params_.size(); }
  Parameter& operator[](std::size_t i) { return *params_[i]; }
  const Parameter& operator[](std::size_t i) const { return *params_[i]; }

  void zero_grad() {
    for (auto& p : params_) p->grad.fill(0.0);
  }

  double grad_norm() const {
    double s = 0.0;
    for (const auto& p : params_) {
      for (double g : p->grad.values()) s += g * g;
    }
    return std::sqrt(s);
  }

  std::size_t num_values() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p->value.size();
    return n;
  }

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
};

// Rescales all gradients so their global L2 norm is at most max_norm.
inline double clip_grad_norm(ParameterSet& params, double max_norm) {
  const double norm = params.grad_norm();
  if (norm > max_norm && norm > 0.0) {
    const double s = max_norm / norm;
    for (std::size_t i = 0; i < params.size(); ++i) {
      for (double& g : params[i].grad.values()) g *= s;
    }
  }
  return norm;
}

// Weight matrices: U(-a, a), a = 1/sqrt(fan_in) with fan_in = rows.
inline Tensor uniform_init(std::size_t rows, std::size_t cols,
                           std::mt19937_64& rng) {
  const double a = 1.0 / std::sqrt(static_cast<double>(rows));
  std::uniform_real_distribution<double> u(-a, a);
  Tensor t = Tensor::matrix(rows, cols);
  for (double& v : t.values()) v = u(rng);
  return t;
}

inline Tensor gaussian_init(std::size_t rows, std::size_t cols, double sigma,
                            std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, sigma);
  Tensor t = Tensor::matrix(rows, cols);
  for (double& v : t.values()) v = g(rng);
  return t;
}

// ---------------------------------------------------------------------------
// Graph

class Graph;

struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t)>;

  // With track_grad=false parameters bind as read-only views and no backward
  // closures are stored.
  explicit Graph(bool track_grad = true) : track_grad_(track_grad) {
    nodes_.reserve(256);
  }
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor t) {
    Node n;
    n.value = std::move(t);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  // Leaf bound to a parameter; its gradient is added to param.grad by
  // backward(). The parameter must outlive the graph.
  Var param(Parameter& p) {
    if (!track_grad_) return view(p.value);
    Node n;
    n.external = &p.value;
    n.param = &p;
    n.needs_grad = true;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  // Read-only leaf that references an external tensor without copying.
  Var view(const Tensor& t) {
    Node n;
    n.external = &t;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  const Tensor& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.value;
  }

  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }

  const Tensor& grad(std::size_t id) const { return nodes_[id].grad; }

  // Gradient accumulator of an input node, allocated lazily; nullptr when the
  // node does not take part in differentiation.
  Tensor* grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.needs_grad) return nullptr;
    if (n.grad.empty()) n.grad = Tensor(value(id).shape(), 0.0);
    return &n.grad;
  }

  // Adds an op node. `value` is checked for NaN/Inf.
  Var emplace(const char* op, Tensor value, std::initializer_list<Var> inputs,
              BackwardFn backward) {
    if (!value.all_finite()) {
      throw NumericalError(std::string("non-finite value produced by ") + op);
    }
    Node n;
    n.value = std::move(value);
    for (const Var& v : inputs) {
      if (v.graph != this) throw ContractError("mixing graphs");
      n.needs_grad = n.needs_grad || nodes_[v.id].needs_grad;
    }
    if (n.needs_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  Var emplace(const char* op, Tensor value, const std::vector<Var>& inputs,
              BackwardFn backward) {
    if (!value.all_finite()) {
      throw NumericalError(std::string("non-finite value produced by ") + op);
    }
    Node n;
    n.value = std::move(value);
    for (const Var& v : inputs) {
      if (v.graph != this) throw ContractError("mixing graphs");
      n.needs_grad = n.needs_grad || nodes_[v.id].needs_grad;
    }
    if (n.needs_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  // Accumulates d(loss)/d(param) into every bound Parameter::grad.
  void backward(Var loss) {
    if (loss.graph != this) throw ContractError("loss from another graph");
    if (value(loss.id).size() != 1) {
      throw ContractError("backward needs a scalar loss, got shape " +
                          shape_string(value(loss.id)));
    }
    for (Node& n : nodes_) n.grad = Tensor();
    if (!nodes_[loss.id].needs_grad) return;
    grad_buffer(loss.id)->fill(1.0);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.grad.empty()) continue;
      if (n.backward) n.backward(*this, i);
      if (n.param) {
        Tensor& pg = n.param->grad;
        const Tensor& g = n.grad;
        for (std::size_t k = 0; k < g.size(); ++k) pg[k] += g[k];
      }
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    const Tensor* external = nullptr;
    Parameter* param = nullptr;
    Tensor grad;
    bool needs_grad = false;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
  bool track_grad_ = true;
};

inline const Tensor& Var::value() const { return graph->value(id); }

// ---------------------------------------------------------------------------
// Dense kernels

namespace kernel {

inline double dot(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
#pragma omp simd reduction(+ : s)
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

inline void axpy(double alpha, const double* x, double* y, std::size_t n) {
#pragma omp simd
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

// C[m x n] += A[m x k] * B[k x n]
template <typename T>
using RowMajor = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor<double>>;
using MutMap = Eigen::Map<RowMajor<double>>;

// C[m x n] += A[m x k] * B[k x n]
inline void gemm_nn(const double* A, const double* B, double* C, std::size_t m,
                    std::size_t k, std::size_t n) {
  const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k),
             N = static_cast<Eigen::Index>(n);
  MutMap(C, M, N).noalias() += ConstMap(A, M, K) * ConstMap(B, K, N);
}
// dA[m x k] += dC[m x n] * B[k x n]^T
inline void gemm_nt(const double* dC, const double* B, double* dA,
                    std::size_t m, std::size_t k, std::size_t n) {
  const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k),
             N = static_cast<Eigen::Index>(n);
  MutMap(dA, M, K).noalias() += ConstMap(dC, M, N) * ConstMap(B, K, N).transpose();
}
// dB[k x n] += A[m x k]^T * dC[m x n]
inline void gemm_tn(const double* A, const double* dC, double* dB,
                    std::size_t m, std::size_t k, std::size_t n) {
  const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k),
             N = static_cast<Eigen::Index>(n);
  MutMap(dB, K, N).noalias() += ConstMap(A, M, K).transpose() * ConstMap(dC, M, N);
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace kernel

// ---------------------------------------------------------------------------
// Primitive ops. All operate on rank-2 values.

namespace ops {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

inline Var matmul(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require(A.cols() == B.rows(), "matmul: " + shape_string(A) + " * " +
                                    shape_string(B));
  const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
  Tensor C = Tensor::matrix(m, n);
  kernel::gemm_nn(A.data(), B.data(), C.data(), m, k, n);
  return a.graph->emplace(
      "matmul", std::move(C), {a, b},
      [a, b, m, k, n](Graph& g, std::size_t self) {
        const Tensor& dC = g.grad(self);
        if (Tensor* dA = g.grad_buffer(a.id)) {
          kernel::gemm_nt(dC.data(), g.value(b.id).data(), dA->data(), m, k, n);
        }
        if (Tensor* dB = g.grad_buffer(b.id)) {
          kernel::gemm_tn(g.value(a.id).data(), dC.data(), dB->data(), m, k, n);
        }
      });
}

inline Var add(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require(A.rows() == B.rows() && A.cols() == B.cols(),
          "add: " + shape_string(A) + " + " + shape_string(B));
  Tensor C = Tensor::matrix(A.rows(), A.cols());
  for (std::size_t i = 0; i < C.size(); ++i) C[i] = A[i] + B[i];
  return a.graph->emplace("add", std::move(C), {a, b},
                          [a, b](Graph& g, std::size_t self) {
                            const Tensor& d = g.grad(self);
                            for (Var v : {a, b}) {
                              if (Tensor* dv = g.grad_buffer(v.id)) {
                                for (std::size_t i = 0; i < d.size(); ++i) {
                                  (*dv)[i] += d[i];
                                }
                              }
                            }
                          });
}

// A[m x n] + b[1 x n] broadcast over rows.
inline Var add_bias(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require(B.size() == A.cols(), "add_bias: " + shape_string(A) + " + " +
                                    shape_string(B));
  const std::size_t m = A.rows(), n = A.cols();
  Tensor C = Tensor::matrix(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) C[i * n + j] = A[i * n + j] + B[j];
  }
  return a.graph->emplace(
      "add_bias", std::move(C), {a, b}, [a, b, m, n](Graph& g, std::size_t self) {
        const Tensor& d = g.grad(self);
        if (Tensor* da = g.grad_buffer(a.id)) {
          for (std::size_t i = 0; i < d.size(); ++i) (*da)[i] += d[i];
        }
        if (Tensor* db = g.grad_buffer(b.id)) {
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) (*db)[j] += d[i * n + j];
          }
        }
      });
}

inline Var mul(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require(A.rows() == B.rows() && A.cols() == B.cols(),
          "mul: " + shape_string(A) + " * " + shape_string(B));
  Tensor C = Tensor::matrix(A.rows(), A.cols());
  for (std::size_t i = 0; i < C.size(); ++i) C[i] = A[i] * B[i];
  return a.graph->emplace("mul", std::move(C), {a, b},
                          [a, b](Graph& g, std::size_t self) {
                            const Tensor& d = g.grad(self);
                            if (Tensor* da = g.grad_buffer(a.id)) {
                              const Tensor& B = g.value(b.id);
                              for (std::size_t i = 0; i < d.size(); ++i) {
                                (*da)[i] += d[i] * B[i];
                              }
                            }
                            if (Tensor* db = g.grad_buffer(b.id)) {
                              const Tensor& A = g.value(a.id);
                              for (std::size_t i = 0; i < d.size(); ++i) {
                                (*db)[i] += d[i] * A[i];
                              }
                            }
                          });
}

inline Var scale(Var a, double s) {
  const Tensor& A = a.value();
  Tensor C = Tensor::matrix(A.rows(), A.cols());
  for (std::size_t i = 0; i < C.size(); ++i) C[i] = s * A[i];
  return a.graph->emplace("scale", std::move(C), {a},
                          [a, s](Graph& g, std::size_t self) {
                            const Tensor& d = g.grad(self);
                            if (Tensor* da = g.grad_buffer(a.id)) {
                              for (std::size_t i = 0; i < d.size(); ++i) {
                                (*da)[i] += s * d[i];
                              }
                            }
                          });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  const std::size_t m = parts.front().rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Var& p : parts) {
    require(p.rows() == m, "concat_cols: row mismatch");
    widths.push_back(p.cols());
    total += p.cols();
  }
  Tensor C = Tensor::matrix(m, total);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& P = parts[k].value();
    for (std::size_t i = 0; i < m; ++i) {
      std::copy_n(P.data() + i * widths[k], widths[k],
                  C.data() + i * total + off);
    }
    off += widths[k];
  }
  return parts.front().graph->emplace(
      "concat_cols", std::move(C), parts,
      [parts, widths, m, total](Graph& g, std::size_t self) {
        const Tensor& d = g.grad(self);
        std::size_t off = 0;
        for (std::size_t k = 0; k < parts.size(); ++k) {
          if (Tensor* dp = g.grad_buffer(parts[k].id)) {
            for (std::size_t i = 0; i < m; ++i) {
              kernel::axpy(1.0, d.data() + i * total + off,
                           dp->data() + i * widths[k], widths[k]);
            }
          }
          off += widths[k];
        }
      });
}

// Rows [start, start + len) of a.
inline Var slice_rows(Var a, std::size_t start, std::size_t len) {
  const Tensor& A = a.value();
  require(start + len <= A.rows(), "slice_rows: out of range");
  const std::size_t n = A.cols();
  Tensor C = Tensor::matrix(len, n);
  std::copy_n(A.data() + start * n, len * n, C.data());
  return a.graph->emplace("slice_rows", std::move(C), {a},
                          [a, start, len, n](Graph& g, std::size_t self) {
                            if (Tensor* da = g.grad_buffer(a.id)) {
                              kernel::axpy(1.0, g.grad(self).data(),
                                           da->data() + start * n, len * n);
                            }
                          });
}

inline Var slice_cols(Var a, std::size_t start, std::size_t len) {
  const Tensor& A = a.value();
  require(start + len <= A.cols(), "slice_cols: out of range");
  const std::size_t m = A.rows(), n = A.cols();
  Tensor C = Tensor::matrix(m, len);
  for (std::size_t i = 0; i < m; ++i) {
    std::copy_n(A.data() + i * n + start, len, C.data() + i * len);
  }
  return a.graph->emplace("slice_cols", std::move(C), {a},
                          [a, start, len, m, n](Graph& g, std::size_t self) {
                            const Tensor& d = g.grad(self);
                            if (Tensor* da = g.grad_buffer(a.id)) {
                              for (std::size_t i = 0; i < m; ++i) {
                                kernel::axpy(1.0, d.data() + i * len,
                                             da->data() + i * n + start, len);
                              }
                            }
                          });
}

namespace detail {

// Pointwise op whose derivative is a function of its output.
template <typename F, typename DF>
Var pointwise(const char* name, Var a, F f, DF df_from_output) {
  const Tensor& A = a.value();
  Tensor C = Tensor::matrix(A.rows(), A.cols());
  for (std::size_t i = 0; i < C.size(); ++i) C[i] = f(A[i]);
  return a.graph->emplace(name, std::move(C), {a},
                          [a, df_from_output](Graph& g, std::size_t self) {
                            const Tensor& d = g.grad(self);
                            const Tensor& y = g.value(self);
                            if (Tensor* da = g.grad_buffer(a.id)) {
                              for (std::size_t i = 0; i < d.size(); ++i) {
                                (*da)[i] += d[i] * df_from_output(y[i]);
                              }
                            }
                          });
}

}  // namespace detail

inline Var tanh(Var a) {
  return detail::pointwise(
      "tanh", a, [](double x) { return std::tanh(x); },
      [](double y) { return 1.0 - y * y; });
}

inline Var sigmoid(Var a) {
  return detail::pointwise(
      "sigmoid", a, [](double x) { return kernel::sigmoid(x); },
      [](double y) { return y * (1.0 - y); });
}

inline Var relu(Var a) {
  return detail::pointwise(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double y) { return y > 0.0 ? 1.0 : 0.0; });
}

// Row-wise softmax. Entries with mask == 0 get probability exactly 0; every
// row needs at least one unmasked entry.
inline Var softmax_rows(Var a, const std::vector<std::uint8_t>& mask = {}) {
  const Tensor& A = a.value();
  const std::size_t m = A.rows(), n = A.cols();
  require(mask.empty() || mask.size() == A.size(), "softmax: mask size");
  Tensor P = Tensor::matrix(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -INFINITY;
    for (std::size_t j = 0; j < n; ++j) {
      if (mask.empty() || mask[i * n + j]) mx = std::max(mx, A[i * n + j]);
    }
    if (mx == -INFINITY) throw EmptyKeysError();
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double e = (mask.empty() || mask[i * n + j])
                           ? std::exp(A[i * n + j] - mx)
                           : 0.0;
      P[i * n + j] = e;
      s += e;
    }
    for (std::size_t j = 0; j < n; ++j) P[i * n + j] /= s;
  }
  return a.graph->emplace(
      "softmax", std::move(P), {a}, [a, m, n](Graph& g, std::size_t self) {
        const Tensor& d = g.grad(self);
        const Tensor& p = g.value(self);
        if (Tensor* da = g.grad_buffer(a.id)) {
          for (std::size_t i = 0; i < m; ++i) {
            const double s = kernel::dot(d.data() + i * n, p.data() + i * n, n);
            for (std::size_t j = 0; j < n; ++j) {
              (*da)[i * n + j] += p[i * n + j] * (d[i * n + j] - s);
            }
          }
        }
      });
}

// Rows of table[V x e] selected by ids.
inline Var embedding(Var table, const std::vector<int>& ids) {
  const Tensor& T = table.value();
  const std::size_t e = T.cols();
  Tensor C = Tensor::matrix(ids.size(), e);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= T.rows()) {
      throw VocabError("token id " + std::to_string(ids[i]) +
                       " outside embedding table of " +
                       std::to_string(T.rows()) + " rows");
    }
    std::copy_n(T.data() + static_cast<std::size_t>(ids[i]) * e, e,
                C.data() + i * e);
  }
  return table.graph->emplace(
      "embedding", std::move(C), {table},
      [table, ids, e](Graph& g, std::size_t self) {
        const Tensor& d = g.grad(self);
        if (Tensor* dt = g.grad_buffer(table.id)) {
          for (std::size_t i = 0; i < ids.size(); ++i) {
            kernel::axpy(1.0, d.data() + i * e,
                         dt->data() + static_cast<std::size_t>(ids[i]) * e, e);
          }
        }
      });
}

// Inverted dropout: kept entries are scaled by 1/(1-rate).
inline Var dropout(Var a, double rate, std::mt19937_64& rng, bool train) {
  if (!train || rate <= 0.0) return a;
  if (rate >= 1.0) throw ConfigError("dropout rate must be < 1");
  const Tensor& A = a.value();
  std::bernoulli_distribution keep(1.0 - rate);
  const double s = 1.0 / (1.0 - rate);
  std::vector<double> mask(A.size());
  for (double& m : mask) m = keep(rng) ? s : 0.0;
  Tensor C = Tensor::matrix(A.rows(), A.cols());
  for (std::size_t i = 0; i < C.size(); ++i) C[i] = A[i] * mask[i];
  return a.graph->emplace("dropout", std::move(C), {a},
                          [a, mask = std::move(mask)](Graph& g, std::size_t self) {
                            const Tensor& d = g.grad(self);
                            if (Tensor* da = g.grad_buffer(a.id)) {
                              for (std::size_t i = 0; i < d.size(); ++i) {
                                (*da)[i] += d[i] * mask[i];
                              }
                            }
                          });
}

// Scalar sum_b w_b * (-log softmax(logits_b)[target_b]). Rows with weight 0
// are ignored (their target is not read).
inline Var cross_entropy(Var logits, const std::vector<int>& targets,
                         const std::vector<double>& weights) {
  const Tensor& L = logits.value();
  const std::size_t m = L.rows(), n = L.cols();
  require(targets.size() == m && weights.size() == m,
          "cross_entropy: targets/weights must match rows");
  Tensor probs = Tensor::matrix(m, n);
  double loss = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    if (weights[i] == 0.0) continue;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= n) {
      throw VocabError("target " + std::to_string(targets[i]) +
                       " outside " + std::to_string(n) + " classes");
    }
    const double* row = L.data() + i * n;
    const double mx = *std::max_element(row, row + n);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += std::exp(row[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < n; ++j) probs[i * n + j] = std::exp(row[j] - lse);
    loss += weights[i] * (lse - row[static_cast<std::size_t>(targets[i])]);
  }
  return logits.graph->emplace(
      "cross_entropy", Tensor::scalar(loss), {logits},
      [logits, targets, weights, probs = std::move(probs), m, n](
          Graph& g, std::size_t self) {
        const double d = g.grad(self)[0];
        if (Tensor* dl = g.grad_buffer(logits.id)) {
          for (std::size_t i = 0; i < m; ++i) {
            if (weights[i] == 0.0) continue;
            const double w = d * weights[i];
            for (std::size_t j = 0; j < n; ++j) {
              (*dl)[i * n + j] += w * probs[i * n + j];
            }
            (*dl)[i * n + static_cast<std::size_t>(targets[i])] -= w;
          }
        }
      });
}

inline Var sum(Var a) {
  const Tensor& A = a.value();
  double s = 0.0;
  for (double x : A.values()) s += x;
  return a.graph->emplace("sum", Tensor::scalar(s), {a},
                          [a](Graph& g, std::size_t self) {
                            const double d = g.grad(self)[0];
                            if (Tensor* da = g.grad_buffer(a.id)) {
                              for (double& x : da->values()) x += d;
                            }
                          });
}

// Additive attention scores for a batch of B queries, each over `per_row`
// keys stored contiguously: keys[B*per_row x A], queries[B x A], v[A x 1].
//   score[b, i] = sum_a v[a] * tanh(keys[b*per_row + i, a] + queries[b, a])
inline Var attention_scores(Var keys, Var queries, Var v, std::size_t per_row) {
  const Tensor& K = keys.value();
  const Tensor& Q = queries.value();
  const Tensor& V = v.value();
  const std::size_t batch = Q.rows(), dim = Q.cols();
  require(per_row > 0, "attention_scores: per_row must be > 0");
  require(K.rows() == batch * per_row && K.cols() == dim,
          "attention_scores: keys " + shape_string(K) + " vs queries " +
              shape_string(Q));
  require(V.size() == dim, "attention_scores: v size");
  Tensor S = Tensor::matrix(batch, per_row);
  std::vector<double> act(K.size());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < per_row; ++i) {
      const std::size_t r = b * per_row + i;
      double s = 0.0;
      for (std::size_t a = 0; a < dim; ++a) {
        const double t = std::tanh(K[r * dim + a] + Q[b * dim + a]);
        act[r * dim + a] = t;
        s += V[a] * t;
      }
      S[b * per_row + i] = s;
    }
  }
  return keys.graph->emplace(
      "attention_scores", std::move(S), {keys, queries, v},
      [keys, queries, v, per_row, batch, dim, act = std::move(act)](
          Graph& g, std::size_t self) {
        const Tensor& dS = g.grad(self);
        const Tensor& V = g.value(v.id);
        Tensor* dK = g.grad_buffer(keys.id);
        Tensor* dQ = g.grad_buffer(queries.id);
        Tensor* dV = g.grad_buffer(v.id);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t i = 0; i < per_row; ++i) {
            const std::size_t r = b * per_row + i;
            const double ds = dS[b * per_row + i];
            if (ds == 0.0) continue;
            for (std::size_t a = 0; a < dim; ++a) {
              const double t = act[r * dim + a];
              if (dV) (*dV)[a] += ds * t;
              const double dpre = ds * V[a] * (1.0 - t * t);
              if (dK) (*dK)[r * dim + a] += dpre;
              if (dQ) (*dQ)[b * dim + a] += dpre;
            }
          }
        }
      });
}

// context[b] = sum_i probs[b, i] * values[b*per_row + i]
inline Var attend(Var probs, Var values, std::size_t per_row) {
  const Tensor& P = probs.value();
  const Tensor& X = values.value();
  const std::size_t batch = P.rows(), d = X.cols();
  require(P.cols() == per_row && X.rows() == batch * per_row,
          "attend: probs " + shape_string(P) + " vs values " + shape_string(X));
  Tensor C = Tensor::matrix(batch, d);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < per_row; ++i) {
      kernel::axpy(P[b * per_row + i], X.data() + (b * per_row + i) * d,
                   C.data() + b * d, d);
    }
  }
  return probs.graph->emplace(
      "attend", std::move(C), {probs, values},
      [probs, values, per_row, batch, d](Graph& g, std::size_t self) {
        const Tensor& dC = g.grad(self);
        if (Tensor* dP = g.grad_buffer(probs.id)) {
          const Tensor& X = g.value(values.id);
          for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t i = 0; i < per_row; ++i) {
              (*dP)[b * per_row + i] +=
                  kernel::dot(dC.data() + b * d,
                              X.data() + (b * per_row + i) * d, d);
            }
          }
        }
        if (Tensor* dX = g.grad_buffer(values.id)) {
          const Tensor& P = g.value(probs.id);
          for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t i = 0; i < per_row; ++i) {
              kernel::axpy(P[b * per_row + i], dC.data() + b * d,
                           dX->data() + (b * per_row + i) * d, d);
            }
          }
        }
      });
}

}  // namespace ops

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::int64_t t = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
};

// One bias-corrected Adam update of every parameter from its grad.
inline void adam_step(ParameterSet& params, AdamState& state, double lr) {
  if (state.m.empty()) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m.emplace_back(params[i].value.shape(), 0.0);
      state.v.emplace_back(params[i].value.shape(), 0.0);
    }
  }
  if (state.m.size() != params.size()) {
    throw ShapeError("adam state does not match parameter set");
  }
  ++state.t;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = params[i];
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    if (m.size() != p.value.size() || p.grad.size() != p.value.size()) {
      throw ShapeError("adam: shape mismatch for " + p.name);
    }
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const double g = p.grad[k];
      m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * g;
      v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * g * g;
      const double mhat = m[k] / c1;
      const double vhat = v[k] / c2;
      p.value[k] -= lr * mhat / (std::sqrt(vhat) + state.epsilon);
    }
  }
}

// ---------------------------------------------------------------------------
// Finite-difference verification

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coordinates_checked = 0;
  bool passed = true;
};

// `loss_fn(with_grad)` evaluates the loss; when with_grad is true it must also
// accumulate gradients into params (the check zeroes them first). Central
// differences on up to `max_coords` sampled coordinates per tensor. Relative
// error is |a - n| / max(|a|, |n|, floor).
inline GradCheckReport finite_diff_check(
    ParameterSet& params, const std::function<double(bool)>& loss_fn,
    double tolerance, double step = 1e-5, std::size_t max_coords = 200,
    std::uint64_t seed = 7, double floor = 1e-6) {
  params.zero_grad();
  loss_fn(true);
  std::vector<Tensor> analytic;
  for (std::size_t i = 0; i < params.size(); ++i) {
    analytic.push_back(params[i].grad);
  }
  GradCheckReport report;
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = params[i];
    std::vector<std::size_t> coords(p.value.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (coords.size() > max_coords) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(max_coords);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t k : coords) {
      const double orig = p.value[k];
      p.value[k] = orig + step;
      const double up = loss_fn(false);
      p.value[k] = orig - step;
      const double down = loss_fn(false);
      p.value[k] = orig;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[i][k];
      const double rel = std::abs(a - numeric) /
                         std::max({std::abs(a), std::abs(numeric), floor});
      ++report.coordinates_checked;
      if (rel > report.max_rel_error || report.worst_param.empty()) {
        report.max_rel_error = rel;
        report.worst_param = p.name;
        report.worst_index = k;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  report.passed = report.max_rel_error < tolerance;
  params.zero_grad();
  return report;
}

}  // namespace capground
