#pragma once

// Composite layers built from the tensor primitives, plus the binary
// checkpoint format.

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "capground/tensor.hpp"

namespace capground {

// ---------------------------------------------------------------------------
// Linear

struct LinearParams {
  Parameter* weight = nullptr;  // in x out
  Parameter* bias = nullptr;    // 1 x out

  static LinearParams create(ParameterSet& ps, const std::string& prefix,
                             std::size_t in, std::size_t out,
                             std::mt19937_64& rng) {
    LinearParams p;
    p.weight = &ps.add(prefix + ".weight", uniform_init(in, out, rng));
    p.bias = &ps.add(prefix + ".bias", Tensor::matrix(1, out));
    return p;
  }

  struct Bound {
    Var weight;
    Var bias;
  };
  Bound bind(Graph& g) const { return {g.param(*weight), g.param(*bias)}; }
};

inline Var linear(Var x, const LinearParams::Bound& p) {
  return ops::add_bias(ops::matmul(x, p.weight), p.bias);
}

// ---------------------------------------------------------------------------
// LSTM cell. One fused weight over [x; h] with gate blocks ordered
// (input, forget, output, candidate).

struct LstmParams {
  Parameter* weight = nullptr;  // (input + hidden) x 4*hidden
  Parameter* bias = nullptr;    // 1 x 4*hidden
  std::size_t input = 0;
  std::size_t hidden = 0;

  static LstmParams create(ParameterSet& ps, const std::string& prefix,
                           std::size_t input, std::size_t hidden,
                           std::mt19937_64& rng) {
    LstmParams p;
    p.input = input;
    p.hidden = hidden;
    p.weight = &ps.add(prefix + ".weight",
                       uniform_init(input + hidden, 4 * hidden, rng));
    p.bias = &ps.add(prefix + ".bias", Tensor::matrix(1, 4 * hidden));
    return p;
  }

  struct Bound {
    Var weight;
    Var bias;
    std::size_t input;
    std::size_t hidden;
  };
  Bound bind(Graph& g) const {
    return {g.param(*weight), g.param(*bias), input, hidden};
  }
};

struct LstmState {
  Var h;
  Var c;
};

// Input block of a fused cell: `value` multiplies weight rows
// [row, row + value.cols()).
struct LstmBlock {
  Var value;
  std::size_t row = 0;
};

// c' = sig(f) * c + sig(i) * tanh(g);  h' = sig(o) * tanh(c')
// z = sum_k blocks[k] * W[rows of k] + bias (+ extra, a precomputed B x 4H
// contribution of weight rows not covered by any block). One graph node.
inline LstmState lstm_cell_blocks(const std::vector<LstmBlock>& blocks, Var c,
                                  const LstmParams::Bound& p,
                                  const Var* extra = nullptr) {
  const std::size_t H = p.hidden;
  const std::size_t G = 4 * H;
  const std::size_t B = c.rows();
  const Tensor& W = p.weight.value();
  if (c.cols() != H || W.cols() != G || W.rows() != p.input + H ||
      p.bias.cols() != G || blocks.empty()) {
    throw ShapeError("lstm_cell: cell " + shape_string(c.value()) +
                     " vs weight " + shape_string(W));
  }
  for (const LstmBlock& b : blocks) {
    if (b.value.rows() != B || b.row + b.value.cols() > W.rows()) {
      throw ShapeError("lstm_cell: input block " + shape_string(b.value.value()) +
                       " at row " + std::to_string(b.row) + " vs weight " +
                       shape_string(W));
    }
  }
  if (extra && (extra->rows() != B || extra->cols() != G)) {
    throw ShapeError("lstm_cell: extra gates " + shape_string(extra->value()));
  }

  // z, then gates in place: [i f o g] per row.
  auto gates = std::make_shared<std::vector<double>>(B * G);
  double* z = gates->data();
  const double* bias = p.bias.value().data();
  for (std::size_t r = 0; r < B; ++r) std::copy_n(bias, G, z + r * G);
  if (extra) kernel::axpy(1.0, extra->value().data(), z, B * G);
  for (const LstmBlock& b : blocks) {
    kernel::gemm_nn(b.value.value().data(), W.data() + b.row * G, z, B,
                    b.value.cols(), G);
  }
  const double* c_prev = c.value().data();
  Tensor out = Tensor::matrix(B, 2 * H);  // [h' | c']
  auto tanh_c = std::make_shared<std::vector<double>>(B * H);
  for (std::size_t r = 0; r < B; ++r) {
    double* zr = z + r * G;
    for (std::size_t j = 0; j < 3 * H; ++j) zr[j] = kernel::sigmoid(zr[j]);
    for (std::size_t j = 3 * H; j < G; ++j) zr[j] = std::tanh(zr[j]);
    double* hr = out.data() + r * 2 * H;
    double* cr = hr + H;
    for (std::size_t j = 0; j < H; ++j) {
      cr[j] = zr[H + j] * c_prev[r * H + j] + zr[j] * zr[3 * H + j];
      const double t = std::tanh(cr[j]);
      (*tanh_c)[r * H + j] = t;
      hr[j] = zr[2 * H + j] * t;
    }
  }

  std::vector<Var> inputs;
  for (const LstmBlock& b : blocks) inputs.push_back(b.value);
  inputs.push_back(c);
  inputs.push_back(p.weight);
  inputs.push_back(p.bias);
  if (extra) inputs.push_back(*extra);
  Graph& graph = *c.graph;
  Var fused = graph.emplace(
      "lstm_cell", std::move(out), inputs,
      [blocks, c, w = p.weight, bias = p.bias,
       extra_id = extra ? std::optional<std::size_t>(extra->id) : std::nullopt,
       gates, tanh_c, B, H, G](Graph& g, std::size_t self) {
        const double* d = g.grad(self).data();
        const double* gt = gates->data();
        const double* cp = g.value(c.id).data();
        std::vector<double> dz(B * G);
        Tensor* dc_prev = g.grad_buffer(c.id);
        for (std::size_t r = 0; r < B; ++r) {
          const double* dh = d + r * 2 * H;
          const double* dc = dh + H;
          const double* gr = gt + r * G;
          double* dzr = dz.data() + r * G;
          for (std::size_t j = 0; j < H; ++j) {
            const double i = gr[j], f = gr[H + j], o = gr[2 * H + j],
                         gg = gr[3 * H + j];
            const double t = (*tanh_c)[r * H + j];
            const double dct = dc[j] + dh[j] * o * (1.0 - t * t);
            dzr[j] = dct * gg * i * (1.0 - i);
            dzr[H + j] = dct * cp[r * H + j] * f * (1.0 - f);
            dzr[2 * H + j] = dh[j] * t * o * (1.0 - o);
            dzr[3 * H + j] = dct * i * (1.0 - gg * gg);
            if (dc_prev) dc_prev->data()[r * H + j] += dct * f;
          }
        }
        const Tensor& Wv = g.value(w.id);
        Tensor* dW = g.grad_buffer(w.id);
        for (const LstmBlock& b : blocks) {
          const std::size_t k = g.value(b.value.id).cols();
          if (Tensor* dx = g.grad_buffer(b.value.id)) {
            kernel::gemm_nt(dz.data(), Wv.data() + b.row * G, dx->data(), B, k, G);
          }
          if (dW) {
            kernel::gemm_tn(g.value(b.value.id).data(), dz.data(),
                            dW->data() + b.row * G, B, k, G);
          }
        }
        if (Tensor* db = g.grad_buffer(bias.id)) {
          for (std::size_t r = 0; r < B; ++r) {
            kernel::axpy(1.0, dz.data() + r * G, db->data(), G);
          }
        }
        if (extra_id) {
          if (Tensor* de = g.grad_buffer(*extra_id)) {
            kernel::axpy(1.0, dz.data(), de->data(), B * G);
          }
        }
      });
  return {ops::slice_cols(fused, 0, H), ops::slice_cols(fused, H, H)};
}

inline LstmState lstm_cell(Var x, Var h, Var c, const LstmParams::Bound& p) {
  const std::size_t H = p.hidden;
  if (x.cols() != p.input || h.cols() != H || c.cols() != H ||
      h.rows() != x.rows() || c.rows() != x.rows() ||
      p.weight.rows() != p.input + H || p.weight.cols() != 4 * H) {
    throw ShapeError("lstm_cell: input " + shape_string(x.value()) +
                     ", hidden " + shape_string(h.value()) + ", cell " +
                     shape_string(c.value()) + " vs weight " +
                     shape_string(p.weight.value()));
  }
  return lstm_cell_blocks({{x, 0}, {h, p.input}}, c, p);
}

// ---------------------------------------------------------------------------
// Additive attention: score_i = v^T tanh(Wq q + Wk k_i)

struct AttentionParams {
  Parameter* query_weight = nullptr;  // query_dim x attn_dim
  Parameter* key_weight = nullptr;    // key_dim x attn_dim
  Parameter* score = nullptr;         // attn_dim x 1

  static AttentionParams create(ParameterSet& ps, const std::string& prefix,
                                std::size_t query_dim, std::size_t key_dim,
                                std::size_t attn_dim, std::mt19937_64& rng) {
    AttentionParams p;
    p.query_weight =
        &ps.add(prefix + ".query", uniform_init(query_dim, attn_dim, rng));
    p.key_weight = &ps.add(prefix + ".key", uniform_init(key_dim, attn_dim, rng));
    p.score = &ps.add(prefix + ".score", uniform_init(attn_dim, 1, rng));
    return p;
  }

  struct Bound {
    Var query_weight;
    Var key_weight;
    Var score;
  };
  Bound bind(Graph& g) const {
    return {g.param(*query_weight), g.param(*key_weight), g.param(*score)};
  }
};

// Keys for a batch: row b owns keys [b*per_row, (b+1)*per_row); mask marks
// real (1) versus padding (0) keys. The projection is computed once and
// reused across decoding steps.
struct AttentionKeys {
  Var values;
  Var projected;
  std::size_t per_row = 0;
  std::vector<std::uint8_t> mask;
};

inline AttentionKeys prepare_keys(Var keys, std::size_t per_row,
                                  std::vector<std::uint8_t> mask,
                                  const AttentionParams::Bound& p) {
  if (per_row == 0 || keys.rows() == 0) throw EmptyKeysError();
  if (keys.rows() % per_row != 0) {
    throw ShapeError("attention keys not divisible into rows");
  }
  if (!mask.empty() && mask.size() != keys.rows()) {
    throw ShapeError("attention mask size");
  }
  return {keys, ops::matmul(keys, p.key_weight), per_row, std::move(mask)};
}

struct AttentionResult {
  Var context;
  Var probs;
};

inline AttentionResult additive_attention(Var query, const AttentionKeys& keys,
                                          const AttentionParams::Bound& p) {
  if (query.rows() * keys.per_row != keys.values.rows()) {
    throw ShapeError("attention: query batch does not match keys");
  }
  Var q = ops::matmul(query, p.query_weight);
  Var scores = ops::attention_scores(keys.projected, q, p.score, keys.per_row);
  Var probs = ops::softmax_rows(scores, keys.mask);
  Var context = ops::attend(probs, keys.values, keys.per_row);
  return {context, probs};
}

// Single query [1 x q] over n unmasked keys [n x d].
inline AttentionResult additive_attention(Var query, Var keys,
                                          const AttentionParams::Bound& p) {
  if (keys.rows() == 0) throw EmptyKeysError();
  return additive_attention(query, prepare_keys(keys, keys.rows(), {}, p), p);
}

// ---------------------------------------------------------------------------
// Checkpoints: "CGK1", then per tensor: u32 name length, name bytes,
// u32 rank, u64 dims, f64 payload. Little-endian.

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

namespace detail {

template <typename T>
void put_le(std::string& out, T v) {
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(std::begin(buf), std::end(buf));
  }
  out.append(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T get_le(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) {
    throw IoError("checkpoint truncated at byte " + std::to_string(pos));
  }
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, in.data() + pos, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(std::begin(buf), std::end(buf));
  }
  pos += sizeof(T);
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

}  // namespace detail

inline constexpr char kCheckpointMagic[4] = {'C', 'G', 'K', '1'};

inline std::string encode_checkpoint(const std::vector<NamedTensor>& tensors) {
  std::string out(kCheckpointMagic, 4);
  for (const NamedTensor& nt : tensors) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(nt.name.size()));
    out += nt.name;
    detail::put_le<std::uint32_t>(out,
                                  static_cast<std::uint32_t>(nt.tensor.rank()));
    for (std::size_t d : nt.tensor.shape()) {
      detail::put_le<std::uint64_t>(out, d);
    }
    for (double v : nt.tensor.values()) detail::put_le<double>(out, v);
  }
  return out;
}

inline std::vector<NamedTensor> decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw IoError("not a checkpoint: bad magic");
  }
  std::vector<NamedTensor> out;
  std::size_t pos = 4;
  while (pos < bytes.size()) {
    NamedTensor nt;
    const auto name_len = detail::get_le<std::uint32_t>(bytes, pos);
    if (pos + name_len > bytes.size()) throw IoError("checkpoint truncated");
    nt.name = bytes.substr(pos, name_len);
    pos += name_len;
    const auto rank = detail::get_le<std::uint32_t>(bytes, pos);
    if (rank > 8) throw IoError("checkpoint: implausible rank");
    std::vector<std::size_t> shape;
    std::size_t count = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      const auto d = detail::get_le<std::uint64_t>(bytes, pos);
      if (d > (bytes.size() / 8) + 1) throw IoError("checkpoint: bad dims");
      shape.push_back(static_cast<std::size_t>(d));
      count *= static_cast<std::size_t>(d);
    }
    if (pos + count * 8 > bytes.size()) {
      throw IoError("checkpoint truncated in tensor " + nt.name);
    }
    std::vector<double> data(count);
    for (double& v : data) v = detail::get_le<double>(bytes, pos);
    nt.tensor = Tensor(std::move(shape), std::move(data));
    out.push_back(std::move(nt));
  }
  return out;
}

inline void save_checkpoint(const std::string& path,
                            const std::vector<NamedTensor>& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path);
  const std::string bytes = encode_checkpoint(tensors);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("write failed: " + path);
}

inline std::vector<NamedTensor> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path);
  std::string bytes((std::istreambuf_iterator<char>(is)),
                    std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

inline std::vector<NamedTensor> parameters_to_tensors(const ParameterSet& ps) {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    out.push_back({ps[i].name, ps[i].value});
  }
  return out;
}

// Copies checkpoint values into matching parameters; every parameter must be
// present with an identical shape.
inline void load_parameters(ParameterSet& ps,
                            const std::vector<NamedTensor>& tensors) {
  for (std::size_t i = 0; i < ps.size(); ++i) {
    Parameter& p = ps[i];
    auto it = std::find_if(tensors.begin(), tensors.end(),
                           [&](const NamedTensor& t) { return t.name == p.name; });
    if (it == tensors.end()) throw IoError("checkpoint lacks " + p.name);
    if (it->tensor.shape() != p.value.shape()) {
      throw ShapeError("checkpoint shape mismatch for " + p.name);
    }
    p.value = it->tensor;
  }
}

}  // namespace capground
