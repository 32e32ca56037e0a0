#pragma once

// Independent reference computations used by the unit tests and the
// acceptance binary: central finite differences, a loop-based encoder that can
// be stepped block by block, and random fixtures.

#include <algorithm>
#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "cdistill/cdistill.hpp"

namespace oracle {

using namespace cdistill;

struct FdReport {
  bool ok = true;
  std::size_t checked = 0;
  double worst_ratio = 0.0;  // max |a-n| / (rtol * max(|a|,|n|,floor))
  std::string first_failure;
};

inline bool fd_close(double a, double n, double rtol = 1e-4, double floor = 1e-2) {
  return std::abs(a - n) <= rtol * std::max({std::abs(a), std::abs(n), floor});
}

inline void fd_note(FdReport& r, const std::string& where, double a, double n, double rtol, double floor) {
  ++r.checked;
  const double ratio = std::abs(a - n) / (rtol * std::max({std::abs(a), std::abs(n), floor}));
  r.worst_ratio = std::max(r.worst_ratio, ratio);
  if (ratio > 1.0 && r.ok) {
    r.ok = false;
    std::ostringstream os;
    os << where << ": analytic " << a << " vs numeric " << n;
    r.first_failure = os.str();
  }
}

using LeafFn = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

/// Compares reverse-mode gradients of a scalar function of leaf tensors with
/// central differences on every input element.
inline FdReport fd_check(const LeafFn& f, std::vector<Tensor<double>> inputs, double h = 1e-4, double rtol = 1e-4,
                         double floor = 1e-2) {
  std::vector<Tensor<double>> analytic;
  {
    Tape<double> tape;
    std::vector<Var<double>> leaves;
    for (const auto& t : inputs) leaves.push_back(tape.leaf(t));
    Var<double> y = f(tape, leaves);
    tape.backward(y);
    for (const auto& l : leaves) analytic.push_back(tape.grad(l));
  }
  auto eval = [&]() {
    Tape<double> tape(false);
    std::vector<Var<double>> leaves;
    for (const auto& t : inputs) leaves.push_back(tape.constant(t));
    return f(tape, leaves).value().item();
  };
  FdReport r;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t k = 0; k < inputs[i].size(); ++k) {
      const double x0 = inputs[i][k];
      inputs[i][k] = x0 + h;
      const double up = eval();
      inputs[i][k] = x0 - h;
      const double down = eval();
      inputs[i][k] = x0;
      fd_note(r, "input " + std::to_string(i) + "[" + std::to_string(k) + "]", analytic[i][k], (up - down) / (2 * h), rtol,
              floor);
    }
  }
  return r;
}

/// Same check against parameter gradients. `loss` must build its scalar on the
/// given tape from the (mutable) parameters. At most `per_param` entries of
/// each parameter are probed, chosen with a fixed stride.
inline FdReport fd_check_params(const std::vector<Parameter<double>*>& params,
                                const std::function<Var<double>(Tape<double>&)>& loss, std::size_t per_param = 6,
                                double h = 1e-4, double rtol = 1e-4, double floor = 1e-2) {
  for (auto* p : params) p->zero_grad();
  {
    Tape<double> tape;
    tape.backward(loss(tape));
  }
  FdReport r;
  for (auto* p : params) {
    const Tensor<double> g = p->grad;
    const std::size_t n = p->value.size();
    const std::size_t stride = std::max<std::size_t>(1, n / per_param);
    for (std::size_t k = (stride / 2) % n; k < n; k += stride) {
      const double x0 = p->value[k];
      p->value[k] = x0 + h;
      double up, down;
      {
        Tape<double> t(false);
        up = loss(t).value().item();
      }
      p->value[k] = x0 - h;
      {
        Tape<double> t(false);
        down = loss(t).value().item();
      }
      p->value[k] = x0;
      fd_note(r, p->name + "[" + std::to_string(k) + "]", g[k], (up - down) / (2 * h), rtol, floor);
    }
  }
  return r;
}

inline Tensor<double> random_tensor(Rng& rng, Shape shape, double scale = 1.0, double shift = 0.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.values()) v = shift + scale * standard_normal(rng);
  return t;
}

inline EncoderConfig tiny_config(std::size_t layers, std::size_t hidden, std::size_t heads, std::size_t vocab,
                                 std::size_t max_seq, std::size_t ffn = 0) {
  EncoderConfig c;
  c.num_layers = layers;
  c.hidden_dim = hidden;
  c.num_heads = heads;
  c.ffn_dim = ffn ? ffn : 2 * hidden;
  c.vocab_size = vocab;
  c.max_seq_len = max_seq;
  c.layer_norm_eps = 1e-5;
  return c;
}

/// Fresh parameters with larger weights than the default init so that every
/// term of a computation is visibly exercised.
template <typename T>
EncoderParams<T> random_params(const EncoderConfig& c, std::uint64_t seed, double scale = 0.4) {
  auto p = init_encoder<T>(c, seed);
  Rng rng = make_rng(seed, 77);
  p.for_each([&](Parameter<T>& q) {
    const bool gain = q.name.ends_with("gamma");
    for (auto& v : q.value.values()) v = static_cast<T>((gain ? 1.0 : 0.0) + scale * standard_normal(rng));
  });
  return p;
}

/// Random padded batch: each sequence has CLS ... SEP of random length in
/// [min_len, seq], and each word position is masked with probability mask_p
/// (at least one masked position per batch).
inline MaskedBatch random_batch(Rng& rng, std::size_t batch, std::size_t seq, std::size_t vocab, std::size_t min_len = 3,
                                double mask_p = 0.3) {
  std::vector<MaskedSequence> seqs;
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t len = min_len + uniform_index(rng, seq - min_len + 1);
    MaskedSequence s;
    s.input_ids.push_back(Vocab::kCls);
    for (std::size_t t = 1; t + 1 < len; ++t)
      s.input_ids.push_back(static_cast<std::int32_t>(Vocab::kNumSpecials + uniform_index(rng, vocab - Vocab::kNumSpecials)));
    s.input_ids.push_back(Vocab::kSep);
    s.labels.assign(len, kIgnoreLabel);
    s.masked.assign(len, 0);
    for (std::size_t t = 1; t + 1 < len; ++t) {
      if (uniform01(rng) < mask_p) {
        s.labels[t] = s.input_ids[t];
        s.masked[t] = 1;
        s.input_ids[t] = Vocab::kMask;
      }
    }
    seqs.push_back(std::move(s));
  }
  if (seqs[0].input_ids.size() > 2 && std::none_of(seqs[0].masked.begin(), seqs[0].masked.end(), [](auto m) { return m; })) {
    seqs[0].labels[1] = seqs[0].input_ids[1];
    seqs[0].masked[1] = 1;
    seqs[0].input_ids[1] = Vocab::kMask;
  }
  return pad_batch(seqs, seq);
}

// ---------------------------------------------------------------------------
// Loop-based reference encoder, one sequence at a time, in double.

using Vec = std::vector<double>;
using Grid = std::vector<Vec>;  // [seq][hidden]

template <typename T>
Vec col(const Tensor<T>& t) {
  return Vec(t.values().begin(), t.values().end());
}

template <typename T>
Grid affine_rows(const Grid& x, const Tensor<T>& w, const Tensor<T>& b) {
  const std::size_t in = w.dim(0), out = w.dim(1);
  Grid y(x.size(), Vec(out));
  for (std::size_t t = 0; t < x.size(); ++t)
    for (std::size_t j = 0; j < out; ++j) {
      double s = static_cast<double>(b[j]);
      for (std::size_t i = 0; i < in; ++i) s += x[t][i] * static_cast<double>(w.at(i, j));
      y[t][j] = s;
    }
  return y;
}

template <typename T>
Grid layer_norm_rows(const Grid& x, const Tensor<T>& g, const Tensor<T>& b, double eps) {
  Grid y = x;
  for (auto& row : y) {
    double mu = 0, var = 0;
    for (double v : row) mu += v;
    mu /= static_cast<double>(row.size());
    for (double v : row) var += (v - mu) * (v - mu);
    var /= static_cast<double>(row.size());
    for (std::size_t i = 0; i < row.size(); ++i)
      row[i] = (row[i] - mu) / std::sqrt(var + eps) * static_cast<double>(g[i]) + static_cast<double>(b[i]);
  }
  return y;
}

template <typename T>
struct Reference {
  const EncoderParams<T>& p;

  Grid embed(const MaskedBatch& x, std::size_t b) const {
    const std::size_t S = x.seq_len, H = p.config.hidden_dim;
    Grid g(S, Vec(H));
    for (std::size_t t = 0; t < S; ++t) {
      const auto id = static_cast<std::size_t>(x.input_ids[b * S + t]);
      for (std::size_t i = 0; i < H; ++i)
        g[t][i] = static_cast<double>(p.token_embedding.value.at(id, i)) + static_cast<double>(p.position_embedding.value.at(t, i));
    }
    return layer_norm_rows(g, p.embedding_ln_gamma.value, p.embedding_ln_beta.value, p.config.layer_norm_eps);
  }

  /// Block l (1-based) applied to grid row l-1 of sequence b.
  Grid block(std::size_t l, const Grid& x, const MaskedBatch& batch, std::size_t b) const {
    const auto& k = p.blocks[l - 1];
    const std::size_t S = x.size(), H = p.config.hidden_dim, nh = p.config.num_heads, hd = H / nh;
    const Grid q = affine_rows(x, k.wq.value, k.bq.value), kk = affine_rows(x, k.wk.value, k.bk.value),
               v = affine_rows(x, k.wv.value, k.bv.value);
    Grid att(S, Vec(H, 0.0));
    for (std::size_t h = 0; h < nh; ++h) {
      for (std::size_t i = 0; i < S; ++i) {
        Vec w(S, 0.0);
        double mx = -1e300;
        for (std::size_t j = 0; j < S; ++j) {
          if (!batch.attention_mask[b * S + j]) continue;
          double s = 0;
          for (std::size_t d = 0; d < hd; ++d) s += q[i][h * hd + d] * kk[j][h * hd + d];
          w[j] = s / std::sqrt(static_cast<double>(hd));
          mx = std::max(mx, w[j]);
        }
        double z = 0;
        for (std::size_t j = 0; j < S; ++j) {
          w[j] = batch.attention_mask[b * S + j] ? std::exp(w[j] - mx) : 0.0;
          z += w[j];
        }
        for (std::size_t j = 0; j < S; ++j)
          for (std::size_t d = 0; d < hd; ++d) att[i][h * hd + d] += w[j] / z * v[j][h * hd + d];
      }
    }
    Grid a = affine_rows(att, k.wo.value, k.bo.value);
    for (std::size_t t = 0; t < S; ++t)
      for (std::size_t i = 0; i < H; ++i) a[t][i] += x[t][i];
    const Grid h1 = layer_norm_rows(a, k.ln1_gamma.value, k.ln1_beta.value, p.config.layer_norm_eps);
    Grid f = affine_rows(h1, k.w1.value, k.b1.value);
    for (auto& row : f)
      for (auto& u : row) u = 0.5 * u * (1.0 + std::erf(u / std::sqrt(2.0)));
    Grid o = affine_rows(f, k.w2.value, k.b2.value);
    for (std::size_t t = 0; t < S; ++t)
      for (std::size_t i = 0; i < H; ++i) o[t][i] += h1[t][i];
    return layer_norm_rows(o, k.ln2_gamma.value, k.ln2_beta.value, p.config.layer_norm_eps);
  }

  Grid head(const Grid& x) const { return affine_rows(x, p.head_weight.value, p.head_bias.value); }

  /// All grid rows 0..L of sequence b, optionally replacing cells on the way.
  std::vector<Grid> rows(const MaskedBatch& x, std::size_t b,
                         const std::function<void(std::size_t row, Grid&)>& edit = {}) const {
    std::vector<Grid> out{embed(x, b)};
    for (std::size_t l = 1; l <= p.config.num_layers; ++l) {
      Grid g = block(l, out.back(), x, b);
      if (edit) edit(l, g);
      out.push_back(std::move(g));
    }
    return out;
  }
};

/// Brute-force interchange: run every source sequence, copy the selected cells,
/// run the base sequence with those cells spliced in, and return its logits
/// [batch*seq][vocab].
template <typename T>
Grid manual_interchange(const EncoderParams<T>& p, const std::vector<NeuronSelector>& sels, const MaskedBatch& source,
                        const MaskedBatch& base) {
  Reference<T> ref{p};
  Grid logits;
  for (std::size_t b = 0; b < base.batch_size; ++b) {
    const auto src = ref.rows(source, b);
    const auto rows = ref.rows(base, b, [&](std::size_t row, Grid& g) {
      for (const auto& s : sels)
        if (s.row == row)
          for (auto c : s.cols) g[c - 1] = src[row][c - 1];
    });
    for (const auto& r : ref.head(rows.back())) logits.push_back(r);
  }
  return logits;
}

template <typename T>
double max_abs_diff(const Grid& ref, const Tensor<T>& got) {
  double m = 0;
  for (std::size_t r = 0; r < ref.size(); ++r)
    for (std::size_t c = 0; c < ref[r].size(); ++c) m = std::max(m, std::abs(ref[r][c] - static_cast<double>(got.at(r, c))));
  return m;
}

/// Params as a flat list for the optimizer or FD checks.
template <typename T>
std::vector<Parameter<T>*> param_list(EncoderParams<T>& p) {
  std::vector<Parameter<T>*> out;
  p.for_each([&](Parameter<T>& q) { out.push_back(&q); });
  return out;
}

/// Synthetic encoded documents: CLS w... SEP with lengths in [min_len, max_len].
inline std::vector<TokenIds> synthetic_docs(std::uint64_t seed, std::size_t n, std::size_t vocab, std::size_t min_len,
                                            std::size_t max_len) {
  Rng rng = make_rng(seed, 5);
  std::vector<TokenIds> docs;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t len = min_len + uniform_index(rng, max_len - min_len + 1);
    TokenIds d{Vocab::kCls};
    for (std::size_t t = 2; t < len; ++t)
      d.push_back(static_cast<std::int32_t>(Vocab::kNumSpecials + uniform_index(rng, vocab - Vocab::kNumSpecials)));
    d.push_back(Vocab::kSep);
    docs.push_back(std::move(d));
  }
  return docs;
}


// ---------------------------------------------------------------------------
// Finite-difference catalogue: every differentiable op, reduced to a scalar by
// a fixed random projection so that no gradient is trivially zero.

struct OpCase {
  LeafFn fn;
  std::vector<Tensor<double>> inputs;
};

struct OpSpec {
  std::string name;
  std::function<OpCase(Rng&)> make;
};

inline Tensor<double> uniform_tensor(Rng& rng, Shape shape, double lo = -2.0, double hi = 2.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.values()) v = lo + (hi - lo) * uniform01(rng);
  return t;
}

inline std::size_t small_dim(Rng& rng, std::size_t lo = 1, std::size_t hi = 8) { return lo + uniform_index(rng, hi - lo + 1); }

/// Wraps an op so that the scalar is sum(op(...) * R), R drawn from `seed` in
/// the op's output shape.
inline LeafFn projected(std::function<Var<double>(const std::vector<Var<double>>&)> op, std::uint64_t seed) {
  return [op = std::move(op), seed](Tape<double>& tape, const std::vector<Var<double>>& in) {
    Var<double> y = op(in);
    Rng rng = make_rng(seed, 3);
    Tensor<double> proj = uniform_tensor(rng, y.value().shape());
    if (y.value().size() == 1) return scale(y, proj[0]);
    return sum(mul(y, tape.constant(std::move(proj))));
  };
}

inline std::vector<OpSpec> op_catalogue() {
  std::vector<OpSpec> ops;
  auto unary = [&](std::string name, auto f, double lo = -2.0, double hi = 2.0) {
    ops.push_back({name, [f, lo, hi](Rng& rng) {
                     const Shape s{small_dim(rng), small_dim(rng)};
                     return OpCase{projected([f](const auto& in) { return f(in[0]); }, rng()),
                                   {uniform_tensor(rng, s, lo, hi)}};
                   }});
  };
  auto binary = [&](std::string name, auto f) {
    ops.push_back({name, [f](Rng& rng) {
                     const Shape s{small_dim(rng), small_dim(rng)};
                     return OpCase{projected([f](const auto& in) { return f(in[0], in[1]); }, rng()),
                                   {uniform_tensor(rng, s), uniform_tensor(rng, s)}};
                   }});
  };
  ops.push_back({"matmul", [](Rng& rng) {
                   const std::size_t m = small_dim(rng), k = small_dim(rng), n = small_dim(rng);
                   return OpCase{projected([](const auto& in) { return matmul(in[0], in[1]); }, rng()),
                                 {uniform_tensor(rng, {m, k}), uniform_tensor(rng, {k, n})}};
                 }});
  ops.push_back({"add_bias", [](Rng& rng) {
                   const std::size_t n = small_dim(rng), d = small_dim(rng);
                   return OpCase{projected([](const auto& in) { return add_bias(in[0], in[1]); }, rng()),
                                 {uniform_tensor(rng, {n, d}), uniform_tensor(rng, {d})}};
                 }});
  ops.push_back({"linear", [](Rng& rng) {
                   const std::size_t n = small_dim(rng), i = small_dim(rng), o = small_dim(rng);
                   return OpCase{projected([](const auto& in) { return linear(in[0], in[1], in[2]); }, rng()),
                                 {uniform_tensor(rng, {n, i}), uniform_tensor(rng, {i, o}), uniform_tensor(rng, {o})}};
                 }});
  binary("add", [](auto a, auto b) { return add(a, b); });
  binary("sub", [](auto a, auto b) { return sub(a, b); });
  binary("mul", [](auto a, auto b) { return mul(a, b); });
  unary("scale", [](auto a) { return scale(a, -1.7); });
  unary("affine", [](auto a) { return affine(a, 0.6, 0.3); });
  unary("log", [](auto a) { return log(a); }, 0.2, 2.0);
  unary("exp", [](auto a) { return exp(a); });
  unary("gelu", [](auto a) { return gelu(a); });
  unary("softmax", [](auto a) { return softmax(a); });
  unary("log_softmax", [](auto a) { return log_softmax(a); });
  unary("sum", [](auto a) { return sum(a); });
  unary("mean", [](auto a) { return mean(a); });
  unary("norm", [](auto a) { return norm(a); }, 0.2, 2.0);
  unary("row_norm", [](auto a) { return row_norm(a); }, 0.2, 2.0);
  binary("dot", [](auto a, auto b) { return dot(a, b); });
  binary("row_dot", [](auto a, auto b) { return row_dot(a, b); });
  binary("row_cosine", [](auto a, auto b) { return row_cosine(a, b); });
  ops.push_back({"masked_mean", [](Rng& rng) {
                   const Shape s{small_dim(rng), small_dim(rng)};
                   std::vector<std::uint8_t> m(numel(s));
                   for (auto& f : m) f = uniform01(rng) < 0.5;
                   m[uniform_index(rng, m.size())] = 1;
                   return OpCase{projected([m](const auto& in) { return masked_mean(in[0], std::span<const std::uint8_t>(m)); }, rng()),
                                 {uniform_tensor(rng, s)}};
                 }});
  ops.push_back({"layer_norm", [](Rng& rng) {
                   const std::size_t n = small_dim(rng), d = small_dim(rng, 2, 8);
                   return OpCase{projected([](const auto& in) { return layer_norm(in[0], in[1], in[2], 1e-5); }, rng()),
                                 {uniform_tensor(rng, {n, d}), uniform_tensor(rng, {d}), uniform_tensor(rng, {d})}};
                 }});
  ops.push_back({"embedding", [](Rng& rng) {
                   const std::size_t v = small_dim(rng, 2, 8), d = small_dim(rng), n = small_dim(rng);
                   std::vector<std::int32_t> ids(n);
                   for (auto& i : ids) i = static_cast<std::int32_t>(uniform_index(rng, v));
                   return OpCase{projected([ids](const auto& in) { return embedding(in[0], std::span<const std::int32_t>(ids)); }, rng()),
                                 {uniform_tensor(rng, {v, d})}};
                 }});
  ops.push_back({"slice_rows", [](Rng& rng) {
                   const std::size_t n = small_dim(rng, 2, 8), d = small_dim(rng);
                   const std::size_t b = uniform_index(rng, n), e = b + 1 + uniform_index(rng, n - b);
                   return OpCase{projected([b, e](const auto& in) { return slice_rows(in[0], b, e); }, rng()),
                                 {uniform_tensor(rng, {n, d})}};
                 }});
  ops.push_back({"concat_rows", [](Rng& rng) {
                   const std::size_t n1 = small_dim(rng), n2 = small_dim(rng), d = small_dim(rng);
                   return OpCase{projected([](const auto& in) { return concat_rows(std::vector<Var<double>>{in[0], in[1]}); }, rng()),
                                 {uniform_tensor(rng, {n1, d}), uniform_tensor(rng, {n2, d})}};
                 }});
  ops.push_back({"gather_rows", [](Rng& rng) {
                   const std::size_t n = small_dim(rng), d = small_dim(rng), k = small_dim(rng);
                   std::vector<std::size_t> rows(k);
                   for (auto& r : rows) r = uniform_index(rng, n);
                   return OpCase{projected([rows](const auto& in) { return gather_rows(in[0], std::span<const std::size_t>(rows)); }, rng()),
                                 {uniform_tensor(rng, {n, d})}};
                 }});
  ops.push_back({"splice_rows", [](Rng& rng) {
                   const std::size_t n = small_dim(rng, 2, 8), d = small_dim(rng);
                   std::vector<std::size_t> all(n);
                   for (std::size_t i = 0; i < n; ++i) all[i] = i;
                   shuffle(all, rng);
                   const std::size_t k = 1 + uniform_index(rng, n - 1);
                   std::vector<std::size_t> rows(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k));
                   return OpCase{projected([rows](const auto& in) { return splice_rows(in[0], std::span<const std::size_t>(rows), in[1]); }, rng()),
                                 {uniform_tensor(rng, {n, d}), uniform_tensor(rng, {k, d})}};
                 }});
  ops.push_back({"pick", [](Rng& rng) {
                   const std::size_t n = small_dim(rng), d = small_dim(rng);
                   std::vector<std::int32_t> cols(n);
                   for (auto& c : cols) c = static_cast<std::int32_t>(uniform_index(rng, d));
                   return OpCase{projected([cols](const auto& in) { return pick(in[0], std::span<const std::int32_t>(cols)); }, rng()),
                                 {uniform_tensor(rng, {n, d})}};
                 }});
  ops.push_back({"multi_head_attention", [](Rng& rng) {
                   const std::size_t batch = small_dim(rng, 1, 2), seq = small_dim(rng, 1, 4), heads = small_dim(rng, 1, 2),
                                     hd = small_dim(rng, 1, 4), hidden = heads * hd;
                   std::vector<std::uint8_t> mask(batch * seq);
                   for (std::size_t b = 0; b < batch; ++b) {
                     const std::size_t len = small_dim(rng, 1, seq);
                     for (std::size_t t = 0; t < seq; ++t) mask[b * seq + t] = t < len;
                   }
                   const Shape s{batch * seq, hidden};
                   return OpCase{projected(
                                     [mask, batch, heads](const auto& in) {
                                       return multi_head_attention(in[0], in[1], in[2], std::span<const std::uint8_t>(mask), batch, heads);
                                     }, rng()),
                                 {uniform_tensor(rng, s), uniform_tensor(rng, s), uniform_tensor(rng, s)}};
                 }});
  return ops;
}

// ---------------------------------------------------------------------------
// Every loss composed with a 2-layer, hidden-8 student (and a 4-layer teacher
// for the distillation terms), checked on student parameters.

struct NamedReport {
  std::string name;
  FdReport report;
};

inline std::vector<NamedReport> loss_fd_suite(std::uint64_t seed, std::size_t per_param = 3) {
  const auto tc = tiny_config(4, 8, 2, 13, 5);
  const auto teacher = random_params<double>(tc, seed + 1);
  auto student = random_params<double>(tiny_config(2, 8, 2, 13, 5), seed + 2);
  Rng rng = make_rng(seed, 9);
  const MaskedBatch x2 = random_batch(rng, 2, 5, 13, 4, 0.5);
  const MaskedBatch x1 = random_batch(rng, 2, 5, 13, 4, 0.5);
  const std::span<const std::uint8_t> flags(x2.masked_flags);
  const NeuronSelector ssel{1, {2, 3}};
  const std::vector<NeuronSelector> tsel{{1, {2, 3}}, {2, {2, 3}}};

  Tape<double> frozen(false);
  const auto tplain = forward(frozen, teacher, x2);
  const auto tii = interchange(frozen, teacher, std::span<const NeuronSelector>(tsel), x1, x2);
  const auto params = param_list(student);

  std::vector<NamedReport> out;
  auto check = [&](const std::string& name, std::function<Var<double>(Tape<double>&)> f) {
    out.push_back({name, fd_check_params(params, f, per_param)});
  };
  check("mlm", [&](Tape<double>& t) { return mlm_loss(*forward(t, student, x2).logits, x2); });
  check("ce", [&](Tape<double>& t) {
    return soft_ce_loss(*forward(t, student, x2).logits, tplain.logits_value(), flags, 2.0);
  });
  check("cos", [&](Tape<double>& t) {
    return cosine_loss(forward(t, student, x2).final_states(), tplain.final_states().value(), flags);
  });
  check("diito_ce", [&](Tape<double>& t) {
    return diito_ce_loss(interchange(t, student, ssel, x1, x2), tii, flags, 2.0);
  });
  check("diito_cos", [&](Tape<double>& t) {
    return diito_cos_loss(interchange(t, student, ssel, x1, x2), tii, flags);
  });
  check("combined", [&](Tape<double>& t) {
    LossTerms<double> terms;
    const auto plain = forward(t, student, x2);
    const auto si = interchange(t, student, ssel, x1, x2);
    terms.mlm = mlm_loss(*plain.logits, x2, 7.0);
    terms.ce = soft_ce_loss(*plain.logits, tplain.logits_value(), flags, 2.0, 7.0);
    terms.cos = cosine_loss(plain.final_states(), tplain.final_states().value(), flags, 7.0);
    terms.diito_ce = diito_ce_loss(si, tii, flags, 2.0, 7.0);
    terms.diito_cos = diito_cos_loss(si, tii, flags, 7.0);
    return combine(t, terms, LossWeights{0.5, 1.0, 2.0, 1.5, 0.7}).first;
  });
  return out;
}

}  // namespace oracle
