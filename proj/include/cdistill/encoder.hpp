#pragma once

// Miniature BERT-style masked language model.
//
// The hidden grid has rows 0..L (row 0 = embedding output, row l = output of
// block l) and one column per token position. Interventions replace whole
// hidden vectors at (row, column) cells of rows 1..L.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "cdistill/autodiff.hpp"
#include "cdistill/batch.hpp"
#include "cdistill/error.hpp"
#include "cdistill/rng.hpp"
#include "cdistill/selector.hpp"

namespace cdistill {

struct EncoderConfig {
  std::size_t num_layers = 6;
  std::size_t num_heads = 4;
  std::size_t hidden_dim = 128;
  std::size_t ffn_dim = 512;
  std::size_t vocab_size = 0;
  std::size_t max_seq_len = 64;
  double layer_norm_eps = 1e-12;

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v == 0) throw ConfigError(std::string("encoder config: ") + name + " must be positive");
    };
    positive(num_layers, "num_layers");
    positive(num_heads, "num_heads");
    positive(hidden_dim, "hidden_dim");
    positive(ffn_dim, "ffn_dim");
    positive(vocab_size, "vocab_size");
    positive(max_seq_len, "max_seq_len");
    if (hidden_dim % num_heads != 0) {
      throw ConfigError("encoder config: hidden_dim " + std::to_string(hidden_dim) + " not divisible by num_heads " +
                        std::to_string(num_heads));
    }
    if (!(layer_norm_eps > 0.0)) throw ConfigError("encoder config: layer_norm_eps must be positive");
  }

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

inline void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = nlohmann::json{{"num_layers", c.num_layers}, {"num_heads", c.num_heads},   {"hidden_dim", c.hidden_dim},
                     {"ffn_dim", c.ffn_dim},       {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len},
                     {"layer_norm_eps", c.layer_norm_eps}};
}

inline void from_json(const nlohmann::json& j, EncoderConfig& c) {
  static const char* const kKeys[] = {"num_layers", "num_heads",   "hidden_dim",    "ffn_dim",
                                      "vocab_size", "max_seq_len", "layer_norm_eps"};
  if (!j.is_object()) throw ConfigError("encoder config: expected an object");
  for (const auto& [key, _] : j.items()) {
    if (std::find(std::begin(kKeys), std::end(kKeys), key) == std::end(kKeys)) {
      throw ConfigError("encoder config: unknown key '" + key + "'");
    }
  }
  try {
    if (j.contains("num_layers")) j.at("num_layers").get_to(c.num_layers);
    if (j.contains("num_heads")) j.at("num_heads").get_to(c.num_heads);
    if (j.contains("hidden_dim")) j.at("hidden_dim").get_to(c.hidden_dim);
    if (j.contains("ffn_dim")) j.at("ffn_dim").get_to(c.ffn_dim);
    if (j.contains("vocab_size")) j.at("vocab_size").get_to(c.vocab_size);
    if (j.contains("max_seq_len")) j.at("max_seq_len").get_to(c.max_seq_len);
    if (j.contains("layer_norm_eps")) j.at("layer_norm_eps").get_to(c.layer_norm_eps);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("encoder config: ") + e.what());
  }
}

template <typename T>
struct BlockParams {
  Parameter<T> wq, bq, wk, bk, wv, bv, wo, bo;
  Parameter<T> ln1_gamma, ln1_beta;
  Parameter<T> w1, b1, w2, b2;
  Parameter<T> ln2_gamma, ln2_beta;

  template <typename Self, typename F>
  static void visit(Self& self, F&& f) {
    for (auto* p : {&self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv, &self.wo, &self.bo, &self.ln1_gamma,
                    &self.ln1_beta, &self.w1, &self.b1, &self.w2, &self.b2, &self.ln2_gamma, &self.ln2_beta}) {
      f(*p);
    }
  }
};

template <typename T>
struct EncoderParams {
  EncoderConfig config;
  Parameter<T> token_embedding, position_embedding, embedding_ln_gamma, embedding_ln_beta;
  std::vector<BlockParams<T>> blocks;  // blocks[l-1] produces grid row l
  Parameter<T> head_weight, head_bias;

  /// Visits every parameter in a fixed order (the checkpoint order).
  template <typename F>
  void for_each(F&& f) {
    visit_all(*this, f);
  }
  template <typename F>
  void for_each(F&& f) const {
    visit_all(*this, f);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each([&](const Parameter<T>& p) { n += p.value.size(); });
    return n;
  }

  void zero_grad() {
    for_each([](Parameter<T>& p) { p.zero_grad(); });
  }

 private:
  template <typename Self, typename F>
  static void visit_all(Self& self, F& f) {
    f(self.token_embedding);
    f(self.position_embedding);
    f(self.embedding_ln_gamma);
    f(self.embedding_ln_beta);
    for (auto& b : self.blocks) BlockParams<T>::visit(b, f);
    f(self.head_weight);
    f(self.head_bias);
  }
};

/// Name -> shape listing fully determined by the config, in checkpoint order.
inline std::vector<std::pair<std::string, Shape>> expected_shapes(const EncoderConfig& c) {
  const std::size_t h = c.hidden_dim, f = c.ffn_dim;
  std::vector<std::pair<std::string, Shape>> out = {
      {"embeddings.token", {c.vocab_size, h}},
      {"embeddings.position", {c.max_seq_len, h}},
      {"embeddings.ln.gamma", {h}},
      {"embeddings.ln.beta", {h}},
  };
  for (std::size_t l = 1; l <= c.num_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    for (auto&& e : std::vector<std::pair<std::string, Shape>>{
             {p + "attn.wq", {h, h}},     {p + "attn.bq", {h}},    {p + "attn.wk", {h, h}},     {p + "attn.bk", {h}},
             {p + "attn.wv", {h, h}},     {p + "attn.bv", {h}},    {p + "attn.wo", {h, h}},     {p + "attn.bo", {h}},
             {p + "ln1.gamma", {h}},      {p + "ln1.beta", {h}},   {p + "ffn.w1", {h, f}},      {p + "ffn.b1", {f}},
             {p + "ffn.w2", {f, h}},      {p + "ffn.b2", {h}},     {p + "ln2.gamma", {h}},      {p + "ln2.beta", {h}}}) {
      out.push_back(std::move(e));
    }
  }
  out.push_back({"head.weight", {h, c.vocab_size}});
  out.push_back({"head.bias", {c.vocab_size}});
  return out;
}

/// Throws ShapeError naming the first parameter whose name or shape disagrees with the config.
template <typename T>
void audit_shapes(const EncoderParams<T>& params) {
  params.config.validate();
  if (params.blocks.size() != params.config.num_layers) {
    throw ShapeError("encoder params: " + std::to_string(params.blocks.size()) + " blocks, config says " +
                     std::to_string(params.config.num_layers));
  }
  const auto expected = expected_shapes(params.config);
  std::size_t i = 0;
  params.for_each([&](const Parameter<T>& p) {
    const auto& [name, shape] = expected[i++];
    if (p.name != name || p.value.shape() != shape) {
      throw ShapeError("encoder params: '" + p.name + "' has shape " + to_string(p.value.shape()) + ", expected '" +
                       name + "' with shape " + to_string(shape));
    }
  });
}

/// Fresh parameters: weights ~ N(0, 0.02^2), biases 0, layer-norm gains 1.
template <typename T>
EncoderParams<T> init_encoder(const EncoderConfig& config, std::uint64_t seed) {
  config.validate();
  EncoderParams<T> p;
  p.config = config;
  p.blocks.resize(config.num_layers);
  Rng rng = make_rng(seed, 0xE1C0DE);
  const auto shapes = expected_shapes(config);
  std::size_t i = 0;
  p.for_each([&](Parameter<T>& param) {
    const auto& [name, shape] = shapes[i++];
    Tensor<T> value(shape);
    const bool is_gain = name.ends_with("gamma");
    const bool is_bias = shape.size() == 1 && !is_gain;
    if (is_gain) {
      value.fill(T{1});
    } else if (!is_bias) {
      for (auto& v : value.values()) v = static_cast<T>(0.02 * standard_normal(rng));
    }
    param = Parameter<T>(name, std::move(value));
  });
  return p;
}

/// Student initialisation from a deeper teacher: embeddings and head are copied;
/// student block i takes teacher block i*r, r = L_T / L_S.
template <typename T>
EncoderParams<T> init_student_from_teacher(const EncoderParams<T>& teacher, std::size_t student_layers) {
  const std::size_t lt = teacher.config.num_layers;
  if (student_layers == 0 || lt % student_layers != 0) {
    throw AlignmentError("init_student_from_teacher: teacher layers " + std::to_string(lt) +
                         " not divisible by student layers " + std::to_string(student_layers));
  }
  const std::size_t r = lt / student_layers;
  EncoderParams<T> s;
  s.config = teacher.config;
  s.config.num_layers = student_layers;
  s.token_embedding = teacher.token_embedding;
  s.position_embedding = teacher.position_embedding;
  s.embedding_ln_gamma = teacher.embedding_ln_gamma;
  s.embedding_ln_beta = teacher.embedding_ln_beta;
  s.head_weight = teacher.head_weight;
  s.head_bias = teacher.head_bias;
  s.blocks.resize(student_layers);
  for (std::size_t i = 1; i <= student_layers; ++i) {
    s.blocks[i - 1] = teacher.blocks[i * r - 1];
    const std::string from = "layers." + std::to_string(i * r) + ".";
    const std::string to = "layers." + std::to_string(i) + ".";
    BlockParams<T>::visit(s.blocks[i - 1], [&](Parameter<T>& p) { p.name = to + p.name.substr(from.size()); });
  }
  s.for_each([](Parameter<T>& p) { p.zero_grad(); });
  return s;
}

/// Replacement values for one selector: [batch*|cols|, hidden], sequence-major.
template <typename T>
struct RowOverride {
  NeuronSelector selector;
  Var<T> values;
};

struct ForwardOptions {
  /// Stop after this grid row and skip the output head.
  std::optional<std::size_t> last_row;
  /// Copy per-layer attention weights into the result.
  bool keep_attention = false;
};

template <typename T>
struct ForwardResult {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::size_t hidden_dim = 0;
  std::optional<Var<T>> logits;   // [batch*seq, vocab]; absent if the pass stopped early
  std::vector<Var<T>> rows;       // rows[r]: [batch*seq, hidden]
  std::vector<Tensor<T>> attention;  // per block: [batch*heads*seq, seq]

  Var<T> final_states() const { return rows.back(); }

  const Tensor<T>& logits_value() const {
    if (!logits) throw InterventionError("forward result: no logits (pass stopped before the head)");
    return logits->value();
  }

  /// Hidden vector at grid row r, sequence b, 1-based column c.
  std::vector<T> cell(std::size_t r, std::size_t b, std::size_t c) const {
    const auto& v = rows.at(r).value();
    const auto row = v.row(b * seq_len + (c - 1));
    return {row.begin(), row.end()};
  }
};

namespace detail {

template <typename T, typename Params>
ForwardResult<T> encoder_forward(Tape<T>& tape, Params& params, const MaskedBatch& batch,
                                 std::span<const RowOverride<T>> overrides, const ForwardOptions& opts) {
  const EncoderConfig& cfg = params.config;
  const std::size_t B = batch.batch_size, S = batch.seq_len, H = cfg.hidden_dim, L = cfg.num_layers;
  if (B == 0 || S == 0) throw ShapeError("encoder forward: empty batch");
  if (S > cfg.max_seq_len) {
    throw ShapeError("encoder forward: sequence length " + std::to_string(S) + " exceeds max_seq_len " +
                     std::to_string(cfg.max_seq_len));
  }
  if (batch.input_ids.size() != B * S || batch.attention_mask.size() != B * S) {
    throw ShapeError("encoder forward: batch fields do not match " + std::to_string(B) + " x " + std::to_string(S));
  }
  const std::size_t last = opts.last_row.value_or(L);
  if (last > L) throw InterventionError("encoder forward: last_row " + std::to_string(last) + " beyond " + std::to_string(L));

  std::vector<const RowOverride<T>*> by_row(L + 1, nullptr);
  for (const auto& o : overrides) {
    o.selector.validate(L, S);
    if (by_row[o.selector.row]) {
      throw InterventionError("encoder forward: two overrides target row " + std::to_string(o.selector.row));
    }
    if (o.values.tape != &tape) throw InterventionError("encoder forward: override values live on another tape");
    const Shape want{B * o.selector.cols.size(), H};
    if (o.values.shape() != want) {
      throw ShapeError("encoder forward: override at row " + std::to_string(o.selector.row) + " expects values " +
                       to_string(want) + ", got " + to_string(o.values.shape()));
    }
    by_row[o.selector.row] = &o;
  }

  ForwardResult<T> res;
  res.batch = B;
  res.seq_len = S;
  res.hidden_dim = H;
  const T eps = static_cast<T>(cfg.layer_norm_eps);

  std::vector<std::int32_t> positions(B * S);
  for (std::size_t i = 0; i < B * S; ++i) positions[i] = static_cast<std::int32_t>(i % S);
  Var<T> x = add(embedding(tape.param(params.token_embedding), std::span<const std::int32_t>(batch.input_ids)),
                 embedding(tape.param(params.position_embedding), std::span<const std::int32_t>(positions)));
  x = layer_norm(x, tape.param(params.embedding_ln_gamma), tape.param(params.embedding_ln_beta), eps);
  res.rows.push_back(x);

  for (std::size_t l = 1; l <= last; ++l) {
    auto& blk = params.blocks[l - 1];
    Var<T> q = linear(x, tape.param(blk.wq), tape.param(blk.bq));
    Var<T> k = linear(x, tape.param(blk.wk), tape.param(blk.bk));
    Var<T> v = linear(x, tape.param(blk.wv), tape.param(blk.bv));
    Tensor<T> probs;
    Var<T> a = multi_head_attention(q, k, v, std::span<const std::uint8_t>(batch.attention_mask), B, cfg.num_heads,
                                    opts.keep_attention ? &probs : nullptr);
    if (opts.keep_attention) res.attention.push_back(std::move(probs));
    a = linear(a, tape.param(blk.wo), tape.param(blk.bo));
    Var<T> h1 = layer_norm(add(x, a), tape.param(blk.ln1_gamma), tape.param(blk.ln1_beta), eps);
    Var<T> f = linear(gelu(linear(h1, tape.param(blk.w1), tape.param(blk.b1))), tape.param(blk.w2), tape.param(blk.b2));
    Var<T> h = layer_norm(add(h1, f), tape.param(blk.ln2_gamma), tape.param(blk.ln2_beta), eps);
    if (const auto* o = by_row[l]) {
      const auto idx = o->selector.flat_rows(B, S);
      h = splice_rows(h, std::span<const std::size_t>(idx), o->values);
    }
    res.rows.push_back(h);
    x = h;
  }
  if (last == L) res.logits = linear(x, tape.param(params.head_weight), tape.param(params.head_bias));
  return res;
}

}  // namespace detail

/// Forward pass of a trainable model: on a recording tape, parameter gradients
/// accumulate into `params` on backward.
template <typename T>
ForwardResult<T> forward(Tape<T>& tape, EncoderParams<T>& params, const MaskedBatch& batch,
                         std::span<const RowOverride<T>> overrides = {}, const ForwardOptions& opts = {}) {
  return detail::encoder_forward(tape, params, batch, overrides, opts);
}

/// Forward pass with frozen parameters.
template <typename T>
ForwardResult<T> forward(Tape<T>& tape, const EncoderParams<T>& params, const MaskedBatch& batch,
                         std::span<const RowOverride<T>> overrides = {}, const ForwardOptions& opts = {}) {
  return detail::encoder_forward(tape, params, batch, overrides, opts);
}

}  // namespace cdistill
