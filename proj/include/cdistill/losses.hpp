#pragma once

// Training objectives. Every loss is evaluated at masked positions only and
// divided by `denominator` (default: the number of masked positions), so a
// window of micro-batches sharing one denominator sums to the window mean.

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "cdistill/autodiff.hpp"
#include "cdistill/batch.hpp"
#include "cdistill/encoder.hpp"
#include "cdistill/error.hpp"

namespace cdistill {

struct LossWeights {
  double mlm = 1.0;
  double ce = 1.0;
  double cos = 1.0;
  double diito_ce = 1.0;
  double diito_cos = 0.0;

  bool uses_interchange() const noexcept { return diito_ce > 0.0 || diito_cos > 0.0; }
  bool uses_teacher() const noexcept { return ce > 0.0 || cos > 0.0 || uses_interchange(); }

  void validate() const {
    for (double w : {mlm, ce, cos, diito_ce, diito_cos}) {
      if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("loss weights must be finite and non-negative");
    }
    if (mlm + ce + cos + diito_ce + diito_cos <= 0.0) throw ConfigError("at least one loss weight must be positive");
  }

  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

/// Parses "mlm,ce,cos,diito_ce,diito_cos", e.g. "1,1,1,1,0".
inline LossWeights parse_loss_weights(const std::string& text) {
  std::vector<double> values;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto end = text.find(',', start);
    const std::string part = text.substr(start, end == std::string::npos ? std::string::npos : end - start);
    try {
      std::size_t used = 0;
      values.push_back(std::stod(part, &used));
      if (used != part.size()) throw std::invalid_argument(part);
    } catch (const std::exception&) {
      throw ConfigError("loss weights: cannot parse '" + part + "' in '" + text + "'");
    }
    if (end == std::string::npos) break;
    start = end + 1;
  }
  if (values.size() != 5) throw ConfigError("loss weights: expected 5 comma-separated values, got '" + text + "'");
  LossWeights w{values[0], values[1], values[2], values[3], values[4]};
  w.validate();
  return w;
}

inline void to_json(nlohmann::json& j, const LossWeights& w) {
  j = {{"mlm", w.mlm}, {"ce", w.ce}, {"cos", w.cos}, {"diito_ce", w.diito_ce}, {"diito_cos", w.diito_cos}};
}

struct LossBreakdown {
  double mlm = 0.0;
  double ce = 0.0;
  double cos = 0.0;
  double diito_ce = 0.0;
  double diito_cos = 0.0;
  double total = 0.0;

  LossBreakdown& operator+=(const LossBreakdown& o) {
    mlm += o.mlm;
    ce += o.ce;
    cos += o.cos;
    diito_ce += o.diito_ce;
    diito_cos += o.diito_cos;
    total += o.total;
    return *this;
  }
};

inline void to_json(nlohmann::json& j, const LossBreakdown& b) {
  j = {{"mlm", b.mlm}, {"ce", b.ce}, {"cos", b.cos}, {"diito_ce", b.diito_ce}, {"diito_cos", b.diito_cos}, {"total", b.total}};
}

/// Degenerate inputs that were tolerated rather than rejected.
struct LossWarnings {
  std::size_t empty_masks = 0;   // loss evaluated on a batch without masked positions
  std::size_t zero_norms = 0;    // cosine against a zero vector
};

namespace detail {

inline std::vector<std::size_t> masked_rows(std::span<const std::uint8_t> flags) {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < flags.size(); ++i)
    if (flags[i]) rows.push_back(i);
  return rows;
}

template <typename T>
Tensor<T> gather_tensor_rows(const Tensor<T>& t, const std::vector<std::size_t>& rows) {
  const std::size_t d = t.cols();
  Tensor<T> out({rows.size(), d});
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy_n(t.data() + rows[i] * d, d, out.data() + i * d);
  return out;
}

template <typename T>
T resolve_denominator(std::optional<double> denominator, std::size_t count) {
  const double d = denominator.value_or(static_cast<double>(count));
  if (!(d > 0.0)) throw NumericError("loss denominator must be positive");
  return static_cast<T>(d);
}

}  // namespace detail

/// Cross-entropy of the student's predictions against the original tokens.
template <typename T>
Var<T> mlm_loss(Var<T> logits, std::span<const std::int32_t> labels, std::span<const std::uint8_t> masked_flags,
                std::optional<double> denominator = {}, LossWarnings* warnings = nullptr) {
  Tape<T>& tape = *logits.tape;
  const auto& L = logits.value();
  if (L.rank() != 2 || L.dim(0) != masked_flags.size() || labels.size() != masked_flags.size()) {
    detail::shape_mismatch("mlm_loss", L.shape(), Shape{masked_flags.size()});
  }
  const auto rows = detail::masked_rows(masked_flags);
  if (rows.empty()) {
    if (warnings) ++warnings->empty_masks;
    return tape.constant(Tensor<T>::scalar(T{0}));
  }
  std::vector<std::int32_t> targets;
  targets.reserve(rows.size());
  for (auto r : rows) targets.push_back(labels[r]);
  const T denom = detail::resolve_denominator<T>(denominator, rows.size());
  Var<T> logp = log_softmax(gather_rows(logits, std::span<const std::size_t>(rows)));
  return scale(sum(pick(logp, std::span<const std::int32_t>(targets))), T(-1) / denom);
}

template <typename T>
Var<T> mlm_loss(Var<T> logits, const MaskedBatch& batch, std::optional<double> denominator = {},
                LossWarnings* warnings = nullptr) {
  return mlm_loss(logits, std::span<const std::int32_t>(batch.labels), std::span<const std::uint8_t>(batch.masked_flags),
                  denominator, warnings);
}

/// Temperature-softened cross-entropy against teacher soft targets, scaled by
/// tau^2. Teacher logits are treated as constants.
template <typename T>
Var<T> soft_ce_loss(Var<T> student_logits, const Tensor<T>& teacher_logits, std::span<const std::uint8_t> masked_flags,
                    double temperature, std::optional<double> denominator = {}, LossWarnings* warnings = nullptr) {
  if (!(temperature > 0.0)) throw ConfigError("soft_ce_loss: temperature must be positive, got " + std::to_string(temperature));
  Tape<T>& tape = *student_logits.tape;
  const auto& S = student_logits.value();
  if (S.shape() != teacher_logits.shape()) detail::shape_mismatch("soft_ce_loss", S.shape(), teacher_logits.shape());
  if (S.rank() != 2 || S.dim(0) != masked_flags.size()) detail::shape_mismatch("soft_ce_loss", S.shape(), Shape{masked_flags.size()});
  const auto rows = detail::masked_rows(masked_flags);
  if (rows.empty()) {
    if (warnings) ++warnings->empty_masks;
    return tape.constant(Tensor<T>::scalar(T{0}));
  }
  const T tau = static_cast<T>(temperature);
  const T denom = detail::resolve_denominator<T>(denominator, rows.size());

  Tensor<T> targets = detail::gather_tensor_rows(teacher_logits, rows);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    auto row = targets.row(r);
    T mx = row[0];
    for (T x : row) mx = std::max(mx, x);
    T z{0};
    for (auto& x : row) z += (x = std::exp((x - mx) / tau));
    for (auto& x : row) x /= z;
  }
  Var<T> logq = log_softmax(scale(gather_rows(student_logits, std::span<const std::size_t>(rows)), T(1) / tau));
  return scale(sum(mul(logq, tape.constant(std::move(targets)))), -tau * tau / denom);
}

/// Mean of (1 - cos) between student and teacher hidden vectors at masked positions.
template <typename T>
Var<T> cosine_loss(Var<T> student_states, const Tensor<T>& teacher_states, std::span<const std::uint8_t> masked_flags,
                   std::optional<double> denominator = {}, LossWarnings* warnings = nullptr) {
  Tape<T>& tape = *student_states.tape;
  const auto& S = student_states.value();
  if (S.shape() != teacher_states.shape()) detail::shape_mismatch("cosine_loss", S.shape(), teacher_states.shape());
  if (S.rank() != 2 || S.dim(0) != masked_flags.size()) detail::shape_mismatch("cosine_loss", S.shape(), Shape{masked_flags.size()});
  const auto rows = detail::masked_rows(masked_flags);
  if (rows.empty()) {
    if (warnings) ++warnings->empty_masks;
    return tape.constant(Tensor<T>::scalar(T{0}));
  }
  const T denom = detail::resolve_denominator<T>(denominator, rows.size());
  std::size_t zero = 0;
  Var<T> cs = row_cosine(gather_rows(student_states, std::span<const std::size_t>(rows)),
                         tape.constant(detail::gather_tensor_rows(teacher_states, rows)), &zero);
  if (warnings) warnings->zero_norms += zero;
  return affine(sum(cs), T(-1) / denom, static_cast<T>(rows.size()) / denom);
}

/// Soft cross-entropy between student and teacher outputs under interchange,
/// at the base input's masked positions.
template <typename T>
Var<T> diito_ce_loss(const ForwardResult<T>& student_interchange, const ForwardResult<T>& teacher_interchange,
                     std::span<const std::uint8_t> base_masked_flags, double temperature,
                     std::optional<double> denominator = {}, LossWarnings* warnings = nullptr) {
  if (!student_interchange.logits) throw InterventionError("diito_ce_loss: student result has no logits");
  return soft_ce_loss(*student_interchange.logits, teacher_interchange.logits_value(), base_masked_flags, temperature,
                      denominator, warnings);
}

/// Cosine loss between final hidden states under interchange.
template <typename T>
Var<T> diito_cos_loss(const ForwardResult<T>& student_interchange, const ForwardResult<T>& teacher_interchange,
                      std::span<const std::uint8_t> base_masked_flags, std::optional<double> denominator = {},
                      LossWarnings* warnings = nullptr) {
  return cosine_loss(student_interchange.final_states(), teacher_interchange.final_states().value(), base_masked_flags,
                     denominator, warnings);
}

template <typename T>
struct LossTerms {
  std::optional<Var<T>> mlm, ce, cos, diito_ce, diito_cos;
};

/// Weighted sum of component values. Throws NumericError naming a non-finite component.
inline LossBreakdown combine(LossBreakdown components, const LossWeights& w) {
  const std::pair<const char*, double> named[] = {{"mlm", components.mlm},
                                                  {"ce", components.ce},
                                                  {"cos", components.cos},
                                                  {"diito_ce", components.diito_ce},
                                                  {"diito_cos", components.diito_cos}};
  for (const auto& [name, v] : named) {
    if (!std::isfinite(v)) throw NumericError(std::string("loss component '") + name + "' is not finite");
  }
  components.total = w.mlm * components.mlm + w.ce * components.ce + w.cos * components.cos +
                     w.diito_ce * components.diito_ce + w.diito_cos * components.diito_cos;
  return components;
}

/// Builds the weighted total on the tape. Components with zero weight are left
/// out of the graph entirely.
template <typename T>
std::pair<Var<T>, LossBreakdown> combine(Tape<T>& tape, const LossTerms<T>& terms, const LossWeights& w) {
  LossBreakdown values;
  std::optional<Var<T>> total;
  auto take = [&](const std::optional<Var<T>>& term, double weight, double& slot, const char* name) {
    if (!term) return;
    slot = static_cast<double>(term->value().item());
    if (!std::isfinite(slot)) throw NumericError(std::string("loss component '") + name + "' is not finite");
    if (weight == 0.0) return;
    Var<T> part = scale(*term, static_cast<T>(weight));
    total = total ? add(*total, part) : part;
  };
  take(terms.mlm, w.mlm, values.mlm, "mlm");
  take(terms.ce, w.ce, values.ce, "ce");
  take(terms.cos, w.cos, values.cos, "cos");
  take(terms.diito_ce, w.diito_ce, values.diito_ce, "diito_ce");
  take(terms.diito_cos, w.diito_cos, values.diito_cos, "diito_cos");
  if (!total) total = tape.constant(Tensor<T>::scalar(T{0}));
  values = combine(values, w);
  return {*total, values};
}

}  // namespace cdistill
