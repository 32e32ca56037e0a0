#pragma once

// Activation retrieval, activation setting, and interchange interventions over
// encoder hidden grids.
//
//   get_vals(M, x, N)          values the neurons N take while M processes x
//   set_vals(M, N, v)          a new model: M with N pinned to v
//   interchange(M, N, x1, x2)  set_vals(M, N, get_vals(M, x1, N)) run on x2
//
// Whether gradients are recorded is decided by the tape passed in and by the
// constness of the parameters: values fetched on a recording tape from mutable
// parameters carry gradient paths back into those parameters.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "cdistill/encoder.hpp"
#include "cdistill/error.hpp"
#include "cdistill/selector.hpp"

namespace cdistill {

template <typename T>
struct InterventionPlan {
  NeuronSelector selector;
  Var<T> source_values;  // [batch*|cols|, hidden]
};

/// Number of interchange() invocations in this process.
inline std::atomic<std::uint64_t>& interchange_counter() {
  static std::atomic<std::uint64_t> counter{0};
  return counter;
}

/// Reads the cells of every selector from a single forward pass over x. The pass
/// stops at the deepest selected row.
template <typename T, typename Params>
std::vector<Var<T>> get_vals(Tape<T>& tape, Params& params, const MaskedBatch& x,
                             std::span<const NeuronSelector> selectors) {
  if (selectors.empty()) throw InterventionError("get_vals: no selectors");
  std::size_t deepest = 0;
  for (const auto& s : selectors) {
    s.validate(params.config.num_layers, x.seq_len);
    deepest = std::max(deepest, s.row);
  }
  ForwardOptions opts;
  opts.last_row = deepest;
  const auto res = forward(tape, params, x, {}, opts);
  std::vector<Var<T>> out;
  out.reserve(selectors.size());
  for (const auto& s : selectors) {
    const auto idx = s.flat_rows(x.batch_size, x.seq_len);
    out.push_back(gather_rows(res.rows[s.row], std::span<const std::size_t>(idx)));
  }
  return out;
}

template <typename T, typename Params>
Var<T> get_vals(Tape<T>& tape, Params& params, const MaskedBatch& x, const NeuronSelector& selector) {
  return get_vals(tape, params, x, std::span<const NeuronSelector>(&selector, 1)).front();
}

/// A model with some neurons pinned. Holds a reference to the original
/// parameters, which it never modifies.
template <typename T, typename Params>
class IntervenedModel {
 public:
  IntervenedModel(Params& params, std::vector<InterventionPlan<T>> plans) : params_(&params), plans_(std::move(plans)) {
    if (plans_.empty()) throw InterventionError("set_vals: no interventions (run the original model instead)");
    for (const auto& p : plans_) {
      p.selector.validate(params.config.num_layers, params.config.max_seq_len);
      const auto& shape = p.source_values.shape();
      if (shape.size() != 2 || shape[1] != params.config.hidden_dim || shape[0] % p.selector.cols.size() != 0) {
        throw ShapeError("set_vals: values of shape " + to_string(shape) + " do not fit selector with " +
                         std::to_string(p.selector.cols.size()) + " columns and hidden size " +
                         std::to_string(params.config.hidden_dim));
      }
      for (T v : p.source_values.value().values()) {
        if (!std::isfinite(static_cast<double>(v))) throw NumericError("set_vals: non-finite intervention value");
      }
    }
  }

  const std::vector<InterventionPlan<T>>& plans() const noexcept { return plans_; }

  ForwardResult<T> forward(Tape<T>& tape, const MaskedBatch& x, const ForwardOptions& opts = {}) const {
    std::vector<RowOverride<T>> overrides;
    overrides.reserve(plans_.size());
    for (const auto& p : plans_) overrides.push_back({p.selector, p.source_values});
    return cdistill::forward(tape, *params_, x, std::span<const RowOverride<T>>(overrides), opts);
  }

 private:
  Params* params_;
  std::vector<InterventionPlan<T>> plans_;
};

template <typename T, typename Params>
IntervenedModel<T, Params> set_vals(Params& params, std::vector<InterventionPlan<T>> plans) {
  return IntervenedModel<T, Params>(params, std::move(plans));
}

template <typename T, typename Params>
IntervenedModel<T, Params> set_vals(Params& params, InterventionPlan<T> plan) {
  return IntervenedModel<T, Params>(params, std::vector<InterventionPlan<T>>{std::move(plan)});
}

/// Output of the model on base input x2 with the selected neurons set to the
/// values they take on source input x1. Several selectors (distinct rows, same
/// columns) are swapped together; their source values come from one pass over x1.
/// Source sequence k pairs with base sequence k.
template <typename T, typename Params>
ForwardResult<T> interchange(Tape<T>& tape, Params& params, std::span<const NeuronSelector> selectors,
                             const MaskedBatch& x1, const MaskedBatch& x2, const ForwardOptions& opts = {}) {
  if (x1.batch_size != x2.batch_size || x1.seq_len != x2.seq_len) {
    throw ShapeError("interchange: source batch [" + std::to_string(x1.batch_size) + "," + std::to_string(x1.seq_len) +
                     "] vs base batch [" + std::to_string(x2.batch_size) + "," + std::to_string(x2.seq_len) + "]");
  }
  interchange_counter().fetch_add(1, std::memory_order_relaxed);
  const auto values = get_vals(tape, params, x1, selectors);
  std::vector<InterventionPlan<T>> plans;
  plans.reserve(selectors.size());
  for (std::size_t i = 0; i < selectors.size(); ++i) plans.push_back({selectors[i], values[i]});
  return set_vals<T>(params, std::move(plans)).forward(tape, x2, opts);
}

template <typename T, typename Params>
ForwardResult<T> interchange(Tape<T>& tape, Params& params, const NeuronSelector& selector, const MaskedBatch& x1,
                             const MaskedBatch& x2, const ForwardOptions& opts = {}) {
  return interchange(tape, params, std::span<const NeuronSelector>(&selector, 1), x1, x2, opts);
}

}  // namespace cdistill
