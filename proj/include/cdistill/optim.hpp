#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "cdistill/autodiff.hpp"
#include "cdistill/error.hpp"

namespace cdistill {

struct AdamWConfig {
  double lr = 5e-4;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct OptimizerState {
  std::vector<Tensor<T>> first_moment;
  std::vector<Tensor<T>> second_moment;
  std::uint64_t step = 0;
};

/// Bias-corrected adaptive-moment update with decoupled weight decay:
///   p <- p * (1 - lr * decay) - lr * m_hat / (sqrt(v_hat) + eps)
/// Arithmetic is carried out in double and stored back in T.
template <typename T>
void optimizer_step(const std::vector<Parameter<T>*>& params, OptimizerState<T>& state, double lr, double decay,
                    double beta1, double beta2, double eps) {
  if (state.first_moment.empty()) {
    for (const auto* p : params) {
      state.first_moment.emplace_back(p->value.shape());
      state.second_moment.emplace_back(p->value.shape());
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw ShapeError("optimizer_step: state tracks " + std::to_string(state.first_moment.size()) + " tensors, got " +
                     std::to_string(params.size()));
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  const double shrink = 1.0 - lr * decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter<T>& p = *params[i];
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    if (m.shape() != p.value.shape()) {
      throw ShapeError("optimizer_step: moment shape " + to_string(m.shape()) + " vs parameter '" + p.name + "' " +
                       to_string(p.value.shape()));
    }
    const bool has_grad = p.grad.shape() == p.value.shape();
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const double g = has_grad ? static_cast<double>(p.grad[k]) : 0.0;
      const double mk = beta1 * static_cast<double>(m[k]) + (1.0 - beta1) * g;
      const double vk = beta2 * static_cast<double>(v[k]) + (1.0 - beta2) * g * g;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      const double update = (mk / c1) / (std::sqrt(vk / c2) + eps);
      p.value[k] = static_cast<T>(static_cast<double>(p.value[k]) * shrink - lr * update);
    }
  }
}

template <typename T>
void optimizer_step(const std::vector<Parameter<T>*>& params, OptimizerState<T>& state, const AdamWConfig& cfg,
                    double lr) {
  optimizer_step(params, state, lr, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps);
}

}  // namespace cdistill
