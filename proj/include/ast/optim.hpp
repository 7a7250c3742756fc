#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "ast/tensor.hpp"

namespace ast {

struct AdamParams {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-5;
};

template <class T>
struct AdamState {
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  index_t step = 0;
};

/// Bias-corrected Adam with L2 weight decay added to the gradient before the
/// moment updates.
template <class T>
void adam_step(const std::vector<Tensor<T>*>& params, const std::vector<Tensor<T>>& grads, AdamState<T>& state,
               const AdamParams& cfg, const std::vector<std::string>& names = {}) {
  if (params.size() != grads.size()) throw DimensionError("adam_step: parameter/gradient count mismatch");
  if (state.m.empty()) {
    for (const auto* p : params) {
      state.m.emplace_back(p->shape());
      state.v.emplace_back(p->shape());
    }
  }
  if (state.m.size() != params.size()) throw DimensionError("adam_step: state does not match parameters");
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (grads[k].shape() != params[k]->shape())
      throw DimensionError("adam_step: gradient shape mismatch for parameter " + std::to_string(k));
    if (!grads[k].all_finite())
      throw NonFiniteError("adam_step: non-finite gradient for " +
                           (k < names.size() ? names[k] : "parameter " + std::to_string(k)));
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor<T>& p = *params[k];
    Tensor<T>& m = state.m[k];
    Tensor<T>& v = state.v[k];
    const Tensor<T>& g = grads[k];
    for (index_t i = 0; i < p.size(); ++i) {
      const double gi = static_cast<double>(g[i]) + cfg.weight_decay * static_cast<double>(p[i]);
      m[i] = static_cast<T>(cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi);
      v[i] = static_cast<T>(cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi);
      const double mhat = m[i] / bc1, vhat = v[i] / bc2;
      p[i] = static_cast<T>(p[i] - cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
}

}  // namespace ast
