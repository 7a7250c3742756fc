#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "ast/autodiff.hpp"

namespace ast {

namespace detail {

template <class T>
T relative_error(T analytic, T numeric) {
  const T denom = std::max({std::abs(analytic), std::abs(numeric), T(1e-8)});
  return std::abs(analytic - numeric) / denom;
}

template <class T>
T finite_scalar(const Var<T>& v) {
  if (v.value().size() != 1) throw ContractError("gradcheck: function must be scalar-valued");
  const T y = v.value()[0];
  if (!std::isfinite(y)) throw NonFiniteError("gradcheck: non-finite function value");
  return y;
}

}  // namespace detail

/// Max relative error between reverse-mode gradients and central differences
/// of a scalar function of several tensor arguments.
/// `f(Tape<T>&, const std::vector<Var<T>>&) -> Var<T>`.
template <class T, class F>
T gradcheck(F&& f, const std::vector<Tensor<T>>& points, T h) {
  std::vector<Tensor<T>> analytic;
  {
    Tape<T> tape;
    std::vector<Var<T>> leaves;
    for (const auto& p : points) leaves.push_back(tape.leaf(p, true));
    Var<T> y = f(tape, leaves);
    detail::finite_scalar(y);
    tape.backward(y);
    for (const auto& l : leaves) analytic.push_back(tape.grad(l));
  }
  auto eval = [&](const std::vector<Tensor<T>>& args) {
    Tape<T> tape;
    std::vector<Var<T>> leaves;
    for (const auto& p : args) leaves.push_back(tape.leaf(p, false));
    return detail::finite_scalar(f(tape, leaves));
  };
  T worst = 0;
  std::vector<Tensor<T>> probe = points;
  for (std::size_t k = 0; k < points.size(); ++k) {
    for (index_t i = 0; i < points[k].size(); ++i) {
      probe[k][i] = points[k][i] + h;
      const T up = eval(probe);
      probe[k][i] = points[k][i] - h;
      const T down = eval(probe);
      probe[k][i] = points[k][i];
      const T numeric = (up - down) / (T(2) * h);
      worst = std::max(worst, detail::relative_error(analytic[k][i], numeric));
    }
  }
  return worst;
}

/// Single-argument form: `f(Tape<T>&, Var<T>) -> Var<T>`.
template <class T, class F>
T gradcheck(F&& f, const Tensor<T>& point, T h) {
  return gradcheck<T>([&](Tape<T>& tape, const std::vector<Var<T>>& v) { return f(tape, v[0]); },
                      std::vector<Tensor<T>>{point}, h);
}

/// Gradient check over tensors owned by a model. `loss(ParamScope<T>&)`
/// builds the loss reading parameters through the scope; parameters are
/// perturbed in place and restored.
template <class T, class F>
T gradcheck_parameters(F&& loss, const std::vector<Tensor<T>*>& params, T h) {
  std::vector<Tensor<T>> analytic;
  {
    Tape<T> tape;
    ParamScope<T> scope(tape, true);
    Var<T> y = loss(scope);
    detail::finite_scalar(y);
    tape.backward(y);
    for (auto* p : params) analytic.push_back(scope.grad(*p));
  }
  auto eval = [&] {
    Tape<T> tape;
    ParamScope<T> scope(tape, false);
    return detail::finite_scalar(loss(scope));
  };
  T worst = 0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor<T>& p = *params[k];
    for (index_t i = 0; i < p.size(); ++i) {
      const T orig = p[i];
      p[i] = orig + h;
      const T up = eval();
      p[i] = orig - h;
      const T down = eval();
      p[i] = orig;
      worst = std::max(worst, detail::relative_error(analytic[k][i], (up - down) / (T(2) * h)));
    }
  }
  return worst;
}

}  // namespace ast
