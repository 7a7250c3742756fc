#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "ast/ops.hpp"

namespace ast {

/// Seeded generator shared by initialization, shuffling and corpus synthesis.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }
  index_t integer(index_t lo, index_t hi) { return std::uniform_int_distribution<index_t>(lo, hi)(engine_); }

  template <class T>
  Tensor<T> uniform_tensor(Shape shape, double lo, double hi) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.values()) v = static_cast<T>(uniform(lo, hi));
    return t;
  }

  template <class T>
  Tensor<T> normal_tensor(Shape shape, double stddev = 1.0) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.values()) v = static_cast<T>(normal(0.0, stddev));
    return t;
  }

  std::vector<index_t> permutation(index_t n) {
    std::vector<index_t> p(static_cast<std::size_t>(n));
    for (index_t i = 0; i < n; ++i) p[static_cast<std::size_t>(i)] = i;
    // Fisher-Yates from the back.
    for (index_t i = n - 1; i > 0; --i) std::swap(p[static_cast<std::size_t>(i)], p[static_cast<std::size_t>(integer(0, i))]);
    return p;
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

/// Square-kernel convolution layer with bias.
template <class T>
struct Conv2d {
  Tensor<T> weight;  // [out, in, k, k]
  Tensor<T> bias;    // [out]

  // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weight and bias.
  static Conv2d init(index_t in, index_t out, index_t k, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in * k * k));
    Conv2d c;
    c.weight = rng.uniform_tensor<T>({out, in, k, k}, -bound, bound);
    c.bias = rng.uniform_tensor<T>({out}, -bound, bound);
    return c;
  }

  index_t in_channels() const { return weight.dim(1); }
  index_t out_channels() const { return weight.dim(0); }

  Var<T> operator()(ParamScope<T>& scope, const Var<T>& x) const {
    return conv2d(x, scope(weight), scope(bias), Padding::same);
  }

  template <class U>
  Conv2d<U> cast() const {
    return {weight.template cast<U>(), bias.template cast<U>()};
  }
};

template <class T>
using NamedParams = std::vector<std::pair<std::string, Tensor<T>*>>;

template <class T>
std::vector<Tensor<T>*> tensors_of(const NamedParams<T>& named) {
  std::vector<Tensor<T>*> out;
  for (const auto& [name, t] : named) out.push_back(t);
  return out;
}

template <class T>
index_t parameter_count(const NamedParams<T>& named) {
  index_t n = 0;
  for (const auto& [name, t] : named) n += t->size();
  return n;
}

/// Mean of `map` over pixels where `mask` is 1; plain mean without a mask.
template <class T>
Var<T> masked_mean(const Var<T>& map, const Tensor<T>* mask) {
  if (!mask) return mean(map);
  if (mask->shape() != map.shape())
    throw DimensionError("mask shape " + to_string(mask->shape()) + " != map shape " + to_string(map.shape()));
  double count = 0;
  for (T m : mask->values()) count += m;
  if (count <= 0) throw EmptyForegroundError();
  Var<T> m = map.tape().constant(*mask);
  return scale(sum(mul(map, m)), static_cast<T>(1.0 / count));
}

}  // namespace ast
