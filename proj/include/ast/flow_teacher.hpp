#pragma once

#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "ast/nn.hpp"

namespace ast {

struct TeacherConfig {
  index_t channels = 0;        // C, must be even
  index_t cond_channels = 32;  // positional encoding channels
  index_t n_blocks = 4;
  index_t hidden = 64;
  index_t kernel = 3;
  double alpha = 3.0;
};

/// Bounded scale: (2*alpha/pi) * atan(s / alpha), values in (-alpha, alpha).
template <class T>
Var<T> clamp_scale(const Var<T>& s_raw, T alpha) {
  const T k = T(2) * alpha / std::numbers::pi_v<T>;
  return scale(atan(scale(s_raw, T(1) / alpha)), k);
}

template <class T>
Tensor<T> clamp_scale(const Tensor<T>& s_raw, T alpha) {
  Tensor<T> out = s_raw;
  const T k = T(2) * alpha / std::numbers::pi_v<T>;
  for (auto& v : out.values()) v = k * std::atan(v / alpha);
  return out;
}

/// One hidden layer: conv -> ReLU -> conv. Output channels are split into
/// raw scale (first half) and raw shift (second half).
template <class T>
struct CouplingSubnet {
  Conv2d<T> hidden;
  Conv2d<T> out;

  Var<T> operator()(ParamScope<T>& scope, const Var<T>& x) const { return out(scope, relu(hidden(scope, x))); }

  template <class U>
  CouplingSubnet<U> cast() const {
    return {hidden.template cast<U>(), out.template cast<U>()};
  }
};

template <class T>
struct CouplingBlock {
  std::vector<index_t> perm;  // output channel k <- input channel perm[k]
  CouplingSubnet<T> subnet1;  // [x1, c] -> (s1, t1), transforms x2
  CouplingSubnet<T> subnet2;  // [y2, c] -> (s2, t2), transforms x1
  Tensor<T> gamma1 = Tensor<T>(Shape{1});
  Tensor<T> gamma2 = Tensor<T>(Shape{1});
  T alpha = T(3);

  template <class U>
  CouplingBlock<U> cast() const {
    CouplingBlock<U> b;
    b.perm = perm;
    b.subnet1 = subnet1.template cast<U>();
    b.subnet2 = subnet2.template cast<U>();
    b.gamma1 = gamma1.template cast<U>();
    b.gamma2 = gamma2.template cast<U>();
    b.alpha = static_cast<U>(alpha);
    return b;
  }
};

template <class T>
struct FlowVars {
  Var<T> z;
  Var<T> logdet;  // [N,H,W] or [H,W]
};

template <class T>
struct FlowOutput {
  Tensor<T> z;
  Tensor<T> logdet_map;
};

/// Conditional normalizing flow built from affine coupling blocks. Every
/// block starts as a pure channel permutation because its gammas are zero.
template <class T = float>
class TeacherModel {
 public:
  TeacherModel() = default;

  TeacherModel(const TeacherConfig& config, Rng& rng) : config_(config) {
    if (config.channels < 2 || config.channels % 2 != 0)
      throw DimensionError("teacher needs an even channel count >= 2, got " + std::to_string(config.channels));
    if (config.alpha <= 0) throw ContractError("alpha must be positive");
    const index_t half = config.channels / 2;
    for (index_t i = 0; i < config.n_blocks; ++i) {
      CouplingBlock<T> b;
      b.perm = rng.permutation(config.channels);
      b.subnet1 = {Conv2d<T>::init(half + config.cond_channels, config.hidden, config.kernel, rng),
                   Conv2d<T>::init(config.hidden, config.channels, config.kernel, rng)};
      b.subnet2 = {Conv2d<T>::init(half + config.cond_channels, config.hidden, config.kernel, rng),
                   Conv2d<T>::init(config.hidden, config.channels, config.kernel, rng)};
      b.alpha = static_cast<T>(config.alpha);
      blocks_.push_back(std::move(b));
    }
  }

  const TeacherConfig& config() const { return config_; }
  std::vector<CouplingBlock<T>>& blocks() { return blocks_; }
  const std::vector<CouplingBlock<T>>& blocks() const { return blocks_; }

  NamedParams<T> named_parameters() {
    NamedParams<T> out;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      auto& b = blocks_[i];
      const std::string p = "teacher.block" + std::to_string(i) + ".";
      out.emplace_back(p + "subnet1.hidden.weight", &b.subnet1.hidden.weight);
      out.emplace_back(p + "subnet1.hidden.bias", &b.subnet1.hidden.bias);
      out.emplace_back(p + "subnet1.out.weight", &b.subnet1.out.weight);
      out.emplace_back(p + "subnet1.out.bias", &b.subnet1.out.bias);
      out.emplace_back(p + "subnet2.hidden.weight", &b.subnet2.hidden.weight);
      out.emplace_back(p + "subnet2.hidden.bias", &b.subnet2.hidden.bias);
      out.emplace_back(p + "subnet2.out.weight", &b.subnet2.out.weight);
      out.emplace_back(p + "subnet2.out.bias", &b.subnet2.out.bias);
      out.emplace_back(p + "gamma1", &b.gamma1);
      out.emplace_back(p + "gamma2", &b.gamma2);
    }
    return out;
  }

  std::vector<Tensor<T>*> parameters() { return tensors_of(named_parameters()); }

  template <class U>
  TeacherModel<U> cast() const {
    TeacherModel<U> m;
    m.config_ = config_;
    for (const auto& b : blocks_) m.blocks_.push_back(b.template cast<U>());
    return m;
  }

 private:
  template <class U>
  friend class TeacherModel;

  TeacherConfig config_;
  std::vector<CouplingBlock<T>> blocks_;
};

namespace detail {

// Splits a subnet output into clamped scale and shift, both scaled by gamma.
template <class T>
std::pair<Var<T>, Var<T>> scale_shift(const Var<T>& raw, const Var<T>& gamma, T alpha) {
  auto [s_raw, t_raw] = split_half(raw);
  return {clamp_scale(mul(gamma, s_raw), alpha), mul(gamma, t_raw)};
}

// The condition map broadcast to the batch size of x.
template <class T>
Var<T> condition_like(const Var<T>& x, const Var<T>& c) {
  if (x.value().rank() == c.value().rank()) return c;
  if (x.value().rank() == 4 && c.value().rank() == 3) return x.tape().constant(repeat(c.value(), x.value().dim(0)));
  throw DimensionError("condition " + to_string(c.shape()) + " incompatible with input " + to_string(x.shape()));
}

}  // namespace detail

/// One coupling block:
///   y2 = x2 * exp(s1([x1, c])) + t1([x1, c])
///   y1 = x1 * exp(s2([y2, c])) + t2([y2, c])
/// after the fixed channel permutation; output is [y1, y2].
template <class T>
FlowVars<T> coupling_forward(ParamScope<T>& scope, const CouplingBlock<T>& block, const Var<T>& x, const Var<T>& c,
                             index_t block_index = 0) {
  const auto L = image_layout(x.shape(), "coupling_forward");
  if (L.c != static_cast<index_t>(block.perm.size()))
    throw DimensionError("coupling block " + std::to_string(block_index) + ": expected " +
                         std::to_string(block.perm.size()) + " channels, got " + std::to_string(L.c));
  Var<T> cond = detail::condition_like(x, c);
  const std::string where = "coupling block " + std::to_string(block_index);
  try {
    auto [x1, x2] = split_half(permute_channels(x, block.perm));

    auto [s1, t1] =
        detail::scale_shift(block.subnet1(scope, concat_channels(x1, cond)), scope(block.gamma1), block.alpha);
    Var<T> y2 = add(mul(x2, exp(s1)), t1);
    auto [s2, t2] =
        detail::scale_shift(block.subnet2(scope, concat_channels(y2, cond)), scope(block.gamma2), block.alpha);
    Var<T> y1 = add(mul(x1, exp(s2)), t2);

    Var<T> y = concat_channels(y1, y2);
    if (!y.value().all_finite()) throw NonFiniteError("non-finite output");
    return {y, add(sum_channels(s1), sum_channels(s2))};
  } catch (const NonFiniteError& e) {
    throw NonFiniteError(where + ": " + e.what());
  }
}

template <class T>
FlowOutput<T> coupling_forward(const CouplingBlock<T>& block, const Tensor<T>& x, const Tensor<T>& c) {
  Tape<T> tape;
  ParamScope<T> scope(tape, false);
  auto out = coupling_forward(scope, block, tape.constant(x), tape.constant(c));
  return {out.z.value(), out.logdet.value()};
}

/// Exact inverse of coupling_forward: recover x1 from y1 (its scale and
/// shift depend only on y2), then x2 from y2 using the recovered x1.
template <class T>
Tensor<T> coupling_inverse(const CouplingBlock<T>& block, const Tensor<T>& y, const Tensor<T>& c) {
  const auto L = image_layout(y.shape(), "coupling_inverse");
  if (L.c != static_cast<index_t>(block.perm.size()))
    throw DimensionError("coupling_inverse: expected " + std::to_string(block.perm.size()) + " channels");
  Tape<T> tape;
  ParamScope<T> scope(tape, false);
  Var<T> yv = tape.constant(y);
  Var<T> cond = detail::condition_like(yv, tape.constant(c));
  auto [y1, y2] = split_half(yv);

  auto [s2, t2] = detail::scale_shift(block.subnet2(scope, concat_channels(y2, cond)), scope(block.gamma2), block.alpha);
  Var<T> x1 = mul(sub(y1, t2), exp(neg(s2)));
  auto [s1, t1] = detail::scale_shift(block.subnet1(scope, concat_channels(x1, cond)), scope(block.gamma1), block.alpha);
  Var<T> x2 = mul(sub(y2, t1), exp(neg(s1)));

  return permute_channels(concat_channels(x1, x2).value(), invert_permutation(block.perm));
}

template <class T>
FlowVars<T> teacher_forward(ParamScope<T>& scope, const TeacherModel<T>& model, const Var<T>& x, const Var<T>& c) {
  const auto L = image_layout(x.shape(), "teacher_forward");
  if (L.c != model.config().channels)
    throw DimensionError("teacher expects " + std::to_string(model.config().channels) + " channels, got " +
                         std::to_string(L.c));
  Var<T> cond = detail::condition_like(x, c);
  Var<T> z = x;
  Var<T> logdet;
  for (std::size_t i = 0; i < model.blocks().size(); ++i) {
    auto out = coupling_forward(scope, model.blocks()[i], z, cond, static_cast<index_t>(i));
    z = out.z;
    logdet = logdet.valid() ? add(logdet, out.logdet) : out.logdet;
  }
  if (!logdet.valid()) {
    Shape s = x.value().rank() == 4 ? Shape{L.n, L.h, L.w} : Shape{L.h, L.w};
    logdet = x.tape().constant(Tensor<T>(s));
  }
  return {z, logdet};
}

template <class T>
FlowOutput<T> teacher_forward(const TeacherModel<T>& model, const Tensor<T>& x, const Tensor<T>& c) {
  Tape<T> tape;
  ParamScope<T> scope(tape, false);
  auto out = teacher_forward(scope, model, tape.constant(x), tape.constant(c));
  return {out.z.value(), out.logdet.value()};
}

template <class T>
Tensor<T> teacher_inverse(const TeacherModel<T>& model, const Tensor<T>& z, const Tensor<T>& c) {
  Tensor<T> x = z;
  for (auto it = model.blocks().rbegin(); it != model.blocks().rend(); ++it) x = coupling_inverse(*it, x, c);
  return x;
}

/// Per-pixel negative log-likelihood without the Gaussian constant:
/// ||z_ij||^2 / 2 - logdet_ij.
template <class T>
Var<T> nll_map(const FlowVars<T>& out) {
  return sub(scale(sum_channels(square(out.z)), T(0.5)), out.logdet);
}

template <class T>
Tensor<T> nll_map(const FlowOutput<T>& out) {
  Tensor<T> sq = out.z;
  for (auto& v : sq.values()) v = v * v;
  Tensor<T> nll = sum_channels(sq);
  for (index_t i = 0; i < nll.size(); ++i) nll[i] = T(0.5) * nll[i] - out.logdet_map[i];
  return nll;
}

/// Mean NLL over foreground pixels of a batch. `mask`, when given, has the
/// shape of the NLL map ([N,H,W] or [H,W]).
template <class T>
Var<T> teacher_loss(ParamScope<T>& scope, const TeacherModel<T>& model, const Var<T>& x, const Var<T>& c,
                    const Tensor<T>* mask = nullptr) {
  return masked_mean(nll_map(teacher_forward(scope, model, x, c)), mask);
}

/// Teacher-only anomaly score map: the per-pixel NLL.
template <class T>
Tensor<T> teacher_score_map(const TeacherModel<T>& model, const Tensor<T>& x, const Tensor<T>& c) {
  return nll_map(teacher_forward(model, x, c));
}

}  // namespace ast
