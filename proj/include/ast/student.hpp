#pragma once

#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "ast/nn.hpp"

namespace ast {

struct StudentConfig {
  index_t in_channels = 0;     // features (+ depth) channels
  index_t cond_channels = 32;  // positional encoding channels
  index_t out_channels = 0;    // teacher channel count
  index_t hidden = 64;
  index_t n_blocks = 4;
  double leaky_slope = 0.2;
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;
};

/// conv 3x3 -> batch norm -> leaky ReLU
template <class T>
struct ConvBnAct {
  Conv2d<T> conv;
  Tensor<T> bn_gamma;
  Tensor<T> bn_beta;
  BatchNormState<T> bn;

  static ConvBnAct init(index_t in, index_t out, const StudentConfig& cfg, Rng& rng) {
    return {Conv2d<T>::init(in, out, 3, rng), Tensor<T>(Shape{out}, T(1)), Tensor<T>(Shape{out}, T(0)),
            BatchNormState<T>(out, static_cast<T>(cfg.bn_eps), static_cast<T>(cfg.bn_momentum))};
  }

  Var<T> operator()(ParamScope<T>& scope, const Var<T>& x, Mode mode, T slope) {
    return leaky_relu(batchnorm2d(conv(scope, x), scope(bn_gamma), scope(bn_beta), bn, mode), slope);
  }
};

template <class T>
struct ResidualBlock {
  ConvBnAct<T> first;
  ConvBnAct<T> second;
};

/// Plain residual CNN regressing teacher outputs from [x, c].
template <class T = float>
class StudentModel {
 public:
  StudentModel() = default;

  StudentModel(const StudentConfig& config, Rng& rng) : config_(config) {
    if (config.in_channels <= 0 || config.out_channels <= 0)
      throw DimensionError("student needs positive in/out channel counts");
    entry_ = ConvBnAct<T>::init(config.in_channels + config.cond_channels, config.hidden, config, rng);
    for (index_t i = 0; i < config.n_blocks; ++i)
      blocks_.push_back({ConvBnAct<T>::init(config.hidden, config.hidden, config, rng),
                         ConvBnAct<T>::init(config.hidden, config.hidden, config, rng)});
    exit_ = Conv2d<T>::init(config.hidden, config.out_channels, 3, rng);
  }

  const StudentConfig& config() const { return config_; }
  Conv2d<T>& exit_conv() { return exit_; }

  NamedParams<T> named_parameters() {
    NamedParams<T> out;
    auto add_unit = [&out](const std::string& p, ConvBnAct<T>& u) {
      out.emplace_back(p + ".conv.weight", &u.conv.weight);
      out.emplace_back(p + ".conv.bias", &u.conv.bias);
      out.emplace_back(p + ".bn.gamma", &u.bn_gamma);
      out.emplace_back(p + ".bn.beta", &u.bn_beta);
    };
    add_unit("student.entry", entry_);
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      add_unit("student.block" + std::to_string(i) + ".first", blocks_[i].first);
      add_unit("student.block" + std::to_string(i) + ".second", blocks_[i].second);
    }
    out.emplace_back("student.exit.weight", &exit_.weight);
    out.emplace_back("student.exit.bias", &exit_.bias);
    return out;
  }

  std::vector<Tensor<T>*> parameters() { return tensors_of(named_parameters()); }

  // Running batch-norm statistics, in a fixed order.
  NamedParams<T> named_buffers() {
    NamedParams<T> out;
    auto add_unit = [&out](const std::string& p, ConvBnAct<T>& u) {
      out.emplace_back(p + ".bn.running_mean", &u.bn.running_mean);
      out.emplace_back(p + ".bn.running_var", &u.bn.running_var);
    };
    add_unit("student.entry", entry_);
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      add_unit("student.block" + std::to_string(i) + ".first", blocks_[i].first);
      add_unit("student.block" + std::to_string(i) + ".second", blocks_[i].second);
    }
    return out;
  }

  /// Forward on x [C_in,H,W] or [N,C_in,H,W] with condition c. Train mode
  /// updates the batch-norm running statistics.
  Var<T> forward(ParamScope<T>& scope, const Var<T>& x, const Var<T>& c, Mode mode) {
    const auto L = image_layout(x.shape(), "student_forward");
    if (L.c != config_.in_channels)
      throw DimensionError("student expects " + std::to_string(config_.in_channels) + " input channels, got " +
                           std::to_string(L.c));
    Var<T> cond = c;
    if (x.value().rank() == 4 && c.value().rank() == 3) cond = x.tape().constant(repeat(c.value(), L.n));
    const T slope = static_cast<T>(config_.leaky_slope);
    Var<T> h = entry_(scope, concat_channels(x, cond), mode, slope);
    for (auto& b : blocks_) {
      Var<T> r = b.second(scope, b.first(scope, h, mode, slope), mode, slope);
      h = add(h, r);
    }
    return exit_(scope, h);
  }

  /// Eval-mode inference.
  Tensor<T> predict(const Tensor<T>& x, const Tensor<T>& c) const {
    // Eval mode leaves batch-norm state untouched; the copy keeps this const.
    StudentModel copy = *this;
    Tape<T> tape;
    ParamScope<T> scope(tape, false);
    return copy.forward(scope, tape.constant(x), tape.constant(c), Mode::eval).value();
  }

 private:
  StudentConfig config_;
  ConvBnAct<T> entry_;
  std::vector<ResidualBlock<T>> blocks_;
  Conv2d<T> exit_;
};

/// Per-pixel squared L2 distance over channels.
template <class T>
Tensor<T> distance_map(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw DimensionError("distance_map: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  const auto L = image_layout(a.shape(), "distance_map");
  Shape s = a.rank() == 4 ? Shape{L.n, L.h, L.w} : Shape{L.h, L.w};
  Tensor<T> out(s);
  const index_t P = L.plane();
  for (index_t n = 0; n < L.n; ++n)
    for (index_t p = 0; p < P; ++p) {
      double acc = 0;
      for (index_t c = 0; c < L.c; ++c) {
        const double d = static_cast<double>(a[(n * L.c + c) * P + p]) - b[(n * L.c + c) * P + p];
        acc += d * d;
      }
      out[n * P + p] = static_cast<T>(acc);
    }
  return out;
}

template <class T>
Var<T> distance_map(const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape())
    throw DimensionError("distance_map: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  return sum_channels(square(sub(a, b)));
}

template <class T>
Var<T> student_loss(const Var<T>& dist, const Tensor<T>* mask = nullptr) {
  return masked_mean(dist, mask);
}

template <class T>
T student_loss(const Tensor<T>& dist, const Tensor<T>* mask = nullptr) {
  Tape<T> tape;
  return student_loss(tape.constant(dist), mask).value()[0];
}

/// Image-level score: max over foreground with a mask, mean over all pixels
/// without one.
template <class T>
T image_score(const Tensor<T>& dist, const Tensor<T>* mask = nullptr) {
  if (!mask) {
    double s = 0;
    for (T v : dist.values()) s += v;
    return static_cast<T>(s / static_cast<double>(dist.size()));
  }
  if (mask->shape() != dist.shape()) throw DimensionError("image_score: mask shape mismatch");
  T best = -std::numeric_limits<T>::infinity();
  bool any = false;
  for (index_t i = 0; i < dist.size(); ++i)
    if ((*mask)[i] > T(0)) {
      best = std::max(best, dist[i]);
      any = true;
    }
  if (!any) throw EmptyForegroundError();
  return best;
}

}  // namespace ast
