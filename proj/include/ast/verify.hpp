#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/LU>

#include "ast/flow_teacher.hpp"
#include "ast/gradcheck.hpp"
#include "ast/metrics.hpp"
#include "ast/preprocess.hpp"
#include "ast/student.hpp"

namespace ast {

struct CheckRow {
  std::string name;
  double value = 0;
  double tolerance = 0;
  bool pass() const { return std::isfinite(value) && value < tolerance; }
};

/// P(pos > neg) + P(tie)/2 over all pairs.
inline double pairwise_auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
  double wins = 0, pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i)
    for (std::size_t j = 0; j < scores.size(); ++j)
      if (labels[i] != 0 && labels[j] == 0) {
        pairs += 1;
        wins += scores[i] > scores[j] ? 1.0 : scores[i] == scores[j] ? 0.5 : 0.0;
      }
  if (pairs == 0) throw DegenerateLabelsError();
  return wins / pairs;
}

/// log|det J| of the whole flow from a central-difference Jacobian.
inline double jacobian_logdet(const TeacherModel<double>& model, const Tensor<double>& x, const Tensor<double>& c,
                              double h = 1e-6) {
  const index_t n = x.size();
  Eigen::MatrixXd J(n, n);
  Tensor<double> probe = x;
  for (index_t k = 0; k < n; ++k) {
    probe[k] = x[k] + h;
    const Tensor<double> up = teacher_forward(model, probe, c).z;
    probe[k] = x[k] - h;
    const Tensor<double> down = teacher_forward(model, probe, c).z;
    probe[k] = x[k];
    for (index_t r = 0; r < n; ++r) J(r, k) = (up[r] - down[r]) / (2 * h);
  }
  return std::log(std::abs(J.partialPivLu().determinant()));
}

/// Teacher with every gamma drawn away from zero so all subnets contribute.
template <class T>
TeacherModel<T> random_active_teacher(const TeacherConfig& cfg, Rng& rng, double gamma_lo = 0.3, double gamma_hi = 1.0) {
  TeacherModel<T> m(cfg, rng);
  for (auto& b : m.blocks()) {
    b.gamma1[0] = static_cast<T>(rng.uniform(gamma_lo, gamma_hi) * (rng.uniform(0, 1) < 0.5 ? -1 : 1));
    b.gamma2[0] = static_cast<T>(rng.uniform(gamma_lo, gamma_hi) * (rng.uniform(0, 1) < 0.5 ? -1 : 1));
  }
  return m;
}

namespace detail {

// Scalar probe sum(f(x) * w) with fixed random weights.
template <class F>
double probe_check(Rng& rng, const std::vector<Shape>& shapes, F&& f, double lo = -1.0, double hi = 1.0) {
  std::vector<Tensor<double>> pts;
  for (const auto& s : shapes) pts.push_back(rng.uniform_tensor<double>(s, lo, hi));
  Tensor<double> w;
  {
    Tape<double> tape;
    std::vector<Var<double>> v;
    for (const auto& p : pts) v.push_back(tape.constant(p));
    w = rng.uniform_tensor<double>(f(tape, v).shape(), -1.0, 1.0);
  }
  return gradcheck<double>(
      [&](Tape<double>& t, const std::vector<Var<double>>& v) { return sum(mul(f(t, v), t.constant(w))); }, pts,
      1e-6);
}

// Points bounded away from the kink of (leaky) ReLU.
inline Tensor<double> away_from_zero(Rng& rng, const Shape& s) {
  Tensor<double> t = rng.uniform_tensor<double>(s, 0.1, 1.0);
  for (auto& v : t.values())
    if (rng.uniform(0, 1) < 0.5) v = -v;
  return t;
}

}  // namespace detail

/// Reverse-mode gradients against central differences, in double.
/// Primitive ops are held to 1e-4, composed losses to 1e-3.
inline std::vector<CheckRow> gradcheck_suite(std::uint64_t seed = 0) {
  Rng rng(seed);
  std::vector<CheckRow> rows;
  using V = std::vector<Var<double>>;
  using Tp = Tape<double>;
  const Shape img{2, 4, 5, 5};
  auto prim = [&](const std::string& name, const std::vector<Shape>& shapes, auto f) {
    rows.push_back({name, detail::probe_check(rng, shapes, f), 1e-4});
  };

  prim("add", {img, img}, [](Tp&, const V& v) { return add(v[0], v[1]); });
  prim("add_scalar", {img, {1}}, [](Tp&, const V& v) { return add(v[0], v[1]); });
  prim("sub", {img, img}, [](Tp&, const V& v) { return sub(v[0], v[1]); });
  prim("mul", {img, img}, [](Tp&, const V& v) { return mul(v[0], v[1]); });
  prim("mul_scalar", {{1}, img}, [](Tp&, const V& v) { return mul(v[0], v[1]); });
  prim("scale", {img}, [](Tp&, const V& v) { return scale(v[0], 1.7); });
  prim("shift", {img}, [](Tp&, const V& v) { return shift(v[0], -0.3); });
  prim("exp", {img}, [](Tp&, const V& v) { return exp(v[0]); });
  prim("atan", {img}, [](Tp&, const V& v) { return atan(v[0]); });
  prim("tanh", {img}, [](Tp&, const V& v) { return tanh(v[0]); });
  prim("square", {img}, [](Tp&, const V& v) { return square(v[0]); });
  prim("sum", {img}, [](Tp&, const V& v) { return sum(v[0]); });
  prim("mean", {img}, [](Tp&, const V& v) { return mean(v[0]); });
  prim("sum_channels", {img}, [](Tp&, const V& v) { return sum_channels(v[0]); });
  prim("slice_channels", {img}, [](Tp&, const V& v) { return slice_channels(v[0], 1, 2); });
  prim("split_half", {img}, [](Tp&, const V& v) {
    auto [a, b] = split_half(v[0]);
    return mul(a, b);
  });
  prim("concat_channels", {img, {2, 3, 5, 5}}, [](Tp&, const V& v) { return concat_channels(v[0], v[1]); });
  prim("permute_channels", {img}, [](Tp&, const V& v) { return permute_channels(v[0], {2, 0, 3, 1}); });
  prim("pixel_unshuffle", {{2, 3, 4, 4}}, [](Tp&, const V& v) { return pixel_unshuffle(v[0], 2); });
  prim("pixel_shuffle", {{2, 8, 2, 2}}, [](Tp&, const V& v) { return pixel_shuffle(v[0], 2); });
  prim("conv2d_same", {{2, 3, 5, 5}, {4, 3, 3, 3}, {4}},
       [](Tp&, const V& v) { return conv2d(v[0], v[1], v[2], Padding::same); });
  prim("conv2d_valid", {{2, 3, 5, 5}, {4, 3, 3, 3}, {4}},
       [](Tp&, const V& v) { return conv2d(v[0], v[1], v[2], Padding::valid); });
  prim("conv2d_1x1", {{3, 5, 4}, {2, 3, 1, 1}, {2}}, [](Tp&, const V& v) { return conv2d(v[0], v[1], v[2]); });
  prim("linear", {{6, 5}, {3, 5}, {3}}, [](Tp&, const V& v) { return linear(v[0], v[1], v[2]); });
  prim("clamp_scale", {img}, [](Tp&, const V& v) { return clamp_scale(scale(v[0], 4.0), 1.9); });
  {
    BatchNormState<double> st(4);
    prim("batchnorm2d_train", {img, {4}, {4}}, [&st](Tp&, const V& v) {
      BatchNormState<double> s = st;
      return batchnorm2d(v[0], v[1], v[2], s, Mode::train);
    });
    st.running_mean = rng.uniform_tensor<double>({4}, -0.5, 0.5);
    st.running_var = rng.uniform_tensor<double>({4}, 0.5, 2.0);
    prim("batchnorm2d_eval", {img, {4}, {4}}, [&st](Tp&, const V& v) {
      BatchNormState<double> s = st;
      return batchnorm2d(v[0], v[1], v[2], s, Mode::eval);
    });
  }
  {
    const Tensor<double> x = detail::away_from_zero(rng, img), w = rng.uniform_tensor<double>(img, -1, 1);
    rows.push_back({"relu", gradcheck<double>([&](Tp& t, const Var<double>& a) { return sum(mul(relu(a), t.constant(w))); }, x, 1e-6), 1e-4});
    rows.push_back({"leaky_relu",
                    gradcheck<double>([&](Tp& t, const Var<double>& a) { return sum(mul(leaky_relu(a, 0.2), t.constant(w))); }, x, 1e-6),
                    1e-4});
  }

  // Composed losses: teacher NLL and student regression, over inputs and
  // every parameter.
  {
    TeacherConfig tc{4, 4, 2, 6, 3, 1.9};
    TeacherModel<double> teacher = random_active_teacher<double>(tc, rng);
    const Tensor<double> x = rng.normal_tensor<double>({2, 4, 3, 3});
    const Tensor<double> c = positional_encoding(3, 3, 4).cast<double>();
    Tensor<double> mask(Shape{2, 3, 3}, 1.0);
    mask[0] = 0;
    mask[5] = 0;
    rows.push_back({"teacher_nll(x)",
                    gradcheck<double>(
                        [&](Tp& t, const Var<double>& a) {
                          ParamScope<double> scope(t, false);
                          return teacher_loss(scope, teacher, a, t.constant(c), &mask);
                        },
                        x, 1e-6),
                    1e-3});
    rows.push_back({"teacher_nll(params)",
                    gradcheck_parameters<double>(
                        [&](ParamScope<double>& scope) {
                          Tp& t = scope.tape();
                          return teacher_loss(scope, teacher, t.constant(x), t.constant(c), &mask);
                        },
                        teacher.parameters(), 1e-6),
                    1e-3});
  }
  {
    StudentConfig sc{4, 4, 4, 6, 1, 0.2, 1e-5, 0.1};
    StudentModel<double> student(sc, rng);
    const Tensor<double> x = rng.normal_tensor<double>({3, 4, 3, 3});
    const Tensor<double> target = rng.normal_tensor<double>({3, 4, 3, 3});
    const Tensor<double> c = positional_encoding(3, 3, 4).cast<double>();
    auto loss = [&](ParamScope<double>& scope, const Var<double>& in) {
      // Train-mode output ignores the running statistics it updates.
      Tp& t = scope.tape();
      return student_loss(distance_map(student.forward(scope, in, t.constant(c), Mode::train), t.constant(target)));
    };
    rows.push_back({"student_loss(x)",
                    gradcheck<double>(
                        [&](Tp& t, const Var<double>& a) {
                          ParamScope<double> scope(t, false);
                          return loss(scope, a);
                        },
                        x, 1e-6),
                    1e-3});
    // A bias feeding train-mode batch norm is cancelled by the batch mean, so
    // its gradient is exactly zero and a relative error is meaningless; those
    // are checked for a vanishing gradient instead.
    std::vector<Tensor<double>*> checked, cancelled;
    for (const auto& [name, p] : student.named_parameters())
      (name.ends_with(".conv.bias") ? cancelled : checked).push_back(p);
    rows.push_back({"student_loss(params)",
                    gradcheck_parameters<double>(
                        [&](ParamScope<double>& scope) { return loss(scope, scope.tape().constant(x)); }, checked,
                        1e-6),
                    1e-3});
    Tp tape;
    ParamScope<double> scope(tape, true);
    tape.backward(loss(scope, tape.constant(x)));
    double worst = 0;
    for (auto* p : cancelled) {
      const Tensor<double> g = scope.grad(*p);
      for (double v : g.values()) worst = std::max(worst, std::abs(v));
    }
    rows.push_back({"student bias before batch norm |grad|", worst, 1e-10});
  }
  return rows;
}

/// Invariant checks that run in seconds: flow bijectivity, log-det against
/// the numerical Jacobian, AUROC against the pairwise definition, and the
/// shuffle round trip. Each row reports a worst-case error.
inline std::vector<CheckRow> selftest_suite(std::uint64_t seed = 0) {
  Rng rng(seed);
  std::vector<CheckRow> rows;
  {
    double worst = 0;
    for (index_t channels : {4, 8, 16}) {
      TeacherModel<float> m = random_active_teacher<float>({channels, 8, 4, 16, 3, 1.9}, rng);
      const Tensor<float> x = rng.normal_tensor<float>({channels, 5, 5});
      const Tensor<float> c = positional_encoding(5, 5, 8);
      worst = std::max(worst, static_cast<double>(max_abs_diff(teacher_inverse(m, teacher_forward(m, x, c).z, c), x)));
    }
    rows.push_back({"bijectivity max|inv(fwd(x))-x|", worst, 1e-4});
  }
  {
    double worst = 0;
    for (int k = 0; k < 3; ++k) {
      TeacherModel<double> m = random_active_teacher<double>({4, 4, 3, 8, 3, 1.9}, rng);
      const Tensor<double> x = rng.normal_tensor<double>({4, 4, 4});
      const Tensor<double> c = positional_encoding(4, 4, 4).cast<double>();
      const FlowOutput<double> out = teacher_forward(m, x, c);
      double ld = 0;
      for (double v : out.logdet_map.values()) ld += v;
      const double ref = jacobian_logdet(m, x, c);
      worst = std::max(worst, std::abs(ld - ref) / std::max(std::abs(ref), 1e-8));
    }
    rows.push_back({"logdet vs numerical Jacobian (rel)", worst, 1e-3});
  }
  {
    double worst = 0;
    for (int k = 0; k < 20; ++k) {
      const auto n = static_cast<std::size_t>(rng.integer(2, 120));
      std::vector<double> s(n);
      std::vector<int> l(n);
      for (std::size_t i = 0; i < n; ++i) {
        s[i] = static_cast<double>(rng.integer(0, 5));
        l[i] = static_cast<int>(i % 2);
      }
      worst = std::max(worst, std::abs(auroc(s, l) - pairwise_auroc(s, l)));
    }
    rows.push_back({"auroc vs pairwise oracle", worst, 1e-9});
  }
  {
    const Tensor<float> x = rng.normal_tensor<float>({3, 8, 8});
    rows.push_back({"pixel_shuffle(pixel_unshuffle(x)) - x",
                    static_cast<double>(max_abs_diff(pixel_shuffle(pixel_unshuffle(x, 4), 4), x)), 1e-12});
  }
  for (const auto& r : gradcheck_suite(seed)) rows.push_back(r);
  return rows;
}

}  // namespace ast
