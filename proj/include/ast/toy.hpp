#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ast/export.hpp"
#include "ast/nn.hpp"
#include "ast/optim.hpp"

namespace ast {

/// One-dimensional teacher/student experiment with small tanh MLPs.
struct ToySpec {
  std::uint64_t seed = 0;
  index_t width = 32;
  index_t teacher_layers = 1;
  index_t symmetric_layers = 1;
  index_t asymmetric_layers = 3;
  double train_lo = -1.0;
  double train_hi = 1.0;
  double ood_width = 1.0;  // anomalies in [lo - w, lo) and (hi, hi + w]
  index_t n_train = 256;
  index_t n_eval = 512;  // grid points per anomaly side and in-distribution
  index_t steps = 2000;
  double lr = 3e-2;
};

inline nlohmann::json toy_spec_to_json(const ToySpec& s) {
  return {{"seed", s.seed},           {"width", s.width},       {"teacher_layers", s.teacher_layers},
          {"symmetric_layers", s.symmetric_layers}, {"asymmetric_layers", s.asymmetric_layers},
          {"train_lo", s.train_lo},   {"train_hi", s.train_hi}, {"ood_width", s.ood_width},
          {"n_train", s.n_train},     {"n_eval", s.n_eval},     {"steps", s.steps},
          {"lr", s.lr}};
}

inline ToySpec toy_spec_from_json(const nlohmann::json& j, ToySpec s = {}) {
  s.seed = j.value("seed", s.seed);
  s.width = j.value("width", s.width);
  s.teacher_layers = j.value("teacher_layers", s.teacher_layers);
  s.symmetric_layers = j.value("symmetric_layers", s.symmetric_layers);
  s.asymmetric_layers = j.value("asymmetric_layers", s.asymmetric_layers);
  s.train_lo = j.value("train_lo", s.train_lo);
  s.train_hi = j.value("train_hi", s.train_hi);
  s.ood_width = j.value("ood_width", s.ood_width);
  s.n_train = j.value("n_train", s.n_train);
  s.n_eval = j.value("n_eval", s.n_eval);
  s.steps = j.value("steps", s.steps);
  s.lr = j.value("lr", s.lr);
  return s;
}

/// Dense tanh network on scalars: hidden layers of equal width, linear output.
/// Teacher and both students draw from the same initialization.
struct ToyMlp {
  std::vector<Tensor<float>> weights;
  std::vector<Tensor<float>> biases;

  static ToyMlp init_default(index_t hidden_layers, index_t width, Rng& rng) {
    ToyMlp m;
    index_t in = 1;
    for (index_t l = 0; l <= hidden_layers; ++l) {
      const index_t out = l == hidden_layers ? 1 : width;
      const double bound = 1.0 / std::sqrt(static_cast<double>(in));
      m.weights.push_back(rng.uniform_tensor<float>({out, in}, -bound, bound));
      m.biases.push_back(rng.uniform_tensor<float>({out}, -bound, bound));
      in = out;
    }
    return m;
  }

  std::vector<Tensor<float>*> parameters() {
    std::vector<Tensor<float>*> out;
    for (std::size_t l = 0; l < weights.size(); ++l) {
      out.push_back(&weights[l]);
      out.push_back(&biases[l]);
    }
    return out;
  }

  Var<float> forward(ParamScope<float>& scope, const Var<float>& x) const {
    Var<float> h = x;
    for (std::size_t l = 0; l < weights.size(); ++l) {
      h = linear(h, scope(weights[l]), scope(biases[l]));
      if (l + 1 < weights.size()) h = tanh(h);
    }
    return h;
  }

  std::vector<float> operator()(const std::vector<float>& xs) const {
    Tape<float> tape;
    ParamScope<float> scope(tape, false);
    const auto n = static_cast<index_t>(xs.size());
    Var<float> y = forward(scope, tape.constant(Tensor<float>(Shape{n, 1}, xs)));
    return y.value().storage();
  }
};

/// Full-batch Adam regression of `student` onto `targets` at `xs`.
inline void fit_toy(ToyMlp& student, const std::vector<float>& xs, const std::vector<float>& targets,
                    const ToySpec& spec) {
  const auto n = static_cast<index_t>(xs.size());
  const Tensor<float> x(Shape{n, 1}, xs), y(Shape{n, 1}, targets);
  auto params = student.parameters();
  AdamState<float> adam;
  const AdamParams cfg{spec.lr, 0.9, 0.999, 1e-8, 0.0};
  for (index_t step = 0; step < spec.steps; ++step) {
    Tape<float> tape;
    ParamScope<float> scope(tape, true);
    Var<float> loss = mean(square(sub(student.forward(scope, tape.constant(x)), tape.constant(y))));
    if (!std::isfinite(loss.value()[0])) throw NonFiniteError("toy: non-finite loss at step " + std::to_string(step));
    tape.backward(loss);
    std::vector<Tensor<float>> grads;
    for (auto* p : params) grads.push_back(scope.grad(*p));
    adam_step(params, grads, adam, cfg);
  }
}

struct ToyCurvePoint {
  double x, teacher, symmetric, asymmetric;
};

struct ToyReport {
  double teacher_range = 0;     // max - min of the teacher on the training interval
  double symmetric_in = 0;      // mean |f_s - f_t| on the training interval
  double asymmetric_in = 0;
  std::optional<double> symmetric_ood;  // mean |f_s - f_t| on the anomaly intervals
  std::optional<double> asymmetric_ood;
  std::vector<ToyCurvePoint> curve;

  std::string curves_csv() const {
    std::ostringstream os;
    os << "x,teacher,symmetric,asymmetric\n";
    for (const auto& p : curve)
      os << format_float(p.x) << ',' << format_float(p.teacher) << ',' << format_float(p.symmetric) << ','
         << format_float(p.asymmetric) << '\n';
    return os.str();
  }
};

inline std::vector<float> linspace(double lo, double hi, index_t n) {
  std::vector<float> out;
  for (index_t i = 0; i < n; ++i)
    out.push_back(static_cast<float>(n == 1 ? lo : lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1)));
  return out;
}

inline ToyReport toy_experiment(const ToySpec& spec) {
  if (spec.train_hi <= spec.train_lo || spec.ood_width < 0 || spec.n_train < 2 || spec.n_eval < 2 || spec.width < 1 ||
      spec.teacher_layers < 1 || spec.symmetric_layers < 1 || spec.asymmetric_layers < 1 || spec.steps < 0 || spec.lr <= 0)
    throw Error("toy: invalid specification");
  Rng rng(spec.seed);
  const ToyMlp teacher = ToyMlp::init_default(spec.teacher_layers, spec.width, rng);
  ToyMlp sym = ToyMlp::init_default(spec.symmetric_layers, spec.width, rng);
  ToyMlp asym = ToyMlp::init_default(spec.asymmetric_layers, spec.width, rng);

  const std::vector<float> xs = linspace(spec.train_lo, spec.train_hi, spec.n_train);
  const std::vector<float> ts = teacher(xs);
  fit_toy(sym, xs, ts, spec);
  fit_toy(asym, xs, ts, spec);

  auto mean_abs = [](const std::vector<float>& a, const std::vector<float>& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(static_cast<double>(a[i]) - b[i]);
    return s / static_cast<double>(a.size());
  };

  ToyReport r;
  const std::vector<float> in_x = linspace(spec.train_lo, spec.train_hi, spec.n_eval);
  const std::vector<float> in_t = teacher(in_x);
  const auto [lo, hi] = std::minmax_element(in_t.begin(), in_t.end());
  r.teacher_range = static_cast<double>(*hi) - *lo;
  r.symmetric_in = mean_abs(sym(in_x), in_t);
  r.asymmetric_in = mean_abs(asym(in_x), in_t);

  if (spec.ood_width > 0) {
    // Half-open intervals: drop the grid point on the training boundary.
    std::vector<float> ood;
    for (float v : linspace(spec.train_lo - spec.ood_width, spec.train_lo, spec.n_eval + 1))
      if (v < spec.train_lo) ood.push_back(v);
    for (float v : linspace(spec.train_hi, spec.train_hi + spec.ood_width, spec.n_eval + 1))
      if (v > spec.train_hi) ood.push_back(v);
    const std::vector<float> ood_t = teacher(ood);
    r.symmetric_ood = mean_abs(sym(ood), ood_t);
    r.asymmetric_ood = mean_abs(asym(ood), ood_t);
  }

  const std::vector<float> grid =
      linspace(spec.train_lo - std::max(spec.ood_width, 0.0), spec.train_hi + std::max(spec.ood_width, 0.0), 401);
  const auto gt = teacher(grid), gs = sym(grid), ga = asym(grid);
  for (std::size_t i = 0; i < grid.size(); ++i) r.curve.push_back({grid[i], gt[i], gs[i], ga[i]});
  return r;
}

}  // namespace ast
