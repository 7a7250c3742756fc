#include <gtest/gtest.h>

#include "ast/ast.hpp"

using namespace ast;

namespace {

StudentConfig small_config(index_t in = 5, index_t out = 4, index_t blocks = 2) {
  StudentConfig c;
  c.in_channels = in;
  c.cond_channels = 4;
  c.out_channels = out;
  c.hidden = 8;
  c.n_blocks = blocks;
  return c;
}

}  // namespace

TEST(StudentTest, ZeroExitGivesZeros) {
  Rng rng(0);
  StudentModel<float> m(small_config(), rng);
  m.exit_conv().weight.fill(0.0f);
  m.exit_conv().bias.fill(0.0f);
  const auto y = m.predict(rng.normal_tensor<float>({5, 4, 4}, 10.0), positional_encoding(4, 4, 4));
  for (float v : y.values()) EXPECT_EQ(v, 0.0f);
}

TEST(StudentTest, OutputShape) {
  Rng rng(1);
  for (int trial = 0; trial < 5; ++trial) {
    const index_t in = rng.integer(1, 6), out = 2 * rng.integer(1, 3), H = rng.integer(2, 7), W = rng.integer(2, 7);
    StudentModel<float> m(small_config(in, out, rng.integer(0, 3)), rng);
    const auto y = m.predict(rng.normal_tensor<float>({in, H, W}), positional_encoding(H, W, 4));
    EXPECT_EQ(y.shape(), (Shape{out, H, W}));
  }
}

TEST(StudentTest, EvalDeterministic) {
  Rng rng(2);
  StudentModel<float> m(small_config(), rng);
  const auto x = rng.normal_tensor<float>({5, 5, 5});
  const auto c = positional_encoding(5, 5, 4);
  EXPECT_EQ(m.predict(x, c), m.predict(x, c));
}

TEST(StudentTest, ShapeMismatch) {
  Rng rng(3);
  StudentModel<float> m(small_config(), rng);
  EXPECT_THROW(m.predict(Tensor<float>(Shape{3, 4, 4}), positional_encoding(4, 4, 4)), DimensionError);
}

TEST(StudentTest, TrainModeUpdatesRunningStatsEvalDoesNot) {
  Rng rng(4);
  StudentModel<float> m(small_config(), rng);
  const auto before = *m.named_buffers().front().second;
  const auto x = rng.normal_tensor<float>({2, 5, 3, 3}, 2.0);
  {
    Tape<float> t;
    ParamScope<float> s(t, false);
    m.forward(s, t.constant(x), t.constant(positional_encoding(3, 3, 4)), Mode::eval);
  }
  EXPECT_EQ(*m.named_buffers().front().second, before);
  {
    Tape<float> t;
    ParamScope<float> s(t, false);
    m.forward(s, t.constant(x), t.constant(positional_encoding(3, 3, 4)), Mode::train);
  }
  EXPECT_NE(*m.named_buffers().front().second, before);
}

TEST(DistanceTest, Examples) {
  Rng rng(5);
  const auto a = rng.normal_tensor<float>({4, 3, 3});
  const auto self = distance_map(a, a);
  for (float v : self.values()) EXPECT_EQ(v, 0.0f);

  Tensor<float> b = a;
  b.at(2, 1, 0) += 3.0f;
  const auto d = distance_map(a, b);
  for (index_t i = 0; i < 3; ++i)
    for (index_t j = 0; j < 3; ++j) EXPECT_NEAR(d.at(i, j), (i == 1 && j == 0) ? 9.0f : 0.0f, 1e-5);

  const auto c = rng.normal_tensor<float>({4, 3, 3});
  const auto dc = distance_map(a, c);
  for (index_t i = 0; i < 3; ++i)
    for (index_t j = 0; j < 3; ++j) {
      double s = 0;
      for (index_t k = 0; k < 4; ++k) s += std::pow(static_cast<double>(a.at(k, i, j)) - c.at(k, i, j), 2);
      EXPECT_NEAR(dc.at(i, j), s, 1e-5);
    }
  EXPECT_EQ(distance_map(a, c), distance_map(c, a));
  EXPECT_THROW(distance_map(a, Tensor<float>(Shape{3, 3, 3})), DimensionError);
}

TEST(DistanceTest, TapeVersionMatches) {
  Rng rng(6);
  const auto a = rng.normal_tensor<float>({4, 3, 3}), b = rng.normal_tensor<float>({4, 3, 3});
  Tape<float> t;
  EXPECT_LT(max_abs_diff(distance_map(t.constant(a), t.constant(b)).value(), distance_map(a, b)), 1e-5f);
  Tape<float> u;
  EXPECT_EQ(distance_map(u.constant(a), u.constant(b)).value(), distance_map(u.constant(b), u.constant(a)).value());
}

TEST(StudentLossTest, Examples) {
  Rng rng(7);
  const auto d = rng.uniform_tensor<float>({4, 4}, 0, 5);
  const Tensor<float> ones(Shape{4, 4}, 1.0f);
  double all = 0;
  for (float v : d.values()) all += v;
  EXPECT_NEAR(student_loss(d, &ones), all / 16, 1e-6);
  EXPECT_NEAR(student_loss(d), all / 16, 1e-6);

  Tensor<float> checker(Shape{4, 4});
  double sub = 0;
  for (index_t i = 0; i < 4; ++i)
    for (index_t j = 0; j < 4; ++j)
      if ((i + j) % 2 == 0) {
        checker.at(i, j) = 1.0f;
        sub += d.at(i, j);
      }
  EXPECT_NEAR(student_loss(d, &checker), sub / 8, 1e-6);

  const Tensor<float> constant(Shape{4, 4}, 2.5f);
  EXPECT_NEAR(student_loss(constant, &checker), 2.5, 1e-6);
  const Tensor<float> empty(Shape{4, 4});
  EXPECT_THROW(student_loss(d, &empty), EmptyForegroundError);
}

TEST(StudentLossTest, ZeroedBackgroundMatches) {
  Rng rng(8);
  const auto d = rng.uniform_tensor<float>({2, 5, 5}, 0, 3);
  Tensor<float> mask(Shape{2, 5, 5});
  for (auto& v : mask.values()) v = rng.uniform(0, 1) < 0.4 ? 1.0f : 0.0f;
  mask[0] = 1.0f;
  double s = 0, n = 0;
  for (index_t i = 0; i < d.size(); ++i) {
    s += mask[i] * d[i];
    n += mask[i];
  }
  EXPECT_NEAR(student_loss(d, &mask), s / n, 1e-6);
}

TEST(ImageScoreTest, Examples) {
  Tensor<float> d(Shape{3, 3}, 1.0f);
  Tensor<float> mask(Shape{3, 3});
  mask.at(1, 1) = 1.0f;
  mask.at(1, 2) = 1.0f;
  d.at(1, 2) = 7.5f;
  d.at(0, 0) = 9.0f;
  EXPECT_EQ(image_score(d, &mask), 7.5f);

  const Tensor<float> constant(Shape{3, 3}, 4.25f);
  EXPECT_NEAR(image_score(constant), 4.25f, 1e-6);

  Rng rng(9);
  const auto r = rng.uniform_tensor<float>({6, 7}, 0, 10);
  double s = 0;
  for (float v : r.values()) s += v;
  EXPECT_NEAR(image_score(r), s / 42, 1e-5);
  const Tensor<float> empty(Shape{3, 3});
  EXPECT_THROW(image_score(d, &empty), EmptyForegroundError);
}

TEST(ImageScoreTest, MonotoneInMask) {
  Rng rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    const auto d = rng.uniform_tensor<float>({5, 5}, 0, 1);
    Tensor<float> small(Shape{5, 5}), big(Shape{5, 5});
    for (index_t i = 0; i < 25; ++i) {
      const double u = rng.uniform(0, 1);
      small[i] = u < 0.3 ? 1.0f : 0.0f;
      big[i] = u < 0.7 ? 1.0f : 0.0f;
    }
    small[12] = big[12] = 1.0f;
    EXPECT_LE(image_score(d, &small), image_score(d, &big));
  }
}

TEST(StudentTest, OverfitsEightSamples) {
  Rng rng(11);
  StudentConfig cfg = small_config(4, 4, 1);
  cfg.hidden = 32;
  StudentModel<float> m(cfg, rng);
  std::vector<Tensor<float>> xs, ys;
  for (int i = 0; i < 8; ++i) {
    xs.push_back(rng.normal_tensor<float>({4, 6, 6}));
    ys.push_back(rng.normal_tensor<float>({4, 6, 6}));
  }
  std::vector<const Tensor<float>*> px, py;
  for (int i = 0; i < 8; ++i) {
    px.push_back(&xs[i]);
    py.push_back(&ys[i]);
  }
  const auto x = stack(px), y = stack(py);
  const auto c = repeat(positional_encoding(6, 6, 4), 8);
  const auto params = m.parameters();
  AdamState<float> adam;
  const AdamParams ap{3e-3, 0.9, 0.999, 1e-8, 0.0};
  double first = 0, last = 0;
  for (int step = 0; step < 500; ++step) {
    Tape<float> t;
    ParamScope<float> s(t, true);
    Var<float> loss = student_loss(distance_map(m.forward(s, t.constant(x), t.constant(c), Mode::train), t.constant(y)));
    if (step == 0) first = loss.value()[0];
    last = loss.value()[0];
    t.backward(loss);
    std::vector<Tensor<float>> g;
    for (auto* p : params) g.push_back(s.grad(*p));
    adam_step(params, g, adam, ap);
  }
  EXPECT_LT(last, 0.01 * first) << first << " -> " << last;
}

TEST(StudentTest, ParameterCountGrowsWithBlocks) {
  Rng rng(12);
  index_t prev = 0;
  for (index_t b = 0; b <= 4; ++b) {
    StudentModel<float> m(small_config(5, 4, b), rng);
    const index_t n = parameter_count(m.named_parameters());
    EXPECT_GT(n, prev);
    prev = n;
  }
}
