#include <cmath>
#include <set>

#include <gtest/gtest.h>

#include "ast/ast.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace ast;

using fixture::constant_depth;
using fixture::random_scene;

TEST(FillTest, AllValidUnchanged) {
  Rng rng(0);
  DepthMap d = random_scene(rng, 10, 12, 0.0);
  const DepthMap f = fill_missing_depth(d);
  EXPECT_EQ(f.values, d.values);
  EXPECT_EQ(f.validity, d.validity);
  EXPECT_EQ(fill_missing_depth(f).values, f.values);
}

TEST(FillTest, SingleHole) {
  DepthMap d = constant_depth(5, 5, 5.0f);
  d.values.at(2, 2) = 0.0f;
  d.validity.at(2, 2) = 0.0f;
  const DepthMap f = fill_missing_depth(d, 1);
  EXPECT_EQ(f.values.at(2, 2), 5.0f);
  EXPECT_EQ(f.validity.at(2, 2), 1.0f);
}

// Fill advances one Chebyshev ring per iteration, so a hole keeps its
// center when every pixel within Chebyshev distance 3 of it is missing.
TEST(FillTest, WideHoleCenterStaysInvalid) {
  auto run = [](auto inside) {
    DepthMap d = constant_depth(15, 15, 3.0f);
    for (index_t i = 0; i < 15; ++i)
      for (index_t j = 0; j < 15; ++j)
        if (inside(i - 7, j - 7)) {
          d.values.at(i, j) = 0.0f;
          d.validity.at(i, j) = 0.0f;
        }
    const DepthMap f = fill_missing_depth(d, 3);
    EXPECT_EQ(f.validity.at(7, 7), 0.0f);
    EXPECT_EQ(f.values.at(7, 7), 0.0f);
    const auto ref = oracle::fill({d.values, d.validity}, 3);
    EXPECT_EQ(f.values, ref.values);
    EXPECT_EQ(f.validity, ref.validity);
  };
  run([](index_t a, index_t b) { return std::abs(a) <= 3 && std::abs(b) <= 3; });
  run([](index_t a, index_t b) { return a * a + b * b <= 20; });
}

TEST(FillTest, MatchesSimulationOracle) {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    DepthMap d = random_scene(rng, rng.integer(4, 16), rng.integer(4, 16), rng.uniform(0.05, 0.6));
    const DepthMap f = fill_missing_depth(d, 3);
    const auto ref = oracle::fill({d.values, d.validity}, 3);
    EXPECT_EQ(f.values, ref.values) << "trial " << trial;
    EXPECT_EQ(f.validity, ref.validity) << "trial " << trial;
  }
}

TEST(PlaneTest, Examples) {
  const auto p = background_plane(constant_depth(4, 6, 2.5f));
  for (float v : p.values()) EXPECT_EQ(v, 2.5f);

  DepthMap d = constant_depth(5, 5, 0.0f);
  d.values.at(4, 0) = 1.0f;
  d.values.at(4, 4) = 1.0f;
  EXPECT_NEAR(background_plane(d).at(2, 2), 0.5f, 1e-7);

  Rng rng(2);
  DepthMap r = random_scene(rng, 9, 11, 0.0);
  const auto pr = background_plane(r);
  for (int k = 0; k < 20; ++k) {
    const index_t i = rng.integer(0, 8), j = rng.integer(0, 10);
    EXPECT_NEAR(pr.at(i, j), oracle::plane_at(r.values, i, j), 1e-6);
  }
}

TEST(PlaneTest, InvalidCorner) {
  DepthMap d = constant_depth(4, 4, 1.0f);
  d.validity.at(3, 0) = 0.0f;
  d.values.at(3, 0) = 0.0f;
  EXPECT_THROW(background_plane(d), InvalidCornerError);
}

TEST(ForegroundTest, FlatSceneIsBackground) {
  const DepthMap d = constant_depth(8, 8, 40.0f);
  EXPECT_EQ(extract_foreground(d, background_plane(d)).count(), 0);
}

TEST(ForegroundTest, SinglePixelDilatesToEightByEight) {
  DepthMap d = constant_depth(20, 20, 40.0f);
  d.values.at(9, 10) = 38.0f;
  const auto fg = extract_foreground(d, background_plane(d));
  EXPECT_EQ(fg.count(), 64);
  for (index_t i = 0; i < 20; ++i)
    for (index_t j = 0; j < 20; ++j) {
      const bool inside = i >= 9 - 4 && i <= 9 + 3 && j >= 10 - 4 && j <= 10 + 3;
      EXPECT_EQ(fg.mask.at(i, j), inside ? 1.0f : 0.0f) << i << "," << j;
    }
}

TEST(ForegroundTest, BlobMatchesMaxFilterOracle) {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    DepthMap d = constant_depth(24, 24, 40.0f);
    const double r = rng.uniform(1, 6), ci = rng.uniform(4, 20), cj = rng.uniform(4, 20);
    for (index_t i = 0; i < 24; ++i)
      for (index_t j = 0; j < 24; ++j)
        if ((i - ci) * (i - ci) + (j - cj) * (j - cj) <= r * r) d.values.at(i, j) = 38.0f;
    const auto plane = background_plane(d);
    const auto fg = extract_foreground(d, plane);
    EXPECT_EQ(fg.mask, oracle::dilate8(oracle::threshold({d.values, d.validity}, plane, 0.7f)));
  }
}

TEST(ForegroundTest, ThresholdIsStrict) {
  DepthMap d = constant_depth(10, 10, 40.0f);
  d.values.at(5, 5) = 40.5f;
  EXPECT_EQ(extract_foreground(d, background_plane(d), 0.7f, 1).count(), 0);
  d.values.at(5, 5) = 40.75f;
  EXPECT_EQ(extract_foreground(d, background_plane(d), 0.7f, 1).count(), 1);
}

TEST(ForegroundTest, InvariantToCommonOffset) {
  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    DepthMap d = random_scene(rng, 16, 16, 0.0);
    const auto plane = background_plane(d);
    DepthMap shifted = d;
    Tensor<float> plane2 = plane;
    for (auto& v : shifted.values.values()) v += 8.0f;
    for (auto& v : plane2.values()) v += 8.0f;
    EXPECT_EQ(extract_foreground(d, plane).mask, extract_foreground(shifted, plane2).mask);
  }
}

TEST(ForegroundTest, InvalidPixelsNeverSeed) {
  DepthMap d = constant_depth(12, 12, 40.0f);
  d.values.at(6, 6) = 0.0f;
  d.validity.at(6, 6) = 0.0f;
  EXPECT_EQ(extract_foreground(d, background_plane(d)).count(), 0);
}

TEST(NormalizeTest, Examples) {
  DepthMap d = constant_depth(4, 4, 7.0f);
  ForegroundMask fg{Tensor<float>(Shape{4, 4}), MaskResolution::full};
  fg.mask.at(1, 1) = fg.mask.at(2, 2) = 1.0f;
  const auto flat = normalize_depth(d, fg);
  for (float v : flat.values.values()) EXPECT_EQ(v, 0.0f);

  d.values.at(1, 1) = 1.0f;
  d.values.at(2, 2) = 3.0f;
  const auto n = normalize_depth(d, fg);
  EXPECT_EQ(n.values.at(1, 1), -1.0f);
  EXPECT_EQ(n.values.at(2, 2), 1.0f);
  EXPECT_EQ(n.values.at(0, 0), 0.0f);

  ForegroundMask none{Tensor<float>(Shape{4, 4}), MaskResolution::full};
  EXPECT_THROW(normalize_depth(d, none), EmptyForegroundError);
}

TEST(NormalizeTest, RandomForegroundMeanIsZero) {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    DepthMap d = random_scene(rng, 16, 16, 0.1);
    const auto fg = extract_foreground(d, background_plane(d));
    if (fg.count() == 0) continue;
    const auto n = normalize_depth(d, fg);
    double s = 0;
    int k = 0;
    for (index_t i = 0; i < n.values.size(); ++i)
      if (fg.mask[i] > 0 && d.validity[i] > 0) {
        s += n.values[i];
        ++k;
      }
    EXPECT_LT(std::abs(s / k), 1e-5);
  }
}

TEST(DepthInputTest, ConstantMapAndChannels) {
  const auto out = depth_to_model_input(constant_depth(100, 100, 2.0f), 192, 8);
  EXPECT_EQ(out.shape(), (Shape{64, 24, 24}));
  for (float v : out.values()) EXPECT_NEAR(v, 2.0f, 1e-6);
}

TEST(DepthInputTest, UnshuffleDelegation) {
  Rng rng(6);
  DepthMap d{rng.normal_tensor<float>({16, 16}), Tensor<float>(Shape{16, 16}, 1.0f)};
  EXPECT_EQ(depth_to_model_input(d, 16, 4), pixel_unshuffle(d.values.reshaped({1, 16, 16}), 4));
  EXPECT_THROW(depth_to_model_input(d, 18, 4), DimensionError);
}

TEST(ResizeTest, HalfPixelTaps) {
  Rng rng(7);
  const auto x = rng.normal_tensor<float>({7, 9});
  const auto y = resize_bilinear(x, 4, 5);
  for (index_t i = 0; i < 4; ++i)
    for (index_t j = 0; j < 5; ++j) {
      double v = 0;
      for (auto [a, wa] : oracle::taps(i, 7, 4))
        for (auto [b, wb] : oracle::taps(j, 9, 5)) v += wa * wb * x.at(a, b);
      EXPECT_NEAR(y.at(i, j), v, 1e-5);
    }
}

TEST(MaskDownsampleTest, Examples) {
  ForegroundMask ones{Tensor<float>(Shape{16, 16}, 1.0f)}, zeros{Tensor<float>(Shape{16, 16})};
  const auto a = downsample_mask(ones, 4, 4), b = downsample_mask(zeros, 4, 4);
  for (float v : a.mask.values()) EXPECT_EQ(v, 1.0f);
  for (float v : b.mask.values()) EXPECT_EQ(v, 0.0f);
  EXPECT_EQ(downsample_mask(ones, 4, 4).resolution, MaskResolution::feature);
}

TEST(MaskDownsampleTest, SinglePixelMatchesBilinearOracle) {
  for (index_t i = 0; i < 24; ++i)
    for (index_t j = 0; j < 24; j += 5) {
      ForegroundMask m{Tensor<float>(Shape{24, 24})};
      m.mask.at(i, j) = 1.0f;
      EXPECT_EQ(downsample_mask(m, 6, 6).mask, oracle::binarize_down(m.mask, 6, 6)) << i << "," << j;
      EXPECT_EQ(downsample_mask(m, 5, 7).mask, oracle::binarize_down(m.mask, 5, 7)) << i << "," << j;
    }
}

TEST(MaskDownsampleTest, Monotone) {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    ForegroundMask small{Tensor<float>(Shape{20, 20})};
    for (auto& v : small.mask.values()) v = rng.uniform(0, 1) < 0.05 ? 1.0f : 0.0f;
    ForegroundMask big = small;
    for (auto& v : big.mask.values())
      if (rng.uniform(0, 1) < 0.05) v = 1.0f;
    const auto a = downsample_mask(small, 5, 5).mask, b = downsample_mask(big, 5, 5).mask;
    for (index_t i = 0; i < a.size(); ++i) EXPECT_LE(a[i], b[i]);
    EXPECT_EQ(a, oracle::binarize_down(small.mask, 5, 5));
  }
}

TEST(PositionalEncodingTest, Examples) {
  const auto pe = positional_encoding(24, 24, 32);
  EXPECT_EQ(pe.shape(), (Shape{32, 24, 24}));
  for (index_t k = 0; k < 32; k += 2) {
    EXPECT_EQ(pe.at(k, 0, 0), 0.0f);
    EXPECT_EQ(pe.at(k + 1, 0, 0), 1.0f);
  }
  EXPECT_NEAR(pe.at(0, 1, 0), 0.841471f, 1e-6);
  EXPECT_NEAR(pe.at(16, 0, 1), 0.841471f, 1e-6);
  const double w2 = std::pow(10000.0, -8.0 / 32.0);
  EXPECT_NEAR(pe.at(5, 7, 3), std::cos(w2 * 7), 1e-6);
  EXPECT_NEAR(pe.at(20, 7, 3), std::sin(w2 * 3), 1e-6);
  EXPECT_EQ(pe, positional_encoding(24, 24, 32));
  EXPECT_THROW(positional_encoding(4, 4, 30), DimensionError);
}

TEST(PositionalEncodingTest, BoundedAndDistinct) {
  const auto pe = positional_encoding(24, 24, 32);
  for (float v : pe.values()) {
    EXPECT_GE(v, -1.0f);
    EXPECT_LE(v, 1.0f);
  }
  std::set<std::vector<float>> seen;
  for (index_t i = 0; i < 24; ++i)
    for (index_t j = 0; j < 24; ++j) {
      std::vector<float> v;
      for (index_t c = 0; c < 32; ++c) v.push_back(pe.at(c, i, j));
      seen.insert(v);
    }
  EXPECT_EQ(seen.size(), 576u);
}

TEST(AssembleTest, ChannelCountsAndOrder) {
  Tensor<float> f(Shape{304, 24, 24}, 1.0f), d(Shape{64, 24, 24}, -7.0f);
  const Sample s = assemble_sample(f, d);
  EXPECT_EQ(s.channels(), 368);
  for (index_t c = 0; c < 368; ++c) EXPECT_EQ(s.input.at(c, 5, 5), c < 304 ? 1.0f : -7.0f);

  const Sample rgb = assemble_sample(Tensor<float>(Shape{3, 4, 4}));
  EXPECT_EQ(rgb.channels(), 3);
  EXPECT_EQ(rgb.mask_ptr(), nullptr);

  EXPECT_THROW(assemble_sample(Tensor<float>(Shape{3, 4, 4}), Tensor<float>(Shape{4, 4, 5})), DimensionError);
  EXPECT_THROW(assemble_sample(Tensor<float>(Shape{3, 4, 4}), std::nullopt, Tensor<float>(Shape{3, 4})),
               DimensionError);
}

TEST(PreprocessTest, FullChainOnRandomScenes) {
  Rng rng(9);
  DepthParams p;
  p.resize_to = 32;
  p.factor = 4;
  for (int trial = 0; trial < 10; ++trial) {
    DepthMap d = random_scene(rng, 32, 32, 0.03);
    const auto out = preprocess_depth(d.values, p);
    EXPECT_EQ(out.channels.shape(), (Shape{16, 8, 8}));
    EXPECT_EQ(out.mask.mask.shape(), (Shape{8, 8}));
    const auto filled = oracle::fill({d.values, d.validity}, 3);
    Tensor<float> plane(Shape{32, 32});
    for (index_t i = 0; i < 32; ++i)
      for (index_t j = 0; j < 32; ++j) plane.at(i, j) = oracle::plane_at(filled.values, i, j);
    const auto ref_full = oracle::dilate8(oracle::threshold(filled, plane, 0.7f));
    EXPECT_EQ(out.full_mask.mask, ref_full);
    EXPECT_EQ(out.mask.mask, oracle::binarize_down(ref_full, 8, 8));
  }
}
