#pragma once

#include "ast/ast.hpp"

namespace fixture {

using namespace ast;

inline DepthMap constant_depth(index_t h, index_t w, float v) {
  return {Tensor<float>(Shape{h, w}, v), Tensor<float>(Shape{h, w}, 1.0f)};
}

// Tilted plane with a raised box and random holes; corners stay valid.
inline DepthMap random_scene(Rng& rng, index_t h, index_t w, double hole_rate) {
  DepthMap d = constant_depth(h, w, 0.0f);
  const double base = rng.uniform(30, 50), tx = rng.uniform(-2, 2), ty = rng.uniform(-2, 2);
  const index_t top = rng.integer(1, h / 2), left = rng.integer(1, w / 2);
  const index_t bh = rng.integer(1, h / 3), bw = rng.integer(1, w / 3);
  const double lift = rng.uniform(1.0, 3.0);
  for (index_t i = 0; i < h; ++i)
    for (index_t j = 0; j < w; ++j) {
      double z = base + tx * j / (w - 1.0) + ty * i / (h - 1.0);
      if (i >= top && i < top + bh && j >= left && j < left + bw) z -= lift;
      d.values.at(i, j) = static_cast<float>(z + rng.normal(0, 0.05));
      const bool corner = (i == 0 || i == h - 1) && (j == 0 || j == w - 1);
      if (!corner && rng.uniform(0, 1) < hole_rate) {
        d.values.at(i, j) = 0.0f;
        d.validity.at(i, j) = 0.0f;
      }
    }
  return d;
}

}  // namespace fixture
