#pragma once

// Brute-force reference implementations. Each one follows the written rule
// directly and shares no code with the library beyond Tensor.

#include <algorithm>
#include <cmath>
#include <vector>

#include "ast/tensor.hpp"

namespace oracle {

using ast::index_t;
using ast::Shape;
using ast::Tensor;

// Cross-correlation of x [C,H,W] with w [O,C,k,k], zero padding `pad`.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, index_t pad) {
  const index_t C = x.dim(0), H = x.dim(1), W = x.dim(2), O = w.dim(0), k = w.dim(2);
  const index_t Ho = H + 2 * pad - k + 1, Wo = W + 2 * pad - k + 1;
  Tensor<T> y(Shape{O, Ho, Wo});
  for (index_t o = 0; o < O; ++o)
    for (index_t i = 0; i < Ho; ++i)
      for (index_t j = 0; j < Wo; ++j) {
        double s = b[o];
        for (index_t c = 0; c < C; ++c)
          for (index_t a = 0; a < k; ++a)
            for (index_t e = 0; e < k; ++e) {
              const index_t si = i + a - pad, sj = j + e - pad;
              if (si >= 0 && si < H && sj >= 0 && sj < W) s += static_cast<double>(w.at(o, c, a, e)) * x.at(c, si, sj);
            }
        y.at(o, i, j) = static_cast<T>(s);
      }
  return y;
}

struct Depth {
  Tensor<float> values, validity;
};

// One simultaneous 8-neighbour mean fill per iteration.
inline Depth fill(Depth d, int iterations) {
  const index_t H = d.values.dim(0), W = d.values.dim(1);
  for (int it = 0; it < iterations; ++it) {
    const Depth snap = d;
    for (index_t i = 0; i < H; ++i)
      for (index_t j = 0; j < W; ++j) {
        if (snap.validity.at(i, j) != 0.0f) continue;
        std::vector<float> nb;
        for (index_t a = i - 1; a <= i + 1; ++a)
          for (index_t b = j - 1; b <= j + 1; ++b)
            if ((a != i || b != j) && a >= 0 && a < H && b >= 0 && b < W && snap.validity.at(a, b) != 0.0f)
              nb.push_back(snap.values.at(a, b));
        if (nb.empty()) continue;
        double s = 0;
        for (float v : nb) s += v;
        d.values.at(i, j) = static_cast<float>(s / static_cast<double>(nb.size()));
        d.validity.at(i, j) = 1.0f;
      }
  }
  return d;
}

inline float plane_at(const Tensor<float>& v, index_t i, index_t j) {
  const index_t H = v.dim(0), W = v.dim(1);
  const double tl = v.at(0, 0), tr = v.at(0, W - 1), bl = v.at(H - 1, 0), br = v.at(H - 1, W - 1);
  const double y = static_cast<double>(i) / static_cast<double>(H - 1);
  const double x = static_cast<double>(j) / static_cast<double>(W - 1);
  return static_cast<float>((1 - y) * ((1 - x) * tl + x * tr) + y * ((1 - x) * bl + x * br));
}

inline Tensor<float> threshold(const Depth& d, const Tensor<float>& plane, float t) {
  Tensor<float> m(d.values.shape());
  for (index_t i = 0; i < m.size(); ++i)
    m[i] = d.validity[i] != 0.0f && std::fabs(d.values[i] - plane[i]) > t ? 1.0f : 0.0f;
  return m;
}

// Output (i,j) is set when any input within rows i-3..i+4 and columns
// j-3..j+4 is set (an 8x8 window).
inline Tensor<float> dilate8(const Tensor<float>& m) {
  const index_t H = m.dim(0), W = m.dim(1);
  Tensor<float> out(m.shape());
  for (index_t i = 0; i < H; ++i)
    for (index_t j = 0; j < W; ++j)
      for (index_t a = std::max<index_t>(0, i - 3); a <= std::min(H - 1, i + 4); ++a)
        for (index_t b = std::max<index_t>(0, j - 3); b <= std::min(W - 1, j + 4); ++b)
          if (m.at(a, b) != 0.0f) out.at(i, j) = 1.0f;
  return out;
}

// Half-pixel-center bilinear taps of output index o: (index, weight) pairs.
inline std::vector<std::pair<index_t, double>> taps(index_t o, index_t in, index_t out) {
  double s = (o + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
  s = std::min(std::max(s, 0.0), static_cast<double>(in - 1));
  const auto lo = static_cast<index_t>(std::floor(s));
  const double f = s - static_cast<double>(lo);
  std::vector<std::pair<index_t, double>> t{{lo, 1 - f}};
  if (lo + 1 < in) t.push_back({lo + 1, f});
  return t;
}

// Cell is foreground when any source pixel with positive bilinear weight is.
inline Tensor<float> binarize_down(const Tensor<float>& m, index_t h, index_t w) {
  Tensor<float> out(Shape{h, w});
  for (index_t i = 0; i < h; ++i)
    for (index_t j = 0; j < w; ++j)
      for (auto [a, wa] : taps(i, m.dim(0), h))
        for (auto [b, wb] : taps(j, m.dim(1), w))
          if (wa * wb > 0 && m.at(a, b) != 0.0f) out.at(i, j) = 1.0f;
  return out;
}

inline double pairwise_auroc(const std::vector<double>& s, const std::vector<int>& l) {
  long double num = 0, den = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (l[i] == 1 && l[j] == 0) {
        den += 1;
        num += s[i] > s[j] ? 1.0L : (s[i] == s[j] ? 0.5L : 0.0L);
      }
  return static_cast<double>(num / den);
}

}  // namespace oracle
