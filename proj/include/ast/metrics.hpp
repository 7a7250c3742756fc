#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ast/nn.hpp"

namespace ast {

/// Area under the ROC curve: P(score_pos > score_neg) + P(tie)/2, computed
/// from average ranks. Labels are 0 (normal) / 1 (anomalous).
inline double auroc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw DimensionError("auroc: scores and labels differ in length");
  const std::size_t n = scores.size();
  std::size_t n_pos = 0;
  for (int l : labels) n_pos += l != 0 ? 1 : 0;
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw DegenerateLabelsError();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0;  // sum of 1-based average ranks of positives
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]] != 0) rank_sum += avg_rank;
    i = j;
  }
  const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
  return (rank_sum - np * (np + 1) / 2) / (np * nn);
}

inline double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
  return auroc(std::span<const double>(scores), std::span<const int>(labels));
}

/// Pixel-level AUROC pooled over all maps. Ground truth must already be at
/// map resolution; pixels outside `fg_masks` (when given) are skipped.
inline double pixel_auroc(const std::vector<Tensor<float>>& maps, const std::vector<Tensor<float>>& gt_masks,
                          const std::vector<Tensor<float>>* fg_masks = nullptr) {
  if (maps.size() != gt_masks.size() || (fg_masks && fg_masks->size() != maps.size()))
    throw DimensionError("pixel_auroc: map/mask counts differ");
  std::vector<double> scores;
  std::vector<int> labels;
  for (std::size_t k = 0; k < maps.size(); ++k) {
    if (maps[k].shape() != gt_masks[k].shape() || (fg_masks && (*fg_masks)[k].shape() != maps[k].shape()))
      throw DimensionError("pixel_auroc: map and mask shapes differ");
    for (index_t i = 0; i < maps[k].size(); ++i) {
      if (fg_masks && (*fg_masks)[k][i] <= 0.0f) continue;
      scores.push_back(maps[k][i]);
      labels.push_back(gt_masks[k][i] > 0.0f ? 1 : 0);
    }
  }
  return auroc(scores, labels);
}

struct Histogram {
  std::vector<double> edges;  // bins + 1 shared edges
  std::vector<index_t> normal;
  std::vector<index_t> anomalous;
};

/// Per-class counts over shared edges spanning [min, max] of all scores.
/// The last bin is closed on the right.
inline Histogram histogram(std::span<const double> scores, std::span<const int> labels, index_t bins) {
  if (bins < 1) throw Error("histogram: bins must be >= 1");
  if (scores.size() != labels.size()) throw DimensionError("histogram: scores and labels differ in length");
  Histogram h;
  h.normal.assign(static_cast<std::size_t>(bins), 0);
  h.anomalous.assign(static_cast<std::size_t>(bins), 0);
  if (scores.empty()) {
    h.edges.assign(static_cast<std::size_t>(bins + 1), 0.0);
    return h;
  }
  const auto [lo_it, hi_it] = std::minmax_element(scores.begin(), scores.end());
  const double lo = *lo_it, hi = *hi_it;
  for (index_t b = 0; b <= bins; ++b) h.edges.push_back(lo + (hi - lo) * static_cast<double>(b) / static_cast<double>(bins));
  for (std::size_t i = 0; i < scores.size(); ++i) {
    index_t b = hi > lo ? static_cast<index_t>((scores[i] - lo) / (hi - lo) * static_cast<double>(bins)) : 0;
    b = std::clamp<index_t>(b, 0, bins - 1);
    (labels[i] != 0 ? h.anomalous : h.normal)[static_cast<std::size_t>(b)] += 1;
  }
  return h;
}

/// Orthonormal C x 2 basis drawn from a seeded Gaussian and Gram-Schmidt.
struct ProjectionBasis {
  std::vector<double> u, v;

  std::pair<double, double> project(std::span<const float> point) const {
    if (point.size() != u.size()) throw DimensionError("projection: point dimension mismatch");
    double a = 0, b = 0;
    for (std::size_t i = 0; i < point.size(); ++i) {
      a += u[i] * point[i];
      b += v[i] * point[i];
    }
    return {a, b};
  }
};

inline ProjectionBasis make_projection_basis(index_t dims, std::uint64_t seed) {
  if (dims < 2) throw DimensionError("projection needs at least 2 dimensions");
  Rng rng(seed);
  ProjectionBasis b;
  auto normalize = [](std::vector<double>& x) {
    double n = 0;
    for (double e : x) n += e * e;
    n = std::sqrt(n);
    for (double& e : x) e /= n;
  };
  for (;;) {
    b.u.assign(static_cast<std::size_t>(dims), 0.0);
    b.v.assign(static_cast<std::size_t>(dims), 0.0);
    for (auto& e : b.u) e = rng.normal();
    for (auto& e : b.v) e = rng.normal();
    normalize(b.u);
    double d = 0;
    for (std::size_t i = 0; i < b.u.size(); ++i) d += b.u[i] * b.v[i];
    for (std::size_t i = 0; i < b.u.size(); ++i) b.v[i] -= d * b.u[i];
    double n = 0;
    for (double e : b.v) n += e * e;
    if (n > 1e-12) break;  // redraw the (measure-zero) collinear case
  }
  normalize(b.v);
  return b;
}

/// Projects every point with one shared random basis.
inline std::vector<std::pair<double, double>> random_projection_2d(const std::vector<Tensor<float>>& points,
                                                                   std::uint64_t seed) {
  std::vector<std::pair<double, double>> out;
  if (points.empty()) return out;
  const ProjectionBasis b = make_projection_basis(points.front().size(), seed);
  for (const auto& p : points) out.push_back(b.project(p.values()));
  return out;
}

/// Channel vector of a [C,H,W] map at pixel (i,j).
inline Tensor<float> pixel_vector(const Tensor<float>& map, index_t i, index_t j) {
  Tensor<float> v(Shape{map.dim(0)});
  for (index_t c = 0; c < map.dim(0); ++c) v[c] = map.at(c, i, j);
  return v;
}

}  // namespace ast
