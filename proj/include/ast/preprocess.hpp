#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "ast/ops.hpp"

namespace ast {

/// Depth in centimeters. Invalid pixels hold 0 and validity 0.
struct DepthMap {
  Tensor<float> values;    // [H,W]
  Tensor<float> validity;  // [H,W], 1 = sensor value present

  // Raw sensor maps encode missing values as 0.
  static DepthMap from_raw(const Tensor<float>& raw) {
    if (raw.rank() != 2) throw DimensionError("depth map must be [H,W], got " + to_string(raw.shape()));
    DepthMap d{raw, Tensor<float>(raw.shape())};
    for (index_t i = 0; i < raw.size(); ++i) d.validity[i] = raw[i] != 0.0f ? 1.0f : 0.0f;
    return d;
  }

  index_t height() const { return values.dim(0); }
  index_t width() const { return values.dim(1); }
};

enum class MaskResolution { full, feature };

struct ForegroundMask {
  Tensor<float> mask;  // [H,W], values in {0,1}
  MaskResolution resolution = MaskResolution::full;

  index_t count() const {
    index_t n = 0;
    for (float v : mask.values()) n += v > 0.0f ? 1 : 0;
    return n;
  }
};

struct DepthParams {
  index_t resize_to = 192;  // square model-input size before unshuffling
  index_t factor = 8;       // pixel-unshuffle factor d
  float threshold_cm = 0.7f;
  index_t dilation = 8;
  int fill_iterations = 3;
};

/// Each iteration sets every invalid pixel with at least one valid
/// 8-neighbour to the mean of those neighbours. Updates are simultaneous:
/// validity is read from the start of the iteration.
inline DepthMap fill_missing_depth(const DepthMap& in, int iterations = 3) {
  DepthMap d = in;
  const index_t H = d.height(), W = d.width();
  for (int it = 0; it < iterations; ++it) {
    DepthMap next = d;
    bool changed = false;
    for (index_t i = 0; i < H; ++i)
      for (index_t j = 0; j < W; ++j) {
        if (d.validity.at(i, j) > 0.0f) continue;
        double s = 0;
        int n = 0;
        for (index_t di = -1; di <= 1; ++di)
          for (index_t dj = -1; dj <= 1; ++dj) {
            if (di == 0 && dj == 0) continue;
            const index_t a = i + di, b = j + dj;
            if (a < 0 || a >= H || b < 0 || b >= W || d.validity.at(a, b) <= 0.0f) continue;
            s += d.values.at(a, b);
            ++n;
          }
        if (n > 0) {
          next.values.at(i, j) = static_cast<float>(s / n);
          next.validity.at(i, j) = 1.0f;
          changed = true;
        }
      }
    d = std::move(next);
    if (!changed) break;
  }
  return d;
}

/// Bilinear interpolation of the four corner depths.
inline Tensor<float> background_plane(const DepthMap& d) {
  const index_t H = d.height(), W = d.width();
  const index_t r1 = H - 1, c1 = W - 1;
  for (auto [r, c] : {std::pair{index_t{0}, index_t{0}}, {0, c1}, {r1, 0}, {r1, c1}})
    if (d.validity.at(r, c) <= 0.0f)
      throw InvalidCornerError("background_plane: corner (" + std::to_string(r) + "," + std::to_string(c) +
                               ") has no depth value");
  const double tl = d.values.at(0, 0), tr = d.values.at(0, c1), bl = d.values.at(r1, 0), br = d.values.at(r1, c1);
  Tensor<float> plane(Shape{H, W});
  for (index_t i = 0; i < H; ++i) {
    const double v = H > 1 ? static_cast<double>(i) / static_cast<double>(r1) : 0.0;
    for (index_t j = 0; j < W; ++j) {
      const double u = W > 1 ? static_cast<double>(j) / static_cast<double>(c1) : 0.0;
      plane.at(i, j) =
          static_cast<float>((1 - v) * ((1 - u) * tl + u * tr) + v * ((1 - u) * bl + u * br));
    }
  }
  return plane;
}

/// Binary dilation with a size x size square. For even sizes the window
/// spans offsets [-(size/2 - 1), size/2], i.e. the extra row and column lie
/// toward larger indices. Implemented as two separable 1-D max filters.
inline Tensor<float> dilate(const Tensor<float>& mask, index_t size) {
  if (size <= 1) return mask;
  const index_t H = mask.dim(0), W = mask.dim(1);
  const index_t lo = -((size - 1) / 2), hi = size / 2;
  Tensor<float> rows(mask.shape()), out(mask.shape());
  for (index_t i = 0; i < H; ++i)
    for (index_t j = 0; j < W; ++j) {
      float m = 0.0f;
      for (index_t o = std::max(lo, -j); o <= hi && j + o < W; ++o) m = std::max(m, mask.at(i, j + o));
      rows.at(i, j) = m;
    }
  for (index_t i = 0; i < H; ++i)
    for (index_t j = 0; j < W; ++j) {
      float m = 0.0f;
      for (index_t o = std::max(lo, -i); o <= hi && i + o < H; ++o) m = std::max(m, rows.at(i + o, j));
      out.at(i, j) = m;
    }
  return out;
}

/// Pixels farther than `threshold_cm` from the plane, then dilated. Pixels
/// without a depth value never seed the mask.
inline ForegroundMask extract_foreground(const DepthMap& d, const Tensor<float>& plane, float threshold_cm = 0.7f,
                                         index_t dilation = 8) {
  if (plane.shape() != d.values.shape()) throw DimensionError("extract_foreground: plane shape mismatch");
  Tensor<float> m(d.values.shape());
  for (index_t i = 0; i < m.size(); ++i)
    m[i] = (d.validity[i] > 0.0f && std::abs(d.values[i] - plane[i]) > threshold_cm) ? 1.0f : 0.0f;
  return {dilate(m, dilation), MaskResolution::full};
}

/// Subtracts the mean foreground depth; background and missing pixels become 0.
inline DepthMap normalize_depth(const DepthMap& d, const ForegroundMask& fg) {
  if (fg.mask.shape() != d.values.shape()) throw DimensionError("normalize_depth: mask shape mismatch");
  double s = 0;
  index_t n = 0;
  for (index_t i = 0; i < d.values.size(); ++i)
    if (fg.mask[i] > 0.0f && d.validity[i] > 0.0f) {
      s += d.values[i];
      ++n;
    }
  if (n == 0) throw EmptyForegroundError("normalize_depth: no valid foreground depth");
  const double mean = s / static_cast<double>(n);
  DepthMap out = d;
  for (index_t i = 0; i < d.values.size(); ++i)
    out.values[i] = (fg.mask[i] > 0.0f && d.validity[i] > 0.0f) ? static_cast<float>(d.values[i] - mean) : 0.0f;
  return out;
}

/// Source coordinate of output index `o` under half-pixel-center alignment.
inline double resize_source(index_t o, index_t in, index_t out) {
  const double s = (static_cast<double>(o) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
  return std::clamp(s, 0.0, static_cast<double>(in - 1));
}

/// Bilinear resize of [H,W] or [C,H,W] maps with edge clamping.
inline Tensor<float> resize_bilinear(const Tensor<float>& x, index_t out_h, index_t out_w) {
  if (x.rank() != 2 && x.rank() != 3) throw DimensionError("resize_bilinear: expected [H,W] or [C,H,W]");
  const index_t C = x.rank() == 3 ? x.dim(0) : 1;
  const index_t H = x.dim(-2), W = x.dim(-1);
  Shape s = x.rank() == 3 ? Shape{C, out_h, out_w} : Shape{out_h, out_w};
  Tensor<float> out(s);
  for (index_t i = 0; i < out_h; ++i) {
    const double sy = resize_source(i, H, out_h);
    const index_t y0 = static_cast<index_t>(std::floor(sy)), y1 = std::min(y0 + 1, H - 1);
    const double fy = sy - static_cast<double>(y0);
    for (index_t j = 0; j < out_w; ++j) {
      const double sx = resize_source(j, W, out_w);
      const index_t x0 = static_cast<index_t>(std::floor(sx)), x1 = std::min(x0 + 1, W - 1);
      const double fx = sx - static_cast<double>(x0);
      for (index_t c = 0; c < C; ++c) {
        const float* p = x.data() + c * H * W;
        const double v = (1 - fy) * ((1 - fx) * p[y0 * W + x0] + fx * p[y0 * W + x1]) +
                         fy * ((1 - fx) * p[y1 * W + x0] + fx * p[y1 * W + x1]);
        out[(c * out_h + i) * out_w + j] = static_cast<float>(v);
      }
    }
  }
  return out;
}

/// Resize to resize_to x resize_to, then pixel-unshuffle by `factor`.
inline Tensor<float> depth_to_model_input(const DepthMap& d, index_t resize_to = 192, index_t factor = 8) {
  Tensor<float> v = d.values;
  if (resize_to > 0 && (v.dim(0) != resize_to || v.dim(1) != resize_to)) v = resize_bilinear(v, resize_to, resize_to);
  return pixel_unshuffle(v.reshaped({1, v.dim(0), v.dim(1)}), factor);
}

/// Bilinear downsampling followed by binarization: any positive value is
/// foreground.
inline ForegroundMask downsample_mask(const ForegroundMask& full, index_t h, index_t w) {
  Tensor<float> m = resize_bilinear(full.mask, h, w);
  for (auto& v : m.values()) v = v > 0.0f ? 1.0f : 0.0f;
  return {std::move(m), MaskResolution::feature};
}

/// Sinusoidal 2-D encoding. Channels [0, C/2) encode the row, [C/2, C) the
/// column; within each half, channel 2k is sin(w_k p) and 2k+1 is cos(w_k p)
/// with w_k = 10000^(-4k/C).
inline Tensor<float> positional_encoding(index_t h, index_t w, index_t channels = 32) {
  if (channels <= 0 || channels % 4 != 0)
    throw DimensionError("positional_encoding: channel count must be a positive multiple of 4");
  Tensor<float> pe(Shape{channels, h, w});
  const index_t half = channels / 2;
  for (index_t k = 0; k < channels / 4; ++k) {
    const double freq = std::pow(10000.0, -4.0 * static_cast<double>(k) / static_cast<double>(channels));
    for (index_t i = 0; i < h; ++i)
      for (index_t j = 0; j < w; ++j) {
        pe.at(2 * k, i, j) = static_cast<float>(std::sin(freq * static_cast<double>(i)));
        pe.at(2 * k + 1, i, j) = static_cast<float>(std::cos(freq * static_cast<double>(i)));
        pe.at(half + 2 * k, i, j) = static_cast<float>(std::sin(freq * static_cast<double>(j)));
        pe.at(half + 2 * k + 1, i, j) = static_cast<float>(std::cos(freq * static_cast<double>(j)));
      }
  }
  return pe;
}

struct ProcessedDepth {
  Tensor<float> channels;    // [factor^2, H, W]
  ForegroundMask full_mask;  // at depth resolution
  ForegroundMask mask;       // at feature resolution
};

/// Raw depth (cm, 0 = missing) to model input channels and feature-level
/// foreground mask.
inline ProcessedDepth preprocess_depth(const Tensor<float>& raw, const DepthParams& p) {
  DepthMap d = fill_missing_depth(DepthMap::from_raw(raw), p.fill_iterations);
  ForegroundMask fg = extract_foreground(d, background_plane(d), p.threshold_cm, p.dilation);
  DepthMap norm = normalize_depth(d, fg);
  Tensor<float> ch = depth_to_model_input(norm, p.resize_to, p.factor);
  ForegroundMask small = downsample_mask(fg, ch.dim(1), ch.dim(2));
  return {std::move(ch), std::move(fg), std::move(small)};
}

}  // namespace ast
