#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "ast/autodiff.hpp"

namespace ast {

enum class Padding { same, valid };
enum class Mode { train, eval };

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

template <class T>
bool is_scalar(const Tensor<T>& t) {
  return t.size() == 1;
}

// Shape of an elementwise result; only equal shapes or scalar-with-tensor.
template <class T>
Shape broadcast_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() == b.shape()) return a.shape();
  if (is_scalar(a)) return b.shape();
  if (is_scalar(b)) return a.shape();
  throw DimensionError(std::string(op) + ": incompatible shapes " + to_string(a.shape()) + " and " +
                       to_string(b.shape()));
}

// Sums a full-size gradient down to the shape of a broadcast operand.
template <class T>
Tensor<T> reduce_to(const Tensor<T>& g, const Shape& target) {
  if (g.shape() == target) return g;
  double s = 0;
  for (index_t i = 0; i < g.size(); ++i) s += g[i];
  return Tensor<T>(target, std::vector<T>{static_cast<T>(s)});
}

template <class T>
T bcast(const Tensor<T>& t, index_t i) {
  return t.size() == 1 ? t[0] : t[i];
}

template <class T>
void require_finite(const Tensor<T>& t, const char* op) {
  if (!t.all_finite()) throw NonFiniteError(std::string(op) + ": non-finite result");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  const auto &va = a.value(), &vb = b.value();
  Tensor<T> out(detail::broadcast_shape(va, vb, "add"));
  for (index_t i = 0; i < out.size(); ++i) out[i] = detail::bcast(va, i) + detail::bcast(vb, i);
  index_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(ia, detail::reduce_to(g, t.value(ia).shape()));
    t.accumulate(ib, detail::reduce_to(g, t.value(ib).shape()));
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  const auto &va = a.value(), &vb = b.value();
  Tensor<T> out(detail::broadcast_shape(va, vb, "sub"));
  for (index_t i = 0; i < out.size(); ++i) out[i] = detail::bcast(va, i) - detail::bcast(vb, i);
  index_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(ia, detail::reduce_to(g, t.value(ia).shape()));
    if (t.requires_grad(ib)) {
      Tensor<T> neg = g;
      for (auto& v : neg.values()) v = -v;
      t.accumulate(ib, detail::reduce_to(neg, t.value(ib).shape()));
    }
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  const auto &va = a.value(), &vb = b.value();
  Tensor<T> out(detail::broadcast_shape(va, vb, "mul"));
  for (index_t i = 0; i < out.size(); ++i) out[i] = detail::bcast(va, i) * detail::bcast(vb, i);
  index_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape<T>& t, const Tensor<T>& g) {
    const auto &va = t.value(ia), &vb = t.value(ib);
    if (t.requires_grad(ia)) {
      Tensor<T> ga(g.shape());
      for (index_t i = 0; i < g.size(); ++i) ga[i] = g[i] * detail::bcast(vb, i);
      t.accumulate(ia, detail::reduce_to(ga, va.shape()));
    }
    if (t.requires_grad(ib)) {
      Tensor<T> gb(g.shape());
      for (index_t i = 0; i < g.size(); ++i) gb[i] = g[i] * detail::bcast(va, i);
      t.accumulate(ib, detail::reduce_to(gb, vb.shape()));
    }
  });
}

template <class T>
Var<T> operator+(const Var<T>& a, const Var<T>& b) { return add(a, b); }
template <class T>
Var<T> operator-(const Var<T>& a, const Var<T>& b) { return sub(a, b); }
template <class T>
Var<T> operator*(const Var<T>& a, const Var<T>& b) { return mul(a, b); }

namespace detail {

// Shared body for unary elementwise ops: `f` computes the value, `df`
// the local derivative from (input, output).
template <class T, class F, class DF>
Var<T> unary(const Var<T>& a, F f, DF df) {
  const auto& va = a.value();
  Tensor<T> out(va.shape());
  for (index_t i = 0; i < out.size(); ++i) out[i] = f(va[i]);
  index_t ia = a.id();
  index_t io = a.tape().size();
  return a.tape().record(std::move(out), {a}, [ia, io, df](Tape<T>& t, const Tensor<T>& g) {
    const auto& x = t.value(ia);
    const auto& y = t.value(io);
    Tensor<T> gx(x.shape());
    for (index_t i = 0; i < g.size(); ++i) gx[i] = g[i] * df(x[i], y[i]);
    t.accumulate(ia, gx);
  });
}

}  // namespace detail

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  return detail::unary(a, [s](T x) { return s * x; }, [s](T, T) { return s; });
}

template <class T>
Var<T> shift(const Var<T>& a, T s) {
  return detail::unary(a, [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

template <class T>
Var<T> neg(const Var<T>& a) { return scale(a, T(-1)); }

template <class T>
Var<T> exp(const Var<T>& a) {
  Var<T> out = detail::unary(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
  detail::require_finite(out.value(), "exp");
  return out;
}

template <class T>
Var<T> atan(const Var<T>& a) {
  return detail::unary(a, [](T x) { return std::atan(x); }, [](T x, T) { return T(1) / (T(1) + x * x); });
}

template <class T>
Var<T> tanh(const Var<T>& a) {
  return detail::unary(a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <class T>
Var<T> square(const Var<T>& a) {
  return detail::unary(a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <class T>
Var<T> relu(const Var<T>& a) {
  return detail::unary(a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

// Derivative at exactly 0 is `slope`.
template <class T>
Var<T> leaky_relu(const Var<T>& a, T slope) {
  return detail::unary(
      a, [slope](T x) { return x > T(0) ? x : slope * x; }, [slope](T x, T) { return x > T(0) ? T(1) : slope; });
}

template <class T>
Tensor<T> leaky_relu(const Tensor<T>& a, T slope) {
  Tensor<T> out = a;
  for (auto& v : out.values()) v = v >= T(0) ? v : slope * v;
  return out;
}

// ---------------------------------------------------------------------------
// Reductions (accumulated in double)

template <class T>
Var<T> sum(const Var<T>& a) {
  double s = 0;
  for (T v : a.value().values()) s += v;
  index_t ia = a.id();
  return a.tape().record(Tensor<T>::scalar(static_cast<T>(s)), {a}, [ia](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(ia, Tensor<T>(t.value(ia).shape(), g[0]));
  });
}

template <class T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.value().size()));
}

template <class T>
Tensor<T> sum_channels(const Tensor<T>& a) {
  const auto L = image_layout(a.shape(), "sum_channels");
  Shape out_shape = a.rank() == 4 ? Shape{L.n, L.h, L.w} : Shape{L.h, L.w};
  Tensor<T> out(out_shape);
  const index_t P = L.plane();
  for (index_t n = 0; n < L.n; ++n)
    for (index_t p = 0; p < P; ++p) {
      double s = 0;
      for (index_t c = 0; c < L.c; ++c) s += a[(n * L.c + c) * P + p];
      out[n * P + p] = static_cast<T>(s);
    }
  return out;
}

/// [N,C,H,W] -> [N,H,W] (or [C,H,W] -> [H,W]) by summing channels.
template <class T>
Var<T> sum_channels(const Var<T>& a) {
  index_t ia = a.id();
  return a.tape().record(sum_channels(a.value()), {a}, [ia](Tape<T>& t, const Tensor<T>& g) {
    const auto L = image_layout(t.value(ia).shape(), "sum_channels");
    const index_t P = L.plane();
    Tensor<T> gx(t.value(ia).shape());
    for (index_t n = 0; n < L.n; ++n)
      for (index_t c = 0; c < L.c; ++c)
        for (index_t p = 0; p < P; ++p) gx[(n * L.c + c) * P + p] = g[n * P + p];
    t.accumulate(ia, gx);
  });
}

// ---------------------------------------------------------------------------
// Channel ops

template <class T>
Tensor<T> slice_channels(const Tensor<T>& a, index_t begin, index_t count) {
  const auto L = image_layout(a.shape(), "slice_channels");
  if (begin < 0 || count <= 0 || begin + count > L.c)
    throw DimensionError("slice_channels: range out of bounds for " + to_string(a.shape()));
  Tensor<T> out(with_channels(a.shape(), count));
  const index_t P = L.plane();
  for (index_t n = 0; n < L.n; ++n)
    std::copy_n(a.data() + (n * L.c + begin) * P, count * P, out.data() + n * count * P);
  return out;
}

template <class T>
Var<T> slice_channels(const Var<T>& a, index_t begin, index_t count) {
  index_t ia = a.id();
  return a.tape().record(slice_channels(a.value(), begin, count), {a},
                         [ia, begin, count](Tape<T>& t, const Tensor<T>& g) {
                           const auto L = image_layout(t.value(ia).shape(), "slice_channels");
                           const index_t P = L.plane();
                           Tensor<T>& gx = t.grad_buffer(ia);
                           for (index_t n = 0; n < L.n; ++n)
                             for (index_t i = 0; i < count * P; ++i)
                               gx[(n * L.c + begin) * P + i] += g[n * count * P + i];
                         });
}

template <class T>
std::pair<Tensor<T>, Tensor<T>> split_half(const Tensor<T>& a) {
  const auto L = image_layout(a.shape(), "split_half");
  if (L.c % 2 != 0) throw DimensionError("split_half: odd channel count " + std::to_string(L.c));
  return {slice_channels(a, 0, L.c / 2), slice_channels(a, L.c / 2, L.c / 2)};
}

template <class T>
std::pair<Var<T>, Var<T>> split_half(const Var<T>& a) {
  const auto L = image_layout(a.shape(), "split_half");
  if (L.c % 2 != 0) throw DimensionError("split_half: odd channel count " + std::to_string(L.c));
  return {slice_channels(a, 0, L.c / 2), slice_channels(a, L.c / 2, L.c / 2)};
}

template <class T>
Tensor<T> concat_channels(const std::vector<const Tensor<T>*>& parts) {
  if (parts.empty()) throw DimensionError("concat_channels: no inputs");
  const auto L0 = image_layout(parts[0]->shape(), "concat_channels");
  index_t total = 0;
  for (const auto* p : parts) {
    const auto L = image_layout(p->shape(), "concat_channels");
    if (p->rank() != parts[0]->rank() || L.n != L0.n || L.h != L0.h || L.w != L0.w)
      throw DimensionError("concat_channels: mismatched shapes " + to_string(parts[0]->shape()) + " and " +
                           to_string(p->shape()));
    total += L.c;
  }
  Tensor<T> out(with_channels(parts[0]->shape(), total));
  const index_t P = L0.plane();
  for (index_t n = 0; n < L0.n; ++n) {
    T* dst = out.data() + n * total * P;
    for (const auto* p : parts) {
      const index_t c = image_layout(p->shape(), "concat_channels").c;
      dst = std::copy_n(p->data() + n * c * P, c * P, dst);
    }
  }
  return out;
}

template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  return concat_channels<T>({&a, &b});
}

template <class T>
Var<T> concat_channels(const std::vector<Var<T>>& parts) {
  std::vector<const Tensor<T>*> values;
  std::vector<index_t> ids;
  for (const auto& p : parts) {
    values.push_back(&p.value());
    ids.push_back(p.id());
  }
  Tensor<T> out = concat_channels(values);
  return parts[0].tape().record(std::move(out), parts, [ids](Tape<T>& t, const Tensor<T>& g) {
    const auto L = image_layout(g.shape(), "concat_channels");
    const index_t P = L.plane();
    index_t offset = 0;
    for (index_t id : ids) {
      const index_t c = image_layout(t.value(id).shape(), "concat_channels").c;
      if (t.requires_grad(id)) {
        Tensor<T>& gx = t.grad_buffer(id);
        for (index_t n = 0; n < L.n; ++n)
          for (index_t i = 0; i < c * P; ++i) gx[n * c * P + i] += g[(n * L.c + offset) * P + i];
      }
      offset += c;
    }
  });
}

template <class T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  return concat_channels<T>(std::vector<Var<T>>{a, b});
}

inline void check_permutation(const std::vector<index_t>& perm, index_t c) {
  if (static_cast<index_t>(perm.size()) != c)
    throw DimensionError("permutation size " + std::to_string(perm.size()) + " != channels " + std::to_string(c));
  std::vector<bool> seen(perm.size(), false);
  for (index_t p : perm) {
    if (p < 0 || p >= c || seen[static_cast<std::size_t>(p)]) throw DimensionError("not a permutation");
    seen[static_cast<std::size_t>(p)] = true;
  }
}

inline std::vector<index_t> invert_permutation(const std::vector<index_t>& perm) {
  std::vector<index_t> inv(perm.size());
  for (std::size_t k = 0; k < perm.size(); ++k) inv[static_cast<std::size_t>(perm[k])] = static_cast<index_t>(k);
  return inv;
}

/// Output channel k takes input channel perm[k].
template <class T>
Tensor<T> permute_channels(const Tensor<T>& a, const std::vector<index_t>& perm) {
  const auto L = image_layout(a.shape(), "permute_channels");
  check_permutation(perm, L.c);
  Tensor<T> out(a.shape());
  const index_t P = L.plane();
  for (index_t n = 0; n < L.n; ++n)
    for (index_t k = 0; k < L.c; ++k)
      std::copy_n(a.data() + (n * L.c + perm[static_cast<std::size_t>(k)]) * P, P, out.data() + (n * L.c + k) * P);
  return out;
}

template <class T>
Var<T> permute_channels(const Var<T>& a, const std::vector<index_t>& perm) {
  index_t ia = a.id();
  return a.tape().record(permute_channels(a.value(), perm), {a}, [ia, perm](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(ia, permute_channels(g, invert_permutation(perm)));
  });
}

/// [C,H,W] -> [C*d*d, H/d, W/d]; output channel c*d*d + a*d + b at (i,j)
/// holds input channel c at (i*d + a, j*d + b).
template <class T>
Tensor<T> pixel_unshuffle(const Tensor<T>& x, index_t d) {
  const auto L = image_layout(x.shape(), "pixel_unshuffle");
  if (d <= 0 || L.h % d != 0 || L.w % d != 0)
    throw DimensionError("pixel_unshuffle: " + to_string(x.shape()) + " not divisible by " + std::to_string(d));
  const index_t ho = L.h / d, wo = L.w / d, co = L.c * d * d;
  Shape s = x.rank() == 4 ? Shape{L.n, co, ho, wo} : Shape{co, ho, wo};
  Tensor<T> out(s);
  for (index_t n = 0; n < L.n; ++n)
    for (index_t c = 0; c < L.c; ++c)
      for (index_t a = 0; a < d; ++a)
        for (index_t b = 0; b < d; ++b)
          for (index_t i = 0; i < ho; ++i)
            for (index_t j = 0; j < wo; ++j)
              out[((n * co + c * d * d + a * d + b) * ho + i) * wo + j] =
                  x[((n * L.c + c) * L.h + i * d + a) * L.w + j * d + b];
  return out;
}

/// Exact inverse of pixel_unshuffle.
template <class T>
Tensor<T> pixel_shuffle(const Tensor<T>& y, index_t d) {
  const auto L = image_layout(y.shape(), "pixel_shuffle");
  if (d <= 0 || L.c % (d * d) != 0)
    throw DimensionError("pixel_shuffle: channels of " + to_string(y.shape()) + " not divisible by d^2");
  const index_t co = L.c / (d * d), ho = L.h * d, wo = L.w * d;
  Shape s = y.rank() == 4 ? Shape{L.n, co, ho, wo} : Shape{co, ho, wo};
  Tensor<T> out(s);
  for (index_t n = 0; n < L.n; ++n)
    for (index_t c = 0; c < co; ++c)
      for (index_t a = 0; a < d; ++a)
        for (index_t b = 0; b < d; ++b)
          for (index_t i = 0; i < L.h; ++i)
            for (index_t j = 0; j < L.w; ++j)
              out[((n * co + c) * ho + i * d + a) * wo + j * d + b] =
                  y[((n * L.c + c * d * d + a * d + b) * L.h + i) * L.w + j];
  return out;
}

template <class T>
Var<T> pixel_unshuffle(const Var<T>& x, index_t d) {
  index_t ix = x.id();
  return x.tape().record(pixel_unshuffle(x.value(), d), {x},
                         [ix, d](Tape<T>& t, const Tensor<T>& g) { t.accumulate(ix, pixel_shuffle(g, d)); });
}

template <class T>
Var<T> pixel_shuffle(const Var<T>& y, index_t d) {
  index_t iy = y.id();
  return y.tape().record(pixel_shuffle(y.value(), d), {y},
                         [iy, d](Tape<T>& t, const Tensor<T>& g) { t.accumulate(iy, pixel_unshuffle(g, d)); });
}

// ---------------------------------------------------------------------------
// Convolution (cross-correlation, stride 1)

namespace detail {

struct ConvGeometry {
  ImageLayout in;
  index_t out_channels, k, pad, ho, wo;
  index_t rows() const { return in.c * k * k; }
  index_t cols() const { return in.n * ho * wo; }
};

template <class T>
ConvGeometry conv_geometry(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, Padding padding) {
  const auto L = image_layout(x.shape(), "conv2d");
  if (w.rank() != 4 || w.dim(1) != L.c || w.dim(2) != w.dim(3))
    throw DimensionError("conv2d: weight " + to_string(w.shape()) + " incompatible with input " + to_string(x.shape()));
  if (w.dim(2) % 2 == 0) throw DimensionError("conv2d: kernel size must be odd");
  if (b.rank() != 1 || b.dim(0) != w.dim(0))
    throw DimensionError("conv2d: bias " + to_string(b.shape()) + " does not match weight " + to_string(w.shape()));
  const index_t k = w.dim(2);
  const index_t pad = padding == Padding::same ? k / 2 : 0;
  const index_t ho = L.h + 2 * pad - k + 1, wo = L.w + 2 * pad - k + 1;
  if (ho <= 0 || wo <= 0) throw DimensionError("conv2d: input smaller than kernel");
  return {L, w.dim(0), k, pad, ho, wo};
}

// Column matrix [C*k*k, N*Ho*Wo].
template <class T>
void im2col(const ConvGeometry& g, const T* x, T* col) {
  const index_t ncols = g.cols(), P = g.ho * g.wo;
  for (index_t c = 0; c < g.in.c; ++c)
    for (index_t ki = 0; ki < g.k; ++ki)
      for (index_t kj = 0; kj < g.k; ++kj) {
        T* row = col + ((c * g.k + ki) * g.k + kj) * ncols;
        // Output columns whose source column lies inside the input.
        const index_t dj = kj - g.pad;
        const index_t j0 = std::clamp<index_t>(-dj, 0, g.wo), j1 = std::clamp<index_t>(g.in.w - dj, j0, g.wo);
        for (index_t n = 0; n < g.in.n; ++n) {
          const T* src = x + (n * g.in.c + c) * g.in.plane();
          T* dst = row + n * P;
          for (index_t oi = 0; oi < g.ho; ++oi) {
            T* d = dst + oi * g.wo;
            const index_t si = oi + ki - g.pad;
            if (si < 0 || si >= g.in.h) {
              std::fill_n(d, g.wo, T(0));
              continue;
            }
            std::fill(d, d + j0, T(0));
            std::copy(src + si * g.in.w + j0 + dj, src + si * g.in.w + j1 + dj, d + j0);
            std::fill(d + j1, d + g.wo, T(0));
          }
        }
      }
}

template <class T>
void col2im(const ConvGeometry& g, const T* col, T* dx) {
  const index_t ncols = g.cols(), P = g.ho * g.wo;
  for (index_t c = 0; c < g.in.c; ++c)
    for (index_t ki = 0; ki < g.k; ++ki)
      for (index_t kj = 0; kj < g.k; ++kj) {
        const T* row = col + ((c * g.k + ki) * g.k + kj) * ncols;
        const index_t dj = kj - g.pad;
        const index_t j0 = std::clamp<index_t>(-dj, 0, g.wo), j1 = std::clamp<index_t>(g.in.w - dj, j0, g.wo);
        for (index_t n = 0; n < g.in.n; ++n) {
          T* dst = dx + (n * g.in.c + c) * g.in.plane();
          const T* src = row + n * P;
          for (index_t oi = 0; oi < g.ho; ++oi) {
            const index_t si = oi + ki - g.pad;
            if (si < 0 || si >= g.in.h) continue;
            T* d = dst + si * g.in.w + dj;
            const T* r = src + oi * g.wo;
            for (index_t oj = j0; oj < j1; ++oj) d[oj] += r[oj];
          }
        }
      }
}

// [O, N*P] <-> [N, O, P]
template <class T>
void gather_output(const ConvGeometry& g, const T* mat, const T* bias, T* out) {
  const index_t P = g.ho * g.wo, ncols = g.cols();
  for (index_t n = 0; n < g.in.n; ++n)
    for (index_t o = 0; o < g.out_channels; ++o) {
      const T* src = mat + o * ncols + n * P;
      T* dst = out + (n * g.out_channels + o) * P;
      for (index_t p = 0; p < P; ++p) dst[p] = src[p] + bias[o];
    }
}

template <class T>
void scatter_grad(const ConvGeometry& g, const T* grad_out, T* mat) {
  const index_t P = g.ho * g.wo, ncols = g.cols();
  for (index_t n = 0; n < g.in.n; ++n)
    for (index_t o = 0; o < g.out_channels; ++o)
      std::copy_n(grad_out + (n * g.out_channels + o) * P, P, mat + o * ncols + n * P);
}

}  // namespace detail

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, Padding padding = Padding::same) {
  const auto g = detail::conv_geometry(x, w, b, padding);
  std::vector<T> col(static_cast<std::size_t>(g.rows() * g.cols()));
  detail::im2col(g, x.data(), col.data());
  detail::RowMat<T> prod = detail::ConstMapMat<T>(w.data(), g.out_channels, g.rows()) *
                           detail::ConstMapMat<T>(col.data(), g.rows(), g.cols());
  Shape s = x.rank() == 4 ? Shape{g.in.n, g.out_channels, g.ho, g.wo} : Shape{g.out_channels, g.ho, g.wo};
  Tensor<T> out(s);
  detail::gather_output(g, prod.data(), b.data(), out.data());
  return out;
}

/// input [C,H,W] or [N,C,H,W], weight [O,C,k,k], bias [O].
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, Padding padding = Padding::same) {
  const auto g = detail::conv_geometry(x.value(), w.value(), b.value(), padding);
  auto col = std::make_shared<std::vector<T>>(static_cast<std::size_t>(g.rows() * g.cols()));
  detail::im2col(g, x.value().data(), col->data());
  detail::RowMat<T> prod = detail::ConstMapMat<T>(w.value().data(), g.out_channels, g.rows()) *
                           detail::ConstMapMat<T>(col->data(), g.rows(), g.cols());
  Shape s = x.value().rank() == 4 ? Shape{g.in.n, g.out_channels, g.ho, g.wo} : Shape{g.out_channels, g.ho, g.wo};
  Tensor<T> out(s);
  detail::gather_output(g, prod.data(), b.value().data(), out.data());
  const bool keep = x.requires_grad() || w.requires_grad() || b.requires_grad();
  if (!keep) col.reset();
  index_t ix = x.id(), iw = w.id(), ib = b.id();
  return x.tape().record(std::move(out), {x, w, b}, [g, col, ix, iw, ib](Tape<T>& t, const Tensor<T>& grad) {
    detail::RowMat<T> G(g.out_channels, g.cols());
    detail::scatter_grad(g, grad.data(), G.data());
    if (t.requires_grad(iw)) {
      Tensor<T>& gw = t.grad_buffer(iw);
      detail::MapMat<T>(gw.data(), g.out_channels, g.rows()).noalias() +=
          G * detail::ConstMapMat<T>(col->data(), g.rows(), g.cols()).transpose();
    }
    if (t.requires_grad(ib)) {
      Tensor<T>& gb = t.grad_buffer(ib);
      for (index_t o = 0; o < g.out_channels; ++o) {
        double s = 0;
        for (index_t j = 0; j < g.cols(); ++j) s += G(o, j);
        gb[o] += static_cast<T>(s);
      }
    }
    if (t.requires_grad(ix)) {
      detail::RowMat<T> dcol =
          detail::ConstMapMat<T>(t.value(iw).data(), g.out_channels, g.rows()).transpose() * G;
      detail::col2im(g, dcol.data(), t.grad_buffer(ix).data());
    }
  });
}

// ---------------------------------------------------------------------------
// Batch normalization

template <class T>
struct BatchNormState {
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T eps = T(1e-5);
  T momentum = T(0.1);

  BatchNormState() = default;
  explicit BatchNormState(index_t channels, T eps_ = T(1e-5), T momentum_ = T(0.1))
      : running_mean(Shape{channels}, T(0)), running_var(Shape{channels}, T(1)), eps(eps_), momentum(momentum_) {}
};

/// Per-channel normalization over (N,H,W). Train mode uses batch statistics
/// and updates the running estimates (unbiased variance); eval mode uses the
/// running estimates.
template <class T>
Var<T> batchnorm2d(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, BatchNormState<T>& state, Mode mode) {
  const auto L = image_layout(x.shape(), "batchnorm2d");
  if (gamma.value().size() != L.c || beta.value().size() != L.c || state.running_mean.size() != L.c)
    throw DimensionError("batchnorm2d: parameter size does not match " + std::to_string(L.c) + " channels");
  const index_t P = L.plane(), count = L.n * P;
  const auto& xv = x.value();
  const auto& gv = gamma.value();
  const auto& bv = beta.value();

  std::vector<T> mu(static_cast<std::size_t>(L.c)), inv_std(static_cast<std::size_t>(L.c));
  if (mode == Mode::train) {
    if (count < 2) throw InvalidBatchError("batchnorm2d: train mode needs N*H*W >= 2, got " + std::to_string(count));
    for (index_t c = 0; c < L.c; ++c) {
      double s = 0, ss = 0;
      for (index_t n = 0; n < L.n; ++n)
        for (index_t p = 0; p < P; ++p) s += xv[(n * L.c + c) * P + p];
      const double m = s / static_cast<double>(count);
      for (index_t n = 0; n < L.n; ++n)
        for (index_t p = 0; p < P; ++p) {
          const double d = xv[(n * L.c + c) * P + p] - m;
          ss += d * d;
        }
      const double var = ss / static_cast<double>(count);
      mu[static_cast<std::size_t>(c)] = static_cast<T>(m);
      inv_std[static_cast<std::size_t>(c)] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(state.eps)));
      const double unbiased = ss / static_cast<double>(count - 1);
      state.running_mean[c] = static_cast<T>((1.0 - state.momentum) * state.running_mean[c] + state.momentum * m);
      state.running_var[c] =
          static_cast<T>((1.0 - state.momentum) * state.running_var[c] + state.momentum * unbiased);
    }
  } else {
    for (index_t c = 0; c < L.c; ++c) {
      mu[static_cast<std::size_t>(c)] = state.running_mean[c];
      inv_std[static_cast<std::size_t>(c)] =
          static_cast<T>(1.0 / std::sqrt(static_cast<double>(state.running_var[c]) + static_cast<double>(state.eps)));
    }
  }

  Tensor<T> xhat(xv.shape()), out(xv.shape());
  for (index_t n = 0; n < L.n; ++n)
    for (index_t c = 0; c < L.c; ++c)
      for (index_t p = 0; p < P; ++p) {
        const index_t i = (n * L.c + c) * P + p;
        xhat[i] = (xv[i] - mu[static_cast<std::size_t>(c)]) * inv_std[static_cast<std::size_t>(c)];
        out[i] = gv[c] * xhat[i] + bv[c];
      }

  index_t ix = x.id(), ig = gamma.id(), ib = beta.id();
  return x.tape().record(
      std::move(out), {x, gamma, beta},
      [L, P, count, mode, ix, ig, ib, inv_std, xhat = std::move(xhat)](Tape<T>& t, const Tensor<T>& g) {
        const auto& gv = t.value(ig);
        std::vector<double> sum_g(static_cast<std::size_t>(L.c), 0.0), sum_gx(static_cast<std::size_t>(L.c), 0.0);
        for (index_t n = 0; n < L.n; ++n)
          for (index_t c = 0; c < L.c; ++c)
            for (index_t p = 0; p < P; ++p) {
              const index_t i = (n * L.c + c) * P + p;
              sum_g[static_cast<std::size_t>(c)] += g[i];
              sum_gx[static_cast<std::size_t>(c)] += static_cast<double>(g[i]) * xhat[i];
            }
        if (t.requires_grad(ig)) {
          Tensor<T>& gg = t.grad_buffer(ig);
          for (index_t c = 0; c < L.c; ++c) gg[c] += static_cast<T>(sum_gx[static_cast<std::size_t>(c)]);
        }
        if (t.requires_grad(ib)) {
          Tensor<T>& gb = t.grad_buffer(ib);
          for (index_t c = 0; c < L.c; ++c) gb[c] += static_cast<T>(sum_g[static_cast<std::size_t>(c)]);
        }
        if (!t.requires_grad(ix)) return;
        Tensor<T>& gx = t.grad_buffer(ix);
        for (index_t c = 0; c < L.c; ++c) {
          const auto cu = static_cast<std::size_t>(c);
          const double scale = static_cast<double>(gv[c]) * inv_std[cu];
          const double mg = sum_g[cu] / static_cast<double>(count);
          const double mgx = sum_gx[cu] / static_cast<double>(count);
          for (index_t n = 0; n < L.n; ++n)
            for (index_t p = 0; p < P; ++p) {
              const index_t i = (n * L.c + c) * P + p;
              if (mode == Mode::train)
                gx[i] += static_cast<T>(scale * (g[i] - mg - xhat[i] * mgx));
              else
                gx[i] += static_cast<T>(scale * g[i]);
            }
        }
      });
}

// ---------------------------------------------------------------------------
// Dense layer: x [N,in], w [out,in], b [out] -> [N,out]

template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  const auto &xv = x.value(), &wv = w.value(), &bv = b.value();
  if (xv.rank() != 2 || wv.rank() != 2 || wv.dim(1) != xv.dim(1) || bv.size() != wv.dim(0))
    throw DimensionError("linear: incompatible shapes " + to_string(xv.shape()) + " x " + to_string(wv.shape()));
  const index_t n = xv.dim(0), in = xv.dim(1), out = wv.dim(0);
  Tensor<T> y(Shape{n, out});
  detail::MapMat<T> Y(y.data(), n, out);
  Y.noalias() = detail::ConstMapMat<T>(xv.data(), n, in) * detail::ConstMapMat<T>(wv.data(), out, in).transpose();
  for (index_t i = 0; i < n; ++i)
    for (index_t o = 0; o < out; ++o) Y(i, o) += bv[o];
  index_t ix = x.id(), iw = w.id(), ib = b.id();
  return x.tape().record(std::move(y), {x, w, b}, [ix, iw, ib, n, in, out](Tape<T>& t, const Tensor<T>& g) {
    detail::ConstMapMat<T> G(g.data(), n, out);
    if (t.requires_grad(ix))
      detail::MapMat<T>(t.grad_buffer(ix).data(), n, in).noalias() +=
          G * detail::ConstMapMat<T>(t.value(iw).data(), out, in);
    if (t.requires_grad(iw))
      detail::MapMat<T>(t.grad_buffer(iw).data(), out, in).noalias() +=
          G.transpose() * detail::ConstMapMat<T>(t.value(ix).data(), n, in);
    if (t.requires_grad(ib)) {
      Tensor<T>& gb = t.grad_buffer(ib);
      for (index_t o = 0; o < out; ++o) {
        double s = 0;
        for (index_t i = 0; i < n; ++i) s += G(i, o);
        gb[o] += static_cast<T>(s);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Plain tensor helpers

/// Stacks equally shaped tensors along a new leading axis.
template <class T>
Tensor<T> stack(const std::vector<const Tensor<T>*>& items) {
  if (items.empty()) throw DimensionError("stack: no inputs");
  Shape s = items[0]->shape();
  s.insert(s.begin(), static_cast<index_t>(items.size()));
  Tensor<T> out(s);
  T* dst = out.data();
  for (const auto* it : items) {
    if (it->shape() != items[0]->shape()) throw DimensionError("stack: mismatched shapes");
    dst = std::copy(it->values().begin(), it->values().end(), dst);
  }
  return out;
}

/// Item `i` of a stacked tensor.
template <class T>
Tensor<T> unstack(const Tensor<T>& t, index_t i) {
  Shape s(t.shape().begin() + 1, t.shape().end());
  const index_t n = numel(s);
  return Tensor<T>(s, std::vector<T>(t.data() + i * n, t.data() + (i + 1) * n));
}

/// Repeats a tensor `n` times along a new leading axis.
template <class T>
Tensor<T> repeat(const Tensor<T>& t, index_t n) {
  std::vector<const Tensor<T>*> items(static_cast<std::size_t>(n), &t);
  return stack(items);
}

}  // namespace ast
