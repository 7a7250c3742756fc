#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ast/errors.hpp"

namespace ast {

using index_t = std::int64_t;
using Shape = std::vector<index_t>;

inline index_t numel(const Shape& shape) {
  index_t n = 1;
  for (index_t e : shape) n *= e;
  return n;
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major n-dimensional array. A plain value: copying copies data.
template <class T = float>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)) {
    check_extents();
    data_.assign(static_cast<std::size_t>(numel(shape_)), fill);
  }

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (static_cast<index_t>(data_.size()) != numel(shape_))
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + ast::to_string(shape_));
  }

  static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

  static Tensor iota(Shape shape) {
    Tensor t(std::move(shape));
    std::iota(t.data_.begin(), t.data_.end(), T(0));
    return t;
  }

  const Shape& shape() const { return shape_; }
  index_t rank() const { return static_cast<index_t>(shape_.size()); }
  index_t dim(index_t i) const { return shape_.at(static_cast<std::size_t>(i < 0 ? rank() + i : i)); }
  index_t size() const { return static_cast<index_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() & { return data_; }
  std::span<const T> values() const& { return data_; }
  // A span into a temporary would dangle once the full expression ends.
  std::span<const T> values() && = delete;
  std::span<const T> values() const&& = delete;
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](index_t i) { return data_[static_cast<std::size_t>(i)]; }
  const T& operator[](index_t i) const { return data_[static_cast<std::size_t>(i)]; }

  T item() const {
    if (data_.size() != 1) throw ContractError("item() on tensor of shape " + ast::to_string(shape_));
    return data_[0];
  }

  // Multi-index access; the number of indices must equal the rank.
  template <class... I>
  T& at(I... idx) {
    return data_[static_cast<std::size_t>(offset({static_cast<index_t>(idx)...}))];
  }
  template <class... I>
  const T& at(I... idx) const {
    return data_[static_cast<std::size_t>(offset({static_cast<index_t>(idx)...}))];
  }

  Tensor reshaped(Shape shape) const {
    if (numel(shape) != size())
      throw DimensionError("cannot reshape " + ast::to_string(shape_) + " to " + ast::to_string(shape));
    return Tensor(std::move(shape), data_);
  }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape_, std::move(out));
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_extents() const {
    for (index_t e : shape_)
      if (e <= 0) throw DimensionError("tensor extents must be positive, got " + ast::to_string(shape_));
  }

  index_t offset(std::initializer_list<index_t> idx) const {
    if (static_cast<index_t>(idx.size()) != rank())
      throw DimensionError("index rank mismatch for shape " + ast::to_string(shape_));
    index_t off = 0;
    std::size_t k = 0;
    for (index_t i : idx) off = off * shape_[k++] + i;
    return off;
  }

  Shape shape_;
  std::vector<T> data_;
};

template <class T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw DimensionError("max_abs_diff shape mismatch");
  T m = 0;
  for (index_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// View of a rank-3 [C,H,W] or rank-4 [N,C,H,W] tensor as (N, C, H, W).
struct ImageLayout {
  index_t n, c, h, w;
  index_t plane() const { return h * w; }
};

inline ImageLayout image_layout(const Shape& s, const char* op) {
  if (s.size() == 3) return {1, s[0], s[1], s[2]};
  if (s.size() == 4) return {s[0], s[1], s[2], s[3]};
  throw DimensionError(std::string(op) + ": expected [C,H,W] or [N,C,H,W], got " + to_string(s));
}

inline Shape with_channels(const Shape& s, index_t c) {
  Shape out = s;
  out[out.size() == 4 ? 1 : 0] = c;
  return out;
}

}  // namespace ast
