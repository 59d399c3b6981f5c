#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "gazedrop/error.hpp"
#include "gazedrop/rng.hpp"

namespace gazedrop {

using Shape = std::vector<std::int64_t>;

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

inline std::size_t shape_volume(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) {
    if (e < 0) throw ShapeError("negative extent in shape " + shape_string(shape));
    n *= static_cast<std::size_t>(e);
  }
  return n;
}

// Dense row-major float32 array. Canonical 4D order is (N, H, W, C).
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, float fill = 0.0f)
      : shape_(std::move(shape)), data_(shape_volume(shape_), fill) {}

  Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_volume(shape_)) {
      throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                       shape_string(shape_));
    }
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::int64_t extent(std::size_t axis) const { return shape_.at(axis); }

  std::span<float> values() noexcept { return data_; }
  std::span<const float> values() const noexcept { return data_; }
  float* data() noexcept { return data_.data(); }
  const float* data() const noexcept { return data_.data(); }

  float& operator[](std::size_t i) noexcept { return data_[i]; }
  float operator[](std::size_t i) const noexcept { return data_[i]; }

  float& at(std::int64_t i, std::int64_t j) { return data_[offset2(i, j)]; }
  float at(std::int64_t i, std::int64_t j) const { return data_[offset2(i, j)]; }

  float& at(std::int64_t n, std::int64_t i, std::int64_t j, std::int64_t c) {
    return data_[offset4(n, i, j, c)];
  }
  float at(std::int64_t n, std::int64_t i, std::int64_t j, std::int64_t c) const {
    return data_[offset4(n, i, j, c)];
  }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
  }

  float min() const { return data_.empty() ? 0.0f : *std::min_element(data_.begin(), data_.end()); }
  float max() const { return data_.empty() ? 0.0f : *std::max_element(data_.begin(), data_.end()); }

  double mean() const {
    if (data_.empty()) return 0.0;
    double s = 0.0;
    for (float v : data_) s += v;
    return s / static_cast<double>(data_.size());
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::size_t offset2(std::int64_t i, std::int64_t j) const {
    if (shape_.size() != 2) throw ShapeError("2D index into tensor of shape " + shape_string(shape_));
    return static_cast<std::size_t>(i * shape_[1] + j);
  }
  std::size_t offset4(std::int64_t n, std::int64_t i, std::int64_t j, std::int64_t c) const {
    if (shape_.size() != 4) throw ShapeError("4D index into tensor of shape " + shape_string(shape_));
    return static_cast<std::size_t>(((n * shape_[1] + i) * shape_[2] + j) * shape_[3] + c);
  }

  Shape shape_;
  std::vector<float> data_;
};

// Iid Uniform[0,1) draws, consumed from `rng` in row-major order.
inline Tensor sample_uniform(const Shape& shape, RngStream& rng) {
  for (auto e : shape) {
    if (e <= 0) throw ShapeError("sample_uniform requires positive extents, got " + shape_string(shape));
  }
  Tensor out(shape);
  for (float& v : out.values()) v = rng.uniform();
  return out;
}

// Align-corners bilinear resampling of a 2D field. A size-1 output axis
// samples the input's center along that axis.
inline Tensor bilinear_resize(const Tensor& map, std::int64_t out_h, std::int64_t out_w) {
  if (map.rank() != 2) throw ShapeError("bilinear_resize expects a 2D tensor, got " + shape_string(map.shape()));
  const std::int64_t in_h = map.extent(0);
  const std::int64_t in_w = map.extent(1);
  if (in_h < 1 || in_w < 1 || out_h < 1 || out_w < 1) {
    throw ShapeError("bilinear_resize extents must be >= 1");
  }
  if (in_h == out_h && in_w == out_w) return map;

  auto source_coord = [](std::int64_t i, std::int64_t out_n, std::int64_t in_n) {
    if (out_n == 1) return 0.5 * static_cast<double>(in_n - 1);
    return static_cast<double>(i) * static_cast<double>(in_n - 1) / static_cast<double>(out_n - 1);
  };

  Tensor out({out_h, out_w});
  const float* src = map.data();
  for (std::int64_t i = 0; i < out_h; ++i) {
    const double y = source_coord(i, out_h, in_h);
    const auto y0 = std::min<std::int64_t>(static_cast<std::int64_t>(std::floor(y)), in_h - 1);
    const auto y1 = std::min<std::int64_t>(y0 + 1, in_h - 1);
    const double fy = y - static_cast<double>(y0);
    for (std::int64_t j = 0; j < out_w; ++j) {
      const double x = source_coord(j, out_w, in_w);
      const auto x0 = std::min<std::int64_t>(static_cast<std::int64_t>(std::floor(x)), in_w - 1);
      const auto x1 = std::min<std::int64_t>(x0 + 1, in_w - 1);
      const double fx = x - static_cast<double>(x0);
      const double top = (1.0 - fx) * src[y0 * in_w + x0] + fx * src[y0 * in_w + x1];
      const double bottom = (1.0 - fx) * src[y1 * in_w + x0] + fx * src[y1 * in_w + x1];
      double v = (1.0 - fy) * top + fy * bottom;
      // Convex combination; clamp away float rounding so the range contract is exact.
      const double lo = std::min({src[y0 * in_w + x0], src[y0 * in_w + x1], src[y1 * in_w + x0], src[y1 * in_w + x1]});
      const double hi = std::max({src[y0 * in_w + x0], src[y0 * in_w + x1], src[y1 * in_w + x0], src[y1 * in_w + x1]});
      v = std::clamp(v, lo, hi);
      out.at(i, j) = static_cast<float>(v);
    }
  }
  return out;
}

enum class ElementwiseOp { add, mul, max_with_zero, scale };

namespace detail {

inline float apply_op(ElementwiseOp op, float a, float b) {
  switch (op) {
    case ElementwiseOp::add: return a + b;
    case ElementwiseOp::mul: return a * b;
    case ElementwiseOp::max_with_zero: return a > 0.0f ? a : 0.0f;
    case ElementwiseOp::scale: return a * b;
  }
  return a;
}

}  // namespace detail

inline Tensor elementwise(ElementwiseOp op, const Tensor& a, float b) {
  Tensor out = a;
  for (float& v : out.values()) v = detail::apply_op(op, v, b);
  return out;
}

// Same-shape elementwise op, or a mask broadcast over channels: `b` of shape
// (H, W) or (N, H, W) against `a` of shape (N, H, W, C).
inline Tensor elementwise(ElementwiseOp op, const Tensor& a, const Tensor& b) {
  if (op == ElementwiseOp::max_with_zero) return elementwise(op, a, 0.0f);
  if (a.shape() == b.shape()) {
    Tensor out = a;
    auto o = out.values();
    auto bv = b.values();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = detail::apply_op(op, o[i], bv[i]);
    return out;
  }
  const bool mask2d = a.rank() == 4 && b.rank() == 2 && b.extent(0) == a.extent(1) && b.extent(1) == a.extent(2);
  const bool mask3d = a.rank() == 4 && b.rank() == 3 && b.extent(0) == a.extent(0) &&
                      b.extent(1) == a.extent(1) && b.extent(2) == a.extent(2);
  if (!mask2d && !mask3d) {
    throw ShapeError("cannot broadcast " + shape_string(b.shape()) + " against " + shape_string(a.shape()));
  }
  Tensor out = a;
  const auto n = static_cast<std::size_t>(a.extent(0));
  const auto hw = static_cast<std::size_t>(a.extent(1) * a.extent(2));
  const auto c = static_cast<std::size_t>(a.extent(3));
  float* o = out.data();
  const float* m = b.data();
  for (std::size_t s = 0; s < n; ++s) {
    const float* ms = mask3d ? m + s * hw : m;
    for (std::size_t p = 0; p < hw; ++p) {
      float* px = o + (s * hw + p) * c;
      for (std::size_t k = 0; k < c; ++k) px[k] = detail::apply_op(op, px[k], ms[p]);
    }
  }
  return out;
}

inline Tensor relu(const Tensor& a) { return elementwise(ElementwiseOp::max_with_zero, a, 0.0f); }

}  // namespace gazedrop
