#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "gazedrop/error.hpp"
#include "gazedrop/tensor.hpp"

namespace gazedrop {

// Nonnegative attention intensity over image pixels (row-major, height x width).
class GazeMap {
 public:
  GazeMap() : GazeMap(1, 1) {}

  GazeMap(std::int64_t height, std::int64_t width, float fill = 0.0f)
      : height_(height), width_(width) {
    if (height < 1 || width < 1) throw ShapeError("gaze map extents must be >= 1");
    if (!(fill >= 0.0f) || !std::isfinite(fill)) throw ParameterError("gaze map values must be finite and >= 0");
    values_.assign(static_cast<std::size_t>(height * width), fill);
  }

  GazeMap(std::int64_t height, std::int64_t width, std::vector<float> values)
      : height_(height), width_(width), values_(std::move(values)) {
    if (height < 1 || width < 1) throw ShapeError("gaze map extents must be >= 1");
    if (values_.size() != static_cast<std::size_t>(height * width)) {
      throw ShapeError("gaze map data length does not match " + std::to_string(height) + "x" + std::to_string(width));
    }
    for (float v : values_) {
      if (!(v >= 0.0f) || !std::isfinite(v)) throw ParameterError("gaze map values must be finite and >= 0");
    }
  }

  static GazeMap from_tensor(const Tensor& t) {
    if (t.rank() != 2) throw ShapeError("gaze map tensor must be 2D, got " + shape_string(t.shape()));
    return GazeMap(t.extent(0), t.extent(1), std::vector<float>(t.values().begin(), t.values().end()));
  }

  Tensor to_tensor() const { return Tensor({height_, width_}, values_); }

  std::int64_t height() const noexcept { return height_; }
  std::int64_t width() const noexcept { return width_; }
  std::span<const float> values() const noexcept { return values_; }

  float at(std::int64_t i, std::int64_t j) const { return values_[static_cast<std::size_t>(i * width_ + j)]; }

  // Writes go through set() so the nonnegativity invariant holds.
  void set(std::int64_t i, std::int64_t j, float v) {
    if (!(v >= 0.0f) || !std::isfinite(v)) throw ParameterError("gaze map values must be finite and >= 0");
    values_[static_cast<std::size_t>(i * width_ + j)] = v;
  }

  float max() const { return *std::max_element(values_.begin(), values_.end()); }

  friend bool operator==(const GazeMap&, const GazeMap&) = default;

 private:
  std::int64_t height_;
  std::int64_t width_;
  std::vector<float> values_;
};

// g / max(g); an all-zero map stays all-zero.
inline GazeMap normalize_max(const GazeMap& g) {
  const float peak = g.max();
  if (peak <= 0.0f) return g;
  std::vector<float> out(g.values().begin(), g.values().end());
  for (float& v : out) v = v == peak ? 1.0f : std::min(1.0f, v / peak);
  return GazeMap(g.height(), g.width(), std::move(out));
}

inline GazeMap gaussian_blob(std::int64_t h, std::int64_t w, double cx, double cy, double sigma) {
  if (!(sigma > 0.0) || !std::isfinite(sigma)) throw ParameterError("gaussian_blob sigma must be > 0");
  if (h < 1 || w < 1) throw ShapeError("gaussian_blob extents must be >= 1");
  std::vector<float> values(static_cast<std::size_t>(h * w));
  const double inv = 1.0 / (2.0 * sigma * sigma);
  for (std::int64_t i = 0; i < h; ++i) {
    const double dy = static_cast<double>(i) - cy;
    for (std::int64_t j = 0; j < w; ++j) {
      const double dx = static_cast<double>(j) - cx;
      values[static_cast<std::size_t>(i * w + j)] = static_cast<float>(std::exp(-(dx * dx + dy * dy) * inv));
    }
  }
  return GazeMap(h, w, std::move(values));
}

inline GazeMap center_blob(std::int64_t h, std::int64_t w, double sigma) {
  return gaussian_blob(h, w, 0.5 * static_cast<double>(w - 1), 0.5 * static_cast<double>(h - 1), sigma);
}

// Pixelwise sum, for composing multi-fixation maps.
inline GazeMap add(const GazeMap& a, const GazeMap& b) {
  if (a.height() != b.height() || a.width() != b.width()) throw ShapeError("gaze map size mismatch in add");
  std::vector<float> out(a.values().begin(), a.values().end());
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return GazeMap(a.height(), a.width(), std::move(out));
}

}  // namespace gazedrop
