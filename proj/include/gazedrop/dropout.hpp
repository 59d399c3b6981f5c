#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gazedrop/error.hpp"
#include "gazedrop/gazefield.hpp"
#include "gazedrop/rng.hpp"
#include "gazedrop/tensor.hpp"

namespace gazedrop {

enum class DropoutMode { uniform, gaze, center_blob };
enum class Phase { train, test };

inline std::string_view to_string(DropoutMode m) {
  switch (m) {
    case DropoutMode::uniform: return "uniform";
    case DropoutMode::gaze: return "gaze";
    case DropoutMode::center_blob: return "center_blob";
  }
  return "?";
}

inline DropoutMode parse_dropout_mode(std::string_view s) {
  if (s == "uniform") return DropoutMode::uniform;
  if (s == "gaze") return DropoutMode::gaze;
  if (s == "center_blob") return DropoutMode::center_blob;
  throw ConfigError("unknown dropout mode '" + std::string(s) + "'");
}

inline std::string_view to_string(Phase p) { return p == Phase::train ? "train" : "test"; }

// For mode=uniform `dp` is the drop probability of every unit; otherwise it is
// the drop probability at zero-gaze pixels.
struct DropoutSpec {
  DropoutMode mode = DropoutMode::uniform;
  double dp = 0.0;
  Phase phase = Phase::train;
  // center_blob only: blob width in pixels of the canvas it is drawn on. The
  // canvas defaults to the feature-map size when blob_canvas_h/w are zero.
  double blob_sigma = 7.68;
  std::int64_t blob_canvas_h = 0;
  std::int64_t blob_canvas_w = 0;
  // Uniform mode at test time multiplies by 1 - dp instead of passing through.
  bool calibrated = false;

  void validate() const {
    if (!(dp >= 0.0 && dp <= 1.0)) throw ParameterError("dropout dp must lie in [0, 1], got " + std::to_string(dp));
    if (mode == DropoutMode::center_blob && !(blob_sigma > 0.0)) {
      throw ParameterError("center_blob dropout needs blob_sigma > 0");
    }
  }

  DropoutSpec with_phase(Phase p) const {
    DropoutSpec s = *this;
    s.phase = p;
    return s;
  }

  friend bool operator==(const DropoutSpec&, const DropoutSpec&) = default;
};

// Per-pixel keep probability over an (H, W) feature map; values in [1 - dp, 1].
class KeepMask {
 public:
  KeepMask() = default;
  KeepMask(Tensor values, double dp) : values_(std::move(values)), dp_(dp) {
    if (values_.rank() != 2) throw ShapeError("keep mask must be 2D");
  }

  const Tensor& values() const noexcept { return values_; }
  double dp() const noexcept { return dp_; }
  std::int64_t height() const { return values_.extent(0); }
  std::int64_t width() const { return values_.extent(1); }
  float at(std::int64_t i, std::int64_t j) const { return values_.at(i, j); }

  // Mean drop probability, mean(1 - K).
  double average_drop() const { return 1.0 - values_.mean(); }

 private:
  Tensor values_;
  double dp_ = 0.0;
};

// Realized {0, 1} mask over an (H, W) feature map.
class BinaryMask {
 public:
  explicit BinaryMask(Tensor values) : values_(std::move(values)) {}
  const Tensor& values() const noexcept { return values_; }
  float at(std::int64_t i, std::int64_t j) const { return values_.at(i, j); }

 private:
  Tensor values_;
};

inline void check_dp(double dp) {
  if (!(dp >= 0.0 && dp <= 1.0)) throw ParameterError("dp must lie in [0, 1], got " + std::to_string(dp));
}

// K = 1 - dp * (1 - G'), G' the max-normalized map resampled to (h, w).
inline KeepMask make_keep_mask(const GazeMap& g, double dp, std::int64_t h, std::int64_t w) {
  check_dp(dp);
  Tensor k = bilinear_resize(normalize_max(g).to_tensor(), h, w);
  for (float& v : k.values()) v = static_cast<float>(1.0 - dp * (1.0 - static_cast<double>(v)));
  return KeepMask(std::move(k), dp);
}

inline KeepMask uniform_keep_mask(double dp, std::int64_t h, std::int64_t w) {
  check_dp(dp);
  if (h < 1 || w < 1) throw ShapeError("keep mask extents must be >= 1");
  return KeepMask(Tensor({h, w}, static_cast<float>(1.0 - dp)), dp);
}

// M(i, j) = 1 iff K(i, j) > A(i, j), A ~ Uniform[0, 1).
inline BinaryMask sample_binary_mask(const KeepMask& k, RngStream& rng) {
  Tensor a = sample_uniform({k.height(), k.width()}, rng);
  auto kv = k.values().values();
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = kv[i] > a[i] ? 1.0f : 0.0f;
  return BinaryMask(std::move(a));
}

// The keep mask a spec implies for one sample at feature size (h, w).
inline KeepMask keep_mask_for(const DropoutSpec& spec, const GazeMap* g, std::int64_t h, std::int64_t w) {
  spec.validate();
  switch (spec.mode) {
    case DropoutMode::uniform:
      return uniform_keep_mask(spec.dp, h, w);
    case DropoutMode::gaze:
      if (g == nullptr) throw ConfigError("gaze-modulated dropout requires a gaze map");
      return make_keep_mask(*g, spec.dp, h, w);
    case DropoutMode::center_blob: {
      const std::int64_t ch = spec.blob_canvas_h > 0 ? spec.blob_canvas_h : h;
      const std::int64_t cw = spec.blob_canvas_w > 0 ? spec.blob_canvas_w : w;
      return make_keep_mask(center_blob(ch, cw, spec.blob_sigma), spec.dp, h, w);
    }
  }
  throw ConfigError("unknown dropout mode");
}

// Per-sample multipliers (N, H, W) for a batch: binary draws at train time,
// K at test time for gaze-driven modes, ones (or 1 - dp when calibrated) for
// uniform test. Masks are drawn in sample order from `rng`.
inline Tensor realize_multipliers(const DropoutSpec& spec, std::span<const KeepMask* const> keep, RngStream& rng) {
  if (keep.empty()) throw ShapeError("no keep masks supplied");
  const std::int64_t h = keep.front()->height();
  const std::int64_t w = keep.front()->width();
  const auto n = static_cast<std::int64_t>(keep.size());
  Tensor out({n, h, w}, 1.0f);
  const auto hw = static_cast<std::size_t>(h * w);
  for (std::int64_t s = 0; s < n; ++s) {
    const KeepMask& k = *keep[static_cast<std::size_t>(s)];
    if (k.height() != h || k.width() != w) throw ShapeError("keep masks in a batch must share a size");
    float* dst = out.data() + static_cast<std::size_t>(s) * hw;
    if (spec.phase == Phase::train) {
      const BinaryMask m = sample_binary_mask(k, rng);
      std::copy(m.values().values().begin(), m.values().values().end(), dst);
    } else if (spec.mode == DropoutMode::uniform) {
      std::fill(dst, dst + hw, spec.calibrated ? static_cast<float>(1.0 - spec.dp) : 1.0f);
    } else {
      std::copy(k.values().values().begin(), k.values().values().end(), dst);
    }
  }
  return out;
}

// Applies dropout to F of shape (N, H, W, C). `gaze` holds either one map
// shared by the batch or one map per sample; it is required for mode=gaze.
inline Tensor apply_dropout(const Tensor& f, const DropoutSpec& spec, std::span<const GazeMap> gaze, RngStream& rng) {
  spec.validate();
  if (f.rank() != 4) throw ShapeError("apply_dropout expects (N, H, W, C), got " + shape_string(f.shape()));
  const std::int64_t n = f.extent(0);
  const std::int64_t h = f.extent(1);
  const std::int64_t w = f.extent(2);
  if (spec.mode == DropoutMode::gaze) {
    if (gaze.empty()) throw ConfigError("gaze-modulated dropout requires a gaze map");
    if (gaze.size() != 1 && static_cast<std::int64_t>(gaze.size()) != n) {
      throw ShapeError("expected 1 or " + std::to_string(n) + " gaze maps, got " + std::to_string(gaze.size()));
    }
  }
  if (spec.phase == Phase::test && spec.mode == DropoutMode::uniform && !spec.calibrated) return f;

  std::vector<KeepMask> masks;
  if (spec.mode == DropoutMode::gaze && gaze.size() > 1) {
    masks.reserve(gaze.size());
    for (const auto& g : gaze) masks.push_back(keep_mask_for(spec, &g, h, w));
  } else {
    masks.push_back(keep_mask_for(spec, gaze.empty() ? nullptr : &gaze.front(), h, w));
  }
  std::vector<const KeepMask*> per_sample(static_cast<std::size_t>(n));
  for (std::size_t s = 0; s < per_sample.size(); ++s) per_sample[s] = &masks[masks.size() == 1 ? 0 : s];
  return elementwise(ElementwiseOp::mul, f, realize_multipliers(spec, per_sample, rng));
}

inline Tensor apply_dropout(const Tensor& f, const DropoutSpec& spec, const GazeMap* g, RngStream& rng) {
  if (g == nullptr) return apply_dropout(f, spec, std::span<const GazeMap>{}, rng);
  return apply_dropout(f, spec, std::span<const GazeMap>(g, 1), rng);
}

}  // namespace gazedrop
