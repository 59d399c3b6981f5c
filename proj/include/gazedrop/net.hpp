#pragma once

#define EIGEN_DONT_PARALLELIZE
#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gazedrop/dropout.hpp"
#include "gazedrop/error.hpp"
#include "gazedrop/gazefield.hpp"
#include "gazedrop/rng.hpp"
#include "gazedrop/tensor.hpp"

namespace gazedrop {

struct ConvSpec {
  int filters = 0;
  int kernel = 0;
  int stride = 1;
  int pad = 0;
  friend bool operator==(const ConvSpec&, const ConvSpec&) = default;
};

struct ConvGeometry {
  int in_h, in_w, in_c;
  int out_h, out_w, out_c;
  int kernel, stride, pad;
  int patch() const { return kernel * kernel * in_c; }
  int positions() const { return out_h * out_w; }
};

// Layer stack: convolutions (each followed by ReLU), optional dropout after the
// ReLU of the listed conv layers, flatten, fully connected layers with ReLU
// between them and a linear last layer of width 1.
struct ArchConfig {
  int in_h = 48;
  int in_w = 128;
  int in_c = 1;
  std::vector<ConvSpec> convs = {{24, 5, 2, 0}, {36, 5, 2, 0}, {48, 5, 2, 0}, {64, 3, 1, 1}, {64, 3, 1, 1}};
  std::vector<int> fc = {100, 50, 10, 1};
  std::vector<int> dropout_slots = {0, 1};

  static ArchConfig pilotnet() { return {}; }

  // Same layer types at 12x16 input, small enough for finite differences.
  static ArchConfig miniature() {
    ArchConfig a;
    a.in_h = 12;
    a.in_w = 16;
    a.convs = {{3, 3, 2, 0}, {4, 3, 1, 0}, {4, 3, 1, 1}, {5, 3, 1, 1}, {5, 3, 1, 1}};
    a.fc = {6, 5, 4, 1};
    a.dropout_slots = {0, 1};
    return a;
  }

  std::vector<ConvGeometry> geometry() const {
    std::vector<ConvGeometry> out;
    int h = in_h, w = in_w, c = in_c;
    for (const auto& cs : convs) {
      if (cs.filters < 1 || cs.kernel < 1 || cs.stride < 1 || cs.pad < 0) {
        throw ConfigError("invalid convolution layer parameters");
      }
      const int oh = (h + 2 * cs.pad - cs.kernel) / cs.stride + 1;
      const int ow = (w + 2 * cs.pad - cs.kernel) / cs.stride + 1;
      if (h + 2 * cs.pad < cs.kernel || w + 2 * cs.pad < cs.kernel || oh < 1 || ow < 1) {
        throw ConfigError("input resolution " + std::to_string(in_h) + "x" + std::to_string(in_w) +
                          " is too small for the convolution stack");
      }
      out.push_back({h, w, c, oh, ow, cs.filters, cs.kernel, cs.stride, cs.pad});
      h = oh;
      w = ow;
      c = cs.filters;
    }
    return out;
  }

  int flatten_size() const {
    const auto g = geometry();
    if (g.empty()) return in_h * in_w * in_c;
    return g.back().out_h * g.back().out_w * g.back().out_c;
  }

  void validate() const {
    if (in_h < 1 || in_w < 1 || in_c < 1) throw ConfigError("input extents must be >= 1");
    if (flatten_size() <= 0) throw ConfigError("flatten size must be positive");
    if (fc.empty() || fc.back() != 1) throw ConfigError("last fully connected layer must have one unit");
    for (int u : fc) {
      if (u < 1) throw ConfigError("fully connected widths must be >= 1");
    }
    for (int s : dropout_slots) {
      if (s < 0 || s >= static_cast<int>(convs.size())) throw ConfigError("dropout slot out of range");
    }
  }

  friend bool operator==(const ArchConfig&, const ArchConfig&) = default;
};

struct ParamTensor {
  std::string name;
  Shape shape;
  std::size_t offset = 0;
  std::size_t size = 0;
};

// Keep masks per dropout slot, per sample: keep[slot][sample].
using SlotKeepMasks = std::vector<std::vector<const KeepMask*>>;

// Buffers handed to Eigen. A fixed alignment keeps the vectorized kernels on
// the same code path regardless of where the heap places them, so results are
// bit-identical across runs and worker counts.
template <typename T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;

// Activations cached by a forward pass for the matching backward pass.
template <typename Scalar>
struct ForwardCache {
  std::size_t batch = 0;
  AlignedVector<Scalar> input;                     // centered input
  std::vector<AlignedVector<Scalar>> cols;         // im2col per conv layer
  std::vector<AlignedVector<Scalar>> conv_pre;     // pre-activation per conv layer
  std::vector<AlignedVector<Scalar>> conv_out;     // post ReLU (and dropout) per conv layer
  std::vector<AlignedVector<Scalar>> multipliers;  // (N, H, W) per conv layer; empty when no slot
  std::vector<AlignedVector<Scalar>> fc_in;        // input per FC layer
  std::vector<AlignedVector<Scalar>> fc_pre;       // pre-activation per FC layer
  AlignedVector<Scalar> output;
  // Backward scratch, kept to avoid reallocating large buffers per batch.
  AlignedVector<Scalar> delta;
  AlignedVector<Scalar> scratch;
};

// Convolutional steering regressor with explicit forward and backward passes.
// Parameters live in one contiguous buffer; `tensors()` names its slices.
template <typename Scalar>
class BasicPilotNet {
 public:
  using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Row = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

  explicit BasicPilotNet(ArchConfig arch = ArchConfig::pilotnet()) : arch_(std::move(arch)) {
    arch_.validate();
    geom_ = arch_.geometry();
    std::size_t off = 0;
    auto add = [&](std::string name, Shape shape) {
      const std::size_t n = shape_volume(shape);
      tensors_.push_back({std::move(name), std::move(shape), off, n});
      off += n;
    };
    for (std::size_t l = 0; l < geom_.size(); ++l) {
      const auto& g = geom_[l];
      add("conv" + std::to_string(l + 1) + ".weight", {g.patch(), g.out_c});
      add("conv" + std::to_string(l + 1) + ".bias", {g.out_c});
    }
    int in = arch_.flatten_size();
    for (std::size_t l = 0; l < arch_.fc.size(); ++l) {
      add("fc" + std::to_string(l + 1) + ".weight", {in, arch_.fc[l]});
      add("fc" + std::to_string(l + 1) + ".bias", {arch_.fc[l]});
      in = arch_.fc[l];
    }
    params_.assign(off, Scalar(0));
    slot_of_conv_.assign(geom_.size(), -1);
    for (std::size_t s = 0; s < arch_.dropout_slots.size(); ++s) {
      slot_of_conv_[static_cast<std::size_t>(arch_.dropout_slots[s])] = static_cast<int>(s);
    }
  }

  const ArchConfig& arch() const noexcept { return arch_; }
  const std::vector<ConvGeometry>& geometry() const noexcept { return geom_; }
  const std::vector<ParamTensor>& tensors() const noexcept { return tensors_; }
  std::size_t parameter_count() const noexcept { return params_.size(); }
  std::span<Scalar> parameters() noexcept { return params_; }
  std::span<const Scalar> parameters() const noexcept { return params_; }

  std::size_t slot_count() const noexcept { return arch_.dropout_slots.size(); }

  // Feature-map size (H, W) at each dropout slot.
  std::pair<int, int> slot_size(std::size_t slot) const {
    const auto& g = geom_.at(static_cast<std::size_t>(arch_.dropout_slots.at(slot)));
    return {g.out_h, g.out_w};
  }

  // He-normal weights, zero biases.
  void init_he(std::uint64_t seed) {
    RngStream rng(seed, 0x1417);
    for (const auto& t : tensors_) {
      const bool bias = t.shape.size() == 1;
      const double fan_in = bias ? 1.0 : static_cast<double>(t.shape[0]);
      const bool last = &t == &tensors_[tensors_.size() - 2];
      const double sd = last ? std::sqrt(1.0 / fan_in) : std::sqrt(2.0 / fan_in);
      for (std::size_t i = 0; i < t.size; ++i) {
        params_[t.offset + i] = bias ? Scalar(0) : static_cast<Scalar>(sd * rng.normal());
      }
    }
  }

  // Forward pass over `n` frames of shape (in_h, in_w, in_c). Each frame is
  // centered on its own mean first. `multipliers[slot]` is an (N, H, W)
  // tensor applied after that slot's ReLU, or nullptr for identity.
  std::vector<Scalar> forward(std::span<const Scalar> frames, std::size_t n,
                              std::span<const Tensor* const> multipliers, ForwardCache<Scalar>& cache) const {
    const std::size_t frame_size = static_cast<std::size_t>(arch_.in_h * arch_.in_w * arch_.in_c);
    if (frames.size() != n * frame_size) {
      throw ShapeError("frames do not match the configured resolution " + std::to_string(arch_.in_h) + "x" +
                       std::to_string(arch_.in_w) + "x" + std::to_string(arch_.in_c));
    }
    if (multipliers.size() != slot_count()) throw ShapeError("one multiplier tensor per dropout slot required");

    cache.batch = n;
    cache.input.assign(frames.begin(), frames.end());
    for (std::size_t s = 0; s < n; ++s) {
      Scalar* f = cache.input.data() + s * frame_size;
      double mean = 0.0;
      for (std::size_t i = 0; i < frame_size; ++i) mean += static_cast<double>(f[i]);
      mean /= static_cast<double>(frame_size);
      for (std::size_t i = 0; i < frame_size; ++i) f[i] -= static_cast<Scalar>(mean);
    }

    const std::size_t layers = geom_.size();
    cache.cols.resize(layers);
    cache.conv_pre.resize(layers);
    cache.conv_out.resize(layers);
    cache.multipliers.resize(layers);
    const AlignedVector<Scalar>* prev = &cache.input;
    for (std::size_t l = 0; l < layers; ++l) {
      const auto& g = geom_[l];
      const std::size_t rows = n * static_cast<std::size_t>(g.positions());
      im2col(g, *prev, n, cache.cols[l]);
      auto& pre = cache.conv_pre[l];
      pre.resize(rows * static_cast<std::size_t>(g.out_c));
      Eigen::Map<const Mat> col(cache.cols[l].data(), static_cast<Eigen::Index>(rows), g.patch());
      Eigen::Map<const Mat> w(param(2 * l), g.patch(), g.out_c);
      Eigen::Map<const Row> b(param(2 * l + 1), g.out_c);
      Eigen::Map<Mat> z(pre.data(), static_cast<Eigen::Index>(rows), g.out_c);
      z.noalias() = col * w;
      z.rowwise() += b;

      auto& out = cache.conv_out[l];
      out.resize(pre.size());
      for (std::size_t i = 0; i < pre.size(); ++i) out[i] = pre[i] > Scalar(0) ? pre[i] : Scalar(0);

      auto& mult = cache.multipliers[l];
      mult.clear();
      const int slot = slot_of_conv_[l];
      if (slot >= 0 && multipliers[static_cast<std::size_t>(slot)] != nullptr) {
        const Tensor& m = *multipliers[static_cast<std::size_t>(slot)];
        if (m.rank() != 3 || m.extent(0) != static_cast<std::int64_t>(n) || m.extent(1) != g.out_h ||
            m.extent(2) != g.out_w) {
          throw ShapeError("dropout multipliers " + shape_string(m.shape()) + " do not match layer " +
                           std::to_string(l + 1) + " output");
        }
        mult.assign(m.values().begin(), m.values().end());
        const auto c = static_cast<std::size_t>(g.out_c);
        for (std::size_t p = 0; p < rows; ++p) {
          const Scalar k = mult[p];
          Scalar* px = out.data() + p * c;
          for (std::size_t ch = 0; ch < c; ++ch) px[ch] *= k;
        }
      }
      prev = &out;
    }

    const std::size_t fcs = arch_.fc.size();
    cache.fc_in.resize(fcs);
    cache.fc_pre.resize(fcs);
    cache.fc_in[0] = *prev;
    int in = arch_.flatten_size();
    for (std::size_t l = 0; l < fcs; ++l) {
      const int outw = arch_.fc[l];
      Eigen::Map<const Mat> x(cache.fc_in[l].data(), static_cast<Eigen::Index>(n), in);
      Eigen::Map<const Mat> w(param(2 * layers + 2 * l), in, outw);
      Eigen::Map<const Row> b(param(2 * layers + 2 * l + 1), outw);
      auto& pre = cache.fc_pre[l];
      pre.resize(n * static_cast<std::size_t>(outw));
      Eigen::Map<Mat> z(pre.data(), static_cast<Eigen::Index>(n), outw);
      z.noalias() = x * w;
      z.rowwise() += b;
      if (l + 1 < fcs) {
        auto& next = cache.fc_in[l + 1];
        next.resize(pre.size());
        for (std::size_t i = 0; i < pre.size(); ++i) next[i] = pre[i] > Scalar(0) ? pre[i] : Scalar(0);
      }
      in = outw;
    }
    cache.output = cache.fc_pre.back();
    return std::vector<Scalar>(cache.output.begin(), cache.output.end());
  }

  // Accumulates parameter gradients of a loss with dL/dy = `dy` into `grads`
  // (which is overwritten). Uses the masks and activations of `cache`.
  void backward(ForwardCache<Scalar>& cache, std::span<const Scalar> dy, std::span<Scalar> grads) const {
    const std::size_t n = cache.batch;
    if (dy.size() != n) throw ShapeError("output gradient length must equal batch size");
    if (grads.size() != params_.size()) throw ShapeError("gradient buffer has wrong length");
    std::fill(grads.begin(), grads.end(), Scalar(0));

    const std::size_t layers = geom_.size();
    const std::size_t fcs = arch_.fc.size();
    auto& delta = cache.delta;  // dL/dz of the current layer
    auto& dx = cache.scratch;
    delta.assign(dy.begin(), dy.end());
    for (std::size_t li = fcs; li-- > 0;) {
      const int outw = arch_.fc[li];
      const int in = li == 0 ? arch_.flatten_size() : arch_.fc[li - 1];
      Eigen::Map<const Mat> x(cache.fc_in[li].data(), static_cast<Eigen::Index>(n), in);
      Eigen::Map<const Mat> d(delta.data(), static_cast<Eigen::Index>(n), outw);
      Eigen::Map<Mat> gw(grads.data() + tensors_[2 * layers + 2 * li].offset, in, outw);
      Eigen::Map<Row> gb(grads.data() + tensors_[2 * layers + 2 * li + 1].offset, outw);
      gw.noalias() = x.transpose() * d;
      gb = d.colwise().sum();
      Eigen::Map<const Mat> w(param(2 * layers + 2 * li), in, outw);
      dx.resize(n * static_cast<std::size_t>(in));
      Eigen::Map<Mat> dxm(dx.data(), static_cast<Eigen::Index>(n), in);
      dxm.noalias() = d * w.transpose();
      if (li > 0) {
        const auto& pre = cache.fc_pre[li - 1];
        for (std::size_t i = 0; i < dx.size(); ++i) {
          if (!(pre[i] > Scalar(0))) dx[i] = Scalar(0);
        }
      }
      std::swap(delta, dx);
    }

    // delta now holds dL/d(conv output, post ReLU and dropout).
    for (std::size_t l = layers; l-- > 0;) {
      const auto& g = geom_[l];
      const std::size_t rows = n * static_cast<std::size_t>(g.positions());
      const auto c = static_cast<std::size_t>(g.out_c);
      const auto& pre = cache.conv_pre[l];
      const auto& mult = cache.multipliers[l];
      for (std::size_t p = 0; p < rows; ++p) {
        const Scalar k = mult.empty() ? Scalar(1) : mult[p];
        Scalar* dp = delta.data() + p * c;
        const Scalar* zp = pre.data() + p * c;
        for (std::size_t ch = 0; ch < c; ++ch) dp[ch] = zp[ch] > Scalar(0) ? dp[ch] * k : Scalar(0);
      }
      Eigen::Map<const Mat> d(delta.data(), static_cast<Eigen::Index>(rows), g.out_c);
      Eigen::Map<const Mat> col(cache.cols[l].data(), static_cast<Eigen::Index>(rows), g.patch());
      Eigen::Map<Mat> gw(grads.data() + tensors_[2 * l].offset, g.patch(), g.out_c);
      Eigen::Map<Row> gb(grads.data() + tensors_[2 * l + 1].offset, g.out_c);
      gw.noalias() = col.transpose() * d;
      gb = d.colwise().sum();
      if (l == 0) break;
      auto& dcol = cache.scratch;
      dcol.resize(rows * static_cast<std::size_t>(g.patch()));
      Eigen::Map<Mat> dcm(dcol.data(), static_cast<Eigen::Index>(rows), g.patch());
      Eigen::Map<const Mat> w(param(2 * l), g.patch(), g.out_c);
      dcm.noalias() = d * w.transpose();
      delta.assign(n * static_cast<std::size_t>(g.in_h * g.in_w * g.in_c), Scalar(0));
      col2im(g, dcol, n, delta);
    }
  }

  friend bool operator==(const BasicPilotNet& a, const BasicPilotNet& b) {
    return a.arch_ == b.arch_ && a.params_ == b.params_;
  }

 private:
  const Scalar* param(std::size_t tensor) const { return params_.data() + tensors_[tensor].offset; }

  static void im2col(const ConvGeometry& g, const AlignedVector<Scalar>& in, std::size_t n, AlignedVector<Scalar>& col) {
    const std::size_t patch = static_cast<std::size_t>(g.patch());
    col.resize(n * static_cast<std::size_t>(g.positions()) * patch);
    const std::size_t in_size = static_cast<std::size_t>(g.in_h * g.in_w * g.in_c);
    const std::size_t run = static_cast<std::size_t>(g.kernel * g.in_c);
    for (std::size_t s = 0; s < n; ++s) {
      const Scalar* src = in.data() + s * in_size;
      for (int oy = 0; oy < g.out_h; ++oy) {
        for (int ox = 0; ox < g.out_w; ++ox) {
          Scalar* dst = col.data() + ((s * static_cast<std::size_t>(g.out_h) + static_cast<std::size_t>(oy)) *
                                          static_cast<std::size_t>(g.out_w) +
                                      static_cast<std::size_t>(ox)) *
                                         patch;
          const int x0 = ox * g.stride - g.pad;
          for (int ky = 0; ky < g.kernel; ++ky) {
            const int y = oy * g.stride - g.pad + ky;
            Scalar* row = dst + static_cast<std::size_t>(ky) * run;
            if (y < 0 || y >= g.in_h) {
              std::fill(row, row + run, Scalar(0));
              continue;
            }
            if (x0 >= 0 && x0 + g.kernel <= g.in_w) {
              const Scalar* s0 = src + (static_cast<std::size_t>(y) * static_cast<std::size_t>(g.in_w) +
                                        static_cast<std::size_t>(x0)) *
                                           static_cast<std::size_t>(g.in_c);
              std::copy(s0, s0 + run, row);
            } else {
              for (int kx = 0; kx < g.kernel; ++kx) {
                const int x = x0 + kx;
                if (x < 0 || x >= g.in_w) {
                  std::fill(row + kx * g.in_c, row + (kx + 1) * g.in_c, Scalar(0));
                  continue;
                }
                const Scalar* s0 = src + (static_cast<std::size_t>(y) * static_cast<std::size_t>(g.in_w) +
                                          static_cast<std::size_t>(x)) *
                                             static_cast<std::size_t>(g.in_c);
                std::copy(s0, s0 + g.in_c, row + static_cast<std::size_t>(kx * g.in_c));
              }
            }
          }
        }
      }
    }
  }

  static void col2im(const ConvGeometry& g, const AlignedVector<Scalar>& col, std::size_t n, AlignedVector<Scalar>& out) {
    const std::size_t patch = static_cast<std::size_t>(g.patch());
    const std::size_t in_size = static_cast<std::size_t>(g.in_h * g.in_w * g.in_c);
    for (std::size_t s = 0; s < n; ++s) {
      Scalar* dst = out.data() + s * in_size;
      for (int oy = 0; oy < g.out_h; ++oy) {
        for (int ox = 0; ox < g.out_w; ++ox) {
          const Scalar* src = col.data() + ((s * static_cast<std::size_t>(g.out_h) + static_cast<std::size_t>(oy)) *
                                                static_cast<std::size_t>(g.out_w) +
                                            static_cast<std::size_t>(ox)) *
                                               patch;
          for (int ky = 0; ky < g.kernel; ++ky) {
            const int y = oy * g.stride - g.pad + ky;
            if (y < 0 || y >= g.in_h) continue;
            for (int kx = 0; kx < g.kernel; ++kx) {
              const int x = ox * g.stride - g.pad + kx;
              if (x < 0 || x >= g.in_w) continue;
              Scalar* d = dst + (static_cast<std::size_t>(y) * static_cast<std::size_t>(g.in_w) +
                                 static_cast<std::size_t>(x)) *
                                    static_cast<std::size_t>(g.in_c);
              const Scalar* sp = src + static_cast<std::size_t>((ky * g.kernel + kx) * g.in_c);
              for (int c = 0; c < g.in_c; ++c) d[c] += sp[c];
            }
          }
        }
      }
    }
  }

  ArchConfig arch_;
  std::vector<ConvGeometry> geom_;
  std::vector<ParamTensor> tensors_;
  AlignedVector<Scalar> params_;
  std::vector<int> slot_of_conv_;
};

using PilotNetMini = BasicPilotNet<float>;

// Keep masks for one batch, owned, plus the pointer view the net consumes.
struct BatchKeepMasks {
  std::vector<std::vector<KeepMask>> owned;  // [slot][sample or single shared]
  SlotKeepMasks view;
};

// Builds keep masks for every dropout slot from a spec and optional gaze
// maps (one shared map or one per sample).
template <typename Scalar>
BatchKeepMasks build_keep_masks(const BasicPilotNet<Scalar>& net, const DropoutSpec& spec,
                                std::span<const GazeMap> gaze, std::size_t n) {
  spec.validate();
  if (spec.mode == DropoutMode::gaze) {
    if (gaze.empty()) throw ConfigError("gaze-modulated dropout requires a gaze map per sample");
    if (gaze.size() != 1 && gaze.size() != n) {
      throw ShapeError("expected 1 or " + std::to_string(n) + " gaze maps, got " + std::to_string(gaze.size()));
    }
  }
  DropoutSpec s = spec;
  if (s.blob_canvas_h == 0) s.blob_canvas_h = net.arch().in_h;
  if (s.blob_canvas_w == 0) s.blob_canvas_w = net.arch().in_w;
  BatchKeepMasks out;
  out.owned.resize(net.slot_count());
  out.view.resize(net.slot_count());
  for (std::size_t slot = 0; slot < net.slot_count(); ++slot) {
    const auto [h, w] = net.slot_size(slot);
    auto& owned = out.owned[slot];
    if (s.mode == DropoutMode::gaze && gaze.size() > 1) {
      for (const auto& g : gaze) owned.push_back(keep_mask_for(s, &g, h, w));
    } else {
      owned.push_back(keep_mask_for(s, gaze.empty() ? nullptr : &gaze.front(), h, w));
    }
    for (std::size_t i = 0; i < n; ++i) out.view[slot].push_back(&owned[owned.size() == 1 ? 0 : i]);
  }
  return out;
}

// Realizes per-slot multipliers for a batch. Slot 0 masks for all samples are
// drawn before slot 1, so a given rng reproduces the same masks.
inline std::vector<Tensor> realize_slot_multipliers(const DropoutSpec& spec, const SlotKeepMasks& keep,
                                                    RngStream& rng) {
  std::vector<Tensor> out;
  out.reserve(keep.size());
  for (const auto& per_sample : keep) out.push_back(realize_multipliers(spec, per_sample, rng));
  return out;
}

template <typename Scalar>
std::vector<Scalar> forward_with_masks(const BasicPilotNet<Scalar>& net, std::span<const Scalar> frames,
                                       std::size_t n, const DropoutSpec& spec, const SlotKeepMasks& keep,
                                       RngStream& rng, ForwardCache<Scalar>& cache) {
  const bool identity = spec.phase == Phase::test && spec.mode == DropoutMode::uniform && !spec.calibrated;
  std::vector<Tensor> mult;
  std::vector<const Tensor*> ptrs(net.slot_count(), nullptr);
  if (!identity) {
    mult = realize_slot_multipliers(spec, keep, rng);
    for (std::size_t i = 0; i < mult.size(); ++i) ptrs[i] = &mult[i];
  }
  return net.forward(frames, n, ptrs, cache);
}

namespace detail {

inline std::size_t check_frames(const PilotNetMini& net, const Tensor& frames) {
  const auto& a = net.arch();
  if (frames.rank() != 4 || frames.extent(1) != a.in_h || frames.extent(2) != a.in_w || frames.extent(3) != a.in_c) {
    throw ShapeError("frames " + shape_string(frames.shape()) + " do not match the configured resolution (N," +
                     std::to_string(a.in_h) + "," + std::to_string(a.in_w) + "," + std::to_string(a.in_c) + ")");
  }
  return static_cast<std::size_t>(frames.extent(0));
}

}  // namespace detail

// Steering in degrees for frames (N, H, W, 1) with values in [0, 1].
inline Tensor forward(const PilotNetMini& net, const Tensor& frames, const DropoutSpec& spec,
                      std::span<const GazeMap> gaze, RngStream& rng) {
  const std::size_t n = detail::check_frames(net, frames);
  const BatchKeepMasks keep = build_keep_masks(net, spec, gaze, n);
  ForwardCache<float> cache;
  auto y = forward_with_masks(net, frames.values(), n, spec, keep.view, rng, cache);
  return Tensor({static_cast<std::int64_t>(n)}, std::move(y));
}

struct LossAndGrads {
  double loss = 0.0;  // mean squared error, deg^2
  AlignedVector<float> grads;
};

template <typename Scalar>
double mse_and_output_grad(std::span<const Scalar> y, std::span<const float> targets, std::vector<Scalar>& dy) {
  if (y.size() != targets.size()) throw ShapeError("targets length must equal batch size");
  double loss = 0.0;
  dy.resize(y.size());
  const double inv = 1.0 / static_cast<double>(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (!std::isfinite(targets[i])) throw ParameterError("targets must be finite");
    const double e = static_cast<double>(y[i]) - static_cast<double>(targets[i]);
    loss += e * e;
    dy[i] = static_cast<Scalar>(2.0 * e * inv);
  }
  return loss * inv;
}

// Mean squared error and its gradient. Dropout masks are drawn once and
// shared by the forward and backward passes.
inline LossAndGrads backward(const PilotNetMini& net, const Tensor& frames, const Tensor& targets,
                             const DropoutSpec& spec, std::span<const GazeMap> gaze, RngStream& rng) {
  const std::size_t n = detail::check_frames(net, frames);
  if (targets.size() != n) throw ShapeError("targets length must equal batch size");
  const BatchKeepMasks keep = build_keep_masks(net, spec, gaze, n);
  ForwardCache<float> cache;
  const auto y = forward_with_masks(net, frames.values(), n, spec, keep.view, rng, cache);
  std::vector<float> dy;
  LossAndGrads out;
  out.loss = mse_and_output_grad<float>(y, targets.values(), dy);
  out.grads.resize(net.parameter_count());
  net.backward(cache, dy, out.grads);
  return out;
}

}  // namespace gazedrop
