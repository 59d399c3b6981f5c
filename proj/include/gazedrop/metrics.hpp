#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <span>
#include <vector>

#include "gazedrop/dropout.hpp"
#include "gazedrop/error.hpp"
#include "gazedrop/gazefield.hpp"
#include "gazedrop/net.hpp"
#include "gazedrop/rng.hpp"

namespace gazedrop {

inline constexpr double kKlEpsilon = 1e-7;

namespace detail {

inline void check_same_shape(const GazeMap& p, const GazeMap& q) {
  if (p.height() != q.height() || p.width() != q.width()) {
    throw ShapeError("gaze maps differ in shape: " + std::to_string(p.height()) + "x" + std::to_string(p.width()) +
                     " vs " + std::to_string(q.height()) + "x" + std::to_string(q.width()));
  }
}

inline double map_sum(const GazeMap& g) {
  double s = 0.0;
  for (float v : g.values()) s += v;
  return s;
}

}  // namespace detail

// KL(p_real || q_est) in nats. Both maps are normalized to unit sum. The
// ratio is smoothed as (p + eps) / (q + eps) so an empty estimate pixel stays
// finite and identical maps give exactly 0.
inline double kl_divergence(const GazeMap& p_real, const GazeMap& q_est, double eps = kKlEpsilon) {
  detail::check_same_shape(p_real, q_est);
  const double sp = detail::map_sum(p_real);
  const double sq = detail::map_sum(q_est);
  if (!(sp > 0.0) || !(sq > 0.0)) throw MetricError("KL divergence is undefined for a zero-sum map");
  const auto pv = p_real.values();
  const auto qv = q_est.values();
  double kl = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const double p = pv[i] / sp;
    if (p <= 0.0) continue;
    kl += p * std::log((p + eps) / (qv[i] / sq + eps));
  }
  return kl;
}

inline double pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ShapeError("correlation inputs differ in length");
  if (x.size() < 2) throw MetricError("correlation needs at least two values");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (!(sxx > 0.0) || !(syy > 0.0)) throw MetricError("correlation is undefined for a constant input");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

// Pearson correlation over pixels.
inline double correlation_coefficient(const GazeMap& p, const GazeMap& q) {
  detail::check_same_shape(p, q);
  std::vector<double> x(p.values().begin(), p.values().end());
  std::vector<double> y(q.values().begin(), q.values().end());
  return pearson(x, y);
}

// Average ranks, ties sharing the mean rank.
inline std::vector<double> ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = rank;
    i = j + 1;
  }
  return r;
}

inline double spearman(std::span<const double> x, std::span<const double> y) {
  const auto rx = ranks(x);
  const auto ry = ranks(y);
  return pearson(rx, ry);
}

inline double mae_steering(std::span<const double> pred, std::span<const double> target) {
  if (pred.size() != target.size()) throw ShapeError("prediction and target lengths differ");
  if (pred.empty()) throw MetricError("MAE of an empty set");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += std::abs(pred[i] - target[i]);
  return s / static_cast<double>(pred.size());
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw MetricError("median of an empty set");
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 == 1 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

struct Moments {
  double mean = 0.0;
  double variance = 0.0;  // biased, 1/T
};

// Mean and 1/T variance of T draws from `sample`.
inline Moments mc_moments(const std::function<double()>& sample, int T) {
  if (T < 1) throw ParameterError("number of stochastic passes T must be >= 1");
  double sum = 0.0, sq = 0.0;
  std::vector<double> ys(static_cast<std::size_t>(T));
  for (auto& y : ys) {
    y = sample();
    sum += y;
  }
  const double mean = sum / T;
  for (double y : ys) sq += (y - mean) * (y - mean);
  return {mean, sq / T};
}

struct UncertaintyReport {
  std::vector<double> mean;      // per-sample mean steering, deg
  std::vector<double> variance;  // per-sample variance, deg^2
  int T = 0;
  double average_variance = 0.0;
  double average_drop = 0.0;
};

// MC-dropout statistics of T stochastic passes for each frame of a batch.
// All T passes of a frame see independent masks; the batch is replicated so a
// whole chunk of passes runs as one forward call.
inline UncertaintyReport mc_dropout_stats(const PilotNetMini& net, const Tensor& frames, const DropoutSpec& spec,
                                          std::span<const GazeMap> gaze, int T, RngStream& rng,
                                          std::size_t chunk = 64) {
  if (T < 1) throw ParameterError("number of stochastic passes T must be >= 1");
  const std::size_t n = detail::check_frames(net, frames);
  const DropoutSpec train = spec.with_phase(Phase::train);
  const std::size_t frame_size = frames.size() / std::max<std::size_t>(n, 1);
  const BatchKeepMasks keep = build_keep_masks(net, train, gaze, n);

  UncertaintyReport rep;
  rep.T = T;
  rep.mean.assign(n, 0.0);
  rep.variance.assign(n, 0.0);
  std::vector<std::vector<double>> ys(n);
  ForwardCache<float> cache;
  const std::size_t total = n * static_cast<std::size_t>(T);
  std::vector<float> batch;
  SlotKeepMasks view(net.slot_count());
  for (std::size_t start = 0; start < total; start += chunk) {
    const std::size_t m = std::min(chunk, total - start);
    batch.resize(m * frame_size);
    for (auto& v : view) v.clear();
    for (std::size_t b = 0; b < m; ++b) {
      const std::size_t i = (start + b) % n;
      std::copy_n(frames.data() + i * frame_size, frame_size, batch.data() + b * frame_size);
      for (std::size_t slot = 0; slot < view.size(); ++slot) view[slot].push_back(keep.view[slot][i]);
    }
    const auto y = forward_with_masks<float>(net, batch, m, train, view, rng, cache);
    for (std::size_t b = 0; b < m; ++b) ys[(start + b) % n].push_back(y[b]);
  }
  double avg = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (double y : ys[i]) s += y;
    const double mean = s / T;
    double v = 0.0;
    for (double y : ys[i]) v += (y - mean) * (y - mean);
    rep.mean[i] = mean;
    rep.variance[i] = v / T;
    avg += rep.variance[i];
  }
  rep.average_variance = n ? avg / static_cast<double>(n) : 0.0;
  return rep;
}

// Mean of (1 - K) over maps and pixels of an (h, w) feature map.
inline double average_drop_probability(const DropoutSpec& spec, std::span<const GazeMap> maps, std::int64_t h,
                                       std::int64_t w) {
  spec.validate();
  if (spec.mode == DropoutMode::uniform) return spec.dp;
  if (spec.mode == DropoutMode::center_blob) return keep_mask_for(spec, nullptr, h, w).average_drop();
  if (maps.empty()) throw MetricError("average drop probability of an empty gaze-map set");
  double s = 0.0;
  for (const auto& g : maps) s += make_keep_mask(g, spec.dp, h, w).average_drop();
  return s / static_cast<double>(maps.size());
}

// Same, averaged over the net's dropout slots (each at its own resolution).
inline double average_drop_probability(const PilotNetMini& net, const DropoutSpec& spec,
                                       std::span<const GazeMap> maps) {
  DropoutSpec s = spec;
  if (s.blob_canvas_h == 0) s.blob_canvas_h = net.arch().in_h;
  if (s.blob_canvas_w == 0) s.blob_canvas_w = net.arch().in_w;
  double acc = 0.0;
  for (std::size_t slot = 0; slot < net.slot_count(); ++slot) {
    const auto [h, w] = net.slot_size(slot);
    acc += average_drop_probability(s, maps, h, w);
  }
  return acc / static_cast<double>(net.slot_count());
}

}  // namespace gazedrop
