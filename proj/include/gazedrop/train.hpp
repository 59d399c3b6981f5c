#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gazedrop/checkpoint.hpp"
#include "gazedrop/dropout.hpp"
#include "gazedrop/error.hpp"
#include "gazedrop/gazefield.hpp"
#include "gazedrop/metrics.hpp"
#include "gazedrop/net.hpp"
#include "gazedrop/rng.hpp"
#include "gazedrop/util.hpp"

namespace gazedrop {

enum class OptimizerKind { sgd_momentum, adam };

inline std::string_view to_string(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "sgd_momentum"; }

inline OptimizerKind parse_optimizer(std::string_view s) {
  if (s == "sgd_momentum" || s == "sgd") return OptimizerKind::sgd_momentum;
  if (s == "adam") return OptimizerKind::adam;
  throw ConfigError("unknown optimizer '" + std::string(s) + "'");
}

// Photometric jitter applied per image before the net's mean-centering:
// x -> clamp((x^gamma - 0.5) * contrast + 0.5 + brightness, 0, 1).
struct AugmentConfig {
  bool enabled = true;
  double contrast = 0.25;    // factor drawn from [1 - c, 1 + c]
  double brightness = 0.1;   // offset drawn from [-b, b]
  double gamma = 0.3;        // exponent drawn from [1 - g, 1 + g]
};

inline void augment_in_place(std::span<float> x, const AugmentConfig& a, RngStream& rng) {
  if (!a.enabled) return;
  const double c = rng.uniform(1.0 - a.contrast, 1.0 + a.contrast);
  const double b = rng.uniform(-a.brightness, a.brightness);
  const double g = rng.uniform(1.0 - a.gamma, 1.0 + a.gamma);
  for (float& v : x) {
    const double y = (std::pow(std::max(0.0f, v), g) - 0.5) * c + 0.5 + b;
    v = static_cast<float>(std::clamp(y, 0.0, 1.0));
  }
}

struct TrainConfig {
  std::string branch = "follow";
  DropoutSpec dropout;
  ArchConfig arch = ArchConfig::pilotnet();
  int epochs = 10;
  int batch_size = 64;
  double learning_rate = 1e-3;
  double momentum = 0.9;
  double weight_decay = 0.0;
  double lr_decay = 1.0;  // multiplicative per epoch
  OptimizerKind optimizer = OptimizerKind::sgd_momentum;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  AugmentConfig augment;

  void validate() const {
    dropout.validate();
    arch.validate();
    if (epochs < 1 || batch_size < 1) throw ConfigError("epochs and batch size must be >= 1");
    if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
    if (!(lr_decay > 0.0)) throw ConfigError("lr decay must be > 0");
  }
};

// One training or evaluation example: a frame (H, W, 1) in [0, 1], its
// steering label, and its gaze map when the dropout mode needs one.
struct TrainSample {
  std::string id;
  Tensor frame;
  float steering = 0.0f;
  std::optional<GazeMap> gaze;
};

struct EpochStats {
  int epoch = 0;
  std::string split;
  double mse = 0.0;
  double mae = 0.0;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<EpochStats> trace;
};

inline std::string loss_trace_csv(std::span<const EpochStats> trace) {
  std::string out = "epoch,split,mse,mae\n";
  for (const auto& e : trace) {
    out += std::to_string(e.epoch) + "," + e.split + "," + fmt_double(e.mse) + "," + fmt_double(e.mae) + "\n";
  }
  return out;
}

class Optimizer {
 public:
  Optimizer(const TrainConfig& cfg, std::size_t n) : cfg_(cfg), m_(n, 0.0f), v_(cfg.optimizer == OptimizerKind::adam ? n : 0, 0.0f) {}

  void step(std::span<float> params, std::span<const float> grads, double lr) {
    ++t_;
    const auto wd = static_cast<float>(cfg_.weight_decay);
    if (cfg_.optimizer == OptimizerKind::sgd_momentum) {
      const auto mu = static_cast<float>(cfg_.momentum);
      const auto eta = static_cast<float>(lr);
      for (std::size_t i = 0; i < params.size(); ++i) {
        m_[i] = mu * m_[i] + grads[i] + wd * params[i];
        params[i] -= eta * m_[i];
      }
      return;
    }
    const double b1 = cfg_.adam_beta1, b2 = cfg_.adam_beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    const auto step = static_cast<float>(lr * std::sqrt(c2) / c1);
    const auto eps = static_cast<float>(cfg_.adam_eps * std::sqrt(c2));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const float g = grads[i] + wd * params[i];
      m_[i] = static_cast<float>(b1) * m_[i] + static_cast<float>(1.0 - b1) * g;
      v_[i] = static_cast<float>(b2) * v_[i] + static_cast<float>(1.0 - b2) * g * g;
      params[i] -= step * m_[i] / (std::sqrt(v_[i]) + eps);
    }
  }

 private:
  TrainConfig cfg_;
  std::vector<float> m_;
  std::vector<float> v_;
  std::uint64_t t_ = 0;
};

// Keep masks for every sample and slot, built once: keep[slot][sample].
struct DatasetKeepMasks {
  std::vector<std::vector<KeepMask>> owned;
  SlotKeepMasks view;
};

inline DatasetKeepMasks dataset_keep_masks(const PilotNetMini& net, const DropoutSpec& spec,
                                           std::span<const TrainSample> data) {
  DatasetKeepMasks out;
  out.owned.resize(net.slot_count());
  out.view.resize(net.slot_count());
  DropoutSpec s = spec;
  if (s.blob_canvas_h == 0) s.blob_canvas_h = net.arch().in_h;
  if (s.blob_canvas_w == 0) s.blob_canvas_w = net.arch().in_w;
  for (std::size_t slot = 0; slot < net.slot_count(); ++slot) {
    const auto [h, w] = net.slot_size(slot);
    auto& owned = out.owned[slot];
    if (s.mode == DropoutMode::gaze) {
      owned.reserve(data.size());
      for (const auto& d : data) {
        if (!d.gaze) throw DataError("sample '" + d.id + "' has no gaze map but gaze dropout needs one");
        owned.push_back(keep_mask_for(s, &*d.gaze, h, w));
      }
    } else {
      owned.push_back(keep_mask_for(s, nullptr, h, w));
    }
    for (std::size_t i = 0; i < data.size(); ++i) out.view[slot].push_back(&owned[owned.size() == 1 ? 0 : i]);
  }
  return out;
}

namespace detail {

inline std::size_t frame_volume(const ArchConfig& a) { return static_cast<std::size_t>(a.in_h * a.in_w * a.in_c); }

inline void check_samples(const ArchConfig& a, std::span<const TrainSample> data) {
  for (const auto& d : data) {
    if (d.frame.size() != frame_volume(a)) {
      throw DataError("sample '" + d.id + "' frame " + shape_string(d.frame.shape()) +
                      " does not match the configured resolution");
    }
    if (!std::isfinite(d.steering)) throw DataError("sample '" + d.id + "' has a non-finite steering label");
  }
}

}  // namespace detail

// Test-phase predictions (deg) for every sample.
inline std::vector<double> predict(const PilotNetMini& net, const DropoutSpec& spec, std::span<const TrainSample> data,
                                   std::size_t batch = 128) {
  detail::check_samples(net.arch(), data);
  const DropoutSpec test = spec.with_phase(Phase::test);
  const DatasetKeepMasks keep = dataset_keep_masks(net, test, data);
  const std::size_t fv = detail::frame_volume(net.arch());
  std::vector<double> out;
  out.reserve(data.size());
  ForwardCache<float> cache;
  std::vector<float> frames;
  SlotKeepMasks view(net.slot_count());
  RngStream unused(0);
  for (std::size_t start = 0; start < data.size(); start += batch) {
    const std::size_t m = std::min(batch, data.size() - start);
    frames.resize(m * fv);
    for (auto& v : view) v.clear();
    for (std::size_t b = 0; b < m; ++b) {
      std::copy_n(data[start + b].frame.data(), fv, frames.data() + b * fv);
      for (std::size_t s = 0; s < view.size(); ++s) view[s].push_back(keep.view[s][start + b]);
    }
    const auto y = forward_with_masks<float>(net, frames, m, test, view, unused, cache);
    out.insert(out.end(), y.begin(), y.end());
  }
  return out;
}

inline EpochStats evaluate(const PilotNetMini& net, const DropoutSpec& spec, std::span<const TrainSample> data,
                           int epoch, std::string split) {
  if (data.empty()) throw DataError("split '" + split + "' has no samples");
  const auto pred = predict(net, spec, data);
  double se = 0.0, ae = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double e = pred[i] - data[i].steering;
    se += e * e;
    ae += std::abs(e);
  }
  const double n = static_cast<double>(data.size());
  return {epoch, std::move(split), se / n, ae / n};
}

// Minibatch behavioral cloning. The order of batches, augmentation draws and
// dropout masks are all keyed by the seed, so a run is reproducible.
inline TrainResult train(std::span<const TrainSample> data, const TrainConfig& cfg,
                         std::span<const TrainSample> validation = {}) {
  cfg.validate();
  if (data.empty()) throw DataError("training set is empty");
  detail::check_samples(cfg.arch, data);
  detail::check_samples(cfg.arch, validation);

  PilotNetMini net(cfg.arch);
  net.init_he(cfg.seed);
  const DropoutSpec train_spec = cfg.dropout.with_phase(Phase::train);
  const DatasetKeepMasks keep = dataset_keep_masks(net, train_spec, data);
  const RngStream root(cfg.seed, 0x7a1);
  Optimizer opt(cfg, net.parameter_count());

  const std::size_t fv = detail::frame_volume(cfg.arch);
  const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<float> frames(bs * fv);
  std::vector<float> targets(bs);
  std::vector<float> dy;
  AlignedVector<float> grads(net.parameter_count());
  SlotKeepMasks view(net.slot_count());
  ForwardCache<float> cache;

  TrainResult result;
  double lr = cfg.learning_rate;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    RngStream shuffle_rng = root.derive(1, static_cast<std::uint64_t>(epoch));
    shuffle_rng.shuffle(std::span<std::size_t>(order));
    RngStream mask_rng = root.derive(2, static_cast<std::uint64_t>(epoch));
    double se = 0.0, ae = 0.0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t m = std::min(bs, order.size() - start);
      for (auto& v : view) v.clear();
      for (std::size_t b = 0; b < m; ++b) {
        const std::size_t i = order[start + b];
        std::span<float> dst(frames.data() + b * fv, fv);
        std::copy_n(data[i].frame.data(), fv, dst.data());
        RngStream aug = root.derive(3, static_cast<std::uint64_t>(epoch), i);
        augment_in_place(dst, cfg.augment, aug);
        targets[b] = data[i].steering;
        for (std::size_t s = 0; s < view.size(); ++s) view[s].push_back(keep.view[s][i]);
      }
      const auto y = forward_with_masks<float>(net, std::span<const float>(frames.data(), m * fv), m, train_spec,
                                               view, mask_rng, cache);
      const double loss = mse_and_output_grad<float>(y, std::span<const float>(targets.data(), m), dy);
      if (!std::isfinite(loss)) throw Error("training diverged at epoch " + std::to_string(epoch));
      net.backward(cache, dy, grads);
      opt.step(net.parameters(), grads, lr);
      se += loss * static_cast<double>(m);
      for (std::size_t b = 0; b < m; ++b) ae += std::abs(static_cast<double>(y[b]) - targets[b]);
    }
    const double n = static_cast<double>(data.size());
    result.trace.push_back({epoch, "train", se / n, ae / n});
    if (!validation.empty()) result.trace.push_back(evaluate(net, cfg.dropout, validation, epoch, "validation"));
    lr *= cfg.lr_decay;
  }
  result.checkpoint.net = std::move(net);
  result.checkpoint.meta.seed = cfg.seed;
  result.checkpoint.meta.epoch = cfg.epochs;
  result.checkpoint.meta.branch = cfg.branch;
  result.checkpoint.meta.dropout = cfg.dropout;
  return result;
}

}  // namespace gazedrop
