#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gazedrop/dropout.hpp"
#include "gazedrop/error.hpp"
#include "gazedrop/simworld/closed_loop.hpp"
#include "gazedrop/simworld/dataset.hpp"
#include "gazedrop/simworld/world.hpp"
#include "gazedrop/train.hpp"

namespace gazedrop::experiment {

using nlohmann::json;

// Which gaze maps a variant consumes.
enum class GazeKind { none, real, estimated };

inline std::string_view to_string(GazeKind g) {
  switch (g) {
    case GazeKind::none: return "none";
    case GazeKind::real: return "real";
    case GazeKind::estimated: return "estimated";
  }
  return "none";
}

struct Variant {
  std::string name;
  DropoutSpec dropout;
  GazeKind gaze = GazeKind::none;
};

struct WorldConfig {
  std::vector<std::uint64_t> seen_tracks{101, 102};
  std::vector<std::uint64_t> unseen_tracks{201, 202, 203};
  sim::TrackParams seen = sim::TrackParams::seen_pool();
  sim::TrackParams unseen = sim::TrackParams::unseen_pool();
};

struct UncertaintyConfig {
  int T = 50;
  int frames_per_split = 150;
  std::string matched_reference = "gaze-real";
  std::vector<double> sweep_dps{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8};
  std::vector<std::string> sweep_variants{"uniform", "gaze-real"};
  std::uint64_t sweep_seed = 1;
  std::string sweep_branch = "follow";
};

struct ClosedLoopSettings {
  int episodes_per_seed = 10;
  std::vector<std::string> variants;  // empty: all variants
  bool step_logs = false;
  sim::ClosedLoopConfig sim;
};

struct ExperimentConfig {
  std::uint64_t seed = 2018;
  std::filesystem::path output_dir = "runs/default";
  WorldConfig world;
  sim::DatasetConfig dataset;
  std::vector<int> seen_test_trials{3};
  TrainConfig train;
  std::vector<Variant> variants;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  UncertaintyConfig uncertainty;
  ClosedLoopSettings closed_loop;

  const Variant& variant(const std::string& name) const {
    for (const auto& v : variants) {
      if (v.name == name) return v;
    }
    throw ConfigError("unknown variant '" + name + "'");
  }
};

namespace detail {

// Reads one JSON object against a fixed key set; every error names the JSON
// pointer of the offending value.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string ptr) : j_(j), ptr_(std::move(ptr)) {
    if (!j_.is_object()) throw ConfigError(where() + ": expected an object");
  }

  // Rejects keys that no accessor asked for.
  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError(ptr_ + "/" + k + ": unknown key");
    }
  }

  std::string where(const std::string& key = {}) const {
    const std::string p = key.empty() ? ptr_ : ptr_ + "/" + key;
    return p.empty() ? "/" : p;
  }

  const json* find(const std::string& key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  double number(const std::string& key, double def, double lo, double hi) {
    const json* v = find(key);
    if (!v) return def;
    if (!v->is_number()) throw ConfigError(where(key) + ": expected a number");
    const double x = v->get<double>();
    if (!(x >= lo && x <= hi)) {
      throw ConfigError(where(key) + ": value " + v->dump() + " outside [" + fmt(lo) + ", " + fmt(hi) + "]");
    }
    return x;
  }

  std::int64_t integer(const std::string& key, std::int64_t def, std::int64_t lo, std::int64_t hi) {
    const json* v = find(key);
    if (!v) return def;
    if (!v->is_number_integer()) throw ConfigError(where(key) + ": expected an integer");
    const auto x = v->get<std::int64_t>();
    if (x < lo || x > hi) {
      throw ConfigError(where(key) + ": value " + v->dump() + " outside [" + std::to_string(lo) + ", " +
                        std::to_string(hi) + "]");
    }
    return x;
  }

  std::uint64_t seed(const std::string& key, std::uint64_t def) {
    const json* v = find(key);
    if (!v) return def;
    if (!v->is_number_unsigned()) throw ConfigError(where(key) + ": expected a nonnegative integer");
    return v->get<std::uint64_t>();
  }

  bool boolean(const std::string& key, bool def) {
    const json* v = find(key);
    if (!v) return def;
    if (!v->is_boolean()) throw ConfigError(where(key) + ": expected a boolean");
    return v->get<bool>();
  }

  std::string string(const std::string& key, std::string def) {
    const json* v = find(key);
    if (!v) return def;
    if (!v->is_string()) throw ConfigError(where(key) + ": expected a string");
    return v->get<std::string>();
  }

  template <typename T, typename F>
  std::vector<T> array(const std::string& key, std::vector<T> def, F&& item, bool allow_empty = false) {
    const json* v = find(key);
    if (!v) return def;
    if (!v->is_array()) throw ConfigError(where(key) + ": expected an array");
    if (v->empty() && !allow_empty) throw ConfigError(where(key) + ": must not be empty");
    std::vector<T> out;
    for (std::size_t i = 0; i < v->size(); ++i) out.push_back(item((*v)[i], where(key) + "/" + std::to_string(i)));
    return out;
  }

  template <typename F>
  void object(const std::string& key, F&& body) {
    const json* v = find(key);
    if (!v) return;
    ObjectReader sub(*v, where(key));
    body(sub);
    sub.finish();
  }

 private:
  static std::string fmt(double x) {
    std::ostringstream os;
    os << x;
    return os.str();
  }

  const json& j_;
  std::string ptr_;
  std::set<std::string> seen_;
};

inline std::uint64_t seed_item(const json& v, const std::string& ptr) {
  if (!v.is_number_unsigned()) throw ConfigError(ptr + ": expected a nonnegative integer");
  return v.get<std::uint64_t>();
}

inline double unit_item(const json& v, const std::string& ptr) {
  if (!v.is_number() || !(v.get<double>() >= 0.0 && v.get<double>() <= 1.0)) {
    throw ConfigError(ptr + ": expected a number in [0, 1]");
  }
  return v.get<double>();
}

inline std::string string_item(const json& v, const std::string& ptr) {
  if (!v.is_string()) throw ConfigError(ptr + ": expected a string");
  return v.get<std::string>();
}

inline void read_track_params(ObjectReader& r, sim::TrackParams& p) {
  p.length = r.number("length", p.length, 1.0, 1e6);
  p.max_curvature = r.number("max_curvature", p.max_curvature, 0.0, 1.0);
  p.min_segment = r.number("min_segment", p.min_segment, 1.0, 1e6);
  p.max_segment = r.number("max_segment", p.max_segment, 1.0, 1e6);
  p.straight_probability = r.number("straight_probability", p.straight_probability, 0.0, 1.0);
  try {
    p.validate();
  } catch (const ParameterError& e) {
    throw ConfigError(r.where() + ": " + e.what());
  }
}

inline void read_gaze(ObjectReader& r, GazeOracleConfig& g) {
  g.sigma_frac = r.number("sigma_frac", g.sigma_frac, 1e-6, 10.0);
  g.jitter_frac = r.number("jitter_frac", g.jitter_frac, 0.0, 10.0);
  g.noise = r.number("noise", g.noise, 0.0, 10.0);
}

inline void read_traffic(ObjectReader& r, sim::TrafficConfig& t) {
  t.enabled = r.boolean("enabled", t.enabled);
  t.first_gap_min = r.number("first_gap_min", t.first_gap_min, 0.0, 1e6);
  t.first_gap_max = r.number("first_gap_max", t.first_gap_max, t.first_gap_min, 1e6);
  t.spacing_min = r.number("spacing_min", t.spacing_min, 1.0, 1e6);
  t.spacing_max = r.number("spacing_max", t.spacing_max, t.spacing_min, 1e6);
  t.speed_min = r.number("speed_min", t.speed_min, 0.0, 100.0);
  t.speed_max = r.number("speed_max", t.speed_max, t.speed_min, 100.0);
}

inline Variant read_variant(const json& v, const std::string& ptr) {
  ObjectReader r(v, ptr);
  Variant out;
  out.name = r.string("name", "");
  if (out.name.empty()) throw ConfigError(r.where("name") + ": variant name required");
  try {
    out.dropout.mode = parse_dropout_mode(r.string("mode", "uniform"));
  } catch (const Error& e) {
    throw ConfigError(r.where("mode") + ": " + e.what());
  }
  out.dropout.dp = r.number("dp", 0.0, 0.0, 1.0);
  out.dropout.blob_sigma = r.number("blob_sigma", out.dropout.blob_sigma, 1e-6, 1e6);
  out.dropout.calibrated = r.boolean("calibrated", false);
  const std::string gaze = r.string("gaze", out.dropout.mode == DropoutMode::gaze ? "real" : "none");
  if (gaze == "none") {
    out.gaze = GazeKind::none;
  } else if (gaze == "real") {
    out.gaze = GazeKind::real;
  } else if (gaze == "estimated") {
    out.gaze = GazeKind::estimated;
  } else {
    throw ConfigError(r.where("gaze") + ": expected one of none, real, estimated");
  }
  if ((out.dropout.mode == DropoutMode::gaze) != (out.gaze != GazeKind::none)) {
    throw ConfigError(r.where("gaze") + ": gaze maps are required by, and only by, mode 'gaze'");
  }
  r.finish();
  return out;
}

inline std::vector<Variant> default_variants() {
  auto make = [](std::string name, DropoutMode m, double dp, GazeKind g) {
    Variant v;
    v.name = std::move(name);
    v.dropout.mode = m;
    v.dropout.dp = dp;
    v.gaze = g;
    return v;
  };
  return {make("uniform", DropoutMode::uniform, 0.1, GazeKind::none),
          make("gaze-real", DropoutMode::gaze, 0.7, GazeKind::real),
          make("gaze-estimated", DropoutMode::gaze, 0.7, GazeKind::estimated),
          make("center_blob", DropoutMode::center_blob, 0.7, GazeKind::none)};
}

}  // namespace detail

// Parses and validates an experiment document. Unknown keys and
// out-of-range values are rejected with their JSON pointer.
inline ExperimentConfig parse_config(const json& doc) {
  using detail::ObjectReader;
  ExperimentConfig c;
  c.variants = detail::default_variants();
  ObjectReader r(doc, "");
  c.seed = r.seed("seed", c.seed);
  c.output_dir = r.string("output_dir", c.output_dir.string());

  r.object("world", [&](ObjectReader& w) {
    c.world.seen_tracks = w.array<std::uint64_t>("seen_tracks", c.world.seen_tracks, detail::seed_item);
    c.world.unseen_tracks = w.array<std::uint64_t>("unseen_tracks", c.world.unseen_tracks, detail::seed_item);
    const double lw = w.number("lane_width", c.world.seen.lane_width, 0.5, 20.0);
    const auto lanes = static_cast<int>(w.integer("lane_count", c.world.seen.lane_count, 1, 8));
    for (auto* p : {&c.world.seen, &c.world.unseen}) {
      p->lane_width = lw;
      p->lane_count = lanes;
    }
    w.object("seen", [&](ObjectReader& s) { detail::read_track_params(s, c.world.seen); });
    w.object("unseen", [&](ObjectReader& s) { detail::read_track_params(s, c.world.unseen); });
  });

  r.object("dataset", [&](ObjectReader& d) {
    auto& ds = c.dataset;
    ds.trials_per_track = static_cast<int>(d.integer("trials_per_track", ds.trials_per_track, 1, 1000));
    ds.samples_per_trial = static_cast<int>(d.integer("samples_per_trial", ds.samples_per_trial, 1, 1000000));
    ds.sample_every = static_cast<int>(d.integer("sample_every", ds.sample_every, 1, 1000));
    ds.recovery_fraction = d.number("recovery_fraction", ds.recovery_fraction, 0.0, 1.0);
    ds.recovery_samples_per_episode =
        static_cast<int>(d.integer("recovery_samples_per_episode", ds.recovery_samples_per_episode, 1, 100000));
    d.object("traffic", [&](ObjectReader& t) { detail::read_traffic(t, ds.traffic); });
    d.object("gaze_real", [&](ObjectReader& g) { detail::read_gaze(g, ds.gaze_real); });
    d.object("gaze_estimated", [&](ObjectReader& g) { detail::read_gaze(g, ds.gaze_est); });
    c.seen_test_trials = d.array<int>("seen_test_trials", c.seen_test_trials, [&](const json& v, const std::string& p) {
      if (!v.is_number_integer() || v.get<int>() < 0) throw ConfigError(p + ": expected a trial index");
      return v.get<int>();
    });
  });
  for (int t : c.seen_test_trials) {
    if (t >= c.dataset.trials_per_track) {
      throw ConfigError("/dataset/seen_test_trials: trial " + std::to_string(t) + " does not exist");
    }
  }
  if (static_cast<int>(c.seen_test_trials.size()) >= c.dataset.trials_per_track) {
    throw ConfigError("/dataset/seen_test_trials: no seen trials left for training");
  }

  r.object("train", [&](ObjectReader& t) {
    auto& tc = c.train;
    tc.epochs = static_cast<int>(t.integer("epochs", tc.epochs, 1, 100000));
    tc.batch_size = static_cast<int>(t.integer("batch_size", tc.batch_size, 1, 100000));
    tc.learning_rate = t.number("learning_rate", tc.learning_rate, 1e-12, 10.0);
    tc.momentum = t.number("momentum", tc.momentum, 0.0, 0.999999);
    tc.weight_decay = t.number("weight_decay", tc.weight_decay, 0.0, 1.0);
    tc.lr_decay = t.number("lr_decay", tc.lr_decay, 1e-6, 1.0);
    try {
      tc.optimizer = parse_optimizer(t.string("optimizer", std::string(to_string(tc.optimizer))));
    } catch (const ConfigError& e) {
      throw ConfigError(t.where("optimizer") + ": " + e.what());
    }
    t.object("augment", [&](ObjectReader& a) {
      tc.augment.enabled = a.boolean("enabled", tc.augment.enabled);
      tc.augment.contrast = a.number("contrast", tc.augment.contrast, 0.0, 0.99);
      tc.augment.brightness = a.number("brightness", tc.augment.brightness, 0.0, 1.0);
      tc.augment.gamma = a.number("gamma", tc.augment.gamma, 0.0, 0.99);
    });
  });

  c.variants = r.array<Variant>("variants", c.variants, detail::read_variant);
  std::set<std::string> names;
  for (const auto& v : c.variants) {
    if (!names.insert(v.name).second) throw ConfigError("/variants: duplicate variant name '" + v.name + "'");
  }
  c.seeds = r.array<std::uint64_t>("seeds", c.seeds, detail::seed_item);

  r.object("uncertainty", [&](ObjectReader& u) {
    auto& uc = c.uncertainty;
    uc.T = static_cast<int>(u.integer("T", uc.T, 1, 1000000));
    uc.frames_per_split = static_cast<int>(u.integer("frames_per_split", uc.frames_per_split, 1, 1000000));
    uc.matched_reference = u.string("matched_reference", uc.matched_reference);
    uc.sweep_dps = u.array<double>("sweep_dps", uc.sweep_dps, detail::unit_item, true);
    uc.sweep_variants = u.array<std::string>("sweep_variants", uc.sweep_variants, detail::string_item, true);
    uc.sweep_seed = u.seed("sweep_seed", uc.sweep_seed);
    uc.sweep_branch = u.string("sweep_branch", uc.sweep_branch);
    if (uc.sweep_branch != "follow" && uc.sweep_branch != "overtake") {
      throw ConfigError(u.where("sweep_branch") + ": expected follow or overtake");
    }
  });
  if (!names.count(c.uncertainty.matched_reference)) {
    throw ConfigError("/uncertainty/matched_reference: unknown variant '" + c.uncertainty.matched_reference + "'");
  }
  for (std::size_t i = 0; i < c.uncertainty.sweep_variants.size(); ++i) {
    if (!names.count(c.uncertainty.sweep_variants[i])) {
      throw ConfigError("/uncertainty/sweep_variants/" + std::to_string(i) + ": unknown variant '" +
                        c.uncertainty.sweep_variants[i] + "'");
    }
  }

  r.object("closed_loop", [&](ObjectReader& l) {
    auto& cl = c.closed_loop;
    cl.episodes_per_seed = static_cast<int>(l.integer("episodes_per_seed", cl.episodes_per_seed, 1, 100000));
    cl.variants = l.array<std::string>("variants", cl.variants, detail::string_item, true);
    cl.step_logs = l.boolean("step_logs", cl.step_logs);
    cl.sim.episode_length = l.number("episode_length", cl.sim.episode_length, 1.0, 1e6);
    cl.sim.infraction_margin = l.number("infraction_margin", cl.sim.infraction_margin, 0.0, 100.0);
    l.object("traffic", [&](ObjectReader& t) { detail::read_traffic(t, cl.sim.traffic_cfg); });
  });
  for (std::size_t i = 0; i < c.closed_loop.variants.size(); ++i) {
    if (!names.count(c.closed_loop.variants[i])) {
      throw ConfigError("/closed_loop/variants/" + std::to_string(i) + ": unknown variant '" +
                        c.closed_loop.variants[i] + "'");
    }
  }
  if (c.closed_loop.variants.empty()) {
    for (const auto& v : c.variants) c.closed_loop.variants.push_back(v.name);
  }
  r.finish();
  // Closed-loop episodes use the same oracles and traffic model as the data.
  c.closed_loop.sim.gaze_real = c.dataset.gaze_real;
  c.closed_loop.sim.gaze_est = c.dataset.gaze_est;
  return c;
}

inline json load_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": invalid JSON: " + e.what());
  }
}

inline ExperimentConfig load_config(const std::filesystem::path& path) { return parse_config(load_json_file(path)); }

}  // namespace gazedrop::experiment
