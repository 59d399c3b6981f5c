#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gazedrop/dropout.hpp"
#include "gazedrop/error.hpp"
#include "gazedrop/gaze_oracle.hpp"
#include "gazedrop/rng.hpp"
#include "gazedrop/simworld/dataset.hpp"
#include "gazedrop/simworld/dynamics.hpp"
#include "gazedrop/simworld/expert.hpp"
#include "gazedrop/simworld/render.hpp"
#include "gazedrop/simworld/world.hpp"
#include "gazedrop/util.hpp"

namespace gazedrop::sim {

enum class GazeSource { oracle, jittered_oracle, center_blob, none };

inline std::string_view to_string(GazeSource g) {
  switch (g) {
    case GazeSource::oracle: return "oracle";
    case GazeSource::jittered_oracle: return "jittered_oracle";
    case GazeSource::center_blob: return "center_blob";
    case GazeSource::none: return "none";
  }
  return "none";
}

// A gaze-mode net needs per-frame maps; the other modes must not be fed any.
inline void check_gaze_source(const DropoutSpec& spec, GazeSource source) {
  const bool needs_map = spec.mode == DropoutMode::gaze;
  const bool has_map = source == GazeSource::oracle || source == GazeSource::jittered_oracle;
  if (needs_map != has_map) {
    throw ConfigError("dropout mode '" + std::string(to_string(spec.mode)) + "' is inconsistent with gaze source '" +
                      std::string(to_string(source)) + "'");
  }
  if (source == GazeSource::center_blob && spec.mode != DropoutMode::center_blob) {
    throw ConfigError("center_blob gaze source requires center_blob dropout");
  }
}

struct ClosedLoopConfig {
  double episode_length = 2000.0;  // m
  double dt = 0.05;
  double speed = 15.0;
  double infraction_margin = 0.3;  // beyond the road edge, m
  double start_s = 20.0;
  bool traffic = true;
  TrafficConfig traffic_cfg;
  CameraConfig camera;
  VehicleConfig vehicle;
  ExpertConfig expert;
  GazeOracleConfig gaze_real;
  GazeOracleConfig gaze_est = GazeOracleConfig::estimated();

  void validate() const {
    if (!(episode_length > 0.0) || !(dt > 0.0) || !(speed > 0.0)) {
      throw ParameterError("episode length, dt and speed must be > 0");
    }
    if (!(infraction_margin >= 0.0)) throw ParameterError("infraction margin must be >= 0");
  }
};

struct Observation {
  const Track& track;
  const WorldState& state;
  const Tensor& frame;   // (H, W, 1)
  const GazeMap* gaze;   // null for gaze source none / center_blob
  ManeuverCommand command;
};

// Steering policy in degrees; the command selects the branch.
using Driver = std::function<double(const Observation&)>;

enum class Infraction { none, off_road, collision };

struct StepRecord {
  int step = 0;
  double s = 0.0;
  double distance = 0.0;  // traveled since episode start, m
  double offset = 0.0;
  double steering_deg = 0.0;
  ManeuverCommand command = ManeuverCommand::follow;
  Infraction infraction = Infraction::none;
};

struct EpisodeLog {
  int track = 0;
  std::uint64_t seed = 0;
  bool traffic = true;
  double length = 0.0;  // m
  std::vector<StepRecord> steps;
  std::vector<double> infraction_at;  // distances, m
  int overtake_attempts = 0;
  int overtake_successes = 0;

  int infractions() const { return static_cast<int>(infraction_at.size()); }
  double dist_before_first_km() const { return (infraction_at.empty() ? length : infraction_at.front()) / 1000.0; }
  // Reset-on-infraction splits the episode into infractions + 1 pieces.
  double dist_between_km() const { return length / 1000.0 / (infractions() + 1); }
  std::optional<double> success_rate() const {
    if (overtake_attempts == 0) return std::nullopt;
    return static_cast<double>(overtake_successes) / overtake_attempts;
  }
};

inline std::string_view to_string(Infraction i) {
  switch (i) {
    case Infraction::none: return "none";
    case Infraction::off_road: return "off_road";
    case Infraction::collision: return "collision";
  }
  return "none";
}

inline Infraction detect_infraction(const Track& track, const WorldState& st, const VehicleConfig& vehicle,
                                    double margin) {
  if (std::abs(st.ego.offset) > track.half_width() + margin) return Infraction::off_road;
  for (const auto& car : st.traffic) {
    if (std::abs(car.s - st.ego.s) < vehicle.length &&
        std::abs(track.lane_center(car.lane) - st.ego.offset) < vehicle.width) {
      return Infraction::collision;
    }
  }
  return Infraction::none;
}

// One episode of `cfg.episode_length` meters driven by `driver`. Commands
// come from the scripted maneuver logic on the actual state. After an
// infraction the ego is put back on the center of its target lane with zero
// heading (a collided car is removed) and driving resumes.
inline EpisodeLog run_closed_loop(const Track& track, const ClosedLoopConfig& cfg, GazeSource source,
                                  const Driver& driver, std::uint64_t seed) {
  cfg.validate();
  const RngStream root(seed, 0xc1053d);
  RngStream traffic_rng = root.derive(1);
  RngStream gaze_rng = root.derive(2);
  EpisodeLog log;
  log.track = track.id;
  log.seed = seed;
  log.traffic = cfg.traffic;
  log.length = cfg.episode_length;
  if (cfg.start_s + cfg.episode_length > track.length) throw ParameterError("track shorter than the episode");

  WorldState st;
  st.ego = {cfg.start_s, track.lane_center(cfg.expert.cruise_lane), 0.0, cfg.speed};
  if (cfg.traffic) {
    st.traffic = spawn_traffic(cfg.traffic_cfg, cfg.start_s, cfg.start_s + cfg.episode_length + 100.0, traffic_rng);
  }
  struct Window {
    std::size_t index = 0;
    bool clean = true;
  };
  std::optional<Window> window;

  double traveled = 0.0;
  // A policy that stalls progress (e.g. turned around) still terminates.
  const int max_steps = static_cast<int>(std::ceil(4.0 * cfg.episode_length / (cfg.speed * cfg.dt)));
  for (int k = 0; traveled < cfg.episode_length && k < max_steps; ++k) {
    const Maneuver m = plan_maneuver(track, st, cfg.expert);
    if (st.command == ManeuverCommand::follow && m.command == ManeuverCommand::overtake && m.lead_car) {
      window = Window{*m.lead_car, true};
      ++log.overtake_attempts;
    } else if (window && st.command == ManeuverCommand::overtake && m.command == ManeuverCommand::follow) {
      const auto& car = st.traffic[window->index];
      if (window->clean && car.s < st.ego.s) ++log.overtake_successes;
      window.reset();
    }
    st.command = m.command;

    const Tensor frame = render_view(track, st, cfg.camera, cfg.vehicle);
    std::optional<GazeMap> gaze;
    switch (source) {
      case GazeSource::oracle:
        gaze = gaze_oracle(track, st, cfg.camera, cfg.gaze_real, nullptr, cfg.vehicle);
        break;
      case GazeSource::jittered_oracle: {
        RngStream r = gaze_rng.derive(static_cast<std::uint64_t>(k));
        gaze = gaze_oracle(track, st, cfg.camera, cfg.gaze_est, &r, cfg.vehicle);
        break;
      }
      case GazeSource::center_blob:
      case GazeSource::none:
        break;
    }
    const double steering = driver(Observation{track, st, frame, gaze ? &*gaze : nullptr, st.command});
    if (!std::isfinite(steering)) throw DataError("driver returned a non-finite steering angle");

    const double s_before = st.ego.s;
    st = step(track, st, steering, cfg.dt, cfg.vehicle);
    traveled += st.ego.s - s_before;
    StepRecord rec{k, st.ego.s, traveled, st.ego.offset, steering, st.command, Infraction::none};
    rec.infraction = detect_infraction(track, st, cfg.vehicle, cfg.infraction_margin);
    if (rec.infraction != Infraction::none && traveled < cfg.episode_length) {
      log.infraction_at.push_back(traveled);
      if (window) window->clean = false;
      if (rec.infraction == Infraction::collision) {
        for (std::size_t i = 0; i < st.traffic.size(); ++i) {
          const auto& car = st.traffic[i];
          if (std::abs(car.s - st.ego.s) < cfg.vehicle.length &&
              std::abs(track.lane_center(car.lane) - st.ego.offset) < cfg.vehicle.width) {
            // Parked far behind instead of erased so traffic indices stay valid.
            st.traffic[i] = {car.lane, -1e6, 0.0};
          }
        }
      }
      st.ego.offset = plan_maneuver(track, st, cfg.expert).target_offset;
      st.ego.heading = 0.0;
    }
    log.steps.push_back(rec);
  }
  // A maneuver cut off by the end of the episode is neither success nor failure.
  if (window) --log.overtake_attempts;
  return log;
}

// Per-step CSV for one episode.
inline std::string episode_csv(const EpisodeLog& log) {
  std::string out = "step,s,distance,offset,steering_deg,command,infraction\n";
  for (const auto& r : log.steps) {
    out += std::to_string(r.step) + "," + fmt_double(r.s, 3) + "," + fmt_double(r.distance, 3) + "," +
           fmt_double(r.offset, 4) + "," + fmt_double(r.steering_deg, 4) + "," + std::string(to_string(r.command)) +
           "," + std::string(to_string(r.infraction)) + "\n";
  }
  return out;
}

inline nlohmann::json episode_summary(const EpisodeLog& log) {
  nlohmann::json j = {{"track", log.track},
                      {"seed", log.seed},
                      {"traffic", log.traffic},
                      {"length_km", log.length / 1000.0},
                      {"infractions", log.infractions()},
                      {"dist_before_first_km", log.dist_before_first_km()},
                      {"dist_between_km", log.dist_between_km()},
                      {"overtake_attempts", log.overtake_attempts},
                      {"overtake_successes", log.overtake_successes}};
  const auto rate = log.success_rate();
  j["success_rate"] = rate ? nlohmann::json(*rate) : nlohmann::json(nullptr);
  return j;
}

}  // namespace gazedrop::sim
