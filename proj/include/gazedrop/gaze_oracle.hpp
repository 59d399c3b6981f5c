#pragma once

#include <algorithm>
#include <cmath>

#include "gazedrop/gazefield.hpp"
#include "gazedrop/rng.hpp"
#include "gazedrop/simworld/expert.hpp"
#include "gazedrop/simworld/world.hpp"

namespace gazedrop {

struct GazeOracleConfig {
  double sigma_frac = 0.06;   // blob sigma as a fraction of image width
  double jitter_frac = 0.0;   // sd of blob-center jitter as a fraction of width
  double noise = 0.0;         // additive noise amplitude relative to a unit peak
  sim::ExpertConfig expert;

  // The imperfect "estimated" condition: jittered centers plus white noise.
  static GazeOracleConfig estimated() {
    GazeOracleConfig c;
    c.jitter_frac = 0.04;
    c.noise = 0.05;
    return c;
  }
};

// Synthetic fixation map: a blob where the driver's path meets the lookahead
// distance, plus a blob on the car being overtaken when it is in view.
// `rng` is only consumed when jitter or noise is enabled.
inline GazeMap gaze_oracle(const sim::Track& track, const sim::WorldState& state, const sim::CameraConfig& cam,
                           const GazeOracleConfig& cfg, RngStream* rng = nullptr,
                           const sim::VehicleConfig& vehicle = {}) {
  const double sigma = cfg.sigma_frac * cam.width;
  const sim::Maneuver m = sim::plan_maneuver(track, state, cfg.expert);
  const auto line = sim::centerline_in_ego_frame(track, state.ego, cfg.expert.lookahead + 60.0, 2.0, 0.5);
  const bool perturb = rng != nullptr && (cfg.jitter_frac > 0.0 || cfg.noise > 0.0);

  auto jittered = [&](double v) {
    return perturb && cfg.jitter_frac > 0.0 ? v + rng->normal() * cfg.jitter_frac * cam.width : v;
  };

  const auto look = sim::track_point_in_ego_frame(line, cfg.expert.lookahead, m.target_offset);
  const auto look_px = look ? sim::project(cam, look->x, look->y) : std::nullopt;
  GazeMap g = [&] {
    if (!look_px) return center_blob(cam.height, cam.width, sigma);
    const double col = jittered(look_px->col);
    const double row = jittered(look_px->row);
    return gaussian_blob(cam.height, cam.width, col, row, sigma);
  }();

  if (m.command == sim::ManeuverCommand::overtake && m.lead_car) {
    const auto& car = state.traffic[*m.lead_car];
    const auto p = sim::track_point_in_ego_frame(line, car.s - state.ego.s - 0.5 * vehicle.length,
                                                 track.lane_center(car.lane));
    const auto px = p ? sim::project(cam, p->x, p->y, 0.5 * vehicle.height) : std::nullopt;
    if (px && px->col >= 0.0 && px->col <= cam.width - 1.0 && px->row >= 0.0 && px->row <= cam.height - 1.0) {
      const double col = jittered(px->col);
      const double row = jittered(px->row);
      g = add(g, gaussian_blob(cam.height, cam.width, col, row, sigma));
    }
  }

  if (perturb && cfg.noise > 0.0) {
    std::vector<float> v(g.values().begin(), g.values().end());
    for (float& x : v) x += static_cast<float>(cfg.noise * rng->uniform_double());
    g = GazeMap(g.height(), g.width(), std::move(v));
  }
  return g;
}

}  // namespace gazedrop
