#pragma once

#include <cmath>
#include <optional>
#include <utility>

#include "gazedrop/simworld/dynamics.hpp"
#include "gazedrop/simworld/world.hpp"

namespace gazedrop::sim {

struct ExpertConfig {
  double lookahead = 12.0;          // pure-pursuit and gaze lookahead, m
  double overtake_trigger = 35.0;   // start overtaking a slower car this close ahead, m
  double pass_clearance = 12.0;     // return once this far ahead of the passed car, m
  double settle_tolerance = 0.3;    // back in the cruise lane within this offset, m
  int cruise_lane = 0;
  int passing_lane = 1;
};

struct Maneuver {
  ManeuverCommand command = ManeuverCommand::follow;
  double target_offset = 0.0;
  std::optional<std::size_t> lead_car;  // car being overtaken, when ahead of the ego
};

// Scripted maneuver logic: overtake a car in the cruise lane once it is
// within the trigger distance, hold the passing lane until clear, return.
inline Maneuver plan_maneuver(const Track& track, const WorldState& state, const ExpertConfig& cfg = {}) {
  Maneuver m;
  const int passing = std::min(cfg.passing_lane, track.lane_count - 1);
  const int cruise = std::min(cfg.cruise_lane, track.lane_count - 1);
  const double cruise_offset = track.lane_center(cruise);
  const double passing_offset = track.lane_center(passing);
  const double s = state.ego.s;

  std::optional<std::size_t> ahead;  // nearest cruise-lane car ahead within trigger
  bool alongside = false;            // a cruise-lane car not yet cleared
  for (std::size_t i = 0; i < state.traffic.size(); ++i) {
    const auto& car = state.traffic[i];
    if (car.lane != cruise) continue;
    const double gap = car.s - s;
    if (gap > 0.0 && gap < cfg.overtake_trigger) {
      if (!ahead || gap < state.traffic[*ahead].s - s) ahead = i;
    }
    if (gap >= -cfg.pass_clearance && gap < cfg.overtake_trigger) alongside = true;
  }

  if (passing == cruise) {
    m.command = ManeuverCommand::follow;
    m.target_offset = cruise_offset;
    return m;
  }
  if (state.command == ManeuverCommand::follow) {
    if (ahead) {
      m.command = ManeuverCommand::overtake;
      m.target_offset = passing_offset;
      m.lead_car = ahead;
    } else {
      m.command = ManeuverCommand::follow;
      m.target_offset = cruise_offset;
    }
    return m;
  }
  m.command = ManeuverCommand::overtake;
  m.lead_car = ahead;
  if (alongside) {
    m.target_offset = passing_offset;
  } else {
    m.target_offset = cruise_offset;
    if (std::abs(state.ego.offset - cruise_offset) < cfg.settle_tolerance) m.command = ManeuverCommand::follow;
  }
  return m;
}

// Pure-pursuit steering (degrees, left positive) toward the point `lookahead`
// meters ahead on the lateral offset `target_offset`.
inline double pure_pursuit_deg(const Track& track, const EgoPose& ego, double target_offset, double lookahead,
                               const VehicleConfig& vehicle = {}) {
  const auto line = centerline_in_ego_frame(track, ego, lookahead + 2.0, 2.0, 0.5);
  const auto p = track_point_in_ego_frame(line, lookahead, target_offset);
  if (!p) return 0.0;
  const double ld = std::hypot(p->x, p->y);
  if (ld < 1e-9) return 0.0;
  const double alpha = std::atan2(p->y, p->x);
  const double steer = std::atan(2.0 * vehicle.wheelbase * std::sin(alpha) / ld);
  return std::clamp(rad_to_deg(steer), -vehicle.max_steer_deg, vehicle.max_steer_deg);
}

struct ExpertAction {
  double steering_deg = 0.0;
  ManeuverCommand command = ManeuverCommand::follow;
};

inline ExpertAction expert_policy(const Track& track, const WorldState& state, const ExpertConfig& cfg = {},
                                  const VehicleConfig& vehicle = {}) {
  const Maneuver m = plan_maneuver(track, state, cfg);
  return {pure_pursuit_deg(track, state.ego, m.target_offset, cfg.lookahead, vehicle), m.command};
}

}  // namespace gazedrop::sim
