#pragma once

#include <cmath>
#include <numbers>

#include "gazedrop/error.hpp"
#include "gazedrop/simworld/world.hpp"

namespace gazedrop::sim {

inline double deg_to_rad(double d) { return d * std::numbers::pi / 180.0; }
inline double rad_to_deg(double r) { return r * 180.0 / std::numbers::pi; }

// Kinematic bicycle in track coordinates at constant speed; positive
// steering turns left. Traffic moves along its lane at constant speed.
inline WorldState step(const Track& track, const WorldState& state, double steering_deg, double dt,
                       const VehicleConfig& vehicle = {}) {
  if (!(dt > 0.0)) throw ParameterError("step dt must be > 0");
  const double steer = deg_to_rad(std::clamp(steering_deg, -vehicle.max_steer_deg, vehicle.max_steer_deg));
  const double v = state.ego.speed;
  const double yaw_rate = v * std::tan(steer) / vehicle.wheelbase;

  struct Deriv {
    double ds, dn, dpsi;
  };
  auto f = [&](double s, double n, double psi) {
    const double kappa = track.curvature_at(s);
    const double ds = v * std::cos(psi) / (1.0 - n * kappa);
    return Deriv{ds, v * std::sin(psi), yaw_rate - kappa * ds};
  };

  const EgoPose& e = state.ego;
  const Deriv k1 = f(e.s, e.offset, e.heading);
  const Deriv k2 = f(e.s + 0.5 * dt * k1.ds, e.offset + 0.5 * dt * k1.dn, e.heading + 0.5 * dt * k1.dpsi);
  const Deriv k3 = f(e.s + 0.5 * dt * k2.ds, e.offset + 0.5 * dt * k2.dn, e.heading + 0.5 * dt * k2.dpsi);
  const Deriv k4 = f(e.s + dt * k3.ds, e.offset + dt * k3.dn, e.heading + dt * k3.dpsi);

  WorldState next = state;
  next.ego.s = e.s + dt / 6.0 * (k1.ds + 2.0 * k2.ds + 2.0 * k3.ds + k4.ds);
  next.ego.offset = e.offset + dt / 6.0 * (k1.dn + 2.0 * k2.dn + 2.0 * k3.dn + k4.dn);
  next.ego.heading = e.heading + dt / 6.0 * (k1.dpsi + 2.0 * k2.dpsi + 2.0 * k3.dpsi + k4.dpsi);
  next.ego.s = std::clamp(next.ego.s, 0.0, track.length);
  for (auto& car : next.traffic) car.s += car.speed * dt;
  return next;
}

}  // namespace gazedrop::sim
