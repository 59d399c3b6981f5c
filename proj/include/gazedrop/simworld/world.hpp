#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "gazedrop/error.hpp"
#include "gazedrop/rng.hpp"

namespace gazedrop::sim {

enum class StyleFamily { seen, unseen };

inline std::string_view to_string(StyleFamily f) { return f == StyleFamily::seen ? "seen" : "unseen"; }

enum class RoadsideKind { trees, buildings };

// Appearance of a track. Families differ in every attribute; tracks within a
// family vary slightly around the family's values.
struct TrackStyle {
  StyleFamily family = StyleFamily::seen;
  double sky = 0.78;
  double haze = 0.7;
  double ground = 0.36;
  double ground_stripe_period = 7.0;
  double ground_stripe_contrast = 0.05;
  double road = 0.42;
  double marking = 0.95;
  double dash_length = 3.0;
  double dash_gap = 9.0;
  RoadsideKind roadside = RoadsideKind::trees;
  double roadside_spacing = 22.0;
  double roadside_height = 6.0;
  double roadside_width = 1.6;
  double roadside_offset = 3.0;  // beyond the road edge
  double roadside_shade = 0.16;

  friend bool operator==(const TrackStyle&, const TrackStyle&) = default;
};

struct TrackSegment {
  double length = 0.0;
  double curvature = 0.0;
  friend bool operator==(const TrackSegment&, const TrackSegment&) = default;
};

struct TrackParams {
  double length = 3000.0;
  double max_curvature = 1.0 / 90.0;
  double min_segment = 80.0;
  double max_segment = 220.0;
  double straight_probability = 0.3;
  double lane_width = 3.7;
  int lane_count = 2;
  StyleFamily family = StyleFamily::seen;

  static TrackParams seen_pool() { return {}; }

  static TrackParams unseen_pool() {
    TrackParams p;
    p.max_curvature = 1.0 / 75.0;
    p.straight_probability = 0.25;
    p.family = StyleFamily::unseen;
    return p;
  }

  void validate() const {
    if (!(length > 0.0)) throw ParameterError("track length must be > 0");
    if (!(max_curvature >= 0.0)) throw ParameterError("max curvature must be >= 0");
    if (!(max_curvature * lane_width < 0.5)) throw ParameterError("curvature * lane width must be < 0.5");
    if (!(min_segment > 0.0) || max_segment < min_segment) throw ParameterError("invalid segment length range");
    if (!(lane_width > 0.0) || lane_count < 1) throw ParameterError("invalid lane layout");
    if (!(straight_probability >= 0.0 && straight_probability <= 1.0)) {
      throw ParameterError("straight probability must lie in [0, 1]");
    }
  }
};

// Road defined by a piecewise-constant curvature profile along arc length s.
// Lateral offsets are measured from the road center, positive to the left.
struct Track {
  int id = 0;
  std::vector<TrackSegment> segments;
  double lane_width = 3.7;
  int lane_count = 2;
  TrackStyle style;
  std::uint64_t style_seed = 0;
  double length = 0.0;

  double half_width() const { return 0.5 * lane_width * lane_count; }

  // Center offset of lane k; lane 0 is the rightmost.
  double lane_center(int k) const { return -half_width() + (k + 0.5) * lane_width; }

  int nearest_lane(double n) const {
    const int k = static_cast<int>(std::floor((n + half_width()) / lane_width));
    return std::clamp(k, 0, lane_count - 1);
  }

  // Zero beyond either end, so the road continues straight.
  double curvature_at(double s) const {
    if (s < 0.0) return 0.0;
    double start = 0.0;
    for (const auto& seg : segments) {
      if (s < start + seg.length) return seg.curvature;
      start += seg.length;
    }
    return 0.0;
  }

  double max_abs_curvature() const {
    double m = 0.0;
    for (const auto& seg : segments) m = std::max(m, std::abs(seg.curvature));
    return m;
  }

  friend bool operator==(const Track&, const Track&) = default;
};

inline TrackStyle make_style(StyleFamily family, RngStream& rng) {
  TrackStyle st;
  st.family = family;
  auto jitter = [&](double v, double amount) { return v + rng.uniform(-amount, amount); };
  if (family == StyleFamily::seen) {
    st.sky = jitter(0.78, 0.03);
    st.haze = jitter(0.70, 0.03);
    st.ground = jitter(0.36, 0.03);
    st.ground_stripe_period = 7.0;
    st.ground_stripe_contrast = 0.05;
    st.road = jitter(0.42, 0.02);
    st.marking = 0.95;
    st.dash_length = 3.0;
    st.dash_gap = 9.0;
    st.roadside = RoadsideKind::trees;
    st.roadside_spacing = jitter(22.0, 3.0);
    st.roadside_height = jitter(6.0, 0.8);
    st.roadside_width = 1.6;
    st.roadside_offset = 3.0;
    st.roadside_shade = jitter(0.16, 0.03);
  } else {
    st.sky = jitter(0.55, 0.04);
    st.haze = jitter(0.62, 0.03);
    st.ground = jitter(0.62, 0.04);
    st.ground_stripe_period = 3.0;
    st.ground_stripe_contrast = 0.12;
    st.road = jitter(0.30, 0.03);
    st.marking = 0.85;
    st.dash_length = 6.0;
    st.dash_gap = 6.0;
    st.roadside = RoadsideKind::buildings;
    st.roadside_spacing = jitter(34.0, 4.0);
    st.roadside_height = jitter(9.0, 1.5);
    st.roadside_width = 10.0;
    st.roadside_offset = 6.0;
    st.roadside_shade = jitter(0.88, 0.05);
  }
  return st;
}

inline Track generate_track(std::uint64_t seed, const TrackParams& params, int id = 0) {
  params.validate();
  RngStream rng(seed, 0x7a11);
  Track t;
  t.id = id;
  t.lane_width = params.lane_width;
  t.lane_count = params.lane_count;
  t.style_seed = seed;
  RngStream style_rng = rng.derive(1);
  t.style = make_style(params.family, style_rng);
  RngStream seg_rng = rng.derive(2);
  double total = 0.0;
  // Start on a straight so episodes and trials begin in a settled state.
  t.segments.push_back({std::min(params.min_segment, params.length), 0.0});
  total = t.segments.back().length;
  while (total < params.length) {
    double len = seg_rng.uniform(params.min_segment, params.max_segment);
    len = std::min(len, params.length - total);
    double kappa = 0.0;
    if (params.max_curvature > 0.0 && seg_rng.uniform_double() >= params.straight_probability) {
      const double mag = seg_rng.uniform(0.35, 1.0) * params.max_curvature;
      kappa = seg_rng.uniform_double() < 0.5 ? -mag : mag;
    } else {
      (void)seg_rng.uniform_double();
      (void)seg_rng.uniform_double();
    }
    t.segments.push_back({len, kappa});
    total += len;
  }
  t.length = total;
  return t;
}

enum class ManeuverCommand { follow, overtake };

inline std::string_view to_string(ManeuverCommand c) { return c == ManeuverCommand::follow ? "follow" : "overtake"; }

inline ManeuverCommand parse_command(std::string_view s) {
  if (s == "follow") return ManeuverCommand::follow;
  if (s == "overtake") return ManeuverCommand::overtake;
  throw DataError("unknown command '" + std::string(s) + "'");
}

struct TrafficCar {
  int lane = 0;
  double s = 0.0;
  double speed = 0.0;
  friend bool operator==(const TrafficCar&, const TrafficCar&) = default;
};

struct EgoPose {
  double s = 0.0;        // arc length along the track, m
  double offset = 0.0;   // lateral offset from road center, m (left positive)
  double heading = 0.0;  // heading error relative to the track tangent, rad
  double speed = 15.0;   // m/s
  friend bool operator==(const EgoPose&, const EgoPose&) = default;
};

struct WorldState {
  EgoPose ego;
  std::vector<TrafficCar> traffic;
  ManeuverCommand command = ManeuverCommand::follow;
  friend bool operator==(const WorldState&, const WorldState&) = default;
};

struct VehicleConfig {
  double wheelbase = 2.5;
  double length = 4.5;
  double width = 1.8;
  double height = 1.5;
  double max_steer_deg = 25.0;
};

// Pinhole camera at the ego position looking along the ego heading. Pixel
// (i, j) has its center at row i, column j; the optical axis passes through
// column (width - 1) / 2.
struct CameraConfig {
  int width = 128;
  int height = 48;
  double focal_px = 64.0;
  double horizon_row = 14.0;
  double mount_height = 1.4;
  double max_distance = 140.0;

  double center_col() const { return 0.5 * (width - 1); }
};

// A point of the road centerline expressed in the ego frame (x forward,
// y left) together with its arc length and tangent direction.
struct CenterlineSample {
  double sigma = 0.0;  // arc length ahead of the ego's s
  double x = 0.0;
  double y = 0.0;
  double theta = 0.0;
};

// Centerline samples from `behind` meters behind to `ahead` meters ahead of
// the ego's s, spaced by `step`, in the ego frame.
inline std::vector<CenterlineSample> centerline_in_ego_frame(const Track& track, const EgoPose& ego,
                                                             double ahead, double behind = 10.0,
                                                             double step = 0.5) {
  const int nb = static_cast<int>(std::ceil(behind / step));
  const int na = static_cast<int>(std::ceil(ahead / step));
  std::vector<CenterlineSample> local(static_cast<std::size_t>(nb + na + 1));
  // Track-local frame at the ego's s: origin on the centerline, x along the tangent.
  local[static_cast<std::size_t>(nb)] = {0.0, 0.0, 0.0, 0.0};
  for (int k = 0; k < na; ++k) {
    const auto& p = local[static_cast<std::size_t>(nb + k)];
    const double kappa = track.curvature_at(ego.s + p.sigma + 0.5 * step);
    const double mid = p.theta + 0.5 * kappa * step;
    local[static_cast<std::size_t>(nb + k + 1)] = {p.sigma + step, p.x + std::cos(mid) * step,
                                                   p.y + std::sin(mid) * step, p.theta + kappa * step};
  }
  for (int k = 0; k < nb; ++k) {
    const auto& p = local[static_cast<std::size_t>(nb - k)];
    const double kappa = track.curvature_at(ego.s + p.sigma - 0.5 * step);
    const double mid = p.theta - 0.5 * kappa * step;
    local[static_cast<std::size_t>(nb - k - 1)] = {p.sigma - step, p.x - std::cos(mid) * step,
                                                   p.y - std::sin(mid) * step, p.theta - kappa * step};
  }
  const double c = std::cos(ego.heading);
  const double s = std::sin(ego.heading);
  for (auto& p : local) {
    const double dx = p.x;
    const double dy = p.y - ego.offset;
    p.x = c * dx + s * dy;
    p.y = -s * dx + c * dy;
    p.theta -= ego.heading;
  }
  return local;
}

// Ego-frame position of the track point (s, n), interpolated from samples.
inline std::optional<CenterlineSample> track_point_in_ego_frame(const std::vector<CenterlineSample>& line,
                                                                double sigma, double n) {
  if (line.size() < 2 || sigma < line.front().sigma || sigma > line.back().sigma) return std::nullopt;
  const double step = line[1].sigma - line[0].sigma;
  const auto k = std::min(static_cast<std::size_t>((sigma - line.front().sigma) / step), line.size() - 2);
  const double t = (sigma - line[k].sigma) / step;
  const auto& a = line[k];
  const auto& b = line[k + 1];
  CenterlineSample p;
  p.sigma = sigma;
  p.theta = a.theta + t * (b.theta - a.theta);
  p.x = a.x + t * (b.x - a.x) - std::sin(p.theta) * n;
  p.y = a.y + t * (b.y - a.y) + std::cos(p.theta) * n;
  return p;
}

struct PixelPoint {
  double row = 0.0;
  double col = 0.0;
};

// Projects a ground-level ego-frame point at height `z` above the road.
inline std::optional<PixelPoint> project(const CameraConfig& cam, double x, double y, double z = 0.0) {
  if (x <= 0.5) return std::nullopt;
  return PixelPoint{cam.horizon_row + cam.focal_px * (cam.mount_height - z) / x, cam.center_col() - cam.focal_px * y / x};
}

}  // namespace gazedrop::sim
