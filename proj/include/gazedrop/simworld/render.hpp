#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "gazedrop/simworld/world.hpp"
#include "gazedrop/tensor.hpp"

namespace gazedrop::sim {

namespace detail {

constexpr int kSuper = 2;
constexpr double kMarkingWidth = 0.2;
constexpr double kFogDistance = 90.0;

struct Billboard {
  double depth = 0.0;
  double center_rel = 0.0;  // column of the center relative to the optical axis
  double half_width_px = 0.0;
  double row_top = 0.0;
  double row_bottom = 0.0;
  double shade = 0.0;
};

inline double fog(double value, double haze, double distance) {
  return haze + (value - haze) * std::exp(-distance / kFogDistance);
}

inline double positive_fmod(double a, double b) {
  const double r = std::fmod(a, b);
  return r < 0.0 ? r + b : r;
}

// Ground shade at track coordinates (s, n). Depends on |n| only, so the
// world is mirror-symmetric about the road center.
inline double ground_shade(const Track& track, double s, double n) {
  const TrackStyle& st = track.style;
  const double hw = track.half_width();
  const double a = std::abs(n);
  if (a <= hw) {
    if (a >= hw - 0.1 - kMarkingWidth && a <= hw - 0.1) return st.marking;
    for (int k = 1; k < track.lane_count; ++k) {
      const double boundary = -hw + k * track.lane_width;
      if (std::abs(n - boundary) <= 0.5 * kMarkingWidth &&
          positive_fmod(s, st.dash_length + st.dash_gap) < st.dash_length) {
        return st.marking;
      }
    }
    return st.road;
  }
  const double phase = positive_fmod(s, st.ground_stripe_period);
  return st.ground + (phase < 0.5 * st.ground_stripe_period ? st.ground_stripe_contrast : -st.ground_stripe_contrast);
}

// Upright rectangle centered at track point (s, n), facing the camera.
inline void add_billboard(std::vector<Billboard>& out, const CameraConfig& cam,
                          const std::vector<CenterlineSample>& line, double sigma, double n, double width,
                          double height, double shade, double z0 = 0.0) {
  const auto p = track_point_in_ego_frame(line, sigma, n);
  if (!p || p->x < 1.0 || p->x > cam.max_distance) return;
  Billboard b;
  b.depth = p->x;
  b.center_rel = -cam.focal_px * p->y / p->x;
  b.half_width_px = 0.5 * cam.focal_px * width / p->x;
  b.row_bottom = cam.horizon_row + cam.focal_px * (cam.mount_height - z0) / p->x;
  b.row_top = cam.horizon_row + cam.focal_px * (cam.mount_height - z0 - height) / p->x;
  b.shade = shade;
  out.push_back(b);
}

}  // namespace detail

// Grayscale driver view (H, W, 1) in [0, 1]: sky, fogged ground with road
// markings, roadside objects and traffic cars, rendered at 2x2 supersampling.
inline Tensor render_view(const Track& track, const WorldState& state, const CameraConfig& cam,
                          const VehicleConfig& vehicle = {}) {
  using namespace detail;
  const TrackStyle& st = track.style;
  const int sh = cam.height * kSuper;
  const int sw = cam.width * kSuper;
  const double cx = cam.center_col();
  const auto line = centerline_in_ego_frame(track, state.ego, cam.max_distance + 20.0, 10.0, 0.5);

  std::vector<double> canvas(static_cast<std::size_t>(sh) * static_cast<std::size_t>(sw));
  auto sub_coord = [](int k) { return (k + 0.5) / kSuper - 0.5; };

  for (int r = 0; r < sh; ++r) {
    const double v = sub_coord(r);
    double* row = canvas.data() + static_cast<std::size_t>(r) * static_cast<std::size_t>(sw);
    if (v <= cam.horizon_row + 1e-9) {
      const double t = std::clamp((cam.horizon_row - v) / std::max(cam.horizon_row, 1.0), 0.0, 1.0);
      std::fill(row, row + sw, st.haze + (st.sky - st.haze) * std::sqrt(t));
      continue;
    }
    const double d = cam.focal_px * cam.mount_height / (v - cam.horizon_row);
    if (d > cam.max_distance) {
      std::fill(row, row + sw, st.haze);
      continue;
    }
    // Centerline point at forward distance d (first crossing).
    std::size_t k = 0;
    while (k + 1 < line.size() && !(line[k].x <= d && line[k + 1].x > d)) ++k;
    double yc = 0.0, theta = 0.0, sigma = 0.0;
    if (k + 1 < line.size()) {
      const double t = (d - line[k].x) / (line[k + 1].x - line[k].x);
      yc = line[k].y + t * (line[k + 1].y - line[k].y);
      theta = line[k].theta + t * (line[k + 1].theta - line[k].theta);
      sigma = line[k].sigma + t * (line[k + 1].sigma - line[k].sigma);
    } else {
      yc = line.back().y;
      theta = line.back().theta;
      sigma = line.back().sigma;
    }
    const double ct = std::cos(theta);
    const double s_t = std::sin(theta);
    for (int c = 0; c < sw; ++c) {
      const double y = (cx - sub_coord(c)) * d / cam.focal_px;
      const double dy = y - yc;
      const double n = dy * ct;
      const double s = state.ego.s + sigma + dy * s_t;
      row[c] = fog(ground_shade(track, s, n), st.haze, d);
    }
  }

  std::vector<Billboard> boards;
  const double hw = track.half_width();
  const double first = std::floor((state.ego.s - 5.0) / st.roadside_spacing) * st.roadside_spacing;
  for (double s_obj = first; s_obj < state.ego.s + cam.max_distance; s_obj += st.roadside_spacing) {
    const double n_obj = hw + st.roadside_offset + 0.5 * st.roadside_width;
    for (const double side : {-1.0, 1.0}) {
      add_billboard(boards, cam, line, s_obj - state.ego.s, side * n_obj, st.roadside_width, st.roadside_height,
                    st.roadside_shade);
      if (st.roadside == RoadsideKind::buildings) {
        // Window band.
        add_billboard(boards, cam, line, s_obj - state.ego.s - 0.01, side * n_obj, 0.7 * st.roadside_width,
                      0.25 * st.roadside_height, 0.5 * st.roadside_shade, 0.5 * st.roadside_height);
      } else {
        // Crown.
        add_billboard(boards, cam, line, s_obj - state.ego.s - 0.01, side * n_obj, 2.2 * st.roadside_width,
                      0.5 * st.roadside_height, st.roadside_shade + 0.08, 0.45 * st.roadside_height);
      }
    }
  }
  for (const auto& car : state.traffic) {
    const double n_car = track.lane_center(car.lane);
    // Rear face, then the rear window slightly in front of it.
    add_billboard(boards, cam, line, car.s - state.ego.s - 0.5 * vehicle.length, n_car, vehicle.width,
                  vehicle.height, 0.1);
    add_billboard(boards, cam, line, car.s - state.ego.s - 0.5 * vehicle.length - 0.01, n_car, 0.8 * vehicle.width,
                  0.3 * vehicle.height, 0.55, 0.6 * vehicle.height);
  }
  std::stable_sort(boards.begin(), boards.end(), [](const Billboard& a, const Billboard& b) { return a.depth > b.depth; });

  for (const auto& b : boards) {
    const double shade = fog(b.shade, st.haze, b.depth);
    const int r0 = std::max(0, static_cast<int>(std::floor((b.row_top + 0.5) * kSuper - 0.5)));
    const int r1 = std::min(sh - 1, static_cast<int>(std::ceil((b.row_bottom + 0.5) * kSuper - 0.5)));
    for (int r = r0; r <= r1; ++r) {
      const double v = sub_coord(r);
      if (v < b.row_top || v > b.row_bottom) continue;
      double* row = canvas.data() + static_cast<std::size_t>(r) * static_cast<std::size_t>(sw);
      for (int c = 0; c < sw; ++c) {
        const double rel = sub_coord(c) - cx;
        if (rel >= b.center_rel - b.half_width_px && rel <= b.center_rel + b.half_width_px) row[c] = shade;
      }
    }
  }

  Tensor frame({cam.height, cam.width, 1});
  const double norm = 1.0 / (kSuper * kSuper);
  for (int i = 0; i < cam.height; ++i) {
    for (int j = 0; j < cam.width; ++j) {
      double acc = 0.0;
      for (int a = 0; a < kSuper; ++a) {
        for (int b = 0; b < kSuper; ++b) {
          acc += canvas[static_cast<std::size_t>(i * kSuper + a) * static_cast<std::size_t>(sw) +
                        static_cast<std::size_t>(j * kSuper + b)];
        }
      }
      frame[static_cast<std::size_t>(i * cam.width + j)] = static_cast<float>(std::clamp(acc * norm, 0.0, 1.0));
    }
  }
  return frame;
}

}  // namespace gazedrop::sim
