#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gazedrop/error.hpp"
#include "gazedrop/gaze_oracle.hpp"
#include "gazedrop/pgm.hpp"
#include "gazedrop/rng.hpp"
#include "gazedrop/simworld/dynamics.hpp"
#include "gazedrop/simworld/expert.hpp"
#include "gazedrop/simworld/render.hpp"
#include "gazedrop/simworld/world.hpp"
#include "gazedrop/util.hpp"

namespace gazedrop::sim {

struct TrafficConfig {
  bool enabled = true;
  double first_gap_min = 60.0;
  double first_gap_max = 120.0;
  double spacing_min = 130.0;
  double spacing_max = 260.0;
  double speed_min = 9.0;
  double speed_max = 11.0;
  int lane = 0;
};

// Cars in one lane from s0 + first gap up to `until`, deterministic in `rng`.
inline std::vector<TrafficCar> spawn_traffic(const TrafficConfig& cfg, double s0, double until, RngStream& rng) {
  std::vector<TrafficCar> cars;
  if (!cfg.enabled) return cars;
  double s = s0 + rng.uniform(cfg.first_gap_min, cfg.first_gap_max);
  while (s < until) {
    cars.push_back({cfg.lane, s, rng.uniform(cfg.speed_min, cfg.speed_max)});
    s += rng.uniform(cfg.spacing_min, cfg.spacing_max);
  }
  return cars;
}

struct DatasetConfig {
  int trials_per_track = 4;
  int samples_per_trial = 400;
  int sample_every = 4;
  double recovery_fraction = 0.10;
  int recovery_samples_per_episode = 10;
  int recovery_sample_every = 3;
  double recovery_offset_min = 0.6;
  double recovery_offset_max = 1.6;
  double recovery_heading_min_deg = 2.0;
  double recovery_heading_max_deg = 8.0;
  double dt = 0.05;
  double speed = 15.0;
  TrafficConfig traffic;
  CameraConfig camera;
  VehicleConfig vehicle;
  ExpertConfig expert;
  GazeOracleConfig gaze_real;
  GazeOracleConfig gaze_est = GazeOracleConfig::estimated();

  void validate() const {
    if (trials_per_track < 1 || samples_per_trial < 1 || sample_every < 1) {
      throw ParameterError("dataset trial and sample counts must be >= 1");
    }
    if (!(recovery_fraction >= 0.0 && recovery_fraction <= 1.0)) {
      throw ParameterError("recovery fraction must lie in [0, 1]");
    }
    if (recovery_samples_per_episode < 1 || recovery_sample_every < 1) {
      throw ParameterError("recovery episode parameters must be >= 1");
    }
    if (!(dt > 0.0) || !(speed > 0.0)) throw ParameterError("dt and speed must be > 0");
  }

  // Track distance one trial consumes.
  double trial_distance() const { return samples_per_trial * sample_every * dt * speed; }
};

struct SampleRecord {
  std::string id;
  std::string frame;
  std::string gaze_real;
  std::string gaze_est;
  double steering_deg = 0.0;
  ManeuverCommand command = ManeuverCommand::follow;
  int track = 0;
  std::string split;
  bool recovery = false;
  int trial = 0;
};

inline nlohmann::json to_json(const SampleRecord& r) {
  return {{"id", r.id},
          {"frame", r.frame},
          {"gaze_real", r.gaze_real},
          {"gaze_est", r.gaze_est},
          {"steering_deg", r.steering_deg},
          {"command", std::string(to_string(r.command))},
          {"track", r.track},
          {"split", r.split},
          {"recovery", r.recovery},
          {"trial", r.trial}};
}

inline SampleRecord record_from_json(const nlohmann::json& j) {
  SampleRecord r;
  r.id = j.value("id", std::string());
  r.frame = j.at("frame").get<std::string>();
  r.gaze_real = j.at("gaze_real").get<std::string>();
  r.gaze_est = j.at("gaze_est").get<std::string>();
  r.steering_deg = j.at("steering_deg").get<double>();
  r.command = parse_command(j.at("command").get<std::string>());
  r.track = j.at("track").get<int>();
  r.split = j.at("split").get<std::string>();
  r.recovery = j.at("recovery").get<bool>();
  r.trial = j.value("trial", 0);
  if (r.split != "seen" && r.split != "unseen") throw DataError("record split must be 'seen' or 'unseen'");
  if (!std::isfinite(r.steering_deg)) throw DataError("record steering is not finite");
  return r;
}

inline std::string encode_index_line(const SampleRecord& r) { return to_json(r).dump() + "\n"; }

struct DatasetIndex {
  std::filesystem::path root;
  std::vector<SampleRecord> records;

  std::filesystem::path resolve(const std::string& rel) const { return root / rel; }
};

inline DatasetIndex read_index(const std::filesystem::path& index_path) {
  std::ifstream in(index_path);
  if (!in) throw DataError("cannot open dataset index " + index_path.string());
  DatasetIndex idx;
  idx.root = index_path.parent_path();
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      idx.records.push_back(record_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw DataError(index_path.string() + ":" + std::to_string(lineno) + ": bad record: " + e.what());
    }
  }
  return idx;
}

struct TrackEntry {
  Track track;
  std::string split;  // "seen" or "unseen"
};

// One trial's emitted samples plus a content hash over its index lines and
// every file it wrote.
struct TrialGroup {
  int track = 0;
  int trial = 0;
  std::string split;
  std::vector<SampleRecord> records;
  std::string hash;
};

namespace detail {

inline std::string sample_id(int track, int trial, int k) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "t%03d_r%02d_%05d", track, trial, k);
  return buf;
}

}  // namespace detail

// Drives one trial with the expert and writes frames and gaze maps below
// `root`. Normal driving comes first, then drift-recovery episodes which
// start offset and misaligned and record the expert steering back.
inline TrialGroup gen_trial(const TrackEntry& entry, int trial, const DatasetConfig& cfg, RngStream trial_rng,
                            const std::filesystem::path& root) {
  cfg.validate();
  const Track& track = entry.track;
  TrialGroup group{track.id, trial, entry.split, {}, {}};
  Fnv1a hash;
  const int n_recovery = static_cast<int>(std::lround(cfg.recovery_fraction * cfg.samples_per_trial));
  const int n_normal = cfg.samples_per_trial - n_recovery;
  const double span = n_normal * cfg.sample_every * cfg.dt * cfg.speed;
  const double latest_start = track.length - span - 150.0;
  if (latest_start < 20.0) throw ParameterError("track too short for the requested trial length");

  RngStream start_rng = trial_rng.derive(1);
  RngStream traffic_rng = trial_rng.derive(2);
  RngStream recovery_rng = trial_rng.derive(3);
  RngStream gaze_rng = trial_rng.derive(4);

  auto emit = [&](const WorldState& st, double steering, ManeuverCommand cmd, bool recovery, int k) {
    SampleRecord r;
    r.id = detail::sample_id(track.id, trial, k);
    r.frame = "frames/" + r.id + ".pgm";
    r.gaze_real = "gaze_real/" + r.id + ".pgm";
    r.gaze_est = "gaze_est/" + r.id + ".pgm";
    r.steering_deg = steering;
    r.command = cmd;
    r.track = track.id;
    r.split = entry.split;
    r.recovery = recovery;
    r.trial = trial;
    const Tensor frame = render_view(track, st, cfg.camera, cfg.vehicle);
    const GazeMap real = normalize_max(gaze_oracle(track, st, cfg.camera, cfg.gaze_real, nullptr, cfg.vehicle));
    RngStream sample_rng = gaze_rng.derive(static_cast<std::uint64_t>(k));
    const GazeMap est = normalize_max(gaze_oracle(track, st, cfg.camera, cfg.gaze_est, &sample_rng, cfg.vehicle));
    const std::string frame_bytes = encode_pgm(to_gray(frame.extent(0), frame.extent(1), frame.values()));
    const std::string real_bytes = encode_pgm(to_gray(real.height(), real.width(), real.values()));
    const std::string est_bytes = encode_pgm(to_gray(est.height(), est.width(), est.values()));
    write_file_atomic(root / r.frame, frame_bytes);
    write_file_atomic(root / r.gaze_real, real_bytes);
    write_file_atomic(root / r.gaze_est, est_bytes);
    hash.update(encode_index_line(r));
    hash.update(frame_bytes);
    hash.update(real_bytes);
    hash.update(est_bytes);
    group.records.push_back(std::move(r));
  };

  WorldState st;
  st.ego = {start_rng.uniform(20.0, latest_start), track.lane_center(cfg.expert.cruise_lane), 0.0, cfg.speed};
  st.traffic = spawn_traffic(cfg.traffic, st.ego.s, st.ego.s + span + 200.0, traffic_rng);
  int k = 0;
  for (int step_i = 0; k < n_normal; ++step_i) {
    const ExpertAction a = expert_policy(track, st, cfg.expert, cfg.vehicle);
    st.command = a.command;
    if (step_i % cfg.sample_every == 0) emit(st, a.steering_deg, a.command, false, k++);
    st = step(track, st, a.steering_deg, cfg.dt, cfg.vehicle);
  }

  while (k < cfg.samples_per_trial) {
    WorldState rs;
    const double off = recovery_rng.uniform(cfg.recovery_offset_min, cfg.recovery_offset_max) *
                       (recovery_rng.uniform_double() < 0.5 ? -1.0 : 1.0);
    const double head = recovery_rng.uniform(cfg.recovery_heading_min_deg, cfg.recovery_heading_max_deg) *
                        (recovery_rng.uniform_double() < 0.5 ? -1.0 : 1.0);
    rs.ego = {recovery_rng.uniform(20.0, latest_start + span),
              track.lane_center(cfg.expert.cruise_lane) + off, deg_to_rad(head), cfg.speed};
    for (int j = 0; j < cfg.recovery_samples_per_episode * cfg.recovery_sample_every && k < cfg.samples_per_trial;
         ++j) {
      const ExpertAction a = expert_policy(track, rs, cfg.expert, cfg.vehicle);
      rs.command = a.command;
      if (j % cfg.recovery_sample_every == 0) emit(rs, a.steering_deg, a.command, true, k++);
      rs = step(track, rs, a.steering_deg, cfg.dt, cfg.vehicle);
    }
  }
  group.hash = hash.hex();
  return group;
}

// Emits every trial of every track below `root` (frames/, gaze_real/,
// gaze_est/, index.jsonl). Trials are independent and may run concurrently.
inline std::vector<TrialGroup> gen_dataset(const std::vector<TrackEntry>& tracks, const DatasetConfig& cfg,
                                           std::uint64_t seed, const std::filesystem::path& root, int jobs = 1) {
  cfg.validate();
  std::set<int> ids;
  for (const auto& t : tracks) {
    if (!ids.insert(t.track.id).second) throw DataError("duplicate track id " + std::to_string(t.track.id));
    if (t.split != "seen" && t.split != "unseen") throw ParameterError("track split must be 'seen' or 'unseen'");
  }
  std::error_code ec;
  for (const char* sub : {"frames", "gaze_real", "gaze_est"}) {
    std::filesystem::create_directories(root / sub, ec);
    if (ec) throw DataError("cannot create " + (root / sub).string() + ": " + ec.message());
  }
  const std::size_t trials = static_cast<std::size_t>(cfg.trials_per_track);
  std::vector<TrialGroup> groups(tracks.size() * trials);
  const RngStream base(seed, 0xda7a);
  parallel_for(groups.size(), jobs, [&](std::size_t i) {
    const auto& entry = tracks[i / trials];
    const int trial = static_cast<int>(i % trials);
    groups[i] = gen_trial(entry, trial, cfg, base.derive(static_cast<std::uint64_t>(entry.track.id),
                                                         static_cast<std::uint64_t>(trial)),
                          root);
  });
  std::string index;
  for (const auto& g : groups) {
    for (const auto& r : g.records) index += encode_index_line(r);
  }
  write_file_atomic(root / "index.jsonl", index);
  return groups;
}

}  // namespace gazedrop::sim
