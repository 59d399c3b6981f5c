#pragma once

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gazedrop/checkpoint.hpp"
#include "gazedrop/experiment/config.hpp"
#include "gazedrop/metrics.hpp"
#include "gazedrop/pgm.hpp"
#include "gazedrop/simworld/closed_loop.hpp"
#include "gazedrop/simworld/dataset.hpp"
#include "gazedrop/train.hpp"
#include "gazedrop/util.hpp"

namespace gazedrop::experiment {

// Stream ids below the root seed. Every random choice of the pipeline is
// derived from (root seed, stream id, ...).
enum Stream : std::uint64_t {
  kStreamData = 1,
  kStreamTrain = 2,
  kStreamMc = 3,
  kStreamClosedLoop = 4,
  kStreamSweep = 5,
};

template <typename... Ids>
std::uint64_t derive_seed(std::uint64_t root, Ids... ids) {
  return RngStream(root, 0x5eed).derive(static_cast<std::uint64_t>(ids)...).next_u64();
}

inline constexpr const char* kMatchedVariant = "uniform-matched";

struct Paths {
  std::filesystem::path root;

  std::filesystem::path data() const { return root / "data"; }
  std::filesystem::path index() const { return data() / "index.jsonl"; }
  std::filesystem::path manifest() const { return data() / "manifest.json"; }
  std::filesystem::path reports() const { return root / "reports"; }
  std::filesystem::path run_log() const { return root / "run.log"; }
  std::filesystem::path checkpoint_dir(const std::string& variant, std::uint64_t seed) const {
    return root / "checkpoints" / variant / ("seed" + std::to_string(seed));
  }
  std::filesystem::path checkpoint(const std::string& variant, std::uint64_t seed, const std::string& branch) const {
    return checkpoint_dir(variant, seed) / (branch + ".ckpt");
  }
  std::filesystem::path sweep_checkpoint(const std::string& variant, double dp, const std::string& branch) const {
    return root / "checkpoints" / "sweep" / variant / ("dp" + fmt_double(dp, 2)) / (branch + ".ckpt");
  }
};

// Progress lines on stderr plus a timestamped sidecar log; reports never
// carry timestamps.
class RunLog {
 public:
  explicit RunLog(std::filesystem::path path = {}, bool quiet = false) : path_(std::move(path)), quiet_(quiet) {}

  void operator()(const std::string& msg) {
    std::lock_guard lock(mu_);
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%S", std::localtime(&now));
    if (!quiet_) std::cerr << "[gazedrop] " << msg << "\n";
    if (!path_.empty()) {
      std::ofstream out(path_, std::ios::app);
      if (out) out << stamp << " " << msg << "\n";
    }
  }

 private:
  std::filesystem::path path_;
  bool quiet_ = false;
  std::mutex mu_;
};

struct Context {
  ExperimentConfig cfg;
  Paths paths;
  int jobs = 1;
  RunLog* log = nullptr;

  void note(const std::string& msg) const {
    if (log) (*log)(msg);
  }
};

inline void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw DataError("cannot create directory " + dir.string() + ": " + ec.message());
}

inline void write_report(const std::filesystem::path& path, const std::string& text) {
  ensure_dir(path.parent_path());
  write_file_atomic(path, text);
}

// ---------------------------------------------------------------- tracks

inline std::vector<sim::TrackEntry> make_tracks(const ExperimentConfig& cfg) {
  std::vector<sim::TrackEntry> out;
  int id = 0;
  for (auto s : cfg.world.seen_tracks) out.push_back({sim::generate_track(s, cfg.world.seen, id++), "seen"});
  for (auto s : cfg.world.unseen_tracks) out.push_back({sim::generate_track(s, cfg.world.unseen, id++), "unseen"});
  return out;
}

// ---------------------------------------------------------------- gen-data

inline nlohmann::json cmd_gen_data(const Context& ctx) {
  const auto& cfg = ctx.cfg;
  const auto tracks = make_tracks(cfg);
  ctx.note("gen-data: " + std::to_string(tracks.size()) + " tracks x " + std::to_string(cfg.dataset.trials_per_track) +
           " trials into " + ctx.paths.data().string());
  ensure_dir(ctx.paths.data());
  std::error_code ec;
  std::filesystem::remove(ctx.paths.manifest(), ec);
  const auto groups = sim::gen_dataset(tracks, cfg.dataset, derive_seed(cfg.seed, kStreamData), ctx.paths.data(), ctx.jobs);

  nlohmann::json manifest;
  manifest["format"] = "gazedrop-dataset";
  manifest["seed"] = cfg.seed;
  manifest["tracks"] = nlohmann::json::array();
  for (std::size_t i = 0; i < tracks.size(); ++i) {
    const auto& t = tracks[i];
    const std::uint64_t seed = i < cfg.world.seen_tracks.size() ? cfg.world.seen_tracks[i]
                                                                 : cfg.world.unseen_tracks[i - cfg.world.seen_tracks.size()];
    manifest["tracks"].push_back({{"id", t.track.id}, {"seed", seed}, {"split", t.split}, {"length", t.track.length}});
  }
  manifest["groups"] = nlohmann::json::array();
  Fnv1a all;
  for (const auto& g : groups) {
    manifest["groups"].push_back(
        {{"track", g.track}, {"trial", g.trial}, {"split", g.split}, {"samples", g.records.size()}, {"hash", g.hash}});
    all.update(g.hash);
  }
  manifest["hash"] = all.hex();
  write_file_atomic(ctx.paths.manifest(), manifest.dump(2) + "\n");
  return manifest;
}

// ---------------------------------------------------------------- data

enum class Split { train, seen, unseen };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::seen: return "seen";
    case Split::unseen: return "unseen";
  }
  return "train";
}

inline int branch_index(sim::ManeuverCommand c) { return c == sim::ManeuverCommand::overtake ? 1 : 0; }
inline const char* branch_name(int b) { return b == 1 ? "overtake" : "follow"; }

// One split's samples, grouped by branch, with their order in the index.
struct SplitData {
  std::vector<TrainSample> branch[2];
  std::vector<std::pair<int, std::size_t>> order;  // (branch, position) in index order

  std::size_t size() const { return order.size(); }
};

inline sim::DatasetIndex load_index(const Paths& paths) {
  if (!std::filesystem::exists(paths.manifest())) {
    throw DataError("dataset manifest missing at " + paths.manifest().string() + " (run gen-data first)");
  }
  return sim::read_index(paths.index());
}

inline Split split_of(const ExperimentConfig& cfg, const sim::SampleRecord& r) {
  if (r.split == "unseen") return Split::unseen;
  for (int t : cfg.seen_test_trials) {
    if (r.trial == t) return Split::seen;
  }
  return Split::train;
}

inline SplitData load_split(const ExperimentConfig& cfg, const sim::DatasetIndex& idx, Split split, GazeKind gaze) {
  SplitData out;
  for (const auto& r : idx.records) {
    if (split_of(cfg, r) != split) continue;
    TrainSample s;
    s.id = r.id;
    try {
      s.frame = load_frame_pgm(idx.resolve(r.frame));
      if (gaze == GazeKind::real) s.gaze = load_pgm(idx.resolve(r.gaze_real));
      if (gaze == GazeKind::estimated) s.gaze = load_pgm(idx.resolve(r.gaze_est));
    } catch (const Error& e) {
      throw DataError("record '" + r.id + "': " + e.what());
    }
    s.steering = static_cast<float>(r.steering_deg);
    const int b = branch_index(r.command);
    out.order.emplace_back(b, out.branch[b].size());
    out.branch[b].push_back(std::move(s));
  }
  return out;
}

// Loaded splits keyed by gaze kind, so variants sharing maps share memory.
class DataCache {
 public:
  DataCache(const ExperimentConfig& cfg, const Paths& paths) : cfg_(cfg), index_(load_index(paths)) {}

  const SplitData& get(Split split, GazeKind gaze) {
    std::lock_guard lock(mu_);
    const auto key = std::make_pair(static_cast<int>(split), static_cast<int>(gaze));
    auto it = cache_.find(key);
    if (it == cache_.end()) it = cache_.emplace(key, load_split(cfg_, index_, split, gaze)).first;
    return it->second;
  }

  const sim::DatasetIndex& index() const { return index_; }

 private:
  const ExperimentConfig& cfg_;
  sim::DatasetIndex index_;
  std::mutex mu_;
  std::map<std::pair<int, int>, SplitData> cache_;
};

// ---------------------------------------------------------------- train

inline TrainConfig train_config_for(const ExperimentConfig& cfg, const DropoutSpec& dropout, const std::string& branch,
                                    std::uint64_t train_seed) {
  TrainConfig tc = cfg.train;
  tc.dropout = dropout;
  tc.branch = branch;
  tc.seed = train_seed;
  return tc;
}

struct TrainedPair {
  Checkpoint branch[2];
};

inline void train_variant_seed(const Context& ctx, DataCache& data, const Variant& v, std::uint64_t seed) {
  const SplitData& tr = data.get(Split::train, v.gaze);
  for (int b = 0; b < 2; ++b) {
    if (tr.branch[b].empty()) throw DataError(std::string("no training samples for branch ") + branch_name(b));
    const TrainConfig tc = train_config_for(ctx.cfg, v.dropout, branch_name(b), derive_seed(ctx.cfg.seed, kStreamTrain, seed, b));
    TrainResult res = train(tr.branch[b], tc);
    res.checkpoint.meta.seed = seed;
    res.checkpoint.meta.variant = v.name;
    ensure_dir(ctx.paths.checkpoint_dir(v.name, seed));
    save_checkpoint(res.checkpoint, ctx.paths.checkpoint(v.name, seed, branch_name(b)));
    write_file_atomic(ctx.paths.checkpoint_dir(v.name, seed) / (std::string(branch_name(b)) + "_loss.csv"),
                      loss_trace_csv(res.trace));
  }
  ctx.note("trained " + v.name + " seed " + std::to_string(seed));
}

inline void cmd_train(const Context& ctx, const std::vector<std::string>& variants) {
  DataCache data(ctx.cfg, ctx.paths);
  std::vector<std::pair<const Variant*, std::uint64_t>> tasks;
  for (const auto& name : variants) {
    const Variant& v = ctx.cfg.variant(name);
    for (auto s : ctx.cfg.seeds) tasks.emplace_back(&v, s);
  }
  parallel_for(tasks.size(), ctx.jobs, [&](std::size_t i) { train_variant_seed(ctx, data, *tasks[i].first, tasks[i].second); });
}

inline TrainedPair load_pair(const Paths& paths, const std::string& variant, std::uint64_t seed) {
  TrainedPair p;
  for (int b = 0; b < 2; ++b) {
    const auto path = paths.checkpoint(variant, seed, branch_name(b));
    if (!std::filesystem::exists(path)) throw CheckpointError("missing checkpoint " + path.string());
    p.branch[b] = load_checkpoint(path);
  }
  return p;
}

// ---------------------------------------------------------------- eval

inline std::vector<double> predictions(const TrainedPair& nets, const SplitData& d) {
  std::vector<double> per_branch[2];
  for (int b = 0; b < 2; ++b) {
    if (!d.branch[b].empty()) per_branch[b] = predict(nets.branch[b].net, nets.branch[b].meta.dropout, d.branch[b]);
  }
  std::vector<double> out;
  out.reserve(d.size());
  for (const auto& [b, i] : d.order) out.push_back(per_branch[b][i]);
  return out;
}

inline std::vector<double> targets(const SplitData& d) {
  std::vector<double> out;
  out.reserve(d.size());
  for (const auto& [b, i] : d.order) out.push_back(d.branch[b][i].steering);
  return out;
}

struct EvalRow {
  std::string variant;
  std::uint64_t seed = 0;
  std::string split;
  std::size_t samples = 0;
  double mae = 0.0;
};

inline std::vector<EvalRow> cmd_eval(const Context& ctx, const std::vector<std::string>& variants) {
  DataCache data(ctx.cfg, ctx.paths);
  std::vector<std::pair<const Variant*, std::uint64_t>> tasks;
  for (const auto& name : variants) {
    const Variant& v = ctx.cfg.variant(name);
    for (auto s : ctx.cfg.seeds) tasks.emplace_back(&v, s);
  }
  std::vector<std::vector<EvalRow>> per(tasks.size());
  parallel_for(tasks.size(), ctx.jobs, [&](std::size_t t) {
    const auto& [v, seed] = tasks[t];
    const TrainedPair nets = load_pair(ctx.paths, v->name, seed);
    for (Split s : {Split::seen, Split::unseen}) {
      const SplitData& d = data.get(s, v->gaze);
      if (d.size() == 0) throw DataError("split '" + std::string(to_string(s)) + "' has no samples");
      per[t].push_back({v->name, seed, std::string(to_string(s)), d.size(), mae_steering(predictions(nets, d), targets(d))});
    }
  });
  std::vector<EvalRow> rows;
  for (auto& p : per) rows.insert(rows.end(), p.begin(), p.end());

  std::string csv = "variant,seed,split,samples,mae_deg\n";
  for (const auto& r : rows) {
    csv += r.variant + "," + std::to_string(r.seed) + "," + r.split + "," + std::to_string(r.samples) + "," +
           fmt_double(r.mae) + "\n";
  }
  write_report(ctx.paths.reports() / "eval.csv", csv);

  std::string summary = "variant,split,median_mae_deg,mean_mae_deg,seeds\n";
  for (const auto& name : variants) {
    for (const char* split : {"seen", "unseen"}) {
      std::vector<double> m;
      for (const auto& r : rows) {
        if (r.variant == name && r.split == split) m.push_back(r.mae);
      }
      double mean = 0.0;
      for (double x : m) mean += x;
      mean /= static_cast<double>(m.size());
      summary += name + "," + split + "," + fmt_double(median(m)) + "," + fmt_double(mean) + "," +
                 std::to_string(m.size()) + "\n";
    }
  }
  write_report(ctx.paths.reports() / "eval_summary.csv", summary);
  ctx.note("eval: " + std::to_string(rows.size()) + " rows");
  return rows;
}

// ---------------------------------------------------------------- uncertainty

// Evenly spaced subset of a split, at most `k` samples.
inline SplitData subsample(const SplitData& d, std::size_t k) {
  SplitData out;
  const std::size_t n = d.size();
  const std::size_t m = std::min(k, n);
  for (std::size_t i = 0; i < m; ++i) {
    const auto [b, pos] = d.order[i * n / m];
    out.order.emplace_back(b, out.branch[b].size());
    out.branch[b].push_back(d.branch[b][pos]);
  }
  return out;
}

struct McResult {
  double average_variance = 0.0;
  double mc_shift_median = 0.0;  // median |MC mean - test-phase output|, deg
  double average_drop = 0.0;
};

inline Tensor stack_frames(std::span<const TrainSample> s, const ArchConfig& a) {
  std::vector<float> buf;
  buf.reserve(s.size() * static_cast<std::size_t>(a.in_h * a.in_w * a.in_c));
  for (const auto& x : s) buf.insert(buf.end(), x.frame.values().begin(), x.frame.values().end());
  return Tensor({static_cast<std::int64_t>(s.size()), a.in_h, a.in_w, a.in_c}, std::move(buf));
}

inline std::vector<GazeMap> gaze_maps(std::span<const TrainSample> s) {
  std::vector<GazeMap> out;
  for (const auto& x : s) {
    if (x.gaze) out.push_back(*x.gaze);
  }
  return out;
}

// MC-dropout statistics of checkpoint(s) over a split subset. `nets[b]` may be
// null for a branch with no samples.
inline McResult mc_over_split(const Checkpoint* nets[2], const SplitData& d, int T, RngStream rng) {
  McResult r;
  std::vector<double> variances;
  std::vector<double> shifts;
  double drop = 0.0;
  std::size_t drop_n = 0;
  for (int b = 0; b < 2; ++b) {
    const auto& samples = d.branch[b];
    if (samples.empty()) continue;
    if (!nets[b]) throw CheckpointError(std::string("no checkpoint for branch ") + branch_name(b));
    const auto& ck = *nets[b];
    const Tensor frames = stack_frames(samples, ck.net.arch());
    const auto maps = gaze_maps(samples);
    RngStream br = rng.derive(static_cast<std::uint64_t>(b));
    const auto rep = mc_dropout_stats(ck.net, frames, ck.meta.dropout, maps, T, br);
    const auto det = predict(ck.net, ck.meta.dropout, samples);
    for (std::size_t i = 0; i < samples.size(); ++i) {
      variances.push_back(rep.variance[i]);
      shifts.push_back(std::abs(rep.mean[i] - det[i]));
    }
    drop += average_drop_probability(ck.net, ck.meta.dropout, maps) * static_cast<double>(samples.size());
    drop_n += samples.size();
  }
  double s = 0.0;
  for (double v : variances) s += v;
  r.average_variance = variances.empty() ? 0.0 : s / static_cast<double>(variances.size());
  r.mc_shift_median = shifts.empty() ? 0.0 : median(shifts);
  r.average_drop = drop_n ? drop / static_cast<double>(drop_n) : 0.0;
  return r;
}

struct UncertaintyRow {
  std::string variant;
  std::uint64_t seed = 0;
  std::string split;
  double dp = 0.0;
  McResult mc;
};

struct SweepRow {
  double dp = 0.0;
  std::string mode;
  std::string variant;
  std::string split;
  double mae = 0.0;
  double avg_var = 0.0;
  double avg_drop = 0.0;
};

struct UncertaintyOutput {
  double matched_dp = 0.0;
  std::vector<UncertaintyRow> rows;
  std::vector<SweepRow> sweep;
};

// Average drop probability of the reference variant over the test maps; the
// uniform dp with the same average.
inline double matched_uniform_dp(const Context& ctx, DataCache& data) {
  const Variant& ref = ctx.cfg.variant(ctx.cfg.uncertainty.matched_reference);
  const PilotNetMini probe(ctx.cfg.train.arch);
  std::vector<GazeMap> maps;
  for (Split s : {Split::seen, Split::unseen}) {
    const SplitData& d = data.get(s, ref.gaze);
    for (int b = 0; b < 2; ++b) {
      for (const auto& x : d.branch[b]) {
        if (x.gaze) maps.push_back(*x.gaze);
      }
    }
  }
  if (ref.dropout.mode == DropoutMode::gaze && maps.empty()) {
    throw DataError("no gaze maps for the matched-dp reference variant");
  }
  return average_drop_probability(probe, ref.dropout, maps);
}

inline UncertaintyOutput cmd_uncertainty(const Context& ctx, const std::vector<std::string>& variants) {
  const auto& cfg = ctx.cfg;
  DataCache data(cfg, ctx.paths);
  UncertaintyOutput out;

  out.matched_dp = matched_uniform_dp(ctx, data);
  Variant matched;
  matched.name = kMatchedVariant;
  matched.dropout.mode = DropoutMode::uniform;
  matched.dropout.dp = out.matched_dp;
  matched.gaze = GazeKind::none;
  ctx.note("uncertainty: matched uniform dp " + fmt_double(out.matched_dp, 4));
  parallel_for(cfg.seeds.size(), ctx.jobs, [&](std::size_t i) { train_variant_seed(ctx, data, matched, cfg.seeds[i]); });

  std::vector<Variant> all;
  for (const auto& name : variants) all.push_back(cfg.variant(name));
  all.push_back(matched);

  const auto k = static_cast<std::size_t>(cfg.uncertainty.frames_per_split);
  std::vector<std::pair<std::size_t, std::uint64_t>> tasks;
  for (std::size_t v = 0; v < all.size(); ++v) {
    for (auto s : cfg.seeds) tasks.emplace_back(v, s);
  }
  std::vector<std::vector<UncertaintyRow>> per(tasks.size());
  parallel_for(tasks.size(), ctx.jobs, [&](std::size_t t) {
    const Variant& v = all[tasks[t].first];
    const std::uint64_t seed = tasks[t].second;
    const TrainedPair nets = load_pair(ctx.paths, v.name, seed);
    const Checkpoint* ptrs[2] = {&nets.branch[0], &nets.branch[1]};
    for (Split s : {Split::seen, Split::unseen}) {
      const SplitData sub = subsample(data.get(s, v.gaze), k);
      const RngStream rng(derive_seed(cfg.seed, kStreamMc, seed, static_cast<int>(s)), tasks[t].first);
      per[t].push_back({v.name, seed, std::string(to_string(s)), v.dropout.dp, mc_over_split(ptrs, sub, cfg.uncertainty.T, rng)});
    }
  });
  for (auto& p : per) out.rows.insert(out.rows.end(), p.begin(), p.end());

  // dp sweep: one net per (variant, dp) on the sweep branch.
  const int sb = cfg.uncertainty.sweep_branch == "overtake" ? 1 : 0;
  std::vector<std::pair<std::string, double>> sweep_tasks;
  for (const auto& name : cfg.uncertainty.sweep_variants) {
    for (double dp : cfg.uncertainty.sweep_dps) sweep_tasks.emplace_back(name, dp);
  }
  std::vector<std::vector<SweepRow>> sweep_per(sweep_tasks.size());
  parallel_for(sweep_tasks.size(), ctx.jobs, [&](std::size_t t) {
    const Variant& base = cfg.variant(sweep_tasks[t].first);
    DropoutSpec spec = base.dropout;
    spec.dp = sweep_tasks[t].second;
    const SplitData& tr = data.get(Split::train, base.gaze);
    if (tr.branch[sb].empty()) throw DataError("no training samples for the sweep branch");
    const TrainConfig tc =
        train_config_for(cfg, spec, cfg.uncertainty.sweep_branch,
                         derive_seed(cfg.seed, kStreamTrain, cfg.uncertainty.sweep_seed, sb));
    TrainResult res = train(tr.branch[sb], tc);
    res.checkpoint.meta.seed = cfg.uncertainty.sweep_seed;
    res.checkpoint.meta.variant = base.name;
    const auto path = ctx.paths.sweep_checkpoint(base.name, spec.dp, cfg.uncertainty.sweep_branch);
    ensure_dir(path.parent_path());
    save_checkpoint(res.checkpoint, path);
    const Checkpoint* ptrs[2] = {nullptr, nullptr};
    ptrs[sb] = &res.checkpoint;
    for (Split s : {Split::seen, Split::unseen}) {
      const SplitData& full = data.get(s, base.gaze);
      SplitData only;
      for (const auto& [b, i] : full.order) {
        if (b != sb) continue;
        only.order.emplace_back(b, only.branch[b].size());
        only.branch[b].push_back(full.branch[b][i]);
      }
      if (only.size() == 0) throw DataError("split '" + std::string(to_string(s)) + "' has no sweep-branch samples");
      const auto pred = predict(res.checkpoint.net, spec, only.branch[sb]);
      const RngStream rng(derive_seed(cfg.seed, kStreamSweep, static_cast<int>(s)), t);
      const McResult mc = mc_over_split(ptrs, subsample(only, k), cfg.uncertainty.T, rng);
      sweep_per[t].push_back({spec.dp, std::string(to_string(spec.mode)), base.name, std::string(to_string(s)),
                              mae_steering(pred, targets(only)), mc.average_variance, mc.average_drop});
    }
    ctx.note("sweep " + base.name + " dp " + fmt_double(spec.dp, 2));
  });
  for (auto& p : sweep_per) out.sweep.insert(out.sweep.end(), p.begin(), p.end());

  std::string csv = "variant,seed,split,dp,avg_drop_prob,avg_var_deg2,mc_shift_median_deg\n";
  for (const auto& r : out.rows) {
    csv += r.variant + "," + std::to_string(r.seed) + "," + r.split + "," + fmt_double(r.dp) + "," +
           fmt_double(r.mc.average_drop) + "," + fmt_double(r.mc.average_variance) + "," +
           fmt_double(r.mc.mc_shift_median) + "\n";
  }
  write_report(ctx.paths.reports() / "uncertainty.csv", csv);

  std::string summary = "variant,split,median_avg_var_deg2,median_avg_drop_prob,median_mc_shift_deg\n";
  for (const auto& v : all) {
    for (const char* split : {"seen", "unseen"}) {
      std::vector<double> var, drop, shift;
      for (const auto& r : out.rows) {
        if (r.variant != v.name || r.split != split) continue;
        var.push_back(r.mc.average_variance);
        drop.push_back(r.mc.average_drop);
        shift.push_back(r.mc.mc_shift_median);
      }
      summary += v.name + "," + split + "," + fmt_double(median(var)) + "," + fmt_double(median(drop)) + "," +
                 fmt_double(median(shift)) + "\n";
    }
  }
  write_report(ctx.paths.reports() / "uncertainty_summary.csv", summary);

  std::string sweep = "dp,mode,variant,split,mae_deg,avg_var_deg2,avg_drop_prob\n";
  for (const auto& r : out.sweep) {
    sweep += fmt_double(r.dp, 2) + "," + r.mode + "," + r.variant + "," + r.split + "," + fmt_double(r.mae) + "," +
             fmt_double(r.avg_var) + "," + fmt_double(r.avg_drop) + "\n";
  }
  write_report(ctx.paths.reports() / "dp_sweep.csv", sweep);

  nlohmann::json matched_json = {{"reference", cfg.uncertainty.matched_reference},
                                 {"reference_dp", cfg.variant(cfg.uncertainty.matched_reference).dropout.dp},
                                 {"average_drop_probability", std::stod(fmt_double(out.matched_dp, 9))},
                                 {"matched_variant", kMatchedVariant}};
  write_report(ctx.paths.reports() / "matched_dp.json", matched_json.dump(2) + "\n");
  return out;
}

// ---------------------------------------------------------------- closed loop

inline sim::GazeSource gaze_source_for(const Variant& v) {
  switch (v.gaze) {
    case GazeKind::real: return sim::GazeSource::oracle;
    case GazeKind::estimated: return sim::GazeSource::jittered_oracle;
    case GazeKind::none: break;
  }
  return v.dropout.mode == DropoutMode::center_blob ? sim::GazeSource::center_blob : sim::GazeSource::none;
}

// Command-selected pair of nets as a closed-loop driver, test-phase dropout.
class NetDriver {
 public:
  explicit NetDriver(const TrainedPair& nets) : nets_(nets) {
    for (int b = 0; b < 2; ++b) {
      const auto& ck = nets_.branch[b];
      spec_[b] = ck.meta.dropout.with_phase(Phase::test);
      if (spec_[b].mode != DropoutMode::gaze) fixed_[b] = build_keep_masks(ck.net, spec_[b], {}, 1);
    }
  }

  double operator()(const sim::Observation& o) {
    const int b = branch_index(o.command);
    const auto& net = nets_.branch[b].net;
    const auto frame = o.frame.values();
    if (spec_[b].mode == DropoutMode::gaze) {
      if (!o.gaze) throw ConfigError("gaze-modulated net driven without a gaze map");
      const BatchKeepMasks keep = build_keep_masks(net, spec_[b], std::span<const GazeMap>(o.gaze, 1), 1);
      return forward_with_masks<float>(net, frame, 1, spec_[b], keep.view, rng_, cache_)[0];
    }
    return forward_with_masks<float>(net, frame, 1, spec_[b], fixed_[b].view, rng_, cache_)[0];
  }

 private:
  const TrainedPair& nets_;
  DropoutSpec spec_[2];
  BatchKeepMasks fixed_[2];
  ForwardCache<float> cache_;
  RngStream rng_{0};
};

struct EpisodeRow {
  std::string variant;
  std::uint64_t seed = 0;
  std::string scenario;
  int episode = 0;
  sim::EpisodeLog log;
};

struct ScenarioSummary {
  std::optional<double> success_rate;
  double dist_before_first = 0.0;  // mean over episodes, km
  double dist_between = 0.0;       // mean over episodes, km
  double dist_between_median = 0.0;
  int episodes = 0;
  int infractions = 0;
  int attempts = 0;
  int successes = 0;
};

struct ClosedLoopOutput {
  std::vector<EpisodeRow> episodes;
  std::map<std::string, std::map<std::string, ScenarioSummary>> summary;  // variant -> scenario
};

inline const char* scenario_name(bool traffic) { return traffic ? "with_cars" : "no_cars"; }

inline ClosedLoopOutput cmd_closed_loop(const Context& ctx, const std::vector<std::string>& variants) {
  const auto& cfg = ctx.cfg;
  const auto tracks = make_tracks(cfg);
  std::vector<const sim::Track*> unseen;
  for (const auto& t : tracks) {
    if (t.split == "unseen") unseen.push_back(&t.track);
  }
  if (unseen.empty()) throw ConfigError("/world/unseen_tracks: closed-loop evaluation needs unseen tracks");

  struct Task {
    const Variant* v;
    std::uint64_t seed;
    bool traffic;
    int episode;
  };
  std::vector<Task> tasks;
  for (const auto& name : variants) {
    const Variant& v = cfg.variant(name);
    sim::check_gaze_source(v.dropout, gaze_source_for(v));
    for (auto s : cfg.seeds) {
      for (bool traffic : {true, false}) {
        for (int e = 0; e < cfg.closed_loop.episodes_per_seed; ++e) tasks.push_back({&v, s, traffic, e});
      }
    }
  }
  std::map<std::pair<std::string, std::uint64_t>, TrainedPair> nets;
  for (const auto& name : variants) {
    for (auto s : cfg.seeds) nets.emplace(std::make_pair(name, s), load_pair(ctx.paths, name, s));
  }

  std::vector<EpisodeRow> rows(tasks.size());
  parallel_for(tasks.size(), ctx.jobs, [&](std::size_t i) {
    const Task& t = tasks[i];
    NetDriver driver(nets.at({t.v->name, t.seed}));
    sim::ClosedLoopConfig sc = cfg.closed_loop.sim;
    sc.traffic = t.traffic;
    const sim::Track& track = *unseen[static_cast<std::size_t>(t.episode) % unseen.size()];
    // Episode randomness does not depend on the variant, so all variants
    // face identical traffic.
    const std::uint64_t ep_seed = derive_seed(cfg.seed, kStreamClosedLoop, t.seed, t.traffic ? 1 : 0, t.episode);
    rows[i] = {t.v->name, t.seed, scenario_name(t.traffic), t.episode,
               sim::run_closed_loop(track, sc, gaze_source_for(*t.v), std::ref(driver), ep_seed)};
    if (!cfg.closed_loop.step_logs) rows[i].log.steps.clear();
  });
  ctx.note("closed-loop: " + std::to_string(rows.size()) + " episodes");

  ClosedLoopOutput out;
  std::string csv =
      "variant,seed,scenario,episode,track,infractions,dist_before_first_km,dist_between_km,overtake_attempts,"
      "overtake_successes\n";
  for (const auto& r : rows) {
    csv += r.variant + "," + std::to_string(r.seed) + "," + r.scenario + "," + std::to_string(r.episode) + "," +
           std::to_string(r.log.track) + "," + std::to_string(r.log.infractions()) + "," +
           fmt_double(r.log.dist_before_first_km()) + "," + fmt_double(r.log.dist_between_km()) + "," +
           std::to_string(r.log.overtake_attempts) + "," + std::to_string(r.log.overtake_successes) + "\n";
    if (cfg.closed_loop.step_logs) {
      const auto dir = ctx.paths.root / "episodes" / r.variant / ("seed" + std::to_string(r.seed));
      const std::string stem = r.scenario + "_" + std::to_string(r.episode);
      write_report(dir / (stem + ".csv"), sim::episode_csv(r.log));
      write_report(dir / (stem + ".json"), sim::episode_summary(r.log).dump(2) + "\n");
    }
  }
  write_report(ctx.paths.reports() / "closed_loop_episodes.csv", csv);

  nlohmann::json js = nlohmann::json::object();
  for (const auto& name : variants) {
    for (bool traffic : {true, false}) {
      ScenarioSummary s;
      std::vector<double> between;
      for (const auto& r : rows) {
        if (r.variant != name || r.scenario != scenario_name(traffic)) continue;
        ++s.episodes;
        s.infractions += r.log.infractions();
        s.attempts += r.log.overtake_attempts;
        s.successes += r.log.overtake_successes;
        s.dist_before_first += r.log.dist_before_first_km();
        s.dist_between += r.log.dist_between_km();
        between.push_back(r.log.dist_between_km());
      }
      s.dist_before_first /= s.episodes;
      s.dist_between /= s.episodes;
      s.dist_between_median = median(between);
      if (traffic && s.attempts > 0) s.success_rate = static_cast<double>(s.successes) / s.attempts;
      out.summary[name][scenario_name(traffic)] = s;
      auto round = [](double x) { return std::stod(fmt_double(x, 6)); };
      js[name][scenario_name(traffic)] = {
          {"success_rate", traffic ? (s.success_rate ? nlohmann::json(round(*s.success_rate)) : nlohmann::json(nullptr))
                                   : nlohmann::json("N/A")},
          {"dist_before_first", round(s.dist_before_first)},
          {"dist_between", round(s.dist_between)},
          {"dist_between_median", round(s.dist_between_median)},
          {"episodes", s.episodes},
          {"infractions", s.infractions},
          {"overtake_attempts", s.attempts},
          {"overtake_successes", s.successes}};
    }
  }
  write_report(ctx.paths.reports() / "closed_loop.json", js.dump(2) + "\n");
  out.episodes = std::move(rows);
  return out;
}

// ---------------------------------------------------------------- saliency metrics

struct SaliencyRow {
  std::string comparison;
  std::string split;
  double kl = 0.0;
  double cc = 0.0;
  std::size_t samples = 0;
};

inline std::vector<SaliencyRow> cmd_metrics(const Context& ctx) {
  const auto& cfg = ctx.cfg;
  const sim::DatasetIndex idx = load_index(ctx.paths);
  double blob_sigma = cfg.dataset.gaze_real.sigma_frac * cfg.dataset.camera.width;
  for (const auto& v : cfg.variants) {
    if (v.dropout.mode == DropoutMode::center_blob) blob_sigma = v.dropout.blob_sigma;
  }
  const GazeMap blob = normalize_max(center_blob(cfg.dataset.camera.height, cfg.dataset.camera.width, blob_sigma));
  std::vector<SaliencyRow> rows;
  for (Split s : {Split::seen, Split::unseen}) {
    SaliencyRow est{"estimated_vs_real", std::string(to_string(s))};
    SaliencyRow cen{"center_blob_vs_real", std::string(to_string(s))};
    for (const auto& r : idx.records) {
      if (split_of(cfg, r) != s) continue;
      const GazeMap real = load_pgm(idx.resolve(r.gaze_real));
      const GazeMap e = load_pgm(idx.resolve(r.gaze_est));
      est.kl += kl_divergence(real, e);
      est.cc += correlation_coefficient(real, e);
      cen.kl += kl_divergence(real, blob);
      cen.cc += correlation_coefficient(real, blob);
      ++est.samples;
      ++cen.samples;
    }
    for (auto* row : {&est, &cen}) {
      if (row->samples == 0) throw DataError("split '" + row->split + "' has no samples");
      row->kl /= static_cast<double>(row->samples);
      row->cc /= static_cast<double>(row->samples);
      rows.push_back(*row);
    }
  }
  std::string csv = "comparison,split,kl,cc,samples\n";
  for (const auto& r : rows) {
    csv += r.comparison + "," + r.split + "," + fmt_double(r.kl) + "," + fmt_double(r.cc) + "," +
           std::to_string(r.samples) + "\n";
  }
  write_report(ctx.paths.reports() / "saliency.csv", csv);
  return rows;
}

// ---------------------------------------------------------------- reproduce-paper

struct Claim {
  std::string id;
  std::string description;
  bool pass = false;
  std::string detail;
};

struct ReproduceOutput {
  std::vector<EvalRow> eval;
  UncertaintyOutput uncertainty;
  ClosedLoopOutput closed_loop;
  std::vector<SaliencyRow> saliency;
  std::vector<Claim> claims;
};

inline std::vector<std::string> variant_names(const ExperimentConfig& cfg) {
  std::vector<std::string> out;
  for (const auto& v : cfg.variants) out.push_back(v.name);
  return out;
}

namespace detail {

inline bool has_variant(const ExperimentConfig& cfg, const std::string& name) {
  for (const auto& v : cfg.variants) {
    if (v.name == name) return true;
  }
  return false;
}

inline std::optional<double> median_where(const std::vector<EvalRow>& rows, const std::string& variant,
                                          const std::string& split) {
  std::vector<double> v;
  for (const auto& r : rows) {
    if (r.variant == variant && r.split == split) v.push_back(r.mae);
  }
  if (v.empty()) return std::nullopt;
  return median(v);
}

inline std::optional<double> median_var(const std::vector<UncertaintyRow>& rows, const std::string& variant,
                                        const std::string& split) {
  std::vector<double> v;
  for (const auto& r : rows) {
    if (r.variant == variant && r.split == split) v.push_back(r.mc.average_variance);
  }
  if (v.empty()) return std::nullopt;
  return median(v);
}

}  // namespace detail

// The paper's comparative claims evaluated on this run's reports.
inline std::vector<Claim> evaluate_claims(const ExperimentConfig& cfg, const ReproduceOutput& r) {
  std::vector<Claim> claims;
  auto fmt = [](std::optional<double> x) { return x ? fmt_double(*x, 4) : std::string("n/a"); };
  const std::string U = "uniform", GR = "gaze-real", GE = "gaze-estimated";
  const bool have = detail::has_variant(cfg, U) && detail::has_variant(cfg, GR) && detail::has_variant(cfg, GE);

  {
    Claim c{"generalization", "unseen MAE: gaze-estimated <= 0.9 x uniform and gaze-real <= gaze-estimated (medians)"};
    const auto u = detail::median_where(r.eval, U, "unseen");
    const auto ge = detail::median_where(r.eval, GE, "unseen");
    const auto gr = detail::median_where(r.eval, GR, "unseen");
    c.pass = have && u && ge && gr && *ge <= 0.9 * *u && *gr <= *ge;
    c.detail = "uniform " + fmt(u) + ", gaze-estimated " + fmt(ge) + ", gaze-real " + fmt(gr);
    claims.push_back(c);
  }
  {
    Claim c{"uncertainty_matched",
            "unseen variance at matched drop probability: gaze-real < uniform-matched and gaze-estimated < "
            "uniform-matched (medians)"};
    const auto um = detail::median_var(r.uncertainty.rows, kMatchedVariant, "unseen");
    const auto ge = detail::median_var(r.uncertainty.rows, GE, "unseen");
    const auto gr = detail::median_var(r.uncertainty.rows, GR, "unseen");
    c.pass = have && um && ge && gr && *gr < *um && *ge < *um;
    c.detail = "uniform-matched " + fmt(um) + " (dp " + fmt_double(r.uncertainty.matched_dp, 4) + "), gaze-real " +
               fmt(gr) + ", gaze-estimated " + fmt(ge);
    claims.push_back(c);
  }
  {
    Claim c{"uncertainty_seen_lt_unseen", "median variance on seen < unseen, for every variant"};
    c.pass = true;
    std::vector<std::string> names = variant_names(cfg);
    names.push_back(kMatchedVariant);
    for (const auto& n : names) {
      const auto s = detail::median_var(r.uncertainty.rows, n, "seen");
      const auto u = detail::median_var(r.uncertainty.rows, n, "unseen");
      const bool ok = s && u && *s < *u;
      c.pass = c.pass && ok;
      c.detail += (c.detail.empty() ? "" : "; ") + n + " " + fmt(s) + " vs " + fmt(u);
    }
    claims.push_back(c);
  }
  {
    Claim c{"uncertainty_dp_trend", "Spearman rho(dp, variance) > 0.8 for every swept variant and split"};
    c.pass = !r.uncertainty.sweep.empty();
    for (const auto& name : cfg.uncertainty.sweep_variants) {
      for (const char* split : {"seen", "unseen"}) {
        std::vector<double> dps, vars;
        for (const auto& row : r.uncertainty.sweep) {
          if (row.variant == name && row.split == split) {
            dps.push_back(row.dp);
            vars.push_back(row.avg_var);
          }
        }
        std::optional<double> rho;
        if (dps.size() >= 2) {
          try {
            rho = spearman(dps, vars);
          } catch (const MetricError&) {
          }
        }
        c.pass = c.pass && rho && *rho > 0.8;
        c.detail += (c.detail.empty() ? "" : "; ") + name + "/" + split + " rho " + fmt(rho);
      }
    }
    claims.push_back(c);
  }
  {
    Claim c{"closed_loop_distance",
            "median distance between infractions: gaze-estimated >= 1.2 x uniform, with and without cars"};
    const auto& s = r.closed_loop.summary;
    c.pass = s.count(U) && s.count(GE);
    if (c.pass) {
      for (const char* sc : {"with_cars", "no_cars"}) {
        const double u = s.at(U).at(sc).dist_between_median;
        const double g = s.at(GE).at(sc).dist_between_median;
        c.pass = c.pass && g >= 1.2 * u;
        c.detail += std::string(c.detail.empty() ? "" : "; ") + sc + ": gaze-estimated " + fmt_double(g, 4) +
                    " km vs uniform " + fmt_double(u, 4) + " km";
      }
    }
    claims.push_back(c);
  }
  {
    Claim c{"closed_loop_overtake", "overtake success rate: gaze-estimated > uniform"};
    const auto& s = r.closed_loop.summary;
    if (s.count(U) && s.count(GE)) {
      const auto u = s.at(U).at("with_cars").success_rate;
      const auto g = s.at(GE).at("with_cars").success_rate;
      c.pass = u && g && *g > *u;
      c.detail = "gaze-estimated " + fmt(g) + " vs uniform " + fmt(u);
    }
    claims.push_back(c);
  }
  return claims;
}

inline ReproduceOutput cmd_reproduce(const Context& ctx) {
  ReproduceOutput out;
  const auto names = variant_names(ctx.cfg);
  cmd_gen_data(ctx);
  ctx.note("train: " + std::to_string(names.size()) + " variants x " + std::to_string(ctx.cfg.seeds.size()) + " seeds");
  cmd_train(ctx, names);
  out.eval = cmd_eval(ctx, names);
  out.uncertainty = cmd_uncertainty(ctx, names);
  out.closed_loop = cmd_closed_loop(ctx, ctx.cfg.closed_loop.variants);
  out.saliency = cmd_metrics(ctx);
  out.claims = evaluate_claims(ctx.cfg, out);

  nlohmann::json claims = nlohmann::json::array();
  for (const auto& c : out.claims) {
    claims.push_back({{"id", c.id}, {"claim", c.description}, {"pass", c.pass}, {"detail", c.detail}});
  }
  write_report(ctx.paths.reports() / "claims.json", claims.dump(2) + "\n");
  return out;
}

}  // namespace gazedrop::experiment
