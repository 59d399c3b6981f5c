// Acceptance run: one PASS/FAIL line per criterion. Criteria 6-8 drive the
// shipped default experiment through the CLI and judge its reports; 9 runs
// the smoke pipeline twice and compares report bytes.

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "gazedrop/checkpoint.hpp"
#include "gazedrop/dropout.hpp"
#include "gazedrop/experiment/pipeline.hpp"
#include "gazedrop/metrics.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace gazedrop;
namespace fs = std::filesystem;

namespace {

const std::string kCli = GAZEDROP_CLI;
const fs::path kConfigs = GAZEDROP_CONFIG_DIR;

struct Result {
  int id = 0;
  std::string name;
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string num(double v, int prec = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

// ------------------------------------------------------------- csv access

using Row = std::map<std::string, std::string>;

std::vector<Row> read_csv(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("missing report " + p.string());
  std::string line;
  std::getline(in, line);
  std::vector<std::string> header;
  {
    std::stringstream s(line);
    std::string cell;
    while (std::getline(s, cell, ',')) header.push_back(cell);
  }
  std::vector<Row> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream s(line);
    std::string cell;
    Row r;
    for (const auto& h : header) {
      std::getline(s, cell, ',');
      r[h] = cell;
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

double med(std::vector<double> v) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

std::vector<double> column_where(const std::vector<Row>& rows, const std::string& col,
                                 const std::map<std::string, std::string>& where) {
  std::vector<double> out;
  for (const auto& r : rows) {
    bool ok = true;
    for (const auto& [k, v] : where) ok = ok && r.at(k) == v;
    if (ok) out.push_back(std::stod(r.at(col)));
  }
  return out;
}

// Spearman's rho for tie-free data: 1 - 6 sum d^2 / (n (n^2 - 1)).
double spearman_no_ties(const std::vector<double>& x, const std::vector<double>& y) {
  auto rank = [](const std::vector<double>& v) {
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
      r[i] = 1.0;
      for (std::size_t j = 0; j < v.size(); ++j) r[i] += v[j] < v[i];
    }
    return r;
  };
  const auto rx = rank(x), ry = rank(y);
  double d2 = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) d2 += (rx[i] - ry[i]) * (rx[i] - ry[i]);
  const double n = static_cast<double>(x.size());
  return 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
}

GazeMap random_map(RngStream& rng, std::int64_t h, std::int64_t w) {
  std::vector<float> v(static_cast<std::size_t>(h * w));
  for (auto& x : v) x = rng.uniform();
  return GazeMap(h, w, std::move(v));
}

// ------------------------------------------------------------- criteria 1-5

Result mask_statistics() {
  const auto t0 = Clock::now();
  RngStream rng(101);
  double worst = 0.0;
  std::size_t pixels = 0;
  for (double dp : {0.3, 0.7}) {
    for (int m = 0; m < 3; ++m) {
      const GazeMap g = random_map(rng, 24, 32);
      const std::int64_t h = 11, w = 15;
      const KeepMask k = make_keep_mask(g, dp, h, w);
      std::vector<int> dropped(static_cast<std::size_t>(h * w), 0);
      const int draws = 10000;
      for (int t = 0; t < draws; ++t) {
        const BinaryMask b = sample_binary_mask(k, rng);
        for (std::size_t i = 0; i < dropped.size(); ++i) dropped[i] += b.values().values()[i] == 0.0f;
      }
      for (std::int64_t i = 0; i < h; ++i) {
        for (std::int64_t j = 0; j < w; ++j) {
          const double expect = 1.0 - oracle::keep_probability(g, dp, h, w, i, j);
          const double got = dropped[static_cast<std::size_t>(i * w + j)] / static_cast<double>(draws);
          worst = std::max(worst, std::abs(got - expect));
          ++pixels;
        }
      }
    }
  }
  const double secs = seconds_since(t0);
  return {1, "mask statistics", worst <= 0.015 && secs < 30.0,
          "max |drop freq - (1-K)| " + num(worst) + " over " + std::to_string(pixels) + " pixels (<= 0.015), " +
              num(secs, 1) + " s (< 30 s)"};
}

Result expectation_approximation(const fs::path& default_root) {
  const auto t0 = Clock::now();
  // Feature-level identity.
  RngStream rng(202);
  const std::int64_t H = 10, W = 14, C = 4;
  Tensor f({1, H, W, C});
  for (auto& v : f.values()) v = 0.1f + rng.uniform();
  const GazeMap g = random_map(rng, 20, 28);
  DropoutSpec spec;
  spec.mode = DropoutMode::gaze;
  spec.dp = 0.7;
  spec.phase = Phase::train;
  std::vector<double> acc(f.size(), 0.0);
  const int draws = 10000;
  for (int t = 0; t < draws; ++t) {
    const Tensor y = apply_dropout(f, spec, &g, rng);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += y.values()[i];
  }
  double worst_rel = 0.0;
  for (std::int64_t i = 0; i < H; ++i) {
    for (std::int64_t j = 0; j < W; ++j) {
      const double k = oracle::keep_probability(g, spec.dp, H, W, i, j);
      for (std::int64_t c = 0; c < C; ++c) {
        const std::size_t idx = static_cast<std::size_t>(((i * W) + j) * C + c);
        const double fv = f.values()[idx];
        worst_rel = std::max(worst_rel, std::abs(acc[idx] / draws - k * fv) / fv);
      }
    }
  }
  // End to end on a trained default gaze-real net.
  double median_shift = std::nan("");
  std::string where;
  try {
    const auto cfg = experiment::load_config(kConfigs / "default.json");
    const experiment::Paths paths{default_root};
    const Checkpoint ck = load_checkpoint(paths.checkpoint("gaze-real", cfg.seeds.front(), "follow"));
    const auto idx = experiment::load_index(paths);
    const auto split = experiment::load_split(cfg, idx, experiment::Split::unseen, experiment::GazeKind::real);
    const auto& samples = split.branch[0];
    const std::size_t n = std::min<std::size_t>(100, samples.size());
    const std::size_t stride = std::max<std::size_t>(1, samples.size() / std::max<std::size_t>(n, 1));
    RngStream mc(303);
    std::vector<double> shifts;
    const DropoutSpec train = ck.meta.dropout.with_phase(Phase::train);
    const DropoutSpec test = ck.meta.dropout.with_phase(Phase::test);
    for (std::size_t s = 0; s < n; ++s) {
      const auto& x = samples[s * stride];
      Tensor frame({1, x.frame.extent(0), x.frame.extent(1), 1}, std::vector<float>(x.frame.values().begin(), x.frame.values().end()));
      const std::vector<GazeMap> maps{*x.gaze};
      const double det = forward(ck.net, frame, test, maps, mc).values()[0];
      double mean = 0.0;
      for (int t = 0; t < 50; ++t) mean += forward(ck.net, frame, train, maps, mc).values()[0];
      shifts.push_back(std::abs(mean / 50.0 - det));
    }
    median_shift = med(shifts);
    where = " over " + std::to_string(shifts.size()) + " unseen frames";
  } catch (const std::exception& e) {
    where = " (default net unavailable: " + std::string(e.what()) + ")";
  }
  const double secs = seconds_since(t0);
  return {2, "expectation approximation", worst_rel <= 0.02 && median_shift < 0.5 && secs < 120.0,
          "feature max rel err " + num(worst_rel) + " (<= 0.02); median |MC mean - K-multiply| " + num(median_shift) +
              " deg" + where + " (< 0.5); " + num(secs, 1) + " s (< 120 s)"};
}

Result gradient_correctness() {
  const auto t0 = Clock::now();
  const auto r = oracle::gradient_check(ArchConfig::miniature(), 11);
  const double secs = seconds_since(t0);
  return {3, "gradient correctness", r.max_rel_error <= 1e-3 && r.skipped * 10 < r.checked && secs < 60.0,
          "max rel err " + num(r.max_rel_error, 6) + " at " + r.worst + " over " + std::to_string(r.checked) +
              " params (" + std::to_string(r.skipped) + " at ReLU kinks skipped), " + num(secs, 2) + " s"};
}

Result metric_oracles() {
  const auto t0 = Clock::now();
  RngStream rng(404);
  double kl_err = 0.0, cc_err = 0.0, self_kl = 0.0, affine_err = 0.0;
  for (int t = 0; t < 100; ++t) {
    const GazeMap p = random_map(rng, 8, 8), q = random_map(rng, 8, 8);
    kl_err = std::max(kl_err, std::abs(kl_divergence(p, q) - oracle::kl(p, q)));
    cc_err = std::max(cc_err, std::abs(correlation_coefficient(p, q) - oracle::cc(p, q)));
    self_kl = std::max(self_kl, std::abs(kl_divergence(p, p)));
    std::vector<float> a;
    for (float v : p.values()) a.push_back(2.5f * v + 0.75f);
    const GazeMap pa(8, 8, a);
    affine_err = std::max(affine_err, std::abs(correlation_coefficient(pa, q) - correlation_coefficient(p, q)));
    affine_err = std::max(affine_err, std::abs(correlation_coefficient(p, pa) - 1.0));
  }
  const double secs = seconds_since(t0);
  const bool pass = kl_err <= 1e-9 && cc_err <= 1e-9 && self_kl <= 1e-9 && affine_err <= 1e-6 && secs < 5.0;
  return {4, "metric oracles", pass,
          "KL err " + std::to_string(kl_err) + ", CC err " + std::to_string(cc_err) + ", max |KL(p||p)| " +
              std::to_string(self_kl) + ", CC affine err " + std::to_string(affine_err) + ", " + num(secs, 2) + " s"};
}

Result mc_uncertainty_oracle() {
  const auto t0 = Clock::now();
  RngStream rng(505);
  const KeepMask k = uniform_keep_mask(0.3, 1, 1);
  const double w = 1.0, x = 1.0;
  const Moments m = mc_moments([&] { return sample_binary_mask(k, rng).at(0, 0) * w * x; }, 100000);
  const double secs = seconds_since(t0);
  return {5, "MC-uncertainty oracle",
          std::abs(m.mean - 0.7) <= 0.01 && std::abs(m.variance - 0.21) <= 0.01 && secs < 10.0,
          "mean " + num(m.mean) + " (0.7 +- 0.01), variance " + num(m.variance) + " (0.21 +- 0.01), " + num(secs, 2) +
              " s"};
}

// ------------------------------------------------------------- criteria 6-9

struct Stage {
  bool ok = true;
  double seconds = 0.0;
  bool measured = true;
  std::string log;
};

Stage run_stages(const std::vector<std::string>& cmds, const fs::path& root, const fs::path& log_dir) {
  Stage st;
  const auto t0 = Clock::now();
  for (const auto& c : cmds) {
    const std::string name = c.substr(0, c.find(' '));
    std::cerr << "acceptance: running " << name << "\n";
    const auto r = test::run_shell(kCli + " " + c + " --config " + (kConfigs / "default.json").string() + " --out " +
                                       root.string(),
                                   log_dir / (name + ".out"));
    if (r.code != 0) {
      st.ok = false;
      st.log += name + " exited " + std::to_string(r.code) + "; ";
      break;
    }
  }
  st.seconds = seconds_since(t0);
  return st;
}

std::string timing(const Stage& s, double limit_min) {
  if (!s.measured) return "runtime not measured (reused run)";
  return num(s.seconds / 60.0, 1) + " min (< " + num(limit_min, 0) + " min)";
}

Result generalization(const fs::path& root, const Stage& st) {
  if (!st.ok) return {6, "generalization", false, "pipeline failed: " + st.log};
  const auto rows = read_csv(root / "reports" / "eval.csv");
  auto m = [&](const char* v) { return med(column_where(rows, "mae_deg", {{"variant", v}, {"split", "unseen"}})); };
  const double uni = m("uniform"), est = m("gaze-estimated"), real = m("gaze-real");
  const bool time_ok = st.measured && st.seconds < 45 * 60;
  return {6, "generalization", est <= 0.9 * uni && real <= est && time_ok,
          "median unseen MAE uniform " + num(uni) + ", gaze-estimated " + num(est) + " (<= 0.9x = " + num(0.9 * uni) +
              "), gaze-real " + num(real) + " (<= gaze-estimated); " + timing(st, 45)};
}

Result uncertainty(const fs::path& root, const Stage& st) {
  if (!st.ok) return {7, "uncertainty ordering", false, "pipeline failed: " + st.log};
  const auto rows = read_csv(root / "reports" / "uncertainty.csv");
  auto v = [&](const std::string& var, const char* split) {
    return med(column_where(rows, "avg_var_deg2", {{"variant", var}, {"split", split}}));
  };
  const double matched = v(experiment::kMatchedVariant, "unseen");
  const double real = v("gaze-real", "unseen"), est = v("gaze-estimated", "unseen");
  bool ok = real < matched && est < matched;
  std::string detail = "unseen var gaze-real " + num(real, 5) + ", gaze-estimated " + num(est, 5) +
                       " vs matched uniform " + num(matched, 5) + "; seen<unseen:";
  std::set<std::string> variants;
  for (const auto& r : rows) variants.insert(r.at("variant"));
  for (const auto& var : variants) {
    const bool lt = v(var, "seen") < v(var, "unseen");
    ok = ok && lt;
    detail += " " + var + (lt ? " yes" : " NO");
  }
  const auto sweep = read_csv(root / "reports" / "dp_sweep.csv");
  std::set<std::pair<std::string, std::string>> groups;
  for (const auto& r : sweep) groups.insert({r.at("variant"), r.at("split")});
  detail += "; Spearman(dp, var):";
  for (const auto& [var, split] : groups) {
    const auto dps = column_where(sweep, "dp", {{"variant", var}, {"split", split}});
    const auto vars = column_where(sweep, "avg_var_deg2", {{"variant", var}, {"split", split}});
    const double rho = spearman_no_ties(dps, vars);
    ok = ok && rho > 0.8;
    detail += " " + var + "/" + split + " " + num(rho, 3);
  }
  const bool time_ok = st.measured && st.seconds < 20 * 60;
  return {7, "uncertainty ordering", ok && time_ok, detail + "; " + timing(st, 20)};
}

Result closed_loop(const fs::path& root, const Stage& st) {
  if (!st.ok) return {8, "closed loop", false, "pipeline failed: " + st.log};
  const auto rows = read_csv(root / "reports" / "closed_loop_episodes.csv");
  bool ok = true;
  std::string detail;
  for (const char* sc : {"with_cars", "no_cars"}) {
    const auto u = column_where(rows, "dist_between_km", {{"variant", "uniform"}, {"scenario", sc}});
    const auto e = column_where(rows, "dist_between_km", {{"variant", "gaze-estimated"}, {"scenario", sc}});
    std::set<std::string> seeds;
    for (const auto& r : rows) {
      if (r.at("scenario") == sc && r.at("variant") == "uniform") seeds.insert(r.at("seed"));
    }
    const bool enough = seeds.size() >= 5 && u.size() >= 10 * seeds.size() && e.size() == u.size();
    const double mu = med(u), me = med(e);
    ok = ok && enough && me >= 1.2 * mu;
    detail += std::string(sc) + ": median km between infractions gaze-estimated " + num(me) + " vs uniform " +
              num(mu) + " (>= 1.2x = " + num(1.2 * mu) + ", " + std::to_string(u.size()) + " episodes); ";
  }
  auto rate = [&](const char* var) {
    const auto a = column_where(rows, "overtake_attempts", {{"variant", var}, {"scenario", "with_cars"}});
    const auto s = column_where(rows, "overtake_successes", {{"variant", var}, {"scenario", "with_cars"}});
    double na = 0, ns = 0;
    for (double x : a) na += x;
    for (double x : s) ns += x;
    return std::pair{ns, na};
  };
  const auto [su, au] = rate("uniform");
  const auto [se, ae] = rate("gaze-estimated");
  const double ru = au > 0 ? su / au : std::nan(""), re = ae > 0 ? se / ae : std::nan("");
  ok = ok && re > ru;
  detail += "overtake success gaze-estimated " + num(re, 3) + " (" + std::to_string(int(se)) + "/" +
            std::to_string(int(ae)) + ") vs uniform " + num(ru, 3) + " (" + std::to_string(int(su)) + "/" +
            std::to_string(int(au)) + "); ";
  const bool time_ok = st.measured && st.seconds < 30 * 60;
  return {8, "closed loop", ok && time_ok, detail + timing(st, 30)};
}

Result determinism(const fs::path& work) {
  const fs::path a = work / "determinism_a", b = work / "determinism_b";
  std::error_code ec;
  fs::remove_all(a, ec);
  fs::remove_all(b, ec);
  fs::create_directories(work, ec);
  const std::string cfg = " --quiet --config " + (kConfigs / "smoke.json").string();
  const auto ra = test::run_shell(kCli + " reproduce-paper --jobs 1" + cfg + " --out " + a.string(), work / "det_a.out");
  const auto rb = test::run_shell(kCli + " reproduce-paper --jobs 2" + cfg + " --out " + b.string(), work / "det_b.out");
  if (ra.code != 0 || rb.code != 0) return {9, "determinism", false, "reproduce-paper failed"};
  int files = 0;
  std::vector<std::string> differ;
  for (const auto& e : fs::directory_iterator(a / "reports")) {
    ++files;
    const fs::path other = b / "reports" / e.path().filename();
    if (!fs::exists(other) || test::slurp(e.path()) != test::slurp(other)) differ.push_back(e.path().filename());
  }
  int files_b = 0;
  for (const auto& e : fs::directory_iterator(b / "reports")) files_b += fs::is_regular_file(e);
  std::string detail = std::to_string(files) + " report files compared (runs with 1 and 2 workers)";
  for (const auto& d : differ) detail += "; differs: " + d;
  return {9, "determinism", files > 0 && differ.empty() && files == files_b, detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  fs::path work = "acceptance_runs";
  bool reuse = false;
  app.add_option("--work", work, "scratch directory for pipeline runs");
  app.add_flag("--reuse", reuse, "judge an existing default run instead of rerunning it (runtimes unmeasured)");
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(work);

  std::vector<Result> results;
  results.push_back(mask_statistics());
  results.push_back(gradient_correctness());
  results.push_back(metric_oracles());
  results.push_back(mc_uncertainty_oracle());

  const fs::path root = work / "default";
  Stage s6, s7, s8;
  if (reuse && fs::exists(root / "reports" / "closed_loop_episodes.csv")) {
    s6.measured = s7.measured = s8.measured = false;
  } else {
    std::error_code ec;
    fs::remove_all(root, ec);
    s6 = run_stages({"gen-data", "train", "eval"}, root, work);
    s7 = s6.ok ? run_stages({"uncertainty"}, root, work) : s6;
    s8 = s6.ok ? run_stages({"closed-loop"}, root, work) : s6;
  }
  results.push_back(expectation_approximation(root));
  results.push_back(generalization(root, s6));
  results.push_back(uncertainty(root, s7));
  results.push_back(closed_loop(root, s8));
  results.push_back(determinism(work));

  std::sort(results.begin(), results.end(), [](const Result& a, const Result& b) { return a.id < b.id; });
  int failed = 0;
  for (const auto& r : results) {
    std::cout << (r.pass ? "PASS" : "FAIL") << " criterion " << r.id << " (" << r.name << "): " << r.detail << "\n";
    failed += !r.pass;
  }
  std::cout << (results.size() - static_cast<std::size_t>(failed)) << "/" << results.size() << " criteria passed\n";
  return failed == 0 ? 0 : 1;
}
