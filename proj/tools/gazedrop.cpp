// gazedrop: dataset generation, training, evaluation, uncertainty, closed
// loop and saliency reports, all driven by one JSON config.
#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "gazedrop/experiment/pipeline.hpp"

namespace gx = gazedrop::experiment;

namespace {

enum Exit { kOk = 0, kConfig = 2, kData = 3, kCheck = 4 };

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string variant;
  std::string out;
  int jobs = 1;
  bool check = false;
  bool quiet = false;
};

gx::ExperimentConfig resolve(const Flags& f) {
  gx::ExperimentConfig cfg = f.config.empty() ? gx::parse_config(nlohmann::json::object()) : gx::load_config(f.config);
  if (f.seed) cfg.seed = *f.seed;
  if (!f.out.empty()) cfg.output_dir = f.out;
  if (!f.variant.empty()) cfg.variant(f.variant);  // unknown names are config errors
  if (f.jobs < 1) throw gazedrop::ConfigError("--jobs must be >= 1");
  return cfg;
}

std::vector<std::string> selected(const Flags& f,
                                  const std::vector<std::string>& fallback) {
  if (!f.variant.empty()) return {f.variant};
  return fallback;
}

int run(const std::string& cmd, const Flags& f) {
  const gx::ExperimentConfig cfg = resolve(f);
  gx::ensure_dir(cfg.output_dir);
  gx::RunLog log(std::filesystem::path(cfg.output_dir) / "run.log", f.quiet);
  gx::Context ctx{cfg, gx::Paths{cfg.output_dir}, f.jobs, &log};
  log(cmd + " (seed " + std::to_string(cfg.seed) + ")");
  const auto all = gx::variant_names(cfg);

  if (cmd == "gen-data") {
    const auto m = gx::cmd_gen_data(ctx);
    std::cout << "dataset: " << m["groups"].size() << " trial groups, hash " << m["hash"].get<std::string>() << "\n";
  } else if (cmd == "train") {
    gx::cmd_train(ctx, selected(f, all));
  } else if (cmd == "eval") {
    for (const auto& r : gx::cmd_eval(ctx, selected(f, all))) {
      std::cout << r.variant << " seed " << r.seed << " " << r.split << " MAE " << gazedrop::fmt_double(r.mae, 4)
                << " deg\n";
    }
  } else if (cmd == "uncertainty") {
    const auto u = gx::cmd_uncertainty(ctx, selected(f, all));
    std::cout << "matched uniform dp " << gazedrop::fmt_double(u.matched_dp, 4) << "\n";
  } else if (cmd == "closed-loop") {
    const auto c = gx::cmd_closed_loop(ctx, selected(f, cfg.closed_loop.variants));
    for (const auto& [variant, scenarios] : c.summary) {
      for (const auto& [name, s] : scenarios) {
        std::cout << variant << " " << name << ": " << s.infractions << " infractions, median km between "
                  << gazedrop::fmt_double(s.dist_between_median, 4) << "\n";
      }
    }
  } else if (cmd == "metrics") {
    for (const auto& r : gx::cmd_metrics(ctx)) {
      std::cout << r.comparison << " " << r.split << ": KL " << gazedrop::fmt_double(r.kl, 4) << " CC "
                << gazedrop::fmt_double(r.cc, 4) << "\n";
    }
  } else if (cmd == "reproduce-paper") {
    const auto out = gx::cmd_reproduce(ctx);
    bool ok = true;
    for (const auto& c : out.claims) {
      std::cout << (c.pass ? "PASS " : "FAIL ") << c.id << ": " << c.detail << "\n";
      ok = ok && c.pass;
    }
    if (f.check && !ok) return kCheck;
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gaze-modulated dropout imitation-learning lab"};
  app.require_subcommand(1);
  Flags f;
  std::uint64_t seed = 0;
  const char* names[] = {"gen-data", "train", "eval", "uncertainty", "closed-loop", "metrics", "reproduce-paper"};
  const char* help[] = {"generate the synthetic driving dataset",
                        "train both branches per variant and seed",
                        "offline steering MAE per variant and split",
                        "MC-dropout uncertainty, matched-dp comparison and dp sweep",
                        "closed-loop driving benchmark on unseen tracks",
                        "KL / CC of estimated and center-blob maps against real gaze",
                        "run the full pipeline and evaluate the paper's claims"};
  for (std::size_t i = 0; i < std::size(names); ++i) {
    auto* sub = app.add_subcommand(names[i], help[i]);
    sub->add_option("--config", f.config, "JSON config file")->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "root seed (overrides config)");
    sub->add_option("--out", f.out, "output directory (overrides config)");
    sub->add_option("--jobs", f.jobs, "parallel workers")->check(CLI::PositiveNumber);
    sub->add_flag("--quiet", f.quiet, "no progress on stderr");
    if (std::string(names[i]) == "reproduce-paper") {
      sub->add_flag("--check", f.check, "exit 4 when a claim fails");
    } else if (std::string(names[i]) != "gen-data" && std::string(names[i]) != "metrics") {
      sub->add_option("--variant", f.variant, "restrict to one variant");
    }
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }
  for (auto* sub : app.get_subcommands()) {
    if (sub->count("--seed")) f.seed = seed;
    try {
      return run(sub->get_name(), f);
    } catch (const gazedrop::ConfigError& e) {
      std::cerr << "config error: " << e.what() << "\n";
      return kConfig;
    } catch (const gazedrop::ParameterError& e) {
      std::cerr << "config error: " << e.what() << "\n";
      return kConfig;
    } catch (const gazedrop::Error& e) {
      std::cerr << "data error: " << e.what() << "\n";
      return kData;
    } catch (const std::filesystem::filesystem_error& e) {
      std::cerr << "data error: " << e.what() << "\n";
      return kData;
    }
  }
  return kOk;
}
