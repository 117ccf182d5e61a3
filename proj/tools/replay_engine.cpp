// Command-line front end: run / sweep / compare / demo.
#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "replay_engine/harness.hpp"

namespace fs = std::filesystem;
using namespace replay_engine;

namespace {

fs::path output_dir(const std::string& flag, const ExperimentConfig& cfg) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("REPLAY_ENGINE_OUT"); env && *env) return fs::path(env) / cfg.name;
  return fs::path("runs") / cfg.name;
}

std::string fmt_steps(const std::optional<std::int64_t>& v) {
  return v ? std::to_string(*v) : "null";
}

void print_summary(const RunSummary& s, std::ostream& os) {
  os << std::fixed << std::setprecision(3);
  os << "best_asr " << s.best_asr << "  steps_to_0.5 " << fmt_steps(s.steps_to_threshold.at(0.5))
     << "  steps_to_0.9 " << fmt_steps(s.steps_to_threshold.at(0.9));
  const auto med = median_steps(s.per_seed_steps_to_threshold.at(0.9));
  os << "  median_seed_steps_to_0.9 " << (med ? std::to_string(static_cast<std::int64_t>(*med)) : "null")
     << '\n';
}

int cmd_run(const std::string& config_path, const std::optional<std::uint64_t>& seed_override,
            bool lockstep, const std::string& out_flag) {
  ExperimentConfig cfg = load_config(config_path);
  if (seed_override) cfg.seeds = {*seed_override};
  if (lockstep) cfg.lockstep = true;
  const fs::path out = output_dir(out_flag, cfg);
  const RunResult r = run(cfg, out);
  std::cout << "wrote " << out.string() << '\n';
  print_summary(r.summary, std::cout);
  return 0;
}

int cmd_sweep(const std::string& config_path, const std::string& vary, const std::string& out_flag) {
  const ExperimentConfig base = load_config(config_path);
  const auto eq = vary.find('=');
  if (eq == std::string::npos || vary.substr(0, eq) != "lambda_max") {
    throw ConfigError("--vary", "expected lambda_max=<v1>,<v2>,...");
  }
  std::vector<std::string> values;
  std::stringstream ss(vary.substr(eq + 1));
  for (std::string v; std::getline(ss, v, ',');) {
    if (!v.empty()) values.push_back(v);
  }
  const fs::path root = output_dir(out_flag, base);
  std::cout << "lambda_max,best_asr,steps_to_0.9\n";
  for (const auto& v : values) {
    ExperimentConfig cfg = base;
    if (v == "none" || v == "NONE") {
      cfg.schedule.mode = ScheduleMode::NONE;
    } else {
      cfg.schedule.mode = ScheduleMode::LINEAR;
      cfg.schedule.lambda_max = std::stod(v);
      cfg.schedule.lambda0 = std::min(cfg.schedule.lambda0, cfg.schedule.lambda_max);
    }
    cfg.name = base.name + "_lambda_" + v;
    const RunResult r = run(cfg, root / ("lambda_" + v));
    std::cout << v << ',' << std::fixed << std::setprecision(3) << r.summary.best_asr << ','
              << fmt_steps(r.summary.steps_to_threshold.at(0.9)) << '\n';
  }
  return 0;
}

int cmd_compare(const std::string& base, const std::string& ours) {
  const SummaryCurve b = read_summary_csv(base);
  const SummaryCurve o = read_summary_csv(ours);
  std::cout << format_comparison(b, o, compare(b, o));
  return 0;
}

int cmd_demo(int size, std::int64_t steps) {
  ExperimentConfig cfg;
  cfg.name = "demo";
  cfg.env.size = size;
  cfg.sampler = SamplerKind::VLM_ONLY;
  cfg.scorer.kind = ScorerKind::ORACLE;
  cfg.total_steps = steps;
  cfg.eval_every = std::max<std::int64_t>(steps / 4, 1);
  cfg.eval_episodes = 8;
  cfg.seeds = {0};
  cfg.replay.capacity = 10'000;
  validate(cfg);

  const GridState start = reset(cfg.env.layout_seed_base, size);
  std::cout << "layout " << layout_to_json(start).dump() << '\n';
  std::cout << "optimal path length " << solve_optimal(start).size() << '\n';

  RunHooks hooks;
  hooks.on_row = [](const MetricsRow& r) { std::cout << metrics_to_json(r).dump() << '\n'; };
  const SeedRun r = run_seed(cfg, 0, hooks);
  std::cout << "steps " << r.env_steps << "  train_steps " << r.train_steps << "  clips "
            << r.clips_applied << "/" << r.clips_enqueued << "  wall " << std::fixed
            << std::setprecision(2) << r.wall_seconds << "s\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"replay_engine: semantic-prior experience replay experiments"};
  app.require_subcommand(1);

  std::string config_path, out_flag, vary, base, ours;
  std::optional<std::uint64_t> seed_override;
  bool lockstep = false;
  int size = 8;
  std::int64_t steps = 2000;

  auto* run_cmd = app.add_subcommand("run", "run every seed of one experiment");
  run_cmd->add_option("--config", config_path, "experiment JSON")->required()->check(CLI::ExistingFile);
  run_cmd->add_option("--seed-override", seed_override, "run only this seed");
  run_cmd->add_flag("--lockstep", lockstep, "score clips inline (deterministic)");
  run_cmd->add_option("--out", out_flag, "output directory");

  auto* sweep_cmd = app.add_subcommand("sweep", "vary lambda_max across runs");
  sweep_cmd->add_option("--config", config_path, "experiment JSON")->required()->check(CLI::ExistingFile);
  sweep_cmd->add_option("--vary", vary, "lambda_max=0.25,0.5,0.75,1.0,none")->required();
  sweep_cmd->add_option("--out", out_flag, "output root directory");

  auto* cmp_cmd = app.add_subcommand("compare", "compare two summary.csv files");
  cmp_cmd->add_option("--base", base, "baseline summary.csv")->required()->check(CLI::ExistingFile);
  cmp_cmd->add_option("--ours", ours, "candidate summary.csv")->required()->check(CLI::ExistingFile);

  auto* demo_cmd = app.add_subcommand("demo", "short oracle-scored run");
  demo_cmd->add_option("--size", size, "grid size (6, 8, 12, 16)");
  demo_cmd->add_option("--steps", steps, "environment steps");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run_cmd) return cmd_run(config_path, seed_override, lockstep, out_flag);
    if (*sweep_cmd) return cmd_sweep(config_path, vary, out_flag);
    if (*cmp_cmd) return cmd_compare(base, ours);
    if (*demo_cmd) return cmd_demo(size, steps);
  } catch (const ConfigError& e) {
    std::cerr << "config error at " << e.path << ": " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
