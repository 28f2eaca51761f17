// Command-line entry point: train, eval, ablate, bench, export-graph.
#include "ltscg/config.hpp"
#include "ltscg/errors.hpp"
#include "ltscg/trainer.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace ltscg;
using namespace ltscg::harness;

namespace {

struct CommonFlags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> variant;
  std::string out = "out";
  std::optional<std::int64_t> steps;
};

void add_common(CLI::App* app, CommonFlags& f) {
  app->add_option("--config", f.config_path, "run configuration file (key = value)");
  app->add_option("--seed", f.seed, "override the run seed");
  app->add_option("--variant", f.variant, "override the variant");
  app->add_option("--out", f.out, "output directory");
  app->add_option("--steps", f.steps, "override total environment steps");
}

RunConfig resolve(const CommonFlags& f) {
  RunConfig cfg = f.config_path.empty() ? RunConfig{} : RunConfig::load(f.config_path);
  if (f.seed) cfg.seed = *f.seed;
  if (f.variant) cfg.variant = *f.variant;
  if (f.steps) cfg.total_steps = *f.steps;
  cfg.validate();
  return cfg;
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw ContractError("cannot create output directory '" + dir + "': " + ec.message());
}

int run_training(const RunConfig& cfg, const std::string& out_dir) {
  ensure_dir(out_dir);
  const fs::path dir(out_dir);
  {
    std::ofstream echo(dir / "config.txt");
    echo << cfg.serialize();
  }
  std::ofstream metrics(dir / "metrics.jsonl");
  if (!metrics) throw ContractError("cannot write " + (dir / "metrics.jsonl").string());
  MetricsWriter writer(metrics, cfg);
  Trainer trainer(cfg);
  trainer.run([&](const MetricsRecord& r) {
    writer.write(r);
    metrics.flush();
    std::cerr << "step " << r.step << " return " << r.return_mean << " +- " << r.return_std << " td " << r.loss_td
              << " pre " << r.loss_pre << " inf " << r.loss_inf << '\n';
  });
  trainer.save((dir / "checkpoint.bin").string());
  std::cout << "wrote " << (dir / "metrics.jsonl").string() << " and " << (dir / "checkpoint.bin").string() << '\n';
  return 0;
}

std::vector<int> parse_int_list(const std::string& text) {
  std::vector<int> out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const auto comma = text.find(',', pos);
    const std::string item = text.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    try {
      std::size_t used = 0;
      out.push_back(std::stoi(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ContractError("expected a comma-separated integer list, got '" + text + "'");
    }
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparse temporal coordination graphs for cooperative multi-agent RL"};
  app.require_subcommand(1);

  CommonFlags train_flags;
  auto* train_cmd = app.add_subcommand("train", "train a model and write metrics.jsonl + checkpoint.bin");
  add_common(train_cmd, train_flags);

  CommonFlags ablate_flags;
  auto* ablate_cmd = app.add_subcommand("ablate", "train one ablation variant (requires --variant)");
  add_common(ablate_cmd, ablate_flags);

  CommonFlags eval_flags;
  std::string eval_checkpoint;
  int eval_episodes = 32;
  auto* eval_cmd = app.add_subcommand("eval", "greedy evaluation of a checkpoint");
  add_common(eval_cmd, eval_flags);
  eval_cmd->add_option("--checkpoint", eval_checkpoint, "checkpoint file")->required();
  eval_cmd->add_option("--episodes", eval_episodes, "number of evaluation episodes");

  CommonFlags export_flags;
  std::string export_checkpoint;
  std::string export_at = "0";
  auto* export_cmd = app.add_subcommand("export-graph", "write theta, hard adjacency and attention snapshots");
  add_common(export_cmd, export_flags);
  export_cmd->add_option("--checkpoint", export_checkpoint, "checkpoint file")->required();
  export_cmd->add_option("--at", export_at, "comma-separated episode steps to capture");

  CommonFlags bench_flags;
  std::string bench_n = "8,16,32,64";
  int bench_trials = 5;
  auto* bench_cmd = app.add_subcommand("bench", "graph-inference scaling benchmark (--steps sets the window T)");
  add_common(bench_cmd, bench_flags);
  bench_cmd->add_option("--n", bench_n, "comma-separated ascending agent counts");
  bench_cmd->add_option("--trials", bench_trials, "timing trials per agent count");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*train_cmd) return run_training(resolve(train_flags), train_flags.out);

    if (*ablate_cmd) {
      if (!ablate_flags.variant) throw ConfigError("ablate: --variant is required");
      parse_variant(*ablate_flags.variant);
      return run_training(resolve(ablate_flags), ablate_flags.out);
    }

    if (*eval_cmd) {
      std::optional<RunConfig> expected;
      if (!eval_flags.config_path.empty()) expected = resolve(eval_flags);
      const Trainer trainer = Trainer::load(eval_checkpoint, expected ? &*expected : nullptr);
      const std::uint64_t seed = eval_flags.seed.value_or(trainer.eval_seed());
      const EvalResult r = trainer.evaluate(eval_episodes, seed);
      std::cout << "{\"episodes\":" << r.returns.size() << ",\"return_mean\":" << r.mean
                << ",\"return_std\":" << r.std << "}\n";
      return 0;
    }

    if (*export_cmd) {
      std::optional<RunConfig> expected;
      if (!export_flags.config_path.empty()) expected = resolve(export_flags);
      const Trainer trainer = Trainer::load(export_checkpoint, expected ? &*expected : nullptr);
      const std::uint64_t seed = export_flags.seed.value_or(trainer.eval_seed());
      const auto snapshots = trainer.capture_snapshots(seed, parse_int_list(export_at));
      ensure_dir(export_flags.out);
      const fs::path path = fs::path(export_flags.out) / "snapshots.txt";
      std::ofstream out(path);
      if (!out) throw ContractError("cannot write " + path.string());
      write_snapshots(out, snapshots);
      std::cout << "wrote " << snapshots.size() << " snapshot(s) to " << path.string() << '\n';
      return 0;
    }

    if (*bench_cmd) {
      const int window = static_cast<int>(bench_flags.steps.value_or(10));
      const ScalingReport report =
          scaling_benchmark(parse_int_list(bench_n), window, bench_trials, 8, bench_flags.seed.value_or(7));
      std::printf("%8s %8s %14s\n", "n", "T", "seconds");
      for (const auto& row : report.rows) std::printf("%8d %8d %14.6f\n", row.n_agents, row.window, row.seconds);
      if (report.rows.size() >= 2) std::printf("log-log slope in n: %.3f\n", report.slope);
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
