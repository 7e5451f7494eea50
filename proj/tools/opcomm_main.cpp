#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "opcomm/pipeline.hpp"

namespace pl = opcomm::pipeline;

int main(int argc, char** argv) {
  CLI::App app{"opcomm: station demand forecasting and buffer control pipeline"};
  app.require_subcommand(1);

  std::string config_path = "opcomm.json";
  std::optional<std::string> out_dir;
  std::size_t jobs = 1;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> station;
  std::optional<std::int64_t> day;

  const std::vector<std::pair<std::string, std::string>> commands{
      {"simulate", "Generate synthetic station demand"},
      {"train-forecaster", "Fit per-station boosted-tree forecasters"},
      {"train-policy", "Train the PPO buffer policy"},
      {"evaluate", "Compare the pipeline with the manual baseline"},
      {"explain", "Attribute one forecast and summarize buffer scenarios"},
  };
  for (const auto& [name, help] : commands) {
    auto* cmd = app.add_subcommand(name, help);
    cmd->add_option("--config", config_path, "Run configuration (JSON)")->capture_default_str();
    cmd->add_option("--out", out_dir, "Output directory (overrides OPCOMM_OUT_DIR and output_dir)");
    cmd->add_option("--jobs", jobs, "Worker threads for per-station stages")->check(CLI::PositiveNumber);
    cmd->add_option("--seed", seed, "Override the configured master seed");
    if (name == "explain") {
      cmd->add_option("--station", station, "Station id (default: first modeled station)");
      cmd->add_option("--day", day, "Day index (default: last evaluation day)");
    }
  }

  CLI11_PARSE(app, argc, argv);

  try {
    const auto ctx = pl::make_context(pl::load_config(config_path), out_dir, jobs, seed, &std::cout);
    pl::run_command(app.get_subcommands().front()->get_name(), ctx, station, day);
  } catch (const std::exception& e) {
    std::cerr << "opcomm: " << e.what() << '\n';
    return pl::exit_code_for(e);
  }
  return pl::kOk;
}
