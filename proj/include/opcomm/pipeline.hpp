#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "opcomm/demandsim.hpp"
#include "opcomm/gbforecast.hpp"
#include "opcomm/ppo.hpp"

namespace opcomm::pipeline {

/// Exit 2: missing or invalid configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Exit 3: an upstream artifact is absent, unreadable, or from another config.
class MissingArtifact : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum ExitCode : int { kOk = 0, kConfigError = 2, kMissingArtifact = 3, kNumericalFailure = 4 };

/// Synthetic fleet: explicit `stations`, or `station_count` profiles drawn
/// from the ranges below.
struct FleetSpec {
  std::size_t station_count = 5;
  std::size_t history_days = 730;
  double base_volume_min = 800.0;
  double base_volume_max = 5000.0;
  double weekly_amplitude_max = 0.3;
  double trend_per_day_max = 0.0003;
  double noise_cv_min = 0.05;
  double noise_cv_max = 0.15;
  double regime_shift_probability = 0.3;
  std::vector<demandsim::StationProfile> stations;
};

struct EvaluationSettings {
  double over_buffer_slack_packages = 0.0;
  double manual_buffer_percent = 5.0;  // fixed buffer the manual baseline adds
};

struct ExplainSettings {
  std::size_t top_drivers = 3;
  std::size_t background_rows = 28;
  std::string template_id = "executive";
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "opcomm_out";
  FleetSpec fleet;
  std::vector<int> lags_days{1, 7, 14};
  std::vector<int> rolling_windows_days{7, 28};
  bool include_month = false;
  gbforecast::TrainConfig forecaster;
  ppo::PpoConfig ppo;
  demandsim::RewardConfig reward;
  std::vector<double> buffer_percent{0.0, 2.5, 5.0, 7.5, 10.0, 12.5, 15.0, 17.5, 20.0};
  std::size_t horizon_days = demandsim::kDefaultHorizon;
  EvaluationSettings evaluation;
  ExplainSettings explain;

  featurize::FeatureSchema schema() const;
  demandsim::BufferActionSet actions() const;
  /// Explicit stations, or the generated fleet.
  std::vector<demandsim::StationProfile> resolve_stations() const;
  /// Canonical document with every default filled in; output_dir excluded.
  std::string canonical_json() const;
  std::string hash() const;
};

/// Throws ConfigError naming the offending key path (e.g. "ppo.gamma").
RunConfig parse_config(std::string_view text);
RunConfig load_config(const std::string& path);

struct Context {
  RunConfig config;
  std::string out_dir;
  std::size_t jobs = 1;
  std::ostream* log = nullptr;
};

/// Applies overrides: seed flag, then output dir from flag, OPCOMM_OUT_DIR, config.
Context make_context(RunConfig config, const std::optional<std::string>& out_flag, std::size_t jobs,
                     std::optional<std::uint64_t> seed, std::ostream* log);

/// Runs one pipeline command by its CLI name.
void run_command(const std::string& name, const Context& ctx, std::optional<std::string> station = std::nullopt,
                 std::optional<std::int64_t> day = std::nullopt);

void cmd_simulate(const Context& ctx);
void cmd_train_forecaster(const Context& ctx);
void cmd_train_policy(const Context& ctx);
void cmd_evaluate(const Context& ctx);
/// Defaults: first modeled station, last evaluation day.
void cmd_explain(const Context& ctx, std::optional<std::string> station, std::optional<std::int64_t> day);

/// "opcomm config_hash=<hash> seed=<seed>"
std::string provenance_line(const RunConfig& config);

/// Maps an exception from a command to the documented exit code.
int exit_code_for(const std::exception& e);

}  // namespace opcomm::pipeline
