#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <string>

#include "opcomm/errors.hpp"
#include "opcomm/evalmetrics.hpp"
#include "opcomm/pipeline.hpp"
#include "opcomm/textio.hpp"

namespace fs = std::filesystem;
using namespace opcomm;
using namespace opcomm::pipeline;

namespace {

class TempDir {
 public:
  explicit TempDir(const std::string& tag)
      : path_(fs::temp_directory_path() / ("opcomm_" + tag + "_" + std::to_string(::getpid()))) {
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }
  std::string str(const std::string& sub = "") const { return (path_ / sub).string(); }

 private:
  fs::path path_;
};

Context context(const std::string& json, const std::string& out) { return Context{parse_config(json), out, 1, nullptr}; }

const char* kSmall = R"({"seed": 3, "fleet": {"station_count": 3, "history_days": 200}})";

int run_cli(const std::string& args) {
  const std::string cmd = std::string(OPCOMM_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string config_error(const std::string& json) {
  try {
    parse_config(json);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("config defaults and hashing") {
  const auto c = parse_config(R"({"seed": 1})");
  CHECK(c.reward.alpha == 2.0);
  CHECK(c.reward.beta == 1.0);
  CHECK(c.actions().size() == 9);
  CHECK(c.horizon_days == 28);
  CHECK(c.hash() == parse_config(R"({"seed": 1})").hash());
  CHECK(c.hash() == parse_config(R"({"seed": 1, "output_dir": "elsewhere"})").hash());
  CHECK(c.hash() != parse_config(R"({"seed": 99})").hash());
  CHECK(parse_config(c.canonical_json()).hash() == c.hash());
}

TEST_CASE("config errors name the key path") {
  CHECK(config_error(R"({"seed": 1, "fleet": {"station_cout": 3}})").find("fleet.station_cout") != std::string::npos);
  CHECK(config_error(R"({"seed": 1, "ppo": {"gamma": "high"}})").find("ppo.gamma") != std::string::npos);
  CHECK(config_error(R"({"seed": 1, "reward": {"alpha": 1, "beta": 1}})").find("reward") != std::string::npos);
  CHECK(config_error(R"({"seed": 1, "fleet": {"stations": [{"station_id": "A", "region": "Moon"}]}})")
            .find("fleet.stations[0].region") != std::string::npos);
  CHECK(config_error("{}").find("seed") != std::string::npos);
  CHECK(!config_error("{").empty());
  CHECK(!config_error(R"({"seed": 1, "actions": {"buffer_percent": [5, 0]}})").empty());
}

TEST_CASE("exit codes") {
  CHECK(exit_code_for(ConfigError("x")) == 2);
  CHECK(exit_code_for(MissingArtifact("x")) == 3);
  CHECK(exit_code_for(NumericalError("x")) == 4);
}

TEST_CASE("simulate writes one CSV per station with the requested days") {
  TempDir dir("sim");
  const auto ctx = context(kSmall, dir.str("out"));
  cmd_simulate(ctx);
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(dir.path() / "out" / "demand")) {
    const auto table = textio::parse_csv(textio::read_file(e.path().string()));
    CHECK(table.rows.size() == 200);
    CHECK(table.comments.front() == provenance_line(ctx.config));
    ++files;
  }
  CHECK(files == 3);
}

TEST_CASE("missing upstream artifacts name the producing command") {
  TempDir dir("missing");
  const auto ctx = context(kSmall, dir.str("out"));
  try {
    cmd_train_forecaster(ctx);
    FAIL("expected MissingArtifact");
  } catch (const MissingArtifact& e) {
    CHECK(std::string(e.what()).find("opcomm simulate") != std::string::npos);
  }
  cmd_simulate(ctx);
  CHECK_THROWS_AS(cmd_train_policy(ctx), MissingArtifact);
}

TEST_CASE("artifacts from another configuration are rejected as stale") {
  TempDir dir("stale");
  cmd_simulate(context(kSmall, dir.str("out")));
  const auto other = context(R"({"seed": 4, "fleet": {"station_count": 3, "history_days": 200}})", dir.str("out"));
  try {
    cmd_train_forecaster(other);
    FAIL("expected MissingArtifact");
  } catch (const MissingArtifact& e) {
    CHECK(std::string(e.what()).find("different configuration") != std::string::npos);
  }
}

TEST_CASE("short histories are excluded from forecasting") {
  TempDir dir("short");
  const auto ctx = context(R"({"seed": 1, "fleet": {"station_count": 2, "history_days": 100}})", dir.str("out"));
  cmd_simulate(ctx);
  cmd_train_forecaster(ctx);
  const auto report = textio::parse_csv(textio::read_file(dir.str("out/forecaster_report.csv")));
  for (const auto& row : report.rows) CHECK(row[report.column("status")] == "insufficient_history");
  CHECK_THROWS_AS(cmd_train_policy(ctx), ConfigError);
}

TEST_CASE("noiseless weekly fleet is forecast almost exactly") {
  TempDir dir("periodic");
  const auto ctx = context(R"({
    "seed": 5,
    "fleet": {"station_count": 5, "history_days": 400, "noise_cv_min": 0, "noise_cv_max": 0,
              "trend_per_day_max": 0, "regime_shift_probability": 0},
    "ppo": {"max_updates": 3, "rollout_episodes": 2}
  })",
                           dir.str("out"));
  cmd_simulate(ctx);
  cmd_train_forecaster(ctx);
  const auto report = textio::parse_csv(textio::read_file(dir.str("out/forecaster_report.csv")));
  REQUIRE(report.rows.size() == 5);
  for (const auto& row : report.rows) {
    CHECK(row[report.column("status")] == "ok");
    CHECK(textio::parse_double(row[report.column("naive_test_wape")], "naive") == 0.0);
    CHECK(textio::parse_double(row[report.column("gbdt_test_wape")], "gbdt") < 1e-3);
  }
}

TEST_CASE("full pipeline produces the report and explanation") {
  TempDir dir("full");
  const auto ctx = context(R"({"seed": 8, "fleet": {"station_count": 4, "history_days": 420},
                                "ppo": {"max_updates": 5, "rollout_episodes": 2}})",
                           dir.str("out"));
  cmd_simulate(ctx);
  cmd_train_forecaster(ctx);
  cmd_train_policy(ctx);
  cmd_evaluate(ctx);
  cmd_explain(ctx, std::nullopt, std::nullopt);
  const auto table = textio::parse_csv(textio::read_file(dir.str("out/report/table.csv")));
  for (std::size_t i = 0; i < 6; ++i) CHECK(table.header[i] == evalmetrics::kTableColumns[i]);
  CHECK(table.rows.size() == 8);
  std::size_t explained = 0;
  for (const auto& e : fs::directory_iterator(dir.path() / "out" / "explain")) {
    CHECK(fs::exists(e.path() / "summary.md"));
    CHECK(fs::exists(e.path() / "scenario.csv"));
    CHECK(fs::exists(e.path() / "attributions.csv"));
    ++explained;
  }
  CHECK(explained == 1);
  CHECK_THROWS_AS(cmd_explain(ctx, std::string("NOPE"), std::nullopt), ConfigError);
  CHECK_THROWS_AS(cmd_explain(ctx, std::nullopt, std::int64_t{-5}), ConfigError);
}

TEST_CASE("command line exit codes") {
  TempDir dir("cli");
  const auto cfg = dir.str("cfg.json");
  textio::write_file(cfg, kSmall);
  const auto bad = dir.str("bad.json");
  textio::write_file(bad, R"({"seed": 1, "unknown_section": 1})");
  CHECK(run_cli("simulate --config " + bad) == 2);
  CHECK(run_cli("simulate --config " + dir.str("absent.json")) == 2);
  CHECK(run_cli("train-forecaster --config " + cfg + " --out " + dir.str("out")) == 3);
  CHECK(run_cli("simulate --config " + cfg + " --out " + dir.str("out") + " --jobs 2") == 0);
  CHECK(fs::exists(dir.path() / "out" / "fleet.csv"));
  CHECK(run_cli("train-forecaster --config " + cfg + " --out " + dir.str("out") + " --seed 4") == 3);
  CHECK(run_cli("train-forecaster --config " + cfg + " --out " + dir.str("out")) == 0);
  CHECK(run_cli("bogus") != 0);
}

TEST_CASE("output directory environment override") {
  TempDir dir("env");
  const auto cfg = dir.str("cfg.json");
  textio::write_file(cfg, kSmall);
  const std::string env = "OPCOMM_OUT_DIR=" + dir.str("from_env") + " ";
  const int status = std::system((env + OPCOMM_CLI + " simulate --config " + cfg + " > /dev/null 2>&1").c_str());
  CHECK(WEXITSTATUS(status) == 0);
  CHECK(fs::exists(dir.path() / "from_env" / "fleet.csv"));
}
