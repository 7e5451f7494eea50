#include "opcomm/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <numbers>
#include <ostream>
#include <set>

#include <json.hpp>

#include "opcomm/errors.hpp"
#include "opcomm/evalmetrics.hpp"
#include "opcomm/featurize.hpp"
#include "opcomm/insight.hpp"
#include "opcomm/parallel.hpp"
#include "opcomm/textio.hpp"

namespace opcomm::pipeline {

namespace fs = std::filesystem;
using json = nlohmann::json;
using demandsim::StationProfile;

// ---------------------------------------------------------------------------
// Config

namespace {

/// Reads one JSON object, tracking consumed keys so leftovers can be
/// reported as unknown.
class ObjectReader {
 public:
  ObjectReader(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw ConfigError("config: " + display() + " must be an object");
  }

  std::string key_path(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  bool has(const std::string& key) const { return obj_.contains(key); }

  template <typename T>
  T get(const std::string& key, const T& fallback) {
    if (!obj_.contains(key)) return fallback;
    return require<T>(key);
  }

  template <typename T>
  T require(const std::string& key) {
    seen_.insert(key);
    if (!obj_.contains(key)) throw ConfigError("config: missing required key " + key_path(key));
    const json& v = obj_.at(key);
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ConfigError("");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer() || (std::is_unsigned_v<T> && v.get<std::int64_t>() < 0)) throw ConfigError("");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw ConfigError("");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw ConfigError("");
      }
      return v.get<T>();
    } catch (const std::exception&) {
      throw ConfigError("config: invalid value for " + key_path(key));
    }
  }

  const json& child(const std::string& key) {
    seen_.insert(key);
    return obj_.at(key);
  }

  void finish() const {
    for (const auto& [k, v] : obj_.items()) {
      if (!seen_.count(k)) throw ConfigError("config: unknown key " + key_path(k));
    }
  }

 private:
  std::string display() const { return path_.empty() ? "document root" : path_; }

  const json& obj_;
  std::string path_;
  std::set<std::string> seen_;
};

json profile_to_json(const StationProfile& p) {
  json shifts = json::array();
  for (const auto& s : p.regime_shifts) shifts.push_back({{"day_index", s.day_index}, {"base_multiplier", s.base_multiplier}});
  return {{"station_id", p.station_id},
          {"region", std::string(demandsim::region_name(p.region))},
          {"base_volume_packages", p.base_volume},
          {"weekly_pattern", p.weekly_pattern},
          {"trend_per_day", p.trend_per_day},
          {"noise_cv", p.noise_cv},
          {"regime_shifts", shifts},
          {"capacity_class", p.capacity_class},
          {"seed", p.seed}};
}

StationProfile profile_from_json(const json& j, const std::string& path, std::uint64_t default_seed) {
  ObjectReader r(j, path);
  StationProfile p;
  p.station_id = r.require<std::string>("station_id");
  try {
    p.region = demandsim::parse_region(r.require<std::string>("region"));
  } catch (const InvalidInput&) {
    throw ConfigError("config: invalid value for " + r.key_path("region"));
  }
  p.base_volume = r.require<double>("base_volume_packages");
  const auto pattern = r.get<std::vector<double>>("weekly_pattern", {1, 1, 1, 1, 1, 1, 1});
  if (pattern.size() != 7) throw ConfigError("config: " + r.key_path("weekly_pattern") + " needs 7 entries");
  std::copy(pattern.begin(), pattern.end(), p.weekly_pattern.begin());
  p.trend_per_day = r.get<double>("trend_per_day", 0.0);
  p.noise_cv = r.get<double>("noise_cv", 0.0);
  if (r.has("regime_shifts")) {
    const auto& shifts = r.child("regime_shifts");
    if (!shifts.is_array()) throw ConfigError("config: " + r.key_path("regime_shifts") + " must be an array");
    for (std::size_t i = 0; i < shifts.size(); ++i) {
      ObjectReader sr(shifts[i], r.key_path("regime_shifts") + "[" + std::to_string(i) + "]");
      p.regime_shifts.push_back({sr.require<std::int64_t>("day_index"), sr.require<double>("base_multiplier")});
      sr.finish();
    }
  }
  p.capacity_class = r.get<double>("capacity_class", 0.0);
  p.seed = r.get<std::uint64_t>("seed", default_seed);
  r.finish();
  try {
    p.validate();
  } catch (const InvalidInput& e) {
    throw ConfigError("config: " + path + ": " + e.what());
  }
  return p;
}

template <typename Fn>
void validated(const std::string& section, Fn&& fn) {
  try {
    fn();
  } catch (const InvalidInput& e) {
    throw ConfigError("config: " + section + ": " + e.what());
  }
}

}  // namespace

featurize::FeatureSchema RunConfig::schema() const {
  return featurize::FeatureSchema(lags_days, rolling_windows_days, {"capacity_class"}, include_month);
}

demandsim::BufferActionSet RunConfig::actions() const { return demandsim::BufferActionSet::from_percent(buffer_percent); }

std::vector<StationProfile> RunConfig::resolve_stations() const {
  if (!fleet.stations.empty()) return fleet.stations;
  std::vector<StationProfile> out;
  for (std::size_t i = 0; i < fleet.station_count; ++i) {
    Rng rng(mix_seed(seed, 1'000 + i));
    auto between = [&rng](double lo, double hi) { return lo + (hi - lo) * rng.uniform(); };
    StationProfile p;
    char id[16];
    std::snprintf(id, sizeof id, "ST%03zu", i);
    p.station_id = id;
    p.region = demandsim::kAllRegions[i % demandsim::kAllRegions.size()];
    p.base_volume = between(fleet.base_volume_min, fleet.base_volume_max);
    const double amplitude = between(0.0, fleet.weekly_amplitude_max);
    const double phase = between(0.0, 2.0 * std::numbers::pi);
    double sum = 0.0;
    for (std::size_t d = 0; d < 7; ++d) {
      p.weekly_pattern[d] = 1.0 + amplitude * std::sin(2.0 * std::numbers::pi * static_cast<double>(d) / 7.0 + phase);
      sum += p.weekly_pattern[d];
    }
    for (auto& w : p.weekly_pattern) w *= 7.0 / sum;
    p.trend_per_day = between(-fleet.trend_per_day_max, fleet.trend_per_day_max);
    p.noise_cv = between(fleet.noise_cv_min, fleet.noise_cv_max);
    if (rng.uniform() < fleet.regime_shift_probability) {
      const auto n = static_cast<double>(fleet.history_days);
      p.regime_shifts.push_back({static_cast<std::int64_t>(between(0.3 * n, 0.7 * n)), between(0.8, 1.2)});
    }
    p.capacity_class = static_cast<double>(rng.below(3));
    p.seed = rng.next_u64();
    out.push_back(std::move(p));
  }
  return out;
}

std::string RunConfig::canonical_json() const {
  json stations = json::array();
  for (const auto& p : fleet.stations) stations.push_back(profile_to_json(p));
  json doc = {
      {"seed", seed},
      {"fleet",
       {{"station_count", fleet.station_count},
        {"history_days", fleet.history_days},
        {"base_volume_packages_min", fleet.base_volume_min},
        {"base_volume_packages_max", fleet.base_volume_max},
        {"weekly_amplitude_max", fleet.weekly_amplitude_max},
        {"trend_per_day_max", fleet.trend_per_day_max},
        {"noise_cv_min", fleet.noise_cv_min},
        {"noise_cv_max", fleet.noise_cv_max},
        {"regime_shift_probability", fleet.regime_shift_probability},
        {"stations", stations}}},
      {"features", {{"lags_days", lags_days}, {"rolling_windows_days", rolling_windows_days}, {"include_month", include_month}}},
      {"forecaster",
       {{"n_rounds", forecaster.n_rounds},
        {"max_leaves", forecaster.max_leaves},
        {"min_samples_leaf", forecaster.min_samples_leaf},
        {"l2_lambda", forecaster.l2_lambda},
        {"n_bins", forecaster.n_bins},
        {"learning_rate", forecaster.learning_rate},
        {"train_fraction", forecaster.train_fraction}}},
      {"ppo",
       {{"clip_epsilon", ppo.clip_epsilon},
        {"gamma", ppo.gamma},
        {"gae_lambda", ppo.gae_lambda},
        {"epochs_per_update", ppo.epochs_per_update},
        {"minibatch_size", ppo.minibatch_size},
        {"policy_step_size", ppo.policy_step_size},
        {"value_step_size", ppo.value_step_size},
        {"entropy_coef", ppo.entropy_coef},
        {"rollout_episodes", ppo.rollout_episodes},
        {"max_updates", ppo.max_updates},
        {"use_adam", ppo.use_adam},
        {"hidden_widths", ppo.hidden}}},
      {"reward", {{"alpha", reward.alpha}, {"beta", reward.beta}}},
      {"actions", {{"buffer_percent", buffer_percent}}},
      {"horizon_days", horizon_days},
      {"evaluation",
       {{"over_buffer_slack_packages", evaluation.over_buffer_slack_packages},
        {"manual_buffer_percent", evaluation.manual_buffer_percent}}},
      {"explain",
       {{"top_drivers", explain.top_drivers},
        {"background_rows", explain.background_rows},
        {"template", explain.template_id}}},
  };
  return doc.dump();
}

std::string RunConfig::hash() const { return textio::fnv1a_hex(canonical_json()); }

RunConfig parse_config(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  RunConfig c;
  ObjectReader root(doc, "");
  c.seed = root.require<std::uint64_t>("seed");
  c.output_dir = root.get<std::string>("output_dir", c.output_dir);
  c.horizon_days = root.get<std::size_t>("horizon_days", c.horizon_days);
  if (c.horizon_days < 1) throw ConfigError("config: horizon_days must be >= 1");

  if (root.has("fleet")) {
    ObjectReader r(root.child("fleet"), "fleet");
    auto& f = c.fleet;
    f.station_count = r.get<std::size_t>("station_count", f.station_count);
    f.history_days = r.get<std::size_t>("history_days", f.history_days);
    f.base_volume_min = r.get<double>("base_volume_packages_min", f.base_volume_min);
    f.base_volume_max = r.get<double>("base_volume_packages_max", f.base_volume_max);
    f.weekly_amplitude_max = r.get<double>("weekly_amplitude_max", f.weekly_amplitude_max);
    f.trend_per_day_max = r.get<double>("trend_per_day_max", f.trend_per_day_max);
    f.noise_cv_min = r.get<double>("noise_cv_min", f.noise_cv_min);
    f.noise_cv_max = r.get<double>("noise_cv_max", f.noise_cv_max);
    f.regime_shift_probability = r.get<double>("regime_shift_probability", f.regime_shift_probability);
    if (r.has("stations")) {
      const auto& arr = r.child("stations");
      if (!arr.is_array()) throw ConfigError("config: fleet.stations must be an array");
      std::set<std::string> ids;
      for (std::size_t i = 0; i < arr.size(); ++i) {
        auto p = profile_from_json(arr[i], "fleet.stations[" + std::to_string(i) + "]", mix_seed(c.seed, 1'000 + i));
        if (!ids.insert(p.station_id).second) throw ConfigError("config: duplicate station_id " + p.station_id);
        f.stations.push_back(std::move(p));
      }
    }
    r.finish();
    if (!(f.base_volume_min > 0.0 && f.base_volume_max >= f.base_volume_min)) {
      throw ConfigError("config: fleet.base_volume_packages_min/max must satisfy 0 < min <= max");
    }
    if (!(f.noise_cv_min >= 0.0 && f.noise_cv_max >= f.noise_cv_min)) {
      throw ConfigError("config: fleet.noise_cv_min/max must satisfy 0 <= min <= max");
    }
    if (!(f.weekly_amplitude_max >= 0.0 && f.weekly_amplitude_max < 1.0)) {
      throw ConfigError("config: fleet.weekly_amplitude_max must be in [0, 1)");
    }
    if (f.history_days < 1) throw ConfigError("config: fleet.history_days must be >= 1");
    if (f.stations.empty() && f.station_count < 1) throw ConfigError("config: fleet.station_count must be >= 1");
  }

  if (root.has("features")) {
    ObjectReader r(root.child("features"), "features");
    c.lags_days = r.get<std::vector<int>>("lags_days", c.lags_days);
    c.rolling_windows_days = r.get<std::vector<int>>("rolling_windows_days", c.rolling_windows_days);
    c.include_month = r.get<bool>("include_month", c.include_month);
    r.finish();
  }
  validated("features", [&] { (void)c.schema(); });

  if (root.has("forecaster")) {
    ObjectReader r(root.child("forecaster"), "forecaster");
    auto& t = c.forecaster;
    t.n_rounds = r.get<int>("n_rounds", t.n_rounds);
    t.max_leaves = r.get<int>("max_leaves", t.max_leaves);
    t.min_samples_leaf = r.get<int>("min_samples_leaf", t.min_samples_leaf);
    t.l2_lambda = r.get<double>("l2_lambda", t.l2_lambda);
    t.n_bins = r.get<int>("n_bins", t.n_bins);
    t.learning_rate = r.get<double>("learning_rate", t.learning_rate);
    t.train_fraction = r.get<double>("train_fraction", t.train_fraction);
    r.finish();
  }
  validated("forecaster", [&] { c.forecaster.validate(); });

  if (root.has("ppo")) {
    ObjectReader r(root.child("ppo"), "ppo");
    auto& p = c.ppo;
    p.clip_epsilon = r.get<double>("clip_epsilon", p.clip_epsilon);
    p.gamma = r.get<double>("gamma", p.gamma);
    p.gae_lambda = r.get<double>("gae_lambda", p.gae_lambda);
    p.epochs_per_update = r.get<int>("epochs_per_update", p.epochs_per_update);
    p.minibatch_size = r.get<int>("minibatch_size", p.minibatch_size);
    p.policy_step_size = r.get<double>("policy_step_size", p.policy_step_size);
    p.value_step_size = r.get<double>("value_step_size", p.value_step_size);
    p.entropy_coef = r.get<double>("entropy_coef", p.entropy_coef);
    p.rollout_episodes = r.get<int>("rollout_episodes", p.rollout_episodes);
    p.max_updates = r.get<int>("max_updates", p.max_updates);
    p.use_adam = r.get<bool>("use_adam", p.use_adam);
    p.hidden = r.get<std::vector<std::size_t>>("hidden_widths", p.hidden);
    r.finish();
  }
  validated("ppo", [&] { c.ppo.validate(); });

  if (root.has("reward")) {
    ObjectReader r(root.child("reward"), "reward");
    c.reward.alpha = r.get<double>("alpha", c.reward.alpha);
    c.reward.beta = r.get<double>("beta", c.reward.beta);
    r.finish();
  }
  validated("reward", [&] { c.reward.validate(); });

  if (root.has("actions")) {
    ObjectReader r(root.child("actions"), "actions");
    c.buffer_percent = r.get<std::vector<double>>("buffer_percent", c.buffer_percent);
    r.finish();
  }
  validated("actions.buffer_percent", [&] { (void)c.actions(); });

  if (root.has("evaluation")) {
    ObjectReader r(root.child("evaluation"), "evaluation");
    auto& e = c.evaluation;
    e.over_buffer_slack_packages = r.get<double>("over_buffer_slack_packages", e.over_buffer_slack_packages);
    e.manual_buffer_percent = r.get<double>("manual_buffer_percent", e.manual_buffer_percent);
    r.finish();
    if (!(e.over_buffer_slack_packages >= 0.0)) throw ConfigError("config: evaluation.over_buffer_slack_packages must be >= 0");
    if (!(e.manual_buffer_percent >= 0.0)) throw ConfigError("config: evaluation.manual_buffer_percent must be >= 0");
  }

  if (root.has("explain")) {
    ObjectReader r(root.child("explain"), "explain");
    auto& x = c.explain;
    x.top_drivers = r.get<std::size_t>("top_drivers", x.top_drivers);
    x.background_rows = r.get<std::size_t>("background_rows", x.background_rows);
    x.template_id = r.get<std::string>("template", x.template_id);
    r.finish();
    if (x.background_rows < 1) throw ConfigError("config: explain.background_rows must be >= 1");
    if (x.template_id != "executive" && x.template_id != "brief") {
      throw ConfigError("config: explain.template must be \"executive\" or \"brief\"");
    }
  }
  root.finish();
  return c;
}

RunConfig load_config(const std::string& path) {
  if (!fs::exists(path)) throw ConfigError("config file not found: " + path);
  return parse_config(textio::read_file(path));
}

std::string provenance_line(const RunConfig& config) {
  return "opcomm config_hash=" + config.hash() + " seed=" + std::to_string(config.seed);
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return kConfigError;
  if (dynamic_cast<const MissingArtifact*>(&e)) return kMissingArtifact;
  if (dynamic_cast<const NumericalError*>(&e)) return kNumericalFailure;
  if (dynamic_cast<const FormatError*>(&e)) return kMissingArtifact;
  return kConfigError;
}

// ---------------------------------------------------------------------------
// Artifacts

namespace {

constexpr std::string_view kManual = "Manual";
constexpr std::string_view kOpComm = "OpComm";

struct Paths {
  fs::path root;

  std::string fleet() const { return (root / "fleet.csv").string(); }
  std::string demand(const std::string& id) const { return (root / "demand" / (id + ".csv")).string(); }
  std::string model(const std::string& id) const { return (root / "models" / (id + ".json")).string(); }
  std::string forecasts(const std::string& id) const { return (root / "forecasts" / (id + ".csv")).string(); }
  std::string forecaster_report() const { return (root / "forecaster_report.csv").string(); }
  std::string policy() const { return (root / "policy" / "policy.json").string(); }
  std::string reward_curve() const { return (root / "policy" / "reward_curve.csv").string(); }
  std::string decisions(std::string_view method) const {
    std::string name(method);
    std::transform(name.begin(), name.end(), name.begin(), [](unsigned char ch) { return std::tolower(ch); });
    return (root / "decisions" / (name + ".csv")).string();
  }
  fs::path report_dir() const { return root / "report"; }
  fs::path explain_dir(const std::string& id, std::int64_t day) const {
    return root / "explain" / (id + "_day" + std::to_string(day));
  }
};

std::string read_artifact(const std::string& path, std::string_view producer) {
  if (!fs::exists(path)) {
    throw MissingArtifact("missing " + path + "; run `opcomm " + std::string(producer) + "` first");
  }
  return textio::read_file(path);
}

void check_csv_provenance(const textio::CsvTable& table, const RunConfig& config, const std::string& path,
                          std::string_view producer) {
  const auto expected = provenance_line(config);
  for (const auto& c : table.comments) {
    if (c == expected) return;
    if (c.starts_with("opcomm config_hash=")) {
      throw MissingArtifact(path + " was produced with a different configuration (" + c + ", expected " + expected +
                            "); re-run `opcomm " + std::string(producer) + "`");
    }
  }
  throw MissingArtifact(path + " carries no provenance header; re-run `opcomm " + std::string(producer) + "`");
}

void check_metadata_provenance(const std::map<std::string, std::string>& meta, const RunConfig& config,
                               const std::string& path, std::string_view producer) {
  const auto it = meta.find("config_hash");
  const auto seed = meta.find("seed");
  if (it == meta.end() || it->second != config.hash() || seed == meta.end() ||
      seed->second != std::to_string(config.seed)) {
    throw MissingArtifact(path + " was produced with a different configuration; re-run `opcomm " +
                          std::string(producer) + "`");
  }
}

textio::CsvTable read_csv_artifact(const std::string& path, std::string_view producer, const RunConfig& config) {
  const auto text = read_artifact(path, producer);
  textio::CsvTable table;
  try {
    table = textio::parse_csv(text);
  } catch (const FormatError& e) {
    throw MissingArtifact(path + " is unreadable (" + e.what() + "); re-run `opcomm " + std::string(producer) + "`");
  }
  check_csv_provenance(table, config, path, producer);
  return table;
}

std::map<std::string, std::string> provenance_metadata(const RunConfig& config) {
  return {{"config_hash", config.hash()}, {"seed", std::to_string(config.seed)}};
}

void log_line(const Context& ctx, const std::string& line) {
  if (ctx.log) *ctx.log << line << '\n';
}

struct FleetEntry {
  std::string station_id;
  demandsim::Region region;
  double capacity_class = 0.0;
};

std::vector<FleetEntry> read_fleet(const Context& ctx, const Paths& paths) {
  const auto table = read_csv_artifact(paths.fleet(), "simulate", ctx.config);
  std::vector<FleetEntry> out;
  for (const auto& row : table.rows) {
    out.push_back({row[table.column("station_id")], demandsim::parse_region(row[table.column("region")]),
                   textio::parse_double(row[table.column("capacity_class")], "capacity_class")});
  }
  return out;
}

demandsim::DemandSeries read_series(const Context& ctx, const Paths& paths, const std::string& id) {
  const auto path = paths.demand(id);
  const auto text = read_artifact(path, "simulate");
  check_csv_provenance(textio::parse_csv(text), ctx.config, path, "simulate");
  return demandsim::series_from_csv(text);
}

enum class Segment { Train, Calibration, Evaluation };

std::string_view segment_name(Segment s) {
  switch (s) {
    case Segment::Train: return "train";
    case Segment::Calibration: return "calibration";
    case Segment::Evaluation: return "evaluation";
  }
  return "?";
}

Segment parse_segment(std::string_view s) {
  if (s == "train") return Segment::Train;
  if (s == "calibration") return Segment::Calibration;
  if (s == "evaluation") return Segment::Evaluation;
  throw FormatError("unknown segment '" + std::string(s) + "'");
}

struct StationForecasts {
  std::vector<std::int64_t> day;
  std::vector<double> demand;
  std::vector<double> gbdt;
  std::vector<double> naive;  // NaN where unavailable
  std::vector<Segment> segment;

  /// Consecutive days of the given segments as an environment track.
  demandsim::DemandTrack track(const std::string& id, double capacity, std::initializer_list<Segment> keep) const {
    demandsim::DemandTrack t{id, 0, {}, {}, capacity};
    for (std::size_t i = 0; i < day.size(); ++i) {
      if (std::find(keep.begin(), keep.end(), segment[i]) == keep.end()) continue;
      if (t.realized.empty()) t.start_day = day[i];
      t.realized.push_back(demand[i]);
      t.forecast.push_back(gbdt[i]);
    }
    return t;
  }
};

StationForecasts read_forecasts(const Context& ctx, const Paths& paths, const std::string& id) {
  const auto path = paths.forecasts(id);
  const auto table = read_csv_artifact(path, "train-forecaster", ctx.config);
  StationForecasts f;
  for (const auto& row : table.rows) {
    f.day.push_back(textio::parse_int(row[table.column("day")], "day"));
    f.demand.push_back(textio::parse_double(row[table.column("demand")], "demand"));
    f.gbdt.push_back(textio::parse_double(row[table.column("gbdt_forecast")], "gbdt_forecast"));
    const auto& naive = row[table.column("naive_forecast")];
    f.naive.push_back(naive.empty() ? std::nan("") : textio::parse_double(naive, "naive_forecast"));
    f.segment.push_back(parse_segment(row[table.column("segment")]));
  }
  return f;
}

struct ForecasterStatus {
  std::string station_id;
  demandsim::Region region;
  bool modeled = false;
};

std::vector<ForecasterStatus> read_forecaster_report(const Context& ctx, const Paths& paths) {
  const auto table = read_csv_artifact(paths.forecaster_report(), "train-forecaster", ctx.config);
  std::vector<ForecasterStatus> out;
  for (const auto& row : table.rows) {
    out.push_back({row[table.column("station_id")], demandsim::parse_region(row[table.column("region")]),
                   row[table.column("status")] == "ok"});
  }
  return out;
}

std::vector<ForecasterStatus> modeled_stations(const std::vector<ForecasterStatus>& all) {
  std::vector<ForecasterStatus> out;
  std::copy_if(all.begin(), all.end(), std::back_inserter(out), [](const auto& s) { return s.modeled; });
  if (out.empty()) throw ConfigError("no station has enough history for a forecaster; increase fleet.history_days");
  return out;
}

double capacity_of(const std::vector<FleetEntry>& fleet, const std::string& id) {
  for (const auto& e : fleet) {
    if (e.station_id == id) return e.capacity_class;
  }
  throw MissingArtifact("station " + id + " is absent from fleet.csv; re-run `opcomm simulate`");
}

}  // namespace

// ---------------------------------------------------------------------------
// Commands

void cmd_simulate(const Context& ctx) {
  const Paths paths{ctx.out_dir};
  const auto stations = ctx.config.resolve_stations();
  const std::vector<std::string> header{provenance_line(ctx.config)};
  std::vector<std::string> docs(stations.size());
  parallel_for(stations.size(), ctx.jobs, [&](std::size_t i) {
    docs[i] = demandsim::series_to_csv(demandsim::generate_series(stations[i], ctx.config.fleet.history_days), header);
  });

  textio::CsvTable fleet;
  fleet.comments = header;
  fleet.header = {"station_id", "region", "capacity_class", "base_volume", "noise_cv"};
  for (std::size_t i = 0; i < stations.size(); ++i) {
    textio::write_file(paths.demand(stations[i].station_id), docs[i]);
    fleet.rows.push_back({stations[i].station_id, std::string(demandsim::region_name(stations[i].region)),
                          textio::format_double(stations[i].capacity_class),
                          textio::format_double(stations[i].base_volume), textio::format_double(stations[i].noise_cv)});
  }
  textio::write_file(paths.fleet(), textio::write_csv(fleet));
  log_line(ctx, "simulated " + std::to_string(stations.size()) + " stations x " +
                    std::to_string(ctx.config.fleet.history_days) + " days into " + ctx.out_dir);
}

void cmd_train_forecaster(const Context& ctx) {
  const Paths paths{ctx.out_dir};
  const auto fleet = read_fleet(ctx, paths);
  const auto schema = ctx.config.schema();
  const std::vector<std::string> header{provenance_line(ctx.config)};

  struct Outcome {
    std::string status = "ok";
    std::size_t usable = 0;
    std::size_t train = 0;
    std::size_t test = 0;
    std::optional<double> gbdt_wape;
    std::optional<double> naive_wape;
    std::string model_doc;
    std::string forecast_doc;
  };
  std::vector<Outcome> outcomes(fleet.size());

  parallel_for(fleet.size(), ctx.jobs, [&](std::size_t i) {
    const auto& entry = fleet[i];
    auto& out = outcomes[i];
    const auto series = read_series(ctx, paths, entry.station_id);
    if (series.size() < schema.min_series_length()) {
      out.status = "insufficient_history";
      return;
    }
    const std::vector<double> operational{entry.capacity_class};
    const auto rows = featurize::build_feature_matrix(series, schema, operational);
    out.usable = rows.size();
    if (rows.size() < featurize::kMinUsableRows) {
      out.status = "insufficient_history";
      return;
    }
    const auto split = featurize::temporal_split(rows, ctx.config.forecaster.train_fraction);
    out.train = split.train.size();
    out.test = split.test.size();
    auto model = gbforecast::fit(split.train, ctx.config.forecaster, schema.names());
    model.metadata = provenance_metadata(ctx.config);
    model.metadata["station_id"] = entry.station_id;
    out.model_doc = gbforecast::save_model(model);

    textio::CsvTable table;
    table.comments = header;
    table.header = {"station_id", "day", "demand", "gbdt_forecast", "naive_forecast", "segment"};
    const std::size_t n_calibration = split.test.size() / 2;
    std::vector<double> test_d;
    std::vector<double> test_gbdt;
    std::vector<double> test_naive;
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const auto t = static_cast<std::size_t>(rows[r].day_index - series.start_day);
      const double gbdt = std::max(0.0, model.predict(rows[r].values));
      Segment seg = Segment::Train;
      if (r >= split.train.size()) seg = r - split.train.size() < n_calibration ? Segment::Calibration : Segment::Evaluation;
      std::string naive_field;
      if (t >= 7) {
        const double naive = gbforecast::seasonal_naive_forecast(series, t);
        naive_field = textio::format_double(naive);
        if (seg != Segment::Train) test_naive.push_back(naive);
      } else if (seg != Segment::Train) {
        throw ConfigError("feature burn-in shorter than seven days leaves test days without a seasonal-naive baseline");
      }
      if (seg != Segment::Train) {
        test_d.push_back(rows[r].target);
        test_gbdt.push_back(gbdt);
      }
      table.rows.push_back({entry.station_id, std::to_string(rows[r].day_index), textio::format_double(rows[r].target),
                            textio::format_double(gbdt), naive_field, std::string(segment_name(seg))});
    }
    out.forecast_doc = textio::write_csv(table);
    try {
      out.gbdt_wape = evalmetrics::wape(test_d, test_gbdt);
      out.naive_wape = evalmetrics::wape(test_d, test_naive);
    } catch (const InvalidInput&) {
      // zero test volume: WAPE undefined, left blank
    }
  });

  textio::CsvTable report;
  report.comments = header;
  report.header = {"station_id", "region", "status", "usable_rows", "train_rows", "test_rows", "gbdt_test_wape",
                   "naive_test_wape"};
  for (std::size_t i = 0; i < fleet.size(); ++i) {
    const auto& o = outcomes[i];
    if (o.status == "ok") {
      textio::write_file(paths.model(fleet[i].station_id), o.model_doc);
      textio::write_file(paths.forecasts(fleet[i].station_id), o.forecast_doc);
    }
    auto opt = [](const std::optional<double>& v) { return v ? textio::format_double(*v) : std::string(); };
    report.rows.push_back({fleet[i].station_id, std::string(demandsim::region_name(fleet[i].region)), o.status,
                           std::to_string(o.usable), std::to_string(o.train), std::to_string(o.test),
                           opt(o.gbdt_wape), opt(o.naive_wape)});
    std::string line = fleet[i].station_id + ": " + o.status;
    if (o.gbdt_wape && o.naive_wape) {
      line += ", test WAPE gbdt " + textio::format_fixed(*o.gbdt_wape, 2) + "% vs seasonal-naive " +
              textio::format_fixed(*o.naive_wape, 2) + "%";
    }
    log_line(ctx, line);
  }
  textio::write_file(paths.forecaster_report(), textio::write_csv(report));
}

void cmd_train_policy(const Context& ctx) {
  const Paths paths{ctx.out_dir};
  const auto fleet = read_fleet(ctx, paths);
  const auto stations = modeled_stations(read_forecaster_report(ctx, paths));
  const auto& cfg = ctx.config;

  std::vector<demandsim::DemandTrack> tracks;
  for (const auto& s : stations) {
    auto track = read_forecasts(ctx, paths, s.station_id)
                     .track(s.station_id, capacity_of(fleet, s.station_id), {Segment::Calibration});
    if (track.size() >= cfg.horizon_days) {
      tracks.push_back(std::move(track));
    } else {
      log_line(ctx, s.station_id + ": calibration segment shorter than horizon_days, skipped for policy training");
    }
  }
  if (tracks.empty()) {
    throw ConfigError("no station has a calibration segment of horizon_days (" + std::to_string(cfg.horizon_days) +
                      ") days; increase fleet.history_days or lower horizon_days");
  }

  const auto actions = cfg.actions();
  auto bundle = ppo::PolicyBundle::create(demandsim::kObservationDim, actions, cfg.ppo.hidden, mix_seed(cfg.seed, 77));
  const ppo::EnvFactory factory = [&](std::size_t, std::uint64_t seed) {
    return demandsim::BufferEnv(tracks, actions, cfg.reward, cfg.horizon_days, seed);
  };
  const auto result = ppo::train_loop(factory, std::move(bundle), cfg.ppo, mix_seed(cfg.seed, 78), ctx.jobs);

  textio::write_file(paths.policy(), ppo::save_bundle(result.bundle, cfg.ppo, provenance_metadata(cfg)));
  textio::write_file(paths.reward_curve(), ppo::curve_to_csv(result.curve, {provenance_line(cfg)}));
  if (!result.curve.empty()) {
    log_line(ctx, "trained policy on " + std::to_string(tracks.size()) + " stations; final mean reward " +
                      textio::format_fixed(result.curve.back().mean_reward, 3));
  }
}

void cmd_evaluate(const Context& ctx) {
  const Paths paths{ctx.out_dir};
  const auto& cfg = ctx.config;
  const auto fleet = read_fleet(ctx, paths);
  const auto stations = modeled_stations(read_forecaster_report(ctx, paths));
  const auto policy_path = paths.policy();
  ppo::LoadedBundle policy;
  try {
    policy = ppo::load_bundle(read_artifact(policy_path, "train-policy"));
  } catch (const FormatError& e) {
    throw MissingArtifact(policy_path + " is unreadable (" + e.what() + "); re-run `opcomm train-policy`");
  }
  check_metadata_provenance(policy.metadata, cfg, policy_path, "train-policy");
  const auto actions = cfg.actions();
  if (policy.bundle.action_fractions != actions.fractions()) {
    throw MissingArtifact(policy_path + " uses a different buffer grid; re-run `opcomm train-policy`");
  }

  std::vector<std::vector<evalmetrics::DecisionRecord>> manual(stations.size());
  std::vector<std::vector<evalmetrics::DecisionRecord>> opcomm(stations.size());
  parallel_for(stations.size(), ctx.jobs, [&](std::size_t i) {
    const auto& s = stations[i];
    const auto f = read_forecasts(ctx, paths, s.station_id);
    const double capacity = capacity_of(fleet, s.station_id);
    const auto calibration = f.track(s.station_id, capacity, {Segment::Calibration});
    double scale = 0.0;
    for (double v : calibration.forecast) scale += v;
    scale = calibration.size() && scale > 0.0 ? scale / static_cast<double>(calibration.size()) : 1.0;
    const auto holdout = f.track(s.station_id, capacity, {Segment::Calibration, Segment::Evaluation});

    std::size_t t = 0;
    for (std::size_t r = 0; r < f.day.size(); ++r) {
      if (f.segment[r] == Segment::Train) continue;
      if (f.segment[r] == Segment::Evaluation) {
        const auto obs = demandsim::make_observation(holdout, t, scale);
        const auto k = ppo::greedy_action(ppo::action_probs(policy.bundle, obs));
        opcomm[i].push_back({s.station_id, s.region, f.day[r], f.demand[r], f.gbdt[r], actions.buffer_units(k, f.gbdt[r])});
        manual[i].push_back({s.station_id, s.region, f.day[r], f.demand[r], f.naive[r],
                             f.naive[r] * cfg.evaluation.manual_buffer_percent / 100.0});
      }
      ++t;
    }
  });

  std::vector<evalmetrics::MethodRecords> methods{{std::string(kManual), {}}, {std::string(kOpComm), {}}};
  std::map<std::string, demandsim::Region> regions;
  for (std::size_t i = 0; i < stations.size(); ++i) {
    regions[stations[i].station_id] = stations[i].region;
    methods[0].records.insert(methods[0].records.end(), manual[i].begin(), manual[i].end());
    methods[1].records.insert(methods[1].records.end(), opcomm[i].begin(), opcomm[i].end());
  }
  const std::vector<std::string> header{provenance_line(cfg)};
  for (const auto& m : methods) textio::write_file(paths.decisions(m.method), evalmetrics::records_to_csv(m.records, header));

  const auto report = evalmetrics::aggregate_report(methods, regions, cfg.evaluation.over_buffer_slack_packages);
  const auto rendered = evalmetrics::render_table(report, header);
  textio::write_file((paths.report_dir() / "table.md").string(), rendered.markdown);
  textio::write_file((paths.report_dir() / "table.csv").string(), rendered.table_csv);
  textio::write_file((paths.report_dir() / "fleet_summary.csv").string(), rendered.fleet_csv);
  for (const auto& s : report.fleet) {
    log_line(ctx, s.method + ": mean station WAPE " + textio::format_fixed(s.mean_station_wape, 2) + "%, pooled " +
                      textio::format_fixed(s.pooled_wape, 2) + "%");
  }
}

void cmd_explain(const Context& ctx, std::optional<std::string> station, std::optional<std::int64_t> day) {
  const Paths paths{ctx.out_dir};
  const auto& cfg = ctx.config;
  const auto fleet = read_fleet(ctx, paths);
  const auto stations = modeled_stations(read_forecaster_report(ctx, paths));
  if (!station) station = stations.front().station_id;
  const auto it = std::find_if(stations.begin(), stations.end(), [&](const auto& s) { return s.station_id == *station; });
  if (it == stations.end()) throw ConfigError("station " + *station + " has no forecaster (see forecaster_report.csv)");
  const auto& id = *station;

  const auto model_path = paths.model(id);
  gbforecast::TreeEnsemble model;
  try {
    model = gbforecast::load_model(read_artifact(model_path, "train-forecaster"));
  } catch (const FormatError& e) {
    throw MissingArtifact(model_path + " is unreadable (" + e.what() + "); re-run `opcomm train-forecaster`");
  }
  check_metadata_provenance(model.metadata, cfg, model_path, "train-forecaster");

  const auto f = read_forecasts(ctx, paths, id);
  if (!day) {
    for (std::size_t r = 0; r < f.day.size(); ++r) {
      if (f.segment[r] == Segment::Evaluation) day = f.day[r];
    }
  }
  const auto row = std::find(f.day.begin(), f.day.end(), *day);
  if (!day || row == f.day.end()) {
    throw ConfigError("day " + (day ? std::to_string(*day) : std::string("?")) + " has no forecast for station " + id);
  }
  const auto r = static_cast<std::size_t>(row - f.day.begin());

  const auto series = read_series(ctx, paths, id);
  const auto schema = cfg.schema();
  const std::vector<double> operational{capacity_of(fleet, id)};
  const auto x = featurize::feature_values(series, schema, operational, static_cast<std::size_t>(*day - series.start_day));
  const auto split =
      featurize::temporal_split(featurize::build_feature_matrix(series, schema, operational), cfg.forecaster.train_fraction);
  std::vector<std::vector<double>> background;
  const std::size_t n_bg = std::min(cfg.explain.background_rows, split.train.size());
  for (std::size_t i = split.train.size() - n_bg; i < split.train.size(); ++i) background.push_back(split.train[i].values);

  const auto shap = insight::shap_exact([&model](std::span<const double> v) { return model.predict(v); }, x, background,
                                        schema.names());

  std::vector<double> residuals;
  for (std::size_t i = 0; i < f.day.size(); ++i) {
    if (f.segment[i] == Segment::Calibration) residuals.push_back(f.demand[i] - f.gbdt[i]);
  }
  if (residuals.empty()) throw ConfigError("station " + id + " has no calibration residuals for scenario analysis");
  const double forecast = f.gbdt[r];
  const auto scenario = insight::scenario_sweep(residuals, cfg.actions(), forecast, cfg.reward);

  std::vector<evalmetrics::DecisionRecord> manual;
  std::vector<evalmetrics::DecisionRecord> opcomm;
  for (auto [method, sink] : {std::pair{kManual, &manual}, std::pair{kOpComm, &opcomm}}) {
    const auto path = paths.decisions(method);
    const auto text = read_artifact(path, "evaluate");
    check_csv_provenance(textio::parse_csv(text), cfg, path, "evaluate");
    for (auto& rec : evalmetrics::records_from_csv(text)) {
      if (rec.station_id == id) sink->push_back(std::move(rec));
    }
  }
  if (manual.empty() || opcomm.empty()) throw MissingArtifact("no decision records for " + id + "; re-run `opcomm evaluate`");

  auto ctx_summary = insight::make_summary_context(
      id, std::string(demandsim::region_name(it->region)), day, forecast, std::string(kManual),
      evalmetrics::wape(manual), std::string(kOpComm), evalmetrics::wape(opcomm),
      insight::top_attributions(shap.attributions, cfg.explain.top_drivers), scenario);
  const auto summary = insight::render_summary(ctx_summary, cfg.explain.template_id);

  const auto dir = paths.explain_dir(id, *day);
  const auto provenance = provenance_line(cfg);
  textio::write_file((dir / "summary.md").string(), "<!-- " + provenance + " -->\n" + summary);

  textio::CsvTable attr;
  attr.comments = {provenance, "base_value=" + textio::format_double(shap.base_value),
                   "prediction=" + textio::format_double(shap.prediction)};
  attr.header = {"feature", "value", "phi"};
  for (std::size_t i = 0; i < shap.attributions.size(); ++i) {
    attr.rows.push_back({shap.attributions[i].feature_name, textio::format_double(x[i]),
                         textio::format_double(shap.attributions[i].phi)});
  }
  textio::write_file((dir / "attributions.csv").string(), textio::write_csv(attr));
  textio::write_file((dir / "scenario.csv").string(), insight::scenario_to_csv(scenario, {provenance}));
  log_line(ctx, "wrote " + (dir / "summary.md").string());
}

Context make_context(RunConfig config, const std::optional<std::string>& out_flag, std::size_t jobs,
                     std::optional<std::uint64_t> seed, std::ostream* log) {
  if (jobs < 1) throw ConfigError("--jobs must be >= 1");
  if (seed) config.seed = *seed;
  Context ctx{std::move(config), {}, jobs, log};
  ctx.out_dir = ctx.config.output_dir;
  if (const char* env = std::getenv("OPCOMM_OUT_DIR"); env && *env) ctx.out_dir = env;
  if (out_flag && !out_flag->empty()) ctx.out_dir = *out_flag;
  return ctx;
}

void run_command(const std::string& name, const Context& ctx, std::optional<std::string> station,
                 std::optional<std::int64_t> day) {
  if (name == "simulate") {
    cmd_simulate(ctx);
  } else if (name == "train-forecaster") {
    cmd_train_forecaster(ctx);
  } else if (name == "train-policy") {
    cmd_train_policy(ctx);
  } else if (name == "evaluate") {
    cmd_evaluate(ctx);
  } else if (name == "explain") {
    cmd_explain(ctx, std::move(station), day);
  } else {
    throw ConfigError("unknown command '" + name + "'");
  }
}

}  // namespace opcomm::pipeline
