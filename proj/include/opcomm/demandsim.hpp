#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "opcomm/rng.hpp"

namespace opcomm::demandsim {

enum class Region { NorthEast, MidWest, South, West };

inline constexpr std::array<Region, 4> kAllRegions = {Region::NorthEast, Region::MidWest,
                                                      Region::South, Region::West};

/// Display name as used in report tables ("North-East", ...).
std::string_view region_name(Region r);
/// Accepts display names and enum spellings ("NorthEast").
Region parse_region(std::string_view name);

struct RegimeShift {
  std::int64_t day_index = 0;
  double base_multiplier = 1.0;
};

struct StationProfile {
  std::string station_id;
  Region region = Region::NorthEast;
  double base_volume = 100.0;                 // packages/day
  std::array<double, 7> weekly_pattern{1, 1, 1, 1, 1, 1, 1};
  double trend_per_day = 0.0;                 // fractional drift per day
  double noise_cv = 0.0;
  std::vector<RegimeShift> regime_shifts;     // strictly increasing day_index
  double capacity_class = 0.0;                // operational indicator, {0,1,2}
  std::uint64_t seed = 0;

  /// Throws InvalidInput naming the first violated invariant.
  void validate() const;
};

struct DemandSeries {
  std::string station_id;
  std::int64_t start_day = 0;
  std::vector<double> values;

  std::size_t size() const { return values.size(); }
  std::int64_t day(std::size_t t) const { return start_day + static_cast<std::int64_t>(t); }
};

/// value(t) = base * (1 + trend*t) * weekly[t mod 7] * regime(t) * noise(t), clipped at 0.
/// Noise is lognormal with mean 1 and standard deviation noise_cv.
DemandSeries generate_series(const StationProfile& profile, std::size_t n_days);

std::string series_to_csv(const DemandSeries& series, const std::vector<std::string>& comments = {});
/// Parses `station_id,day,demand`; rows must be for one station and consecutive days.
DemandSeries series_from_csv(std::string_view text);

struct RewardConfig {
  double alpha = 2.0;  // under-buffer weight
  double beta = 1.0;   // over-buffer weight

  /// Requires alpha > beta > 0.
  void validate() const;
};

/// -[alpha * max(0, D - F - b) + beta * max(0, b + F - D)]
double compute_reward(double realized, double forecast, double buffer_units, const RewardConfig& cfg);

class BufferActionSet {
 public:
  /// `fractions` are buffer sizes as a fraction of the forecast (0.05 == 5%).
  explicit BufferActionSet(std::vector<double> fractions);

  /// 0, 2.5, ..., 20 percent.
  static BufferActionSet default_grid();
  static BufferActionSet from_percent(const std::vector<double>& percents);

  std::size_t size() const { return fractions_.size(); }
  double fraction(std::size_t k) const;
  double percent(std::size_t k) const { return fraction(k) * 100.0; }
  double buffer_units(std::size_t k, double forecast) const { return fraction(k) * forecast; }
  const std::vector<double>& fractions() const { return fractions_; }

 private:
  std::vector<double> fractions_;
};

/// Paired realized demand and forecast for consecutive days of one station.
struct DemandTrack {
  std::string station_id;
  std::int64_t start_day = 0;
  std::vector<double> realized;
  std::vector<double> forecast;
  double capacity_class = 0.0;

  std::size_t size() const { return realized.size(); }
};

/// Returns a forecast for day t of the series, or nullopt when t lacks history.
using ForecastFn = std::function<std::optional<double>(const DemandSeries&, std::size_t)>;

/// Builds a track from the days the forecaster can cover.
DemandTrack make_track(const DemandSeries& series, const ForecastFn& forecaster, double capacity_class);

inline constexpr std::size_t kObservationDim = 6;
inline constexpr std::size_t kResidualWindow = 7;
inline constexpr std::size_t kDefaultHorizon = 28;

/// Observation layout: [forecast / track scale, mean and std of the last seven
/// relative residuals (D - F) / scale, dow_sin, dow_cos, capacity_class].
std::vector<double> make_observation(const DemandTrack& track, std::size_t t, double scale);

struct EnvState {
  std::string station_id;
  std::int64_t day_index = 0;
  std::vector<double> observation;
  double forecast = 0.0;
};

struct Transition {
  EnvState state;
  std::size_t action_index = 0;  // zero-based
  double buffer_units = 0.0;
  double realized = 0.0;
  double reward = 0.0;
  double old_log_prob = 0.0;
  double value_estimate = 0.0;
  double return_to_go = 0.0;
  double advantage = 0.0;
};

struct StepResult {
  Transition transition;
  std::optional<EnvState> next;  // empty once the horizon is reached
};

/// Episodic environment: each episode replays `horizon` consecutive days of
/// one track, with the track and start day drawn from the environment's own
/// generator.
class BufferEnv {
 public:
  BufferEnv(DemandTrack track, BufferActionSet actions, RewardConfig reward, std::size_t horizon,
            std::uint64_t seed);
  BufferEnv(std::vector<DemandTrack> tracks, BufferActionSet actions, RewardConfig reward, std::size_t horizon,
            std::uint64_t seed);

  EnvState reset();
  /// Starts an episode on a given track at a fixed offset.
  EnvState reset_at(std::size_t offset, std::size_t track_index = 0);
  StepResult step(std::size_t action_index);

  bool episode_over() const { return !active_; }
  const BufferActionSet& actions() const { return actions_; }
  const RewardConfig& reward_config() const { return reward_; }
  std::size_t horizon() const { return horizon_; }
  std::size_t track_count() const { return tracks_.size(); }
  const DemandTrack& track(std::size_t i = 0) const { return tracks_.at(i); }
  /// Mean forecast of a track; observations express volumes relative to it.
  double scale(std::size_t i = 0) const { return scales_.at(i); }

 private:
  EnvState state_at(std::size_t t) const;

  std::vector<DemandTrack> tracks_;
  BufferActionSet actions_;
  RewardConfig reward_;
  std::size_t horizon_;
  std::vector<double> scales_;
  Rng rng_;
  std::size_t current_ = 0;
  std::size_t offset_ = 0;
  std::size_t steps_ = 0;
  bool active_ = false;
};

}  // namespace opcomm::demandsim
