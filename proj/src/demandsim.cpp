#include "opcomm/demandsim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "opcomm/errors.hpp"
#include "opcomm/featurize.hpp"
#include "opcomm/textio.hpp"

namespace opcomm::demandsim {

std::string_view region_name(Region r) {
  switch (r) {
    case Region::NorthEast: return "North-East";
    case Region::MidWest: return "Mid-West";
    case Region::South: return "South";
    case Region::West: return "West";
  }
  return "?";
}

Region parse_region(std::string_view name) {
  if (name == "North-East" || name == "NorthEast") return Region::NorthEast;
  if (name == "Mid-West" || name == "MidWest") return Region::MidWest;
  if (name == "South") return Region::South;
  if (name == "West") return Region::West;
  throw InvalidInput("unknown region '" + std::string(name) + "'");
}

void StationProfile::validate() const {
  const std::string who = "station '" + station_id + "': ";
  if (station_id.empty()) throw InvalidInput("station profile: empty station_id");
  if (!(base_volume > 0.0) || !std::isfinite(base_volume)) throw InvalidInput(who + "base_volume must be > 0");
  for (double w : weekly_pattern) {
    if (!(w > 0.0) || !std::isfinite(w)) throw InvalidInput(who + "weekly_pattern entries must be > 0");
  }
  if (!std::isfinite(trend_per_day)) throw InvalidInput(who + "trend_per_day must be finite");
  if (!(noise_cv >= 0.0) || !std::isfinite(noise_cv)) throw InvalidInput(who + "noise_cv must be >= 0");
  for (std::size_t i = 0; i < regime_shifts.size(); ++i) {
    if (!(regime_shifts[i].base_multiplier >= 0.0)) throw InvalidInput(who + "regime multiplier must be >= 0");
    if (i > 0 && regime_shifts[i].day_index <= regime_shifts[i - 1].day_index) {
      throw InvalidInput(who + "regime shift days must be strictly increasing");
    }
  }
}

DemandSeries generate_series(const StationProfile& profile, std::size_t n_days) {
  profile.validate();
  DemandSeries series{profile.station_id, 0, {}};
  series.values.reserve(n_days);

  // Lognormal with E = 1 and SD = cv: sigma^2 = ln(1 + cv^2), mu = -sigma^2 / 2.
  const double sigma = std::sqrt(std::log1p(profile.noise_cv * profile.noise_cv));
  const double mu = -0.5 * sigma * sigma;
  Rng rng(profile.seed);

  double regime = 1.0;
  std::size_t next_shift = 0;
  for (std::size_t t = 0; t < n_days; ++t) {
    const auto day = static_cast<std::int64_t>(t);
    while (next_shift < profile.regime_shifts.size() && profile.regime_shifts[next_shift].day_index <= day) {
      regime = profile.regime_shifts[next_shift].base_multiplier;
      ++next_shift;
    }
    const double z = rng.normal();
    const double noise = profile.noise_cv > 0.0 ? std::exp(mu + sigma * z) : 1.0;
    const double value = profile.base_volume * (1.0 + profile.trend_per_day * static_cast<double>(t)) *
                         profile.weekly_pattern[t % 7] * regime * noise;
    series.values.push_back(std::max(0.0, value));
  }
  return series;
}

std::string series_to_csv(const DemandSeries& series, const std::vector<std::string>& comments) {
  textio::CsvTable table;
  table.comments = comments;
  table.header = {"station_id", "day", "demand"};
  for (std::size_t t = 0; t < series.size(); ++t) {
    table.rows.push_back({series.station_id, std::to_string(series.day(t)),
                          textio::format_double(series.values[t])});
  }
  return textio::write_csv(table);
}

DemandSeries series_from_csv(std::string_view text) {
  const auto table = textio::parse_csv(text);
  const auto c_station = table.column("station_id");
  const auto c_day = table.column("day");
  const auto c_demand = table.column("demand");
  DemandSeries series;
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    const auto& row = table.rows[i];
    const auto day = textio::parse_int(row[c_day], "day");
    const double demand = textio::parse_double(row[c_demand], "demand");
    if (i == 0) {
      series.station_id = row[c_station];
      series.start_day = day;
    } else {
      if (row[c_station] != series.station_id) throw FormatError("demand CSV mixes stations");
      if (day != series.day(i)) throw FormatError("demand CSV days are not consecutive at row " + std::to_string(i + 1));
    }
    if (!(demand >= 0.0)) throw FormatError("negative demand at row " + std::to_string(i + 1));
    series.values.push_back(demand);
  }
  return series;
}

void RewardConfig::validate() const {
  if (!(beta > 0.0) || !std::isfinite(alpha) || !std::isfinite(beta)) throw InvalidInput("reward: beta must be > 0");
  if (!(alpha > beta)) throw InvalidInput("reward: alpha must exceed beta");
}

double compute_reward(double realized, double forecast, double buffer_units, const RewardConfig& cfg) {
  const double shortfall = std::max(0.0, realized - forecast - buffer_units);
  const double surplus = std::max(0.0, buffer_units + forecast - realized);
  return -(cfg.alpha * shortfall + cfg.beta * surplus);
}

BufferActionSet::BufferActionSet(std::vector<double> fractions) : fractions_(std::move(fractions)) {
  if (fractions_.size() < 2) throw InvalidInput("buffer action set needs at least two levels");
  for (std::size_t k = 0; k < fractions_.size(); ++k) {
    if (!(fractions_[k] >= 0.0) || !std::isfinite(fractions_[k])) throw InvalidInput("buffer levels must be >= 0");
    if (k > 0 && !(fractions_[k] > fractions_[k - 1])) throw InvalidInput("buffer levels must be strictly increasing");
  }
}

BufferActionSet BufferActionSet::default_grid() {
  return from_percent({0.0, 2.5, 5.0, 7.5, 10.0, 12.5, 15.0, 17.5, 20.0});
}

BufferActionSet BufferActionSet::from_percent(const std::vector<double>& percents) {
  std::vector<double> f;
  f.reserve(percents.size());
  for (double p : percents) f.push_back(p / 100.0);
  return BufferActionSet(std::move(f));
}

double BufferActionSet::fraction(std::size_t k) const {
  if (k >= fractions_.size()) {
    throw InvalidInput("action index " + std::to_string(k) + " outside [0, " + std::to_string(fractions_.size()) + ")");
  }
  return fractions_[k];
}

DemandTrack make_track(const DemandSeries& series, const ForecastFn& forecaster, double capacity_class) {
  DemandTrack track{series.station_id, 0, {}, {}, capacity_class};
  bool started = false;
  for (std::size_t t = 0; t < series.size(); ++t) {
    const auto f = forecaster(series, t);
    if (!f) {
      if (started) throw InvalidInput("forecaster returned no value after the first covered day");
      continue;
    }
    if (!started) {
      track.start_day = series.day(t);
      started = true;
    }
    track.realized.push_back(series.values[t]);
    track.forecast.push_back(std::max(0.0, *f));
  }
  return track;
}

std::vector<double> make_observation(const DemandTrack& track, std::size_t t, double scale) {
  const std::size_t from = t >= kResidualWindow ? t - kResidualWindow : 0;
  const std::size_t n = t - from;
  double mean = 0.0;
  double sd = 0.0;
  if (n > 0) {
    for (std::size_t s = from; s < t; ++s) mean += (track.realized[s] - track.forecast[s]) / scale;
    mean /= static_cast<double>(n);
    for (std::size_t s = from; s < t; ++s) {
      const double r = (track.realized[s] - track.forecast[s]) / scale - mean;
      sd += r * r;
    }
    sd = std::sqrt(sd / static_cast<double>(n));
  }
  const auto enc = featurize::encode_temporal(track.start_day + static_cast<std::int64_t>(t));
  return {track.forecast[t] / scale, mean, sd, enc.dow_sin, enc.dow_cos, track.capacity_class};
}

BufferEnv::BufferEnv(DemandTrack track, BufferActionSet actions, RewardConfig reward, std::size_t horizon,
                     std::uint64_t seed)
    : BufferEnv(std::vector<DemandTrack>{std::move(track)}, std::move(actions), reward, horizon, seed) {}

BufferEnv::BufferEnv(std::vector<DemandTrack> tracks, BufferActionSet actions, RewardConfig reward,
                     std::size_t horizon, std::uint64_t seed)
    : tracks_(std::move(tracks)), actions_(std::move(actions)), reward_(reward), horizon_(horizon), rng_(seed) {
  if (horizon_ == 0) throw InvalidInput("horizon must be >= 1");
  if (tracks_.empty()) throw InvalidInput("environment needs at least one track");
  if (!(reward_.alpha > 0.0) || !(reward_.beta > 0.0)) throw InvalidInput("reward weights must be > 0");
  for (const auto& track : tracks_) {
    if (track.realized.size() != track.forecast.size()) throw InvalidInput("track realized/forecast length mismatch");
    if (track.size() < horizon_) {
      throw InvalidInput("track for '" + track.station_id + "' has " + std::to_string(track.size()) +
                         " days, horizon needs " + std::to_string(horizon_));
    }
    for (std::size_t t = 0; t < track.size(); ++t) {
      if (!(track.realized[t] >= 0.0) || !(track.forecast[t] >= 0.0)) {
        throw InvalidInput("track values must be finite and >= 0");
      }
    }
    const double mean = std::accumulate(track.forecast.begin(), track.forecast.end(), 0.0) /
                        static_cast<double>(track.size());
    scales_.push_back(mean > 0.0 ? mean : 1.0);
  }
}

EnvState BufferEnv::state_at(std::size_t t) const {
  const auto& track = tracks_[current_];
  return EnvState{track.station_id, track.start_day + static_cast<std::int64_t>(t),
                  make_observation(track, t, scales_[current_]), track.forecast[t]};
}

EnvState BufferEnv::reset() {
  const std::size_t index = tracks_.size() > 1 ? rng_.below(tracks_.size()) : 0;
  const std::size_t last = tracks_[index].size() - horizon_;
  const std::size_t first = std::min(kResidualWindow, last);
  return reset_at(first + rng_.below(last - first + 1), index);
}

EnvState BufferEnv::reset_at(std::size_t offset, std::size_t track_index) {
  if (track_index >= tracks_.size()) throw InvalidInput("track index out of range");
  if (offset + horizon_ > tracks_[track_index].size()) throw InvalidInput("episode offset beyond track end");
  current_ = track_index;
  offset_ = offset;
  steps_ = 0;
  active_ = true;
  return state_at(offset_);
}

StepResult BufferEnv::step(std::size_t action_index) {
  if (!active_) throw InvalidInput("step called after episode end; call reset first");
  const auto& track = tracks_[current_];
  const std::size_t t = offset_ + steps_;
  const double forecast = track.forecast[t];
  const double buffer = actions_.buffer_units(action_index, forecast);
  const double realized = track.realized[t];

  StepResult out;
  out.transition.state = state_at(t);
  out.transition.action_index = action_index;
  out.transition.buffer_units = buffer;
  out.transition.realized = realized;
  out.transition.reward = compute_reward(realized, forecast, buffer, reward_);

  ++steps_;
  if (steps_ >= horizon_) {
    active_ = false;
  } else {
    out.next = state_at(t + 1);
  }
  return out;
}

}  // namespace opcomm::demandsim
