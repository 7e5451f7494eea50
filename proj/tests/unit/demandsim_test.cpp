#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "opcomm/demandsim.hpp"
#include "opcomm/errors.hpp"
#include "opcomm/rng.hpp"

using namespace opcomm;
using namespace opcomm::demandsim;

namespace {

StationProfile flat_profile(double base, double cv = 0.0) {
  StationProfile p;
  p.station_id = "T1";
  p.base_volume = base;
  p.noise_cv = cv;
  p.seed = 42;
  return p;
}

DemandTrack constant_residual_track(double forecast, double residual, std::size_t n) {
  DemandTrack t{"T1", 0, {}, {}, 1.0};
  for (std::size_t i = 0; i < n; ++i) {
    t.forecast.push_back(forecast);
    t.realized.push_back(forecast + residual);
  }
  return t;
}

}  // namespace

TEST_CASE("noiseless constant profile yields the base volume") {
  const auto s = generate_series(flat_profile(100.0), 5);
  REQUIRE(s.size() == 5);
  for (double v : s.values) CHECK(v == 100.0);
}

TEST_CASE("weekly pattern multiplies the base volume") {
  auto p = flat_profile(100.0);
  p.weekly_pattern = {1.2, 1, 1, 1, 1, 1, 1};
  const auto s = generate_series(p, 8);
  CHECK(s.values[0] == doctest::Approx(120.0).epsilon(1e-15));
  CHECK(s.values[1] == 100.0);
  CHECK(s.values[7] == s.values[0]);
}

TEST_CASE("same profile and seed give bit-identical series") {
  const auto p = flat_profile(500.0, 0.1);
  const auto a = generate_series(p, 200);
  const auto b = generate_series(p, 200);
  CHECK(a.values == b.values);
  auto q = p;
  q.seed = 43;
  CHECK(generate_series(q, 200).values != a.values);
}

TEST_CASE("noise is mean preserving and non-negative") {
  const auto s = generate_series(flat_profile(1000.0, 0.3), 20000);
  double mean = 0.0;
  for (double v : s.values) {
    CHECK(v >= 0.0);
    mean += v;
  }
  mean /= static_cast<double>(s.size());
  CHECK(std::abs(mean - 1000.0) < 10.0);
}

TEST_CASE("trend and regime shifts apply from their day") {
  auto p = flat_profile(100.0);
  p.regime_shifts = {{3, 2.0}, {5, 0.5}};
  const auto s = generate_series(p, 7);
  CHECK(s.values[2] == 100.0);
  CHECK(s.values[3] == 200.0);
  CHECK(s.values[4] == 200.0);
  CHECK(s.values[5] == 50.0);

  auto q = flat_profile(100.0);
  q.trend_per_day = 0.01;
  const auto t = generate_series(q, 11);
  CHECK(t.values[10] > t.values[0]);
}

TEST_CASE("invalid profiles are rejected") {
  auto p = flat_profile(-1.0);
  CHECK_THROWS_AS(p.validate(), InvalidInput);
  p = flat_profile(100.0, -0.1);
  CHECK_THROWS_AS(generate_series(p, 3), InvalidInput);
  p = flat_profile(100.0);
  p.regime_shifts = {{5, 1.0}, {5, 2.0}};
  CHECK_THROWS_AS(p.validate(), InvalidInput);
  p = flat_profile(100.0);
  p.weekly_pattern[2] = -0.5;
  CHECK_THROWS_AS(p.validate(), InvalidInput);
  p = flat_profile(100.0);
  p.station_id.clear();
  CHECK_THROWS_AS(p.validate(), InvalidInput);
}

TEST_CASE("series CSV round trip is exact") {
  const auto s = generate_series(flat_profile(321.0, 0.2), 50);
  const auto back = series_from_csv(series_to_csv(s, {"note"}));
  CHECK(back.station_id == s.station_id);
  CHECK(back.start_day == s.start_day);
  CHECK(back.values == s.values);
}

TEST_CASE("reward matches worked examples") {
  const RewardConfig cfg{2.0, 1.0};
  CHECK(compute_reward(110, 100, 5, cfg) == -10.0);
  CHECK(compute_reward(105, 100, 5, cfg) == 0.0);
  CHECK(compute_reward(90, 100, 10, cfg) == -20.0);
}

TEST_CASE("reward penalizes at most one side and is never positive") {
  Rng rng(7);
  const RewardConfig cfg{3.0, 1.0};
  for (int i = 0; i < 500; ++i) {
    const double d = 200.0 * rng.uniform();
    const double f = 200.0 * rng.uniform();
    const double b = 20.0 * rng.uniform();
    const double r = compute_reward(d, f, b, cfg);
    CHECK(r <= 0.0);
    const double gap = d - f - b;
    CHECK(r == doctest::Approx(gap > 0 ? -3.0 * gap : gap));
  }
}

TEST_CASE("reward config requires alpha > beta > 0") {
  CHECK_NOTHROW((RewardConfig{2.0, 1.0}).validate());
  CHECK_THROWS_AS((RewardConfig{1.0, 1.0}).validate(), InvalidInput);
  CHECK_THROWS_AS((RewardConfig{2.0, 0.0}).validate(), InvalidInput);
}

TEST_CASE("buffer action set") {
  const auto grid = BufferActionSet::default_grid();
  REQUIRE(grid.size() == 9);
  CHECK(grid.percent(0) == 0.0);
  CHECK(grid.percent(8) == doctest::Approx(20.0));
  CHECK(grid.buffer_units(2, 200.0) == doctest::Approx(10.0));
  CHECK_THROWS_AS(grid.fraction(9), InvalidInput);
  CHECK_THROWS_AS(BufferActionSet({0.1, 0.1}), InvalidInput);
  CHECK_THROWS_AS(BufferActionSet({0.1}), InvalidInput);
  CHECK_THROWS_AS(BufferActionSet({-0.1, 0.1}), InvalidInput);
  CHECK(BufferActionSet::from_percent({0, 5, 10}).fraction(1) == doctest::Approx(0.05));
}

TEST_CASE("exact forecasts with zero buffer give zero reward every step") {
  DemandTrack t{"T1", 0, {}, {}, 0.0};
  for (int i = 0; i < 60; ++i) {
    t.realized.push_back(100.0 + i);
    t.forecast.push_back(100.0 + i);
  }
  BufferEnv env(t, BufferActionSet::default_grid(), {}, kDefaultHorizon, 1);
  env.reset();
  std::size_t steps = 0;
  while (!env.episode_over()) {
    CHECK(env.step(0).transition.reward == 0.0);
    ++steps;
  }
  CHECK(steps == kDefaultHorizon);
  CHECK_THROWS_AS(env.step(0), InvalidInput);
}

TEST_CASE("episode has exactly horizon transitions") {
  BufferEnv env(constant_residual_track(100.0, 0.0, 80), BufferActionSet::default_grid(), {}, 28, 9);
  for (int rep = 0; rep < 5; ++rep) {
    auto state = env.reset();
    std::size_t n = 0;
    for (;;) {
      const auto r = env.step(1);
      ++n;
      CHECK(r.transition.state.day_index == state.day_index);
      if (!r.next) break;
      CHECK(r.next->day_index == state.day_index + 1);
      state = *r.next;
    }
    CHECK(n == 28);
    CHECK(env.episode_over());
  }
}

TEST_CASE("fixed residual: matching buffer gives 0, no buffer gives -5 alpha") {
  const RewardConfig cfg{2.0, 1.0};
  BufferEnv env(constant_residual_track(100.0, 5.0, 40), BufferActionSet({0.0, 0.05, 0.1}), cfg, 10, 3);
  env.reset_at(7);
  const auto matched = env.step(1).transition;
  CHECK(matched.buffer_units == doctest::Approx(5.0));
  CHECK(matched.reward == 0.0);
  CHECK(env.step(0).transition.reward == -5.0 * cfg.alpha);
  CHECK_THROWS_AS(env.step(3), InvalidInput);
}

TEST_CASE("observations are finite, fixed-size and use only past residuals") {
  auto t = constant_residual_track(100.0, 5.0, 40);
  const auto obs = make_observation(t, 10, 100.0);
  REQUIRE(obs.size() == kObservationDim);
  for (double v : obs) CHECK(std::isfinite(v));
  CHECK(obs[0] == doctest::Approx(1.0));
  CHECK(obs[1] == doctest::Approx(0.05));
  CHECK(obs[2] == doctest::Approx(0.0));
  t.realized[10] = 1e6;
  CHECK(make_observation(t, 10, 100.0) == obs);
}

TEST_CASE("multi-track environment samples every track") {
  std::vector<DemandTrack> tracks{constant_residual_track(100.0, 0.0, 40), constant_residual_track(50.0, 0.0, 40)};
  tracks[1].station_id = "T2";
  BufferEnv env(tracks, BufferActionSet::default_grid(), {}, 10, 5);
  bool seen[2] = {false, false};
  for (int i = 0; i < 50; ++i) {
    const auto s = env.reset();
    seen[s.station_id == "T2"] = true;
  }
  CHECK(seen[0]);
  CHECK(seen[1]);
  CHECK(env.scale(1) == doctest::Approx(50.0));
}

TEST_CASE("track shorter than the horizon is rejected") {
  CHECK_THROWS_AS(BufferEnv(constant_residual_track(100.0, 0.0, 5), BufferActionSet::default_grid(), {}, 28, 1),
                  InvalidInput);
}
