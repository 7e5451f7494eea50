#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <string>

#include "opcomm/errors.hpp"
#include "opcomm/gbforecast.hpp"
#include "opcomm/rng.hpp"

using namespace opcomm;
using namespace opcomm::gbforecast;
using featurize::FeatureRow;

namespace {

std::vector<FeatureRow> step_rows() {
  std::vector<FeatureRow> rows;
  for (int i = -20; i < 20; ++i) {
    const double x = i + 0.5;
    rows.push_back({i + 20, {x}, x < 0 ? 0.0 : 10.0});
  }
  return rows;
}

TreeEnsemble step_model() {
  TrainConfig cfg;
  cfg.n_rounds = 1;
  cfg.learning_rate = 1.0;
  cfg.max_leaves = 2;
  cfg.l2_lambda = 0.0;
  return fit(step_rows(), cfg);
}

std::vector<FeatureRow> noisy_rows(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<FeatureRow> rows(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double a = rng.uniform() * 10.0;
    const double b = rng.uniform() * 10.0;
    rows[i] = {static_cast<std::int64_t>(i), {a, b}, std::sin(a) * 5.0 + b + rng.normal()};
  }
  return rows;
}

}  // namespace

TEST_CASE("constant targets are predicted exactly") {
  std::vector<FeatureRow> rows;
  for (int i = 0; i < 30; ++i) rows.push_back({i, {double(i), double(i % 3)}, 7.25});
  const auto m = fit(rows, TrainConfig{});
  CHECK(m.trees().empty());
  for (double x : {-100.0, 0.0, 3.5, 1e6}) CHECK(m.predict(std::vector<double>{x, x}) == 7.25);
}

TEST_CASE("single split recovers a step function") {
  const auto m = step_model();
  REQUIRE(m.trees().size() == 1);
  CHECK(m.trees()[0].leaf_count() == 2);
  for (const auto& r : step_rows()) CHECK(m.predict(r.values) == doctest::Approx(r.target).epsilon(1e-12));
  CHECK(m.predict(std::vector<double>{-1.0}) == doctest::Approx(0.0));
}

TEST_CASE("ensemble composition") {
  TreeEnsemble empty(3.0, 0.5, {"a"});
  CHECK(empty.predict(std::vector<double>{9.0}) == 3.0);
  TreeEnsemble one(3.0, 0.5, {"a"});
  Tree leaf;
  leaf.nodes.push_back(TreeNode{-1, 0.0, -1, -1, 4.0});
  one.add_tree(leaf);
  CHECK(one.predict(std::vector<double>{9.0}) == 5.0);
  CHECK_THROWS_AS(one.predict(std::vector<double>{1.0, 2.0}), InvalidInput);
}

TEST_CASE("training MSE is monotone non-increasing") {
  TrainConfig cfg;
  cfg.n_rounds = 50;
  FitTrace trace;
  fit(noisy_rows(400, 11), cfg, {}, &trace);
  REQUIRE(trace.train_mse.size() >= 2);
  for (std::size_t i = 1; i < trace.train_mse.size(); ++i) CHECK(trace.train_mse[i] <= trace.train_mse[i - 1]);
  CHECK(trace.train_mse.back() < 0.5 * trace.train_mse.front());
}

TEST_CASE("splits respect min_samples_leaf and max_leaves") {
  TrainConfig cfg;
  cfg.max_leaves = 4;
  cfg.min_samples_leaf = 20;
  FitTrace trace;
  const auto m = fit(noisy_rows(300, 12), cfg, {}, &trace);
  for (const auto& t : m.trees()) CHECK(t.leaf_count() <= 4);
  for (const auto& s : trace.splits) {
    CHECK(s.n_left >= 20);
    CHECK(s.n_right >= 20);
    CHECK(s.gain > 0.0);
  }
}

TEST_CASE("fit is deterministic") {
  const auto rows = noisy_rows(200, 13);
  CHECK(save_model(fit(rows, TrainConfig{})) == save_model(fit(rows, TrainConfig{})));
}

TEST_CASE("empty input yields a base-only ensemble") {
  const auto m = fit({}, TrainConfig{}, {"a", "b"});
  CHECK(m.trees().empty());
  CHECK(m.predict(std::vector<double>{1.0, 2.0}) == 0.0);
}

TEST_CASE("invalid configurations are rejected") {
  TrainConfig cfg;
  cfg.learning_rate = 0.0;
  CHECK_THROWS_AS(fit(step_rows(), cfg), InvalidInput);
  cfg = TrainConfig{};
  cfg.max_leaves = 1;
  CHECK_THROWS_AS(cfg.validate(), InvalidInput);
}

TEST_CASE("bin mapper") {
  std::vector<FeatureRow> rows;
  for (int i = 0; i < 10; ++i) rows.push_back({i, {double(i % 4)}, 0.0});
  const auto bins = BinMapper::build(rows, 64);
  CHECK(bins.thresholds[0] == std::vector<double>{0, 1, 2});
  CHECK(bins.bin(0, 0.0) == 0);
  CHECK(bins.bin(0, 1.5) == 2);
  CHECK(bins.bin(0, 3.0) == 3);
  const auto coarse = BinMapper::build(noisy_rows(1000, 1), 8);
  CHECK(coarse.thresholds[0].size() <= 7);
}

TEST_CASE("seasonal naive forecast") {
  demandsim::DemandSeries s{"S", 0, {120, 1, 2, 3, 4, 5, 6, 7}};
  CHECK(seasonal_naive_forecast(s, 7) == 120.0);
  CHECK(seasonal_naive_forecast(s, 8) == 1.0);
  CHECK_THROWS_AS(seasonal_naive_forecast(s, 6), InvalidInput);

  demandsim::DemandSeries periodic{"P", 0, {}};
  for (int t = 0; t < 70; ++t) periodic.values.push_back(100.0 + 10.0 * (t % 7));
  for (std::size_t t = 7; t < periodic.size(); ++t) {
    CHECK(seasonal_naive_forecast(periodic, t) == periodic.values[t]);
  }
}

TEST_CASE("model round trip preserves predictions") {
  auto m = step_model();
  m.metadata["config_hash"] = "abc";
  const auto back = load_model(save_model(m));
  Rng rng(3);
  for (int i = 0; i < 100; ++i) {
    const std::vector<double> x{40.0 * rng.uniform() - 20.0};
    CHECK(back.predict(x) == m.predict(x));
  }
  CHECK(back.metadata.at("config_hash") == "abc");
  CHECK(back.feature_names() == m.feature_names());

  const TreeEnsemble empty(0.1 + 0.2, 0.3, {"a", "b"});
  CHECK(load_model(save_model(empty)).base_score() == empty.base_score());

  const auto big = fit(noisy_rows(300, 5), TrainConfig{});
  const auto big_back = load_model(save_model(big));
  for (const auto& r : noisy_rows(50, 6)) CHECK(big_back.predict(r.values) == big.predict(r.values));
}

TEST_CASE("malformed model documents are rejected with a position") {
  const auto doc = save_model(step_model());
  try {
    load_model(doc.substr(0, doc.size() / 2));
    FAIL("expected parse error");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("line") != std::string::npos);
  }
  CHECK_THROWS_AS(load_model("{\"format\":\"other\"}"), FormatError);
  auto bad = doc;
  const auto pos = bad.find("\"left\": 1");
  REQUIRE(pos != std::string::npos);
  bad.replace(pos, 9, "\"left\": 0");
  try {
    load_model(bad);
    FAIL("expected structural error");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("/trees/0/nodes/0") != std::string::npos);
  }
}
