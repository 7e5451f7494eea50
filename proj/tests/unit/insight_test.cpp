#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <httplib.h>

#include <chrono>
#include <cmath>
#include <json.hpp>
#include <numeric>
#include <regex>
#include <set>
#include <thread>

#include "opcomm/errors.hpp"
#include "opcomm/insight.hpp"
#include "opcomm/rng.hpp"
#include "opcomm/textio.hpp"

using namespace opcomm;
using namespace opcomm::insight;
using namespace std::chrono_literals;

namespace {

std::vector<std::string> names(std::size_t d) {
  std::vector<std::string> n;
  for (std::size_t i = 0; i < d; ++i) n.push_back("x" + std::to_string(i));
  return n;
}

SummaryContext fixture_context(std::vector<Attribution> drivers) {
  const ScenarioResult scenario{{0.0, 5.0, 10.0}, {-6.67, -5.0, -10.0}, 1};
  return make_summary_context("Alpha", "South", 120, 1000.0, "Manual", 4.95, "OpComm", 3.85, std::move(drivers), scenario);
}

class LocalServer {
 public:
  explicit LocalServer(std::chrono::milliseconds delay) {
    server_.Post("/refine", [delay](const httplib::Request& req, httplib::Response& res) {
      std::this_thread::sleep_for(delay);
      const auto body = nlohmann::json::parse(req.body);
      res.set_content(nlohmann::json{{"text", "REFINED:" + body.at("draft").get<std::string>().substr(0, 5)}}.dump(),
                      "application/json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~LocalServer() {
    server_.stop();
    thread_.join();
  }
  int port() const { return port_; }

 private:
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
};

}  // namespace

TEST_CASE("additive model attributions") {
  const Predictor f = [](std::span<const double> x) { return x[0] + x[1]; };
  const auto r = shap_exact(f, std::vector<double>{3, 5}, {{0, 0}}, names(2));
  CHECK(r.attributions[0].phi == doctest::Approx(3.0));
  CHECK(r.attributions[1].phi == doctest::Approx(5.0));
  CHECK(r.base_value == 0.0);
  CHECK(r.prediction == 8.0);
}

TEST_CASE("unused feature gets zero attribution") {
  const Predictor f = [](std::span<const double> x) { return x[0] * x[2] + std::sin(x[0]); };
  const auto r = shap_exact(f, std::vector<double>{1, 7, 2}, {{0, 0, 0}, {1, 2, 3}, {-1, 5, 0.5}}, names(3));
  CHECK(r.attributions[1].phi == 0.0);
}

TEST_CASE("two-feature tree matches the permutation oracle") {
  Rng rng(3);
  for (int rep = 0; rep < 20; ++rep) {
    const double c0 = rng.normal();
    const double c1 = rng.normal();
    const double v[4] = {rng.normal(), rng.normal(), rng.normal(), rng.normal()};
    const Predictor f = [&](std::span<const double> x) { return v[(x[0] > c0 ? 2 : 0) + (x[1] > c1 ? 1 : 0)]; };
    const std::vector<double> x{rng.normal(), rng.normal()};
    std::vector<std::vector<double>> bg(5, std::vector<double>(2));
    for (auto& row : bg) row = {rng.normal(), rng.normal()};
    auto value = [&](bool in0, bool in1) {
      double s = 0.0;
      for (const auto& row : bg) s += f(std::vector<double>{in0 ? x[0] : row[0], in1 ? x[1] : row[1]});
      return s / 5.0;
    };
    const double phi0 = 0.5 * ((value(true, false) - value(false, false)) + (value(true, true) - value(false, true)));
    const double phi1 = 0.5 * ((value(false, true) - value(false, false)) + (value(true, true) - value(true, false)));
    const auto r = shap_exact(f, x, bg, names(2));
    CHECK(std::abs(r.attributions[0].phi - phi0) <= 1e-9);
    CHECK(std::abs(r.attributions[1].phi - phi1) <= 1e-9);
  }
}

TEST_CASE("shapley guards") {
  const Predictor f = [](std::span<const double> x) { return x[0]; };
  CHECK_THROWS_AS(shap_exact(f, std::vector<double>(13, 0.0), {std::vector<double>(13, 0.0)}, names(13)), InvalidInput);
  CHECK_THROWS_AS(shap_exact(f, std::vector<double>{1.0}, {}, names(1)), InvalidInput);
  CHECK_NOTHROW(shap_exact(f, std::vector<double>(12, 0.0), {std::vector<double>(12, 0.0)}, names(12)));
}

TEST_CASE("top attributions sort by magnitude") {
  const std::vector<Attribution> all{{"a", 0.5}, {"b", -2.0}, {"c", 1.0}};
  const auto top = top_attributions(all, 2);
  REQUIRE(top.size() == 2);
  CHECK(top[0].feature_name == "b");
  CHECK(top[1].feature_name == "c");
  CHECK(top_attributions(all, 10).size() == 3);
}

TEST_CASE("scenario sweep worked example") {
  const demandsim::RewardConfig cfg{3.0, 1.0};
  const auto r = scenario_sweep(std::vector<double>{-5, 0, 5}, demandsim::BufferActionSet({0.0, 0.05, 0.10}), 100.0, cfg);
  CHECK(r.expected_reward[0] == doctest::Approx(-20.0 / 3.0));
  CHECK(r.expected_reward[1] == doctest::Approx(-5.0));
  CHECK(r.expected_reward[2] == doctest::Approx(-10.0));
  CHECK(r.recommended == 1);
  CHECK(r.buffer_percent[1] == doctest::Approx(5.0));

  const auto zero = scenario_sweep(std::vector<double>{0, 0, 0}, demandsim::BufferActionSet::default_grid(), 100.0, cfg);
  CHECK(zero.recommended == 0);
  CHECK(zero.expected_reward[0] == 0.0);
  CHECK_THROWS_AS(scenario_sweep(std::vector<double>{}, demandsim::BufferActionSet::default_grid(), 100.0, cfg),
                  InvalidInput);
  CHECK(scenario_to_csv(r).find("buffer_percent,expected_reward") != std::string::npos);
}

TEST_CASE("summary contains the WAPE fixture values and relative change") {
  const auto text = render_summary(fixture_context({{"lag_7", 12.5}, {"dow_sin", -3.25}}), "executive");
  CHECK(text.find("4.95") != std::string::npos);
  CHECK(text.find("3.85") != std::string::npos);
  CHECK(text.find("22.22") != std::string::npos);
  CHECK(text.find("raised") != std::string::npos);
  CHECK(text.find("lowered") != std::string::npos);
  CHECK(text.find("-3.25") == std::string::npos);
}

TEST_CASE("summary omits drivers when there are none") {
  const auto with = render_summary(fixture_context({{"lag_7", 1.0}}), "executive");
  const auto without = render_summary(fixture_context({}), "executive");
  CHECK(with.find("Drivers") != std::string::npos);
  CHECK(without.find("Drivers") == std::string::npos);
  CHECK(without.find("lag_7") == std::string::npos);
}

TEST_CASE("summary rendering is deterministic and template-specific") {
  const auto ctx = fixture_context({{"lag_7", 1.0}});
  CHECK(render_summary(ctx, "executive") == render_summary(ctx, "executive"));
  CHECK(render_summary(ctx, "brief") != render_summary(ctx, "executive"));
  CHECK_THROWS_AS(render_summary(ctx, "poem"), InvalidInput);
}

TEST_CASE("summary numbers are grounded in the context") {
  const auto ctx = fixture_context({{"lag_7", 12.5}, {"roll_mean_28", -0.75}});
  for (const auto& tpl : {"executive", "brief"}) {
    auto text = render_summary(ctx, tpl);
    text = std::regex_replace(text, std::regex("`[^`]*`"), "");
    std::set<std::string> allowed{std::to_string(*ctx.day), textio::format_fixed(*ctx.forecast, 2),
                                  textio::format_fixed(*ctx.baseline_wape, 2), textio::format_fixed(*ctx.model_wape, 2),
                                  textio::format_fixed(std::abs(*ctx.wape_relative_reduction_pct), 2)};
    for (const auto& a : ctx.drivers) allowed.insert(textio::format_fixed(std::abs(a.phi), 2));
    for (std::size_t i = 0; i < ctx.scenario_percent.size(); ++i) {
      allowed.insert(textio::format_fixed(std::abs(ctx.scenario_percent[i]), 2));
      allowed.insert(textio::format_fixed(std::abs(ctx.scenario_reward[i]), 2));
      allowed.insert(textio::format_fixed(std::abs(ctx.scenario_delta[i]), 2));
    }
    const std::regex number("[0-9]+(\\.[0-9]+)?");
    for (auto it = std::sregex_iterator(text.begin(), text.end(), number); it != std::sregex_iterator(); ++it) {
      INFO("template " << tpl << ", number " << it->str());
      CHECK(allowed.count(it->str()) == 1);
    }
  }
}

TEST_CASE("missing context fields are listed") {
  SummaryContext ctx;
  ctx.station_id = "A";
  const auto missing = ctx.missing_fields();
  CHECK(!missing.empty());
  try {
    render_summary(ctx, "executive");
    FAIL("expected rejection");
  } catch (const InvalidInput& e) {
    CHECK(std::string(e.what()).find("baseline_wape") != std::string::npos);
  }
}

TEST_CASE("refiner response replaces the draft") {
  LocalServer server(0ms);
  auto refiner = std::make_shared<HttpTextRefiner>("127.0.0.1", server.port(), "/refine", 2000ms);
  const auto ctx = fixture_context({});
  const auto text = render_summary(ctx, "executive", refiner, 2000ms);
  CHECK(text.starts_with("REFINED:"));
}

TEST_CASE("slow or absent refiner falls back to the draft") {
  const auto ctx = fixture_context({});
  const auto draft = render_summary(ctx, "executive");
  {
    LocalServer server(600ms);
    auto refiner = std::make_shared<HttpTextRefiner>("127.0.0.1", server.port(), "/refine", 100ms);
    const auto start = std::chrono::steady_clock::now();
    CHECK(render_summary(ctx, "executive", refiner, 100ms) == draft);
    CHECK(std::chrono::steady_clock::now() - start < 500ms);
    std::this_thread::sleep_for(700ms);
  }
  auto nobody = std::make_shared<HttpTextRefiner>("127.0.0.1", 1, "/refine", 200ms);
  CHECK(render_summary(ctx, "executive", nobody, 200ms) == draft);
}
