#include "opcomm/insight.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <future>
#include <thread>

#include "opcomm/errors.hpp"
#include "opcomm/textio.hpp"

namespace opcomm::insight {

ShapResult shap_exact(const Predictor& model, std::span<const double> x,
                      const std::vector<std::vector<double>>& background, const std::vector<std::string>& names) {
  const std::size_t d = x.size();
  if (d > kMaxShapFeatures) {
    throw InvalidInput("exact Shapley enumeration supports at most " + std::to_string(kMaxShapFeatures) +
                       " features, got " + std::to_string(d));
  }
  if (background.empty()) throw InvalidInput("Shapley background set is empty");
  if (names.size() != d) throw InvalidInput("feature names do not match instance dimension");
  for (const auto& row : background) {
    if (row.size() != d) throw InvalidInput("background row dimension mismatch");
  }

  const std::size_t n_masks = std::size_t{1} << d;
  std::vector<double> coalition_value(n_masks);
  std::vector<double> z(d);
  for (std::size_t mask = 0; mask < n_masks; ++mask) {
    double sum = 0.0;
    for (const auto& row : background) {
      for (std::size_t i = 0; i < d; ++i) z[i] = (mask >> i) & 1U ? x[i] : row[i];
      sum += model(z);
    }
    coalition_value[mask] = sum / static_cast<double>(background.size());
  }

  // weight[s] = s! (d - s - 1)! / d!
  std::vector<double> weight(d);
  for (std::size_t s = 0; s < d; ++s) {
    double w = 1.0 / static_cast<double>(d);
    for (std::size_t k = 1; k <= s; ++k) w *= static_cast<double>(k) / static_cast<double>(d - k);
    weight[s] = w;
  }

  ShapResult out;
  out.base_value = coalition_value[0];
  out.prediction = d == 0 ? coalition_value[0] : coalition_value[n_masks - 1];
  for (std::size_t i = 0; i < d; ++i) {
    const std::size_t bit = std::size_t{1} << i;
    double phi = 0.0;
    for (std::size_t mask = 0; mask < n_masks; ++mask) {
      if (mask & bit) continue;
      phi += weight[static_cast<std::size_t>(std::popcount(mask))] * (coalition_value[mask | bit] - coalition_value[mask]);
    }
    out.attributions.push_back({names[i], phi});
  }
  return out;
}

std::vector<Attribution> top_attributions(const std::vector<Attribution>& all, std::size_t m) {
  std::vector<Attribution> sorted = all;
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const Attribution& a, const Attribution& b) { return std::abs(a.phi) > std::abs(b.phi); });
  if (sorted.size() > m) sorted.resize(m);
  return sorted;
}

ScenarioResult scenario_sweep(std::span<const double> residual_samples, const demandsim::BufferActionSet& actions,
                              double forecast, const demandsim::RewardConfig& cfg) {
  if (residual_samples.empty()) throw InvalidInput("scenario sweep needs residual samples");
  if (!(forecast > 0.0)) throw InvalidInput("scenario sweep needs a positive forecast");
  if (!(cfg.alpha > 0.0) || !(cfg.beta > 0.0)) throw InvalidInput("reward weights must be > 0");
  ScenarioResult out;
  for (std::size_t k = 0; k < actions.size(); ++k) {
    const double buffer = actions.buffer_units(k, forecast);
    double sum = 0.0;
    for (double r : residual_samples) {
      sum += demandsim::compute_reward(std::max(0.0, forecast + r), forecast, buffer, cfg);
    }
    out.buffer_percent.push_back(actions.percent(k));
    out.expected_reward.push_back(sum / static_cast<double>(residual_samples.size()));
    if (out.expected_reward[k] > out.expected_reward[out.recommended]) out.recommended = k;
  }
  return out;
}

std::string scenario_to_csv(const ScenarioResult& scenario, const std::vector<std::string>& comments) {
  textio::CsvTable table;
  table.comments = comments;
  table.header = {"buffer_percent", "expected_reward"};
  for (std::size_t k = 0; k < scenario.buffer_percent.size(); ++k) {
    table.rows.push_back(
        {textio::format_double(scenario.buffer_percent[k]), textio::format_double(scenario.expected_reward[k])});
  }
  return textio::write_csv(table);
}

std::vector<std::string> SummaryContext::missing_fields() const {
  std::vector<std::string> missing;
  if (station_id.empty()) missing.emplace_back("station_id");
  if (baseline_method.empty()) missing.emplace_back("baseline_method");
  if (model_method.empty()) missing.emplace_back("model_method");
  if (!baseline_wape) missing.emplace_back("baseline_wape");
  if (!model_wape) missing.emplace_back("model_wape");
  if (!wape_relative_reduction_pct) missing.emplace_back("wape_relative_reduction_pct");
  if (scenario_percent.empty()) missing.emplace_back("scenario_percent");
  if (scenario_reward.size() != scenario_percent.size()) missing.emplace_back("scenario_reward");
  if (scenario_delta.size() != scenario_percent.size()) missing.emplace_back("scenario_delta");
  if (!recommended || *recommended >= scenario_percent.size()) missing.emplace_back("recommended");
  return missing;
}

SummaryContext make_summary_context(std::string station_id, std::string region, std::optional<std::int64_t> day,
                                    std::optional<double> forecast, std::string baseline_method, double baseline_wape,
                                    std::string model_method, double model_wape, std::vector<Attribution> drivers,
                                    const ScenarioResult& scenario) {
  SummaryContext ctx;
  ctx.station_id = std::move(station_id);
  ctx.region = std::move(region);
  ctx.day = day;
  ctx.forecast = forecast;
  ctx.baseline_method = std::move(baseline_method);
  ctx.model_method = std::move(model_method);
  ctx.baseline_wape = baseline_wape;
  ctx.model_wape = model_wape;
  if (baseline_wape != 0.0) ctx.wape_relative_reduction_pct = 100.0 * (baseline_wape - model_wape) / baseline_wape;
  ctx.drivers = top_attributions(drivers, drivers.size());
  ctx.scenario_percent = scenario.buffer_percent;
  ctx.scenario_reward = scenario.expected_reward;
  ctx.recommended = scenario.recommended;
  for (double r : scenario.expected_reward) {
    ctx.scenario_delta.push_back(r - scenario.expected_reward[scenario.recommended]);
  }
  return ctx;
}

namespace {

std::string num(double v) { return textio::format_fixed(v, 2); }

std::string headline(const SummaryContext& ctx) {
  const double rel = *ctx.wape_relative_reduction_pct;
  std::string s = "Forecast WAPE moved from " + num(*ctx.baseline_wape) + "% (" + ctx.baseline_method + ") to " +
                  num(*ctx.model_wape) + "% (" + ctx.model_method + "), a relative ";
  s += rel >= 0.0 ? "reduction" : "increase";
  s += " of " + num(std::abs(rel)) + "%.";
  return s;
}

std::string driver_sentence(const Attribution& a) {
  if (a.phi > 0.0) return "`" + a.feature_name + "` raised the forecast by " + num(a.phi) + " packages/day.";
  if (a.phi < 0.0) return "`" + a.feature_name + "` lowered the forecast by " + num(-a.phi) + " packages/day.";
  return "`" + a.feature_name + "` had no effect on the forecast.";
}

std::string recommendation(const SummaryContext& ctx) {
  const std::size_t k = *ctx.recommended;
  return "Recommended buffer: " + num(ctx.scenario_percent[k]) + "% of the forecast, expected reward " +
         num(ctx.scenario_reward[k]) + " per day.";
}

std::string render_executive(const SummaryContext& ctx) {
  std::string out = "# Buffer summary: station " + ctx.station_id;
  if (!ctx.region.empty()) out += " (" + ctx.region + ")";
  out += "\n\n";
  if (ctx.day || ctx.forecast) {
    out += "Decision context:";
    if (ctx.day) out += " day " + std::to_string(*ctx.day);
    if (ctx.day && ctx.forecast) out += ",";
    if (ctx.forecast) out += " forecast " + num(*ctx.forecast) + " packages/day";
    out += ".\n\n";
  }
  out += "**Headline.** " + headline(ctx) + "\n\n";
  if (!ctx.drivers.empty()) {
    out += "## Drivers\n\n";
    for (const auto& a : ctx.drivers) out += "- " + driver_sentence(a) + "\n";
    out += "\n";
  }
  out += "## Scenarios\n\n" + recommendation(ctx) + "\n\n";
  out += "| Buffer (%) | Expected reward | Change vs recommended |\n|---:|---:|---:|\n";
  for (std::size_t k = 0; k < ctx.scenario_percent.size(); ++k) {
    out += "| " + num(ctx.scenario_percent[k]) + " | " + num(ctx.scenario_reward[k]) + " | " +
           num(ctx.scenario_delta[k]) + " |\n";
  }
  return out;
}

std::string render_brief(const SummaryContext& ctx) {
  std::string out = "Station " + ctx.station_id + ": " + headline(ctx);
  if (!ctx.drivers.empty()) out += " Main driver: " + driver_sentence(ctx.drivers.front());
  out += " " + recommendation(ctx) + "\n";
  return out;
}

}  // namespace

std::string render_summary(const SummaryContext& ctx, std::string_view template_id,
                           const std::shared_ptr<TextRefiner>& refiner, std::chrono::milliseconds timeout) {
  const auto missing = ctx.missing_fields();
  if (!missing.empty()) {
    std::string msg = "summary context is missing:";
    for (const auto& m : missing) msg += " " + m;
    throw InvalidInput(msg);
  }
  std::string draft;
  if (template_id == "executive") {
    draft = render_executive(ctx);
  } else if (template_id == "brief") {
    draft = render_brief(ctx);
  } else {
    throw InvalidInput("unknown summary template '" + std::string(template_id) + "'");
  }
  if (!refiner) return draft;

  // The worker owns copies of everything it touches, so it can outlive this
  // call when abandoned.
  auto promise = std::make_shared<std::promise<std::string>>();
  auto result = promise->get_future();
  std::thread([promise, refiner, draft] {
    try {
      promise->set_value(refiner->refine(draft));
    } catch (...) {
      promise->set_exception(std::current_exception());
    }
  }).detach();
  if (result.wait_for(timeout) != std::future_status::ready) return draft;
  try {
    std::string refined = result.get();
    return refined.empty() ? draft : refined;
  } catch (...) {
    return draft;
  }
}

}  // namespace opcomm::insight
