#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "opcomm/demandsim.hpp"

namespace opcomm::insight {

using Predictor = std::function<double(std::span<const double>)>;

struct Attribution {
  std::string feature_name;
  double phi = 0.0;  // model-output units
};

struct ShapResult {
  std::vector<Attribution> attributions;  // schema order
  double base_value = 0.0;                // mean prediction over the background
  double prediction = 0.0;                // f(x)
};

inline constexpr std::size_t kMaxShapFeatures = 12;

/// Exact interventional Shapley values by enumerating all 2^d coalitions.
/// A coalition's value is the mean prediction over background rows with the
/// coalition's features taken from `x`.
ShapResult shap_exact(const Predictor& model, std::span<const double> x,
                      const std::vector<std::vector<double>>& background, const std::vector<std::string>& names);

/// The `m` largest attributions by |phi|, ties kept in schema order.
std::vector<Attribution> top_attributions(const std::vector<Attribution>& all, std::size_t m);

struct ScenarioResult {
  std::vector<double> buffer_percent;
  std::vector<double> expected_reward;
  std::size_t recommended = 0;  // argmax, ties to the smaller buffer
};

/// Mean reward of each buffer level over the residual samples (D - F).
/// Only needs positive reward weights, so symmetric costs are allowed.
ScenarioResult scenario_sweep(std::span<const double> residual_samples, const demandsim::BufferActionSet& actions,
                              double forecast, const demandsim::RewardConfig& cfg);

std::string scenario_to_csv(const ScenarioResult& scenario, const std::vector<std::string>& comments = {});

struct SummaryContext {
  std::string station_id;
  std::string region;
  std::optional<std::int64_t> day;
  std::optional<double> forecast;

  std::string baseline_method;
  std::string model_method;
  std::optional<double> baseline_wape;
  std::optional<double> model_wape;
  std::optional<double> wape_relative_reduction_pct;

  std::vector<Attribution> drivers;  // sorted by |phi| descending

  std::vector<double> scenario_percent;
  std::vector<double> scenario_reward;
  std::vector<double> scenario_delta;  // reward minus the recommended reward
  std::optional<std::size_t> recommended;

  /// Names of required fields that are unset or inconsistent.
  std::vector<std::string> missing_fields() const;
};

/// Fills the derived fields (relative reduction, scenario deltas) so the
/// rendered text only ever restates values held by the context.
SummaryContext make_summary_context(std::string station_id, std::string region, std::optional<std::int64_t> day,
                                    std::optional<double> forecast, std::string baseline_method, double baseline_wape,
                                    std::string model_method, double model_wape, std::vector<Attribution> drivers,
                                    const ScenarioResult& scenario);

/// Optional post-processor for the deterministic draft (e.g. an LLM service).
class TextRefiner {
 public:
  virtual ~TextRefiner() = default;
  /// Returns refined text or throws; failures fall back to the draft.
  virtual std::string refine(const std::string& draft) = 0;
};

/// POSTs {"draft": ...} as JSON and expects {"text": ...} back.
class HttpTextRefiner : public TextRefiner {
 public:
  HttpTextRefiner(std::string host, int port, std::string path, std::chrono::milliseconds timeout);
  std::string refine(const std::string& draft) override;

 private:
  std::string host_;
  int port_;
  std::string path_;
  std::chrono::milliseconds timeout_;
};

inline constexpr std::string_view kDefaultTemplate = "executive";

/// Deterministic markdown summary. Templates: "executive", "brief".
/// With a refiner, one refine call is made and abandoned after `timeout`.
std::string render_summary(const SummaryContext& ctx, std::string_view template_id,
                           const std::shared_ptr<TextRefiner>& refiner = nullptr,
                           std::chrono::milliseconds timeout = std::chrono::milliseconds(2000));

}  // namespace opcomm::insight
