#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "opcomm/demandsim.hpp"

namespace opcomm::evalmetrics {

using demandsim::Region;

struct DecisionRecord {
  std::string station_id;
  Region region = Region::NorthEast;
  std::int64_t day = 0;
  double realized = 0.0;
  double forecast = 0.0;
  double buffer_units = 0.0;
};

/// 100 * sum|D - F| / sum D. Throws InvalidInput when sum D == 0.
double wape(std::span<const DecisionRecord> records);
double wape(std::span<const double> realized, std::span<const double> forecast);

/// Sample standard deviation of station-level WAPEs; needs >= 2 values.
double wape_std(std::span<const double> station_wapes);

struct IncidentRates {
  double under_pct = 0.0;
  double over_pct = 0.0;
};

/// Under: D > F + b. Over: D < F + b - over_slack. Exact coverage is neither.
IncidentRates incident_rates(std::span<const DecisionRecord> records, double over_slack = 0.0);

struct MethodRecords {
  std::string method;
  std::vector<DecisionRecord> records;
};

struct ReportRow {
  Region region = Region::NorthEast;
  std::string method;
  double wape = 0.0;                // mean of station WAPEs
  std::optional<double> wape_std;   // absent with fewer than two stations
  double under_rate = 0.0;
  double over_rate = 0.0;
};

struct FleetSummary {
  std::string method;
  double pooled_wape = 0.0;        // volume-weighted over all station-days
  double mean_station_wape = 0.0;  // unweighted mean of station WAPEs
  std::size_t stations = 0;
  /// Relative to the baseline (first) method; absent for the baseline itself.
  std::optional<double> improved_share_pct;
  std::optional<double> relative_wape_reduction_pct;
};

struct EvaluationReport {
  std::vector<ReportRow> rows;  // region order, then method order
  std::vector<FleetSummary> fleet;
};

/// Groups by (region, method). The first method is the baseline for fleet
/// comparisons. Results do not depend on record or station order.
EvaluationReport aggregate_report(const std::vector<MethodRecords>& methods,
                                  const std::map<std::string, Region>& station_regions, double over_slack = 0.0);

inline constexpr std::array<std::string_view, 6> kTableColumns = {
    "Region", "Method", "WAPE (%)", "WAPE Std. Dev. (%)", "Under-buffering (%)", "Over-buffering (%)"};

struct RenderedReport {
  std::string markdown;
  std::string table_csv;
  std::string fleet_csv;
};

RenderedReport render_table(const EvaluationReport& report, const std::vector<std::string>& comments = {});

/// Inverse of render_table's CSV outputs; values are reproduced bit-exactly.
EvaluationReport parse_report(std::string_view table_csv, std::string_view fleet_csv);

std::string records_to_csv(const std::vector<DecisionRecord>& records, const std::vector<std::string>& comments = {});
std::vector<DecisionRecord> records_from_csv(std::string_view text);

/// Relative change (a - b) / a in percent; 4.95 -> 3.85 gives 22.22...
double relative_reduction_pct(double before, double after);

}  // namespace opcomm::evalmetrics
