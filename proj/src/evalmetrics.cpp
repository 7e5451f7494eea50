#include "opcomm/evalmetrics.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "opcomm/errors.hpp"
#include "opcomm/textio.hpp"

namespace opcomm::evalmetrics {

double wape(std::span<const double> realized, std::span<const double> forecast) {
  if (realized.size() != forecast.size()) throw InvalidInput("wape: realized/forecast length mismatch");
  double abs_err = 0.0;
  double volume = 0.0;
  for (std::size_t i = 0; i < realized.size(); ++i) {
    abs_err += std::abs(realized[i] - forecast[i]);
    volume += realized[i];
  }
  if (!(volume > 0.0)) throw InvalidInput("wape undefined: total realized demand is zero");
  return 100.0 * abs_err / volume;
}

double wape(std::span<const DecisionRecord> records) {
  std::vector<double> d;
  std::vector<double> f;
  d.reserve(records.size());
  f.reserve(records.size());
  for (const auto& r : records) {
    d.push_back(r.realized);
    f.push_back(r.forecast);
  }
  return wape(d, f);
}

double wape_std(std::span<const double> station_wapes) {
  const std::size_t n = station_wapes.size();
  if (n < 2) throw InvalidInput("wape_std needs at least two stations");
  double mean = 0.0;
  for (double w : station_wapes) mean += w;
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (double w : station_wapes) ss += (w - mean) * (w - mean);
  return std::sqrt(ss / static_cast<double>(n - 1));
}

IncidentRates incident_rates(std::span<const DecisionRecord> records, double over_slack) {
  if (records.empty()) throw InvalidInput("incident_rates needs at least one record");
  if (!(over_slack >= 0.0)) throw InvalidInput("over-buffer slack must be >= 0");
  std::size_t under = 0;
  std::size_t over = 0;
  for (const auto& r : records) {
    const double cover = r.forecast + r.buffer_units;
    if (r.realized > cover) {
      ++under;
    } else if (r.realized < cover - over_slack) {
      ++over;
    }
  }
  const auto n = static_cast<double>(records.size());
  return {100.0 * static_cast<double>(under) / n, 100.0 * static_cast<double>(over) / n};
}

double relative_reduction_pct(double before, double after) {
  if (before == 0.0) throw InvalidInput("relative reduction undefined for a zero baseline");
  return 100.0 * (before - after) / before;
}

namespace {

using StationRecords = std::map<std::string, std::vector<DecisionRecord>>;

StationRecords group_by_station(const MethodRecords& m, const std::map<std::string, Region>& station_regions) {
  StationRecords out;
  for (const auto& r : m.records) {
    const auto it = station_regions.find(r.station_id);
    if (it == station_regions.end()) throw InvalidInput("station '" + r.station_id + "' has no region mapping");
    if (it->second != r.region) {
      throw InvalidInput("station '" + r.station_id + "' record region disagrees with the region map");
    }
    out[r.station_id].push_back(r);
  }
  for (auto& [station, recs] : out) {
    std::sort(recs.begin(), recs.end(), [](const auto& a, const auto& b) { return a.day < b.day; });
    for (std::size_t i = 1; i < recs.size(); ++i) {
      if (recs[i].day == recs[i - 1].day) {
        throw InvalidInput("duplicate day " + std::to_string(recs[i].day) + " for station '" + station +
                           "' in method '" + m.method + "'");
      }
    }
  }
  return out;
}

}  // namespace

EvaluationReport aggregate_report(const std::vector<MethodRecords>& methods,
                                  const std::map<std::string, Region>& station_regions, double over_slack) {
  if (methods.empty()) throw InvalidInput("aggregate_report needs at least one method");
  std::set<std::string> names;
  for (const auto& m : methods) {
    if (!names.insert(m.method).second) throw InvalidInput("duplicate method '" + m.method + "'");
  }

  std::vector<StationRecords> grouped;
  std::vector<std::map<std::string, double>> station_wape(methods.size());
  for (std::size_t mi = 0; mi < methods.size(); ++mi) {
    grouped.push_back(group_by_station(methods[mi], station_regions));
    for (const auto& [station, recs] : grouped[mi]) station_wape[mi][station] = wape(recs);
  }

  EvaluationReport report;
  for (Region region : demandsim::kAllRegions) {
    for (std::size_t mi = 0; mi < methods.size(); ++mi) {
      std::vector<double> wapes;
      std::vector<DecisionRecord> pooled;
      for (const auto& [station, recs] : grouped[mi]) {
        if (station_regions.at(station) != region) continue;
        wapes.push_back(station_wape[mi].at(station));
        pooled.insert(pooled.end(), recs.begin(), recs.end());
      }
      if (wapes.empty()) continue;
      ReportRow row;
      row.region = region;
      row.method = methods[mi].method;
      double sum = 0.0;
      for (double w : wapes) sum += w;
      row.wape = sum / static_cast<double>(wapes.size());
      if (wapes.size() >= 2) row.wape_std = wape_std(wapes);
      const auto rates = incident_rates(pooled, over_slack);
      row.under_rate = rates.under_pct;
      row.over_rate = rates.over_pct;
      report.rows.push_back(std::move(row));
    }
  }

  for (std::size_t mi = 0; mi < methods.size(); ++mi) {
    FleetSummary s;
    s.method = methods[mi].method;
    std::vector<DecisionRecord> all;
    double sum = 0.0;
    for (const auto& [station, recs] : grouped[mi]) {
      all.insert(all.end(), recs.begin(), recs.end());
      sum += station_wape[mi].at(station);
    }
    s.stations = grouped[mi].size();
    if (s.stations == 0) throw InvalidInput("method '" + s.method + "' has no records");
    s.pooled_wape = wape(all);
    s.mean_station_wape = sum / static_cast<double>(s.stations);
    if (mi > 0) {
      std::size_t shared = 0;
      std::size_t improved = 0;
      for (const auto& [station, w] : station_wape[mi]) {
        const auto base = station_wape[0].find(station);
        if (base == station_wape[0].end()) continue;
        ++shared;
        if (w < base->second) ++improved;
      }
      if (shared > 0) s.improved_share_pct = 100.0 * static_cast<double>(improved) / static_cast<double>(shared);
      if (report.fleet.front().mean_station_wape > 0.0) {
        s.relative_wape_reduction_pct = relative_reduction_pct(report.fleet.front().mean_station_wape,
                                                               s.mean_station_wape);
      }
    }
    report.fleet.push_back(std::move(s));
  }
  return report;
}

namespace {

std::string opt_field(const std::optional<double>& v) { return v ? textio::format_double(*v) : std::string(); }

std::optional<double> parse_opt(const std::string& s, std::string_view what) {
  if (s.empty()) return std::nullopt;
  return textio::parse_double(s, what);
}

}  // namespace

RenderedReport render_table(const EvaluationReport& report, const std::vector<std::string>& comments) {
  RenderedReport out;

  textio::CsvTable table;
  table.comments = comments;
  table.header.assign(kTableColumns.begin(), kTableColumns.end());
  for (const auto& r : report.rows) {
    table.rows.push_back({std::string(demandsim::region_name(r.region)), r.method, textio::format_double(r.wape),
                          opt_field(r.wape_std), textio::format_double(r.under_rate),
                          textio::format_double(r.over_rate)});
  }
  out.table_csv = textio::write_csv(table);

  textio::CsvTable fleet;
  fleet.comments = comments;
  fleet.header = {"method", "pooled_wape", "mean_station_wape", "stations", "improved_share",
                  "relative_wape_reduction"};
  for (const auto& s : report.fleet) {
    fleet.rows.push_back({s.method, textio::format_double(s.pooled_wape), textio::format_double(s.mean_station_wape),
                          std::to_string(s.stations), opt_field(s.improved_share_pct),
                          opt_field(s.relative_wape_reduction_pct)});
  }
  out.fleet_csv = textio::write_csv(fleet);

  std::string md;
  for (const auto& c : comments) md += "<!-- " + c + " -->\n";
  md += "|";
  for (auto c : kTableColumns) md += " " + std::string(c) + " |";
  md += "\n|---|---|---:|---:|---:|---:|\n";
  std::optional<Region> last_region;
  for (const auto& r : report.rows) {
    const std::string region = last_region == r.region ? "" : std::string(demandsim::region_name(r.region));
    last_region = r.region;
    md += "| " + region + " | " + r.method + " | " + textio::format_fixed(r.wape, 2) + " | " +
          (r.wape_std ? textio::format_fixed(*r.wape_std, 2) : std::string("n/a")) + " | " +
          textio::format_fixed(r.under_rate, 1) + " | " + textio::format_fixed(r.over_rate, 1) + " |\n";
  }
  if (!report.fleet.empty()) {
    md += "\n| Method | Pooled WAPE (%) | Mean station WAPE (%) | Stations | Improved stations (%) | WAPE reduction (%) |\n";
    md += "|---|---:|---:|---:|---:|---:|\n";
    for (const auto& s : report.fleet) {
      md += "| " + s.method + " | " + textio::format_fixed(s.pooled_wape, 2) + " | " +
            textio::format_fixed(s.mean_station_wape, 2) + " | " + std::to_string(s.stations) + " | " +
            (s.improved_share_pct ? textio::format_fixed(*s.improved_share_pct, 1) : std::string("n/a")) + " | " +
            (s.relative_wape_reduction_pct ? textio::format_fixed(*s.relative_wape_reduction_pct, 2)
                                           : std::string("n/a")) +
            " |\n";
    }
  }
  out.markdown = std::move(md);
  return out;
}

EvaluationReport parse_report(std::string_view table_csv, std::string_view fleet_csv) {
  EvaluationReport report;
  const auto table = textio::parse_csv(table_csv);
  if (table.header != std::vector<std::string>(kTableColumns.begin(), kTableColumns.end())) {
    throw FormatError("report CSV header does not match the report columns");
  }
  for (const auto& f : table.rows) {
    ReportRow r;
    r.region = demandsim::parse_region(f[0]);
    r.method = f[1];
    r.wape = textio::parse_double(f[2], "WAPE");
    r.wape_std = parse_opt(f[3], "WAPE std");
    r.under_rate = textio::parse_double(f[4], "under-buffering rate");
    r.over_rate = textio::parse_double(f[5], "over-buffering rate");
    report.rows.push_back(std::move(r));
  }
  const auto fleet = textio::parse_csv(fleet_csv);
  for (const auto& f : fleet.rows) {
    FleetSummary s;
    s.method = f[fleet.column("method")];
    s.pooled_wape = textio::parse_double(f[fleet.column("pooled_wape")], "pooled_wape");
    s.mean_station_wape = textio::parse_double(f[fleet.column("mean_station_wape")], "mean_station_wape");
    s.stations = static_cast<std::size_t>(textio::parse_int(f[fleet.column("stations")], "stations"));
    s.improved_share_pct = parse_opt(f[fleet.column("improved_share")], "improved_share");
    s.relative_wape_reduction_pct = parse_opt(f[fleet.column("relative_wape_reduction")], "relative_wape_reduction");
    report.fleet.push_back(std::move(s));
  }
  return report;
}

std::string records_to_csv(const std::vector<DecisionRecord>& records, const std::vector<std::string>& comments) {
  textio::CsvTable table;
  table.comments = comments;
  table.header = {"station_id", "region", "day", "demand", "forecast", "buffer"};
  for (const auto& r : records) {
    table.rows.push_back({r.station_id, std::string(demandsim::region_name(r.region)), std::to_string(r.day),
                          textio::format_double(r.realized), textio::format_double(r.forecast),
                          textio::format_double(r.buffer_units)});
  }
  return textio::write_csv(table);
}

std::vector<DecisionRecord> records_from_csv(std::string_view text) {
  const auto table = textio::parse_csv(text);
  const auto c_station = table.column("station_id");
  const auto c_region = table.column("region");
  const auto c_day = table.column("day");
  const auto c_demand = table.column("demand");
  const auto c_forecast = table.column("forecast");
  const auto c_buffer = table.column("buffer");
  std::vector<DecisionRecord> out;
  out.reserve(table.rows.size());
  for (const auto& f : table.rows) {
    DecisionRecord r{f[c_station], demandsim::parse_region(f[c_region]), textio::parse_int(f[c_day], "day"),
                     textio::parse_double(f[c_demand], "demand"), textio::parse_double(f[c_forecast], "forecast"),
                     textio::parse_double(f[c_buffer], "buffer")};
    if (!(r.realized >= 0.0) || !(r.forecast >= 0.0) || !(r.buffer_units >= 0.0)) {
      throw FormatError("decision record for '" + r.station_id + "' day " + std::to_string(r.day) +
                        " has negative values");
    }
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace opcomm::evalmetrics
