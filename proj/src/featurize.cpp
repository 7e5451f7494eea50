#include "opcomm/featurize.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "opcomm/errors.hpp"
#include "opcomm/textio.hpp"

namespace opcomm::featurize {

TemporalEncoding encode_temporal(std::int64_t day_index) {
  if (day_index < 0) throw InvalidInput("day_index must be >= 0");
  constexpr double two_pi = 2.0 * std::numbers::pi;
  const auto dow = static_cast<double>(day_index % 7);
  const auto day_of_year = day_index % 365;
  const auto week = static_cast<double>(day_of_year / 7);
  TemporalEncoding e;
  e.dow_sin = std::sin(two_pi * dow / 7.0);
  e.dow_cos = std::cos(two_pi * dow / 7.0);
  e.week_of_year_sin = std::sin(two_pi * week / 53.0);
  e.week_of_year_cos = std::cos(two_pi * week / 53.0);
  e.month_index = static_cast<int>(day_of_year * 12 / 365);
  return e;
}

FeatureSchema::FeatureSchema(std::vector<int> lags, std::vector<int> windows, std::vector<std::string> operational,
                             bool include_month)
    : lags_(std::move(lags)), windows_(std::move(windows)), operational_(std::move(operational)),
      include_month_(include_month) {
  for (int l : lags_) {
    if (l < 1) throw InvalidInput("lags must be >= 1");
  }
  for (int w : windows_) {
    if (w < 2) throw InvalidInput("rolling windows must be >= 2");
  }
  names_ = {"dow_sin", "dow_cos", "woy_sin", "woy_cos"};
  if (include_month_) names_.emplace_back("month");
  for (int l : lags_) names_.push_back("lag_" + std::to_string(l));
  for (int w : windows_) {
    names_.push_back("roll_mean_" + std::to_string(w));
    names_.push_back("roll_std_" + std::to_string(w));
  }
  for (const auto& op : operational_) names_.push_back(op);
}

FeatureSchema FeatureSchema::default_schema() { return FeatureSchema({1, 7, 14}, {7, 28}, {"capacity_class"}); }

std::size_t FeatureSchema::burn_in() const {
  int m = 0;
  for (int l : lags_) m = std::max(m, l);
  for (int w : windows_) m = std::max(m, w);
  return static_cast<std::size_t>(m);
}

std::size_t FeatureSchema::min_series_length() const {
  int max_lag = 0;
  int max_window = 0;
  for (int l : lags_) max_lag = std::max(max_lag, l);
  for (int w : windows_) max_window = std::max(max_window, w);
  return static_cast<std::size_t>(max_lag + max_window) + 1;
}

std::string FeatureSchema::fingerprint() const {
  std::string joined;
  for (const auto& n : names_) joined += n + ';';
  return textio::fnv1a_hex(joined);
}

std::vector<double> feature_values(const demandsim::DemandSeries& series, const FeatureSchema& schema,
                                   const std::vector<double>& operational, std::size_t t) {
  if (operational.size() != schema.operational().size()) {
    throw InvalidInput("expected " + std::to_string(schema.operational().size()) + " operational values, got " +
                       std::to_string(operational.size()));
  }
  if (t < schema.burn_in() || t > series.size()) throw InvalidInput("feature offset outside eligible range");

  std::vector<double> x;
  x.reserve(schema.dimension());
  const auto enc = encode_temporal(series.day(t));
  x.insert(x.end(), {enc.dow_sin, enc.dow_cos, enc.week_of_year_sin, enc.week_of_year_cos});
  if (schema.include_month()) x.push_back(static_cast<double>(enc.month_index));

  const auto& v = series.values;
  for (int l : schema.lags()) x.push_back(v[t - static_cast<std::size_t>(l)]);
  for (int w : schema.windows()) {
    const auto n = static_cast<std::size_t>(w);
    double mean = 0.0;
    for (std::size_t s = t - n; s < t; ++s) mean += v[s];
    mean /= static_cast<double>(n);
    double ss = 0.0;
    for (std::size_t s = t - n; s < t; ++s) ss += (v[s] - mean) * (v[s] - mean);
    x.push_back(mean);
    x.push_back(std::sqrt(ss / static_cast<double>(n - 1)));
  }
  x.insert(x.end(), operational.begin(), operational.end());
  for (double value : x) {
    if (!std::isfinite(value)) throw InvalidInput("non-finite feature value at day " + std::to_string(series.day(t)));
  }
  return x;
}

std::vector<FeatureRow> build_feature_matrix(const demandsim::DemandSeries& series, const FeatureSchema& schema,
                                             const std::vector<double>& operational) {
  if (series.size() < schema.min_series_length()) {
    throw InvalidInput("series '" + series.station_id + "' has " + std::to_string(series.size()) +
                       " days; feature schema requires at least " + std::to_string(schema.min_series_length()));
  }
  std::vector<FeatureRow> rows;
  rows.reserve(series.size() - schema.burn_in());
  for (std::size_t t = schema.burn_in(); t < series.size(); ++t) {
    rows.push_back({series.day(t), feature_values(series, schema, operational, t), series.values[t]});
  }
  return rows;
}

std::string feature_matrix_to_csv(const FeatureSchema& schema, const std::vector<FeatureRow>& rows) {
  textio::CsvTable table;
  table.header.push_back("day");
  table.header.insert(table.header.end(), schema.names().begin(), schema.names().end());
  table.header.push_back("target");
  for (const auto& r : rows) {
    std::vector<std::string> fields{std::to_string(r.day_index)};
    for (double v : r.values) fields.push_back(textio::format_double(v));
    fields.push_back(textio::format_double(r.target));
    table.rows.push_back(std::move(fields));
  }
  return textio::write_csv(table);
}

TemporalSplit temporal_split(const std::vector<FeatureRow>& rows, double train_fraction) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw InvalidInput("train_fraction must be in (0, 1)");
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (rows[i].day_index <= rows[i - 1].day_index) throw InvalidInput("feature rows must be in time order");
  }
  const auto n_train = static_cast<std::size_t>(std::floor(static_cast<double>(rows.size()) * train_fraction));
  TemporalSplit split;
  split.train.assign(rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(n_train));
  split.test.assign(rows.begin() + static_cast<std::ptrdiff_t>(n_train), rows.end());
  return split;
}

}  // namespace opcomm::featurize
