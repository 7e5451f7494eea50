#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "opcomm/demandsim.hpp"

namespace opcomm::featurize {

struct TemporalEncoding {
  double dow_sin = 0.0;
  double dow_cos = 1.0;
  double week_of_year_sin = 0.0;
  double week_of_year_cos = 1.0;
  int month_index = 0;  // 0..11
};

/// Cyclical calendar encodings of an integer day index. Day 0 is the first
/// day of a 365-day model year; weeks are numbered 0..52 and mapped onto a
/// 53-step circle.
TemporalEncoding encode_temporal(std::int64_t day_index);

/// Ordered feature layout: dow_sin, dow_cos, woy_sin, woy_cos, [month],
/// lag_<l>..., roll_mean_<w>, roll_std_<w>..., operational names.
class FeatureSchema {
 public:
  FeatureSchema(std::vector<int> lags, std::vector<int> windows, std::vector<std::string> operational,
                bool include_month = false);

  /// Lags {1, 7, 14}, windows {7, 28}, one operational indicator
  /// (capacity_class); twelve features.
  static FeatureSchema default_schema();

  const std::vector<std::string>& names() const { return names_; }
  std::size_t dimension() const { return names_.size(); }
  const std::vector<int>& lags() const { return lags_; }
  const std::vector<int>& windows() const { return windows_; }
  const std::vector<std::string>& operational() const { return operational_; }
  bool include_month() const { return include_month_; }

  /// First series offset with every lag and window defined.
  std::size_t burn_in() const;
  /// Shortest series build_feature_matrix accepts: max lag + max window + 1.
  std::size_t min_series_length() const;
  /// Stable hash of the ordered names.
  std::string fingerprint() const;

 private:
  std::vector<int> lags_;
  std::vector<int> windows_;
  std::vector<std::string> operational_;
  bool include_month_;
  std::vector<std::string> names_;
};

struct FeatureRow {
  std::int64_t day_index = 0;
  std::vector<double> values;
  double target = 0.0;
};

/// Feature values for series offset t, reading only days before t.
/// Valid for burn_in() <= t <= series.size(); t == size() describes the next,
/// unobserved day.
std::vector<double> feature_values(const demandsim::DemandSeries& series, const FeatureSchema& schema,
                                   const std::vector<double>& operational, std::size_t t);

/// One row per eligible day; burn-in days are dropped, never imputed.
std::vector<FeatureRow> build_feature_matrix(const demandsim::DemandSeries& series, const FeatureSchema& schema,
                                             const std::vector<double>& operational);

std::string feature_matrix_to_csv(const FeatureSchema& schema, const std::vector<FeatureRow>& rows);

struct TemporalSplit {
  std::vector<FeatureRow> train;
  std::vector<FeatureRow> test;
};

/// First floor(n * train_fraction) rows (in time order) train, the rest test.
TemporalSplit temporal_split(const std::vector<FeatureRow>& rows, double train_fraction);

/// Stations with fewer usable rows are excluded from modeling.
inline constexpr std::size_t kMinUsableRows = 120;

}  // namespace opcomm::featurize
