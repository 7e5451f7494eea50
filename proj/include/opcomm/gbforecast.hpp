#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "opcomm/demandsim.hpp"
#include "opcomm/featurize.hpp"

namespace opcomm::gbforecast {

struct TrainConfig {
  int n_rounds = 100;
  int max_leaves = 15;
  int min_samples_leaf = 5;
  double l2_lambda = 1.0;
  int n_bins = 64;
  double learning_rate = 0.1;
  double train_fraction = 0.8;

  void validate() const;
};

/// Internal nodes route x[feature] <= threshold to `left`.
struct TreeNode {
  int feature = -1;  // -1 marks a leaf
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  double value = 0.0;  // leaf output

  bool is_leaf() const { return feature < 0; }
};

struct Tree {
  std::vector<TreeNode> nodes;  // nodes[0] is the root

  double evaluate(std::span<const double> x) const;
  std::size_t leaf_count() const;
};

class TreeEnsemble {
 public:
  TreeEnsemble() = default;
  TreeEnsemble(double base_score, double learning_rate, std::vector<std::string> feature_names);

  /// base_score + learning_rate * sum of tree outputs.
  double predict(std::span<const double> x) const;

  double base_score() const { return base_score_; }
  double learning_rate() const { return learning_rate_; }
  const std::vector<Tree>& trees() const { return trees_; }
  const std::vector<std::string>& feature_names() const { return feature_names_; }
  std::size_t dimension() const { return feature_names_.size(); }
  std::string schema_fingerprint() const;

  void add_tree(Tree tree);

  /// Free-form provenance (config hash, seed, station) carried through save/load.
  std::map<std::string, std::string> metadata;

 private:
  double base_score_ = 0.0;
  double learning_rate_ = 1.0;
  std::vector<std::string> feature_names_;
  std::vector<Tree> trees_;
};

/// Per-feature split candidates taken from training-set quantiles. A value's
/// bin is the number of thresholds strictly below it, so splitting at
/// threshold j sends bins 0..j left.
struct BinMapper {
  std::vector<std::vector<double>> thresholds;

  static BinMapper build(const std::vector<featurize::FeatureRow>& rows, int n_bins);
  std::uint32_t bin(std::size_t feature, double value) const;
};

struct SplitRecord {
  int round = 0;
  int node = 0;  // node index of the split leaf within the round's tree
  int feature = 0;
  double threshold = 0.0;
  double gain = 0.0;
  std::size_t n_left = 0;
  std::size_t n_right = 0;
};

struct FitTrace {
  BinMapper bins;
  std::vector<double> train_mse;  // after base score, then after each kept round
  std::vector<SplitRecord> splits;
};

/// Squared-error gradient boosting with best-first (leaf-wise) tree growth.
/// Stops early once a round finds no split with positive gain.
TreeEnsemble fit(const std::vector<featurize::FeatureRow>& rows, const TrainConfig& cfg,
                 std::vector<std::string> feature_names = {}, FitTrace* trace = nullptr);

double mean_squared_error(const TreeEnsemble& model, const std::vector<featurize::FeatureRow>& rows);

/// D_{t-7}; t may equal series.size() to forecast the next day.
double seasonal_naive_forecast(const demandsim::DemandSeries& series, std::size_t t);

std::string save_model(const TreeEnsemble& model);
/// Throws FormatError with the line/column or document path of the defect.
TreeEnsemble load_model(std::string_view document);

inline constexpr int kModelFormatVersion = 1;

}  // namespace opcomm::gbforecast
