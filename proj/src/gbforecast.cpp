#include "opcomm/gbforecast.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <json.hpp>

#include "opcomm/errors.hpp"
#include "opcomm/textio.hpp"

namespace opcomm::gbforecast {

using featurize::FeatureRow;
using json = nlohmann::json;

void TrainConfig::validate() const {
  if (n_rounds < 1) throw InvalidInput("n_rounds must be >= 1");
  if (max_leaves < 2) throw InvalidInput("max_leaves must be >= 2");
  if (min_samples_leaf < 1) throw InvalidInput("min_samples_leaf must be >= 1");
  if (!(l2_lambda >= 0.0)) throw InvalidInput("l2_lambda must be >= 0");
  if (n_bins < 2) throw InvalidInput("n_bins must be >= 2");
  if (!(learning_rate > 0.0 && learning_rate <= 1.0)) throw InvalidInput("learning_rate must be in (0, 1]");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw InvalidInput("train_fraction must be in (0, 1)");
}

double Tree::evaluate(std::span<const double> x) const {
  std::size_t i = 0;
  while (!nodes[i].is_leaf()) {
    const auto& n = nodes[i];
    i = static_cast<std::size_t>(x[static_cast<std::size_t>(n.feature)] <= n.threshold ? n.left : n.right);
  }
  return nodes[i].value;
}

std::size_t Tree::leaf_count() const {
  return static_cast<std::size_t>(std::count_if(nodes.begin(), nodes.end(), [](const TreeNode& n) { return n.is_leaf(); }));
}

TreeEnsemble::TreeEnsemble(double base_score, double learning_rate, std::vector<std::string> feature_names)
    : base_score_(base_score), learning_rate_(learning_rate), feature_names_(std::move(feature_names)) {}

double TreeEnsemble::predict(std::span<const double> x) const {
  if (x.size() != feature_names_.size()) {
    throw InvalidInput("feature vector has dimension " + std::to_string(x.size()) + ", model expects " +
                       std::to_string(feature_names_.size()));
  }
  double sum = 0.0;
  for (const auto& t : trees_) sum += t.evaluate(x);
  return base_score_ + learning_rate_ * sum;
}

std::string TreeEnsemble::schema_fingerprint() const {
  std::string joined;
  for (const auto& n : feature_names_) joined += n + ';';
  return textio::fnv1a_hex(joined);
}

void TreeEnsemble::add_tree(Tree tree) {
  for (const auto& n : tree.nodes) {
    if (!n.is_leaf() && static_cast<std::size_t>(n.feature) >= feature_names_.size()) {
      throw InvalidInput("tree node references feature outside the schema");
    }
    if (n.is_leaf() && !std::isfinite(n.value)) throw NumericalError("non-finite leaf value");
  }
  trees_.push_back(std::move(tree));
}

BinMapper BinMapper::build(const std::vector<FeatureRow>& rows, int n_bins) {
  BinMapper m;
  if (rows.empty()) return m;
  const std::size_t d = rows.front().values.size();
  const std::size_t n = rows.size();
  m.thresholds.resize(d);
  std::vector<double> col(n);
  for (std::size_t f = 0; f < d; ++f) {
    for (std::size_t i = 0; i < n; ++i) col[i] = rows[i].values[f];
    std::sort(col.begin(), col.end());
    std::vector<double> unique;
    std::unique_copy(col.begin(), col.end(), std::back_inserter(unique));
    auto& thr = m.thresholds[f];
    if (unique.size() <= static_cast<std::size_t>(n_bins)) {
      thr.assign(unique.begin(), unique.end() - 1);
    } else {
      for (int b = 1; b < n_bins; ++b) {
        const double q = col[static_cast<std::size_t>(b) * n / static_cast<std::size_t>(n_bins)];
        if (q < unique.back() && (thr.empty() || q > thr.back())) thr.push_back(q);
      }
    }
  }
  return m;
}

std::uint32_t BinMapper::bin(std::size_t feature, double value) const {
  const auto& thr = thresholds[feature];
  return static_cast<std::uint32_t>(std::lower_bound(thr.begin(), thr.end(), value) - thr.begin());
}

namespace {

struct SplitCandidate {
  double gain = 0.0;
  int feature = -1;
  std::uint32_t bin = 0;
  std::size_t n_left = 0;
};

struct Leaf {
  int node = 0;
  std::vector<std::uint32_t> samples;
  double grad_sum = 0.0;
  SplitCandidate best;
};

class TreeGrower {
 public:
  TreeGrower(const BinMapper& bins, const std::vector<std::vector<std::uint32_t>>& binned,
             const TrainConfig& cfg)
      : bins_(bins), binned_(binned), cfg_(cfg) {}

  Tree grow(const std::vector<double>& residual, int round, std::vector<SplitRecord>* log) {
    Tree tree;
    std::vector<Leaf> leaves(1);
    leaves[0].samples.resize(residual.size());
    std::iota(leaves[0].samples.begin(), leaves[0].samples.end(), 0u);
    tree.nodes.emplace_back();
    finalize(leaves[0], residual);

    while (leaves.size() < static_cast<std::size_t>(cfg_.max_leaves)) {
      std::size_t pick = leaves.size();
      for (std::size_t i = 0; i < leaves.size(); ++i) {
        if (leaves[i].best.feature < 0) continue;
        if (pick == leaves.size() || leaves[i].best.gain > leaves[pick].best.gain) pick = i;
      }
      if (pick == leaves.size()) break;

      Leaf parent = std::move(leaves[pick]);
      const auto f = static_cast<std::size_t>(parent.best.feature);
      const double threshold = bins_.thresholds[f][parent.best.bin];
      Leaf left;
      Leaf right;
      for (auto s : parent.samples) (binned_[s][f] <= parent.best.bin ? left : right).samples.push_back(s);

      left.node = static_cast<int>(tree.nodes.size());
      right.node = left.node + 1;
      tree.nodes.resize(tree.nodes.size() + 2);
      auto& node = tree.nodes[static_cast<std::size_t>(parent.node)];
      node.feature = parent.best.feature;
      node.threshold = threshold;
      node.left = left.node;
      node.right = right.node;
      if (log) {
        log->push_back({round, parent.node, parent.best.feature, threshold, parent.best.gain, left.samples.size(),
                        right.samples.size()});
      }
      finalize(left, residual);
      finalize(right, residual);
      // Leaves stay in tree order; equal gains go to the earlier leaf.
      leaves[pick] = std::move(left);
      leaves.insert(leaves.begin() + static_cast<std::ptrdiff_t>(pick) + 1, std::move(right));
    }

    for (const auto& leaf : leaves) {
      tree.nodes[static_cast<std::size_t>(leaf.node)].value =
          leaf.grad_sum / (static_cast<double>(leaf.samples.size()) + cfg_.l2_lambda);
    }
    return tree;
  }

 private:
  double score(double g, std::size_t n) const { return g * g / (static_cast<double>(n) + cfg_.l2_lambda); }

  void finalize(Leaf& leaf, const std::vector<double>& residual) {
    leaf.grad_sum = 0.0;
    for (auto s : leaf.samples) leaf.grad_sum += residual[s];
    leaf.best = SplitCandidate{};
    const std::size_t n = leaf.samples.size();
    const auto min_leaf = static_cast<std::size_t>(cfg_.min_samples_leaf);
    if (n < 2 * min_leaf) return;
    const double parent_score = score(leaf.grad_sum, n);

    for (std::size_t f = 0; f < bins_.thresholds.size(); ++f) {
      const std::size_t n_thr = bins_.thresholds[f].size();
      if (n_thr == 0) continue;
      hist_sum_.assign(n_thr + 1, 0.0);
      hist_count_.assign(n_thr + 1, 0);
      for (auto s : leaf.samples) {
        const auto b = binned_[s][f];
        hist_sum_[b] += residual[s];
        ++hist_count_[b];
      }
      double g_left = 0.0;
      std::size_t n_left = 0;
      for (std::size_t b = 0; b < n_thr; ++b) {
        g_left += hist_sum_[b];
        n_left += hist_count_[b];
        if (n_left < min_leaf) continue;
        const std::size_t n_right = n - n_left;
        if (n_right < min_leaf) break;
        const double gain = score(g_left, n_left) + score(leaf.grad_sum - g_left, n_right) - parent_score;
        if (gain > leaf.best.gain) leaf.best = {gain, static_cast<int>(f), static_cast<std::uint32_t>(b), n_left};
      }
    }
  }

  const BinMapper& bins_;
  const std::vector<std::vector<std::uint32_t>>& binned_;
  const TrainConfig& cfg_;
  std::vector<double> hist_sum_;
  std::vector<std::size_t> hist_count_;
};

}  // namespace

double mean_squared_error(const TreeEnsemble& model, const std::vector<FeatureRow>& rows) {
  if (rows.empty()) return 0.0;
  double ss = 0.0;
  for (const auto& r : rows) {
    const double e = model.predict(r.values) - r.target;
    ss += e * e;
  }
  return ss / static_cast<double>(rows.size());
}

TreeEnsemble fit(const std::vector<FeatureRow>& rows, const TrainConfig& cfg, std::vector<std::string> feature_names,
                 FitTrace* trace) {
  cfg.validate();
  const std::size_t d = rows.empty() ? feature_names.size() : rows.front().values.size();
  if (feature_names.empty()) {
    for (std::size_t f = 0; f < d; ++f) feature_names.push_back("f" + std::to_string(f));
  }
  if (feature_names.size() != d) throw InvalidInput("feature_names size does not match row dimension");
  double mean = 0.0;
  for (const auto& r : rows) {
    if (r.values.size() != d) throw InvalidInput("feature rows have inconsistent dimension");
    if (!std::isfinite(r.target)) throw InvalidInput("non-finite target at day " + std::to_string(r.day_index));
    for (double v : r.values) {
      if (!std::isfinite(v)) throw InvalidInput("non-finite feature at day " + std::to_string(r.day_index));
    }
    mean += r.target;
  }
  if (!rows.empty()) mean /= static_cast<double>(rows.size());

  TreeEnsemble model(mean, cfg.learning_rate, std::move(feature_names));
  BinMapper bins = BinMapper::build(rows, cfg.n_bins);

  const std::size_t n = rows.size();
  std::vector<std::vector<std::uint32_t>> binned(n, std::vector<std::uint32_t>(d));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t f = 0; f < d; ++f) binned[i][f] = bins.bin(f, rows[i].values[f]);
  }

  std::vector<double> pred(n, mean);
  std::vector<double> residual(n);
  auto mse = [&] {
    double ss = 0.0;
    for (std::size_t i = 0; i < n; ++i) ss += (rows[i].target - pred[i]) * (rows[i].target - pred[i]);
    return n ? ss / static_cast<double>(n) : 0.0;
  };

  std::vector<SplitRecord>* log = trace ? &trace->splits : nullptr;
  if (trace) trace->train_mse.push_back(mse());

  TreeGrower grower(bins, binned, cfg);
  for (int round = 0; round < cfg.n_rounds && n > 0; ++round) {
    for (std::size_t i = 0; i < n; ++i) residual[i] = rows[i].target - pred[i];
    Tree tree = grower.grow(residual, round, log);
    if (tree.nodes.size() == 1) break;
    for (std::size_t i = 0; i < n; ++i) pred[i] += cfg.learning_rate * tree.evaluate(rows[i].values);
    model.add_tree(std::move(tree));
    if (trace) trace->train_mse.push_back(mse());
  }
  if (trace) trace->bins = std::move(bins);
  return model;
}

double seasonal_naive_forecast(const demandsim::DemandSeries& series, std::size_t t) {
  if (t < 7) throw InvalidInput("seasonal-naive forecast needs t >= 7, got " + std::to_string(t));
  if (t > series.size()) throw InvalidInput("seasonal-naive forecast beyond the next unobserved day");
  return series.values[t - 7];
}

std::string save_model(const TreeEnsemble& model) {
  json doc;
  doc["format"] = "opcomm.tree_ensemble";
  doc["version"] = kModelFormatVersion;
  doc["base_score"] = model.base_score();
  doc["learning_rate"] = model.learning_rate();
  doc["feature_names"] = model.feature_names();
  doc["schema_fingerprint"] = model.schema_fingerprint();
  doc["metadata"] = model.metadata;
  json trees = json::array();
  for (const auto& t : model.trees()) {
    json nodes = json::array();
    for (const auto& n : t.nodes) {
      if (n.is_leaf()) {
        nodes.push_back({{"leaf", n.value}});
      } else {
        nodes.push_back({{"feature", n.feature}, {"threshold", n.threshold}, {"left", n.left}, {"right", n.right}});
      }
    }
    trees.push_back({{"nodes", std::move(nodes)}});
  }
  doc["trees"] = std::move(trees);
  return doc.dump(1) + "\n";
}

namespace {

const json& require(const json& obj, const char* key, const std::string& path) {
  if (!obj.is_object() || !obj.contains(key)) throw FormatError("model document: missing " + path + "/" + key);
  return obj.at(key);
}

double require_number(const json& obj, const char* key, const std::string& path) {
  const auto& v = require(obj, key, path);
  if (!v.is_number()) throw FormatError("model document: " + path + "/" + key + " must be a number");
  return v.get<double>();
}

int require_int(const json& obj, const char* key, const std::string& path) {
  const auto& v = require(obj, key, path);
  if (!v.is_number_integer()) throw FormatError("model document: " + path + "/" + key + " must be an integer");
  return v.get<int>();
}

}  // namespace

TreeEnsemble load_model(std::string_view document) {
  json doc;
  try {
    doc = json::parse(document);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("model document: ") + e.what());
  }
  if (require(doc, "format", "") != "opcomm.tree_ensemble") throw FormatError("model document: /format is not opcomm.tree_ensemble");
  const int version = require_int(doc, "version", "");
  if (version < 1 || version > kModelFormatVersion) {
    throw FormatError("model document: unsupported /version " + std::to_string(version));
  }
  const auto& names_json = require(doc, "feature_names", "");
  if (!names_json.is_array()) throw FormatError("model document: /feature_names must be an array");
  std::vector<std::string> names;
  for (const auto& n : names_json) {
    if (!n.is_string()) throw FormatError("model document: /feature_names entries must be strings");
    names.push_back(n.get<std::string>());
  }
  TreeEnsemble model(require_number(doc, "base_score", ""), require_number(doc, "learning_rate", ""), std::move(names));
  if (doc.contains("schema_fingerprint") && doc["schema_fingerprint"] != model.schema_fingerprint()) {
    throw FormatError("model document: /schema_fingerprint does not match /feature_names");
  }
  if (doc.contains("metadata")) {
    for (const auto& [k, v] : doc["metadata"].items()) {
      if (!v.is_string()) throw FormatError("model document: /metadata/" + k + " must be a string");
      model.metadata[k] = v.get<std::string>();
    }
  }
  const auto& trees = require(doc, "trees", "");
  if (!trees.is_array()) throw FormatError("model document: /trees must be an array");
  for (std::size_t ti = 0; ti < trees.size(); ++ti) {
    const std::string tpath = "/trees/" + std::to_string(ti);
    const auto& nodes = require(trees[ti], "nodes", tpath);
    if (!nodes.is_array() || nodes.empty()) throw FormatError("model document: " + tpath + "/nodes must be a non-empty array");
    Tree tree;
    const int count = static_cast<int>(nodes.size());
    for (int ni = 0; ni < count; ++ni) {
      const std::string npath = tpath + "/nodes/" + std::to_string(ni);
      const auto& nj = nodes[static_cast<std::size_t>(ni)];
      TreeNode node;
      if (nj.contains("leaf")) {
        node.value = require_number(nj, "leaf", npath);
      } else {
        node.feature = require_int(nj, "feature", npath);
        node.threshold = require_number(nj, "threshold", npath);
        node.left = require_int(nj, "left", npath);
        node.right = require_int(nj, "right", npath);
        if (node.feature < 0 || static_cast<std::size_t>(node.feature) >= model.dimension()) {
          throw FormatError("model document: " + npath + "/feature out of range");
        }
        // Children after their parent rules out cycles.
        if (node.left <= ni || node.left >= count || node.right <= ni || node.right >= count) {
          throw FormatError("model document: " + npath + " has invalid child indices");
        }
      }
      tree.nodes.push_back(node);
    }
    try {
      model.add_tree(std::move(tree));
    } catch (const std::exception& e) {
      throw FormatError("model document: " + tpath + ": " + e.what());
    }
  }
  return model;
}

}  // namespace opcomm::gbforecast
