#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "opcomm/demandsim.hpp"
#include "opcomm/errors.hpp"
#include "opcomm/evalmetrics.hpp"
#include "opcomm/featurize.hpp"
#include "opcomm/gbforecast.hpp"
#include "opcomm/insight.hpp"
#include "opcomm/pipeline.hpp"
#include "opcomm/ppo.hpp"

namespace py = pybind11;
using namespace opcomm;

namespace {

ppo::TrajectoryBatch rewards_to_batch(const std::vector<std::vector<double>>& episodes) {
  ppo::TrajectoryBatch batch;
  for (const auto& ep : episodes) {
    auto& out = batch.emplace_back();
    for (double r : ep) {
      demandsim::Transition t;
      t.reward = r;
      out.push_back(t);
    }
  }
  return batch;
}

std::vector<featurize::FeatureRow> to_rows(const std::vector<std::vector<double>>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw InvalidInput("x and y have different lengths");
  std::vector<featurize::FeatureRow> rows(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) rows[i] = {static_cast<std::int64_t>(i), x[i], y[i]};
  return rows;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Native core of the opcomm forecasting and buffer-control pipeline";

  static py::exception<pipeline::ConfigError> config_error(m, "ConfigError", PyExc_ValueError);
  static py::exception<pipeline::MissingArtifact> missing_artifact(m, "MissingArtifact", PyExc_FileNotFoundError);
  static py::exception<FormatError> format_error(m, "FormatError", PyExc_ValueError);
  static py::exception<NumericalError> numerical_error(m, "NumericalError", PyExc_ArithmeticError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const pipeline::ConfigError& e) {
      py::set_error(config_error, e.what());
    } catch (const pipeline::MissingArtifact& e) {
      py::set_error(missing_artifact, e.what());
    } catch (const FormatError& e) {
      py::set_error(format_error, e.what());
    } catch (const NumericalError& e) {
      py::set_error(numerical_error, e.what());
    } catch (const InvalidInput& e) {
      PyErr_SetString(PyExc_ValueError, e.what());
    }
  });

  // demandsim
  py::enum_<demandsim::Region>(m, "Region")
      .value("NORTH_EAST", demandsim::Region::NorthEast)
      .value("MID_WEST", demandsim::Region::MidWest)
      .value("SOUTH", demandsim::Region::South)
      .value("WEST", demandsim::Region::West);
  m.def("region_name", &demandsim::region_name);

  py::class_<demandsim::StationProfile>(m, "StationProfile")
      .def(py::init<>())
      .def_readwrite("station_id", &demandsim::StationProfile::station_id)
      .def_readwrite("region", &demandsim::StationProfile::region)
      .def_readwrite("base_volume", &demandsim::StationProfile::base_volume)
      .def_readwrite("weekly_pattern", &demandsim::StationProfile::weekly_pattern)
      .def_readwrite("trend_per_day", &demandsim::StationProfile::trend_per_day)
      .def_readwrite("noise_cv", &demandsim::StationProfile::noise_cv)
      .def_readwrite("capacity_class", &demandsim::StationProfile::capacity_class)
      .def_readwrite("seed", &demandsim::StationProfile::seed)
      .def("validate", &demandsim::StationProfile::validate);

  m.def(
      "generate_series",
      [](const demandsim::StationProfile& p, std::size_t n_days) { return demandsim::generate_series(p, n_days).values; },
      py::arg("profile"), py::arg("n_days"), "Daily demand for a station profile.");

  py::class_<demandsim::RewardConfig>(m, "RewardConfig")
      .def(py::init([](double alpha, double beta) { return demandsim::RewardConfig{alpha, beta}; }),
           py::arg("alpha") = 2.0, py::arg("beta") = 1.0)
      .def_readwrite("alpha", &demandsim::RewardConfig::alpha)
      .def_readwrite("beta", &demandsim::RewardConfig::beta)
      .def("validate", &demandsim::RewardConfig::validate);

  m.def("compute_reward", &demandsim::compute_reward, py::arg("realized"), py::arg("forecast"),
        py::arg("buffer_units"), py::arg("cfg") = demandsim::RewardConfig{});

  py::class_<demandsim::BufferActionSet>(m, "BufferActionSet")
      .def(py::init<std::vector<double>>(), py::arg("fractions"))
      .def_static("default_grid", &demandsim::BufferActionSet::default_grid)
      .def_static("from_percent", &demandsim::BufferActionSet::from_percent)
      .def("__len__", &demandsim::BufferActionSet::size)
      .def("fraction", &demandsim::BufferActionSet::fraction)
      .def("percent", &demandsim::BufferActionSet::percent)
      .def("buffer_units", &demandsim::BufferActionSet::buffer_units)
      .def_property_readonly("fractions", &demandsim::BufferActionSet::fractions);

  // featurize
  py::class_<featurize::FeatureSchema>(m, "FeatureSchema")
      .def(py::init<std::vector<int>, std::vector<int>, std::vector<std::string>, bool>(), py::arg("lags"),
           py::arg("windows"), py::arg("operational"), py::arg("include_month") = false)
      .def_static("default_schema", &featurize::FeatureSchema::default_schema)
      .def_property_readonly("names", &featurize::FeatureSchema::names)
      .def_property_readonly("burn_in", &featurize::FeatureSchema::burn_in)
      .def_property_readonly("min_series_length", &featurize::FeatureSchema::min_series_length);

  m.def(
      "build_feature_matrix",
      [](const std::vector<double>& series, const featurize::FeatureSchema& schema,
         const std::vector<double>& operational) {
        const auto rows = featurize::build_feature_matrix({"py", 0, series}, schema, operational);
        std::vector<std::vector<double>> x;
        std::vector<double> y;
        std::vector<std::int64_t> days;
        for (const auto& r : rows) {
          x.push_back(r.values);
          y.push_back(r.target);
          days.push_back(r.day_index);
        }
        return py::make_tuple(x, y, days);
      },
      py::arg("series"), py::arg("schema"), py::arg("operational"), "Returns (X, y, day_index) for eligible days.");

  // gbforecast
  py::class_<gbforecast::TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def_readwrite("n_rounds", &gbforecast::TrainConfig::n_rounds)
      .def_readwrite("max_leaves", &gbforecast::TrainConfig::max_leaves)
      .def_readwrite("min_samples_leaf", &gbforecast::TrainConfig::min_samples_leaf)
      .def_readwrite("l2_lambda", &gbforecast::TrainConfig::l2_lambda)
      .def_readwrite("n_bins", &gbforecast::TrainConfig::n_bins)
      .def_readwrite("learning_rate", &gbforecast::TrainConfig::learning_rate)
      .def_readwrite("train_fraction", &gbforecast::TrainConfig::train_fraction);

  py::class_<gbforecast::TreeEnsemble>(m, "TreeEnsemble")
      .def("predict", [](const gbforecast::TreeEnsemble& e, const std::vector<double>& x) { return e.predict(x); })
      .def("predict_many",
           [](const gbforecast::TreeEnsemble& e, const std::vector<std::vector<double>>& x) {
             std::vector<double> out;
             out.reserve(x.size());
             for (const auto& row : x) out.push_back(e.predict(row));
             return out;
           })
      .def_property_readonly("base_score", &gbforecast::TreeEnsemble::base_score)
      .def_property_readonly("n_trees", [](const gbforecast::TreeEnsemble& e) { return e.trees().size(); })
      .def_property_readonly("feature_names", &gbforecast::TreeEnsemble::feature_names)
      .def("to_json", &gbforecast::save_model)
      .def_static("from_json", [](const std::string& doc) { return gbforecast::load_model(doc); });

  m.def(
      "fit_forecaster",
      [](const std::vector<std::vector<double>>& x, const std::vector<double>& y, const gbforecast::TrainConfig& cfg,
         std::vector<std::string> names) {
        gbforecast::FitTrace trace;
        auto model = gbforecast::fit(to_rows(x, y), cfg, std::move(names), &trace);
        return py::make_tuple(std::move(model), trace.train_mse);
      },
      py::arg("x"), py::arg("y"), py::arg("cfg") = gbforecast::TrainConfig{},
      py::arg("feature_names") = std::vector<std::string>{}, "Returns (model, training MSE per round).");

  m.def(
      "seasonal_naive_forecast",
      [](const std::vector<double>& series, std::size_t t) {
        return gbforecast::seasonal_naive_forecast({"py", 0, series}, t);
      },
      py::arg("series"), py::arg("t"));

  // ppoctl
  m.def("clipped_objective", &ppo::clipped_objective, py::arg("ratio"), py::arg("advantage"), py::arg("epsilon"));
  m.def("softmax", [](const std::vector<double>& logits) { return ppo::softmax(logits); });
  m.def(
      "compute_returns",
      [](const std::vector<std::vector<double>>& rewards, double gamma) {
        return ppo::compute_returns(rewards_to_batch(rewards), gamma);
      },
      py::arg("episode_rewards"), py::arg("gamma"));
  m.def(
      "compute_gae",
      [](const std::vector<std::vector<double>>& rewards, double gamma, double lambda, const std::vector<double>& values) {
        return ppo::compute_gae(rewards_to_batch(rewards), gamma, lambda, values);
      },
      py::arg("episode_rewards"), py::arg("gamma"), py::arg("lam"), py::arg("values"));

  // evalmetrics
  m.def(
      "wape", [](const std::vector<double>& d, const std::vector<double>& f) { return evalmetrics::wape(d, f); },
      py::arg("realized"), py::arg("forecast"));
  m.def(
      "wape_std", [](const std::vector<double>& w) { return evalmetrics::wape_std(w); }, py::arg("station_wapes"));
  m.def(
      "incident_rates",
      [](const std::vector<double>& d, const std::vector<double>& f, const std::vector<double>& b, double slack) {
        if (d.size() != f.size() || d.size() != b.size()) throw InvalidInput("input lengths differ");
        std::vector<evalmetrics::DecisionRecord> recs;
        for (std::size_t i = 0; i < d.size(); ++i) recs.push_back({"py", {}, static_cast<std::int64_t>(i), d[i], f[i], b[i]});
        const auto r = evalmetrics::incident_rates(recs, slack);
        return py::make_tuple(r.under_pct, r.over_pct);
      },
      py::arg("realized"), py::arg("forecast"), py::arg("buffer_units"), py::arg("over_slack") = 0.0,
      "Returns (under-buffering %, over-buffering %).");
  m.def("relative_reduction_pct", &evalmetrics::relative_reduction_pct);
  m.attr("TABLE_COLUMNS") = std::vector<std::string>(evalmetrics::kTableColumns.begin(), evalmetrics::kTableColumns.end());

  // insight
  m.def(
      "shap_exact",
      [](const std::function<double(std::vector<double>)>& f, const std::vector<double>& x,
         const std::vector<std::vector<double>>& background, std::vector<std::string> names) {
        if (names.empty()) {
          for (std::size_t i = 0; i < x.size(); ++i) names.push_back("x" + std::to_string(i));
        }
        const insight::Predictor pred = [&f](std::span<const double> v) {
          return f(std::vector<double>(v.begin(), v.end()));
        };
        const auto r = insight::shap_exact(pred, x, background, names);
        std::vector<double> phi;
        for (const auto& a : r.attributions) phi.push_back(a.phi);
        return py::make_tuple(phi, r.base_value, r.prediction);
      },
      py::arg("model"), py::arg("x"), py::arg("background"), py::arg("feature_names") = std::vector<std::string>{},
      "Returns (phi, base_value, prediction).");
  m.def(
      "scenario_sweep",
      [](const std::vector<double>& residuals, const demandsim::BufferActionSet& actions, double forecast,
         const demandsim::RewardConfig& cfg) {
        const auto r = insight::scenario_sweep(residuals, actions, forecast, cfg);
        return py::make_tuple(r.buffer_percent, r.expected_reward, r.recommended);
      },
      py::arg("residuals"), py::arg("actions"), py::arg("forecast"), py::arg("cfg") = demandsim::RewardConfig{},
      "Returns (buffer_percent, expected_reward, recommended_index).");

  // pipeline
  m.def(
      "config_hash", [](const std::string& path) { return pipeline::load_config(path).hash(); }, py::arg("config_path"));
  m.def(
      "run",
      [](const std::string& command, const std::string& config_path, std::optional<std::string> out, std::size_t jobs,
         std::optional<std::uint64_t> seed, std::optional<std::string> station, std::optional<std::int64_t> day) {
        std::ostringstream log;
        {
          py::gil_scoped_release release;
          const auto ctx = pipeline::make_context(pipeline::load_config(config_path), out, jobs, seed, &log);
          pipeline::run_command(command, ctx, std::move(station), day);
        }
        return log.str();
      },
      py::arg("command"), py::arg("config_path"), py::arg("out") = py::none(), py::arg("jobs") = 1,
      py::arg("seed") = py::none(), py::arg("station") = py::none(), py::arg("day") = py::none(),
      "Runs a pipeline command and returns its log.");
}
