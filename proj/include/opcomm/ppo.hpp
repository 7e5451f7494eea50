#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "opcomm/demandsim.hpp"
#include "opcomm/mlp.hpp"
#include "opcomm/rng.hpp"

namespace opcomm::ppo {

using demandsim::Transition;

struct PpoConfig {
  double clip_epsilon = 0.2;
  double gamma = 0.99;
  double gae_lambda = 0.95;
  int epochs_per_update = 4;
  int minibatch_size = 64;
  double policy_step_size = 3e-3;
  double value_step_size = 1e-2;
  double entropy_coef = 0.01;
  int rollout_episodes = 8;
  int max_updates = 200;
  bool use_adam = false;  // plain fixed-step gradient steps otherwise
  std::vector<std::size_t> hidden{32, 32};

  void validate() const;
};

/// Running per-dimension mean and variance (Welford).
class ObservationNormalizer {
 public:
  ObservationNormalizer() = default;
  explicit ObservationNormalizer(std::size_t dim) : mean_(dim, 0.0), m2_(dim, 0.0) {}
  ObservationNormalizer(double count, std::vector<double> mean, std::vector<double> m2);

  void update(std::span<const double> obs);
  /// Identity until the first update.
  std::vector<double> normalize(std::span<const double> obs) const;

  std::size_t dimension() const { return mean_.size(); }
  double count() const { return count_; }
  const std::vector<double>& mean() const { return mean_; }
  const std::vector<double>& m2() const { return m2_; }

 private:
  double count_ = 0.0;
  std::vector<double> mean_;
  std::vector<double> m2_;
};

/// Policy (K logits) and value (scalar) networks plus the observation
/// normalizer feeding both.
struct PolicyBundle {
  Mlp policy;
  Mlp value;
  ObservationNormalizer normalizer;
  std::vector<double> action_fractions;  // buffer grid the logits index

  static PolicyBundle create(std::size_t obs_dim, const demandsim::BufferActionSet& actions,
                             const std::vector<std::size_t>& hidden, std::uint64_t seed);
  std::size_t action_count() const { return policy.output_dim(); }
  std::size_t observation_dim() const { return policy.input_dim(); }
};

std::vector<double> softmax(std::span<const double> logits);

/// pi(.|s). Throws InvalidInput on non-finite or wrongly sized observations.
std::vector<double> action_probs(const PolicyBundle& bundle, std::span<const double> observation);
double state_value(const PolicyBundle& bundle, std::span<const double> observation);

using Episode = std::vector<Transition>;
using TrajectoryBatch = std::vector<Episode>;

/// Backward discounted sums within each episode, per transition in batch order.
std::vector<double> compute_returns(const TrajectoryBatch& batch, double gamma);
/// GAE with zero bootstrap at the horizon. `values` follows batch order.
std::vector<double> compute_gae(const TrajectoryBatch& batch, double gamma, double lambda,
                                std::span<const double> values);
/// Fills return_to_go and advantage from the recorded value estimates.
void annotate_batch(TrajectoryBatch& batch, double gamma, double lambda);
/// Rescales advantages to mean 0 and standard deviation 1 across the batch.
void normalize_advantages(TrajectoryBatch& batch);

/// min(rho * A, clip(rho, 1 - eps, 1 + eps) * A)
double clipped_objective(double ratio, double advantage, double epsilon);

struct ObjectiveEval {
  double value = 0.0;  // mean clipped surrogate + entropy_coef * mean entropy
  double surrogate = 0.0;
  double entropy = 0.0;
  double clip_fraction = 0.0;
  std::vector<double> grad;  // d value / d policy params
};

struct ValueLossEval {
  double value = 0.0;  // mean (V(s) - G)^2
  std::vector<double> grad;
};

/// Mean over `samples` of the clipped surrogate plus entropy bonus, with the
/// analytic gradient with respect to the policy parameters.
ObjectiveEval policy_objective(const PolicyBundle& bundle, std::span<const Transition* const> samples,
                               double epsilon, double entropy_coef);
ValueLossEval value_loss(const PolicyBundle& bundle, std::span<const Transition* const> samples);

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t steps = 0;

  void step(std::vector<double>& params, std::span<const double> grad, double step_size, double sign);
};

struct OptimizerState {
  AdamState policy;
  AdamState value;
};

struct UpdateDiagnostics {
  double objective = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double clip_fraction = 0.0;
};

/// epochs_per_update passes of shuffled minibatches. Throws NumericalError
/// (leaving `bundle` untouched) if any gradient is non-finite.
UpdateDiagnostics ppo_update(PolicyBundle& bundle, const TrajectoryBatch& batch, const PpoConfig& cfg, Rng& rng,
                             OptimizerState* optimizer = nullptr);

struct CurvePoint {
  int update = 0;
  double mean_reward = 0.0;
  double clip_fraction = 0.0;
  double entropy = 0.0;
};

/// Builds the environment for rollout slot `slot` with its own seed.
using EnvFactory = std::function<demandsim::BufferEnv(std::size_t slot, std::uint64_t seed)>;

struct TrainResult {
  PolicyBundle bundle;
  std::vector<CurvePoint> curve;
};

/// Collect rollout_episodes Monte Carlo episodes, annotate returns and GAE,
/// normalize advantages, update; repeated max_updates times. Rollout slots
/// are independent, so `jobs` > 1 yields the same result as jobs == 1.
TrainResult train_loop(const EnvFactory& make_env, PolicyBundle bundle, const PpoConfig& cfg, std::uint64_t seed,
                       std::size_t jobs = 1);

/// Plays one episode from the env's current reset, sampling actions if `rng`
/// is given and taking the modal action otherwise.
Episode run_episode(demandsim::BufferEnv& env, const PolicyBundle& bundle, Rng* rng);

std::size_t sample_action(std::span<const double> probs, Rng& rng);
std::size_t greedy_action(std::span<const double> probs);

std::string curve_to_csv(const std::vector<CurvePoint>& curve, const std::vector<std::string>& comments = {});

std::string save_bundle(const PolicyBundle& bundle, const PpoConfig& cfg,
                        const std::map<std::string, std::string>& metadata = {});
struct LoadedBundle {
  PolicyBundle bundle;
  PpoConfig config;
  std::map<std::string, std::string> metadata;
};
LoadedBundle load_bundle(std::string_view document);

}  // namespace opcomm::ppo
