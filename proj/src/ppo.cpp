#include "opcomm/ppo.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <json.hpp>

#include "opcomm/errors.hpp"
#include "opcomm/parallel.hpp"
#include "opcomm/textio.hpp"

namespace opcomm::ppo {

using json = nlohmann::json;

void PpoConfig::validate() const {
  if (!(clip_epsilon > 0.0)) throw InvalidInput("ppo.clip_epsilon must be > 0");
  if (!(gamma > 0.0 && gamma <= 1.0)) throw InvalidInput("ppo.gamma must be in (0, 1]");
  if (!(gae_lambda >= 0.0 && gae_lambda <= 1.0)) throw InvalidInput("ppo.gae_lambda must be in [0, 1]");
  if (epochs_per_update < 1) throw InvalidInput("ppo.epochs_per_update must be >= 1");
  if (minibatch_size < 1) throw InvalidInput("ppo.minibatch_size must be >= 1");
  if (!(policy_step_size > 0.0) || !(value_step_size > 0.0)) throw InvalidInput("ppo step sizes must be > 0");
  if (!(entropy_coef >= 0.0)) throw InvalidInput("ppo.entropy_coef must be >= 0");
  if (rollout_episodes < 1) throw InvalidInput("ppo.rollout_episodes must be >= 1");
  if (max_updates < 0) throw InvalidInput("ppo.max_updates must be >= 0");
  if (hidden.empty()) throw InvalidInput("ppo.hidden needs at least one layer");
}

ObservationNormalizer::ObservationNormalizer(double count, std::vector<double> mean, std::vector<double> m2)
    : count_(count), mean_(std::move(mean)), m2_(std::move(m2)) {
  if (mean_.size() != m2_.size() || count_ < 0.0) throw InvalidInput("inconsistent normalizer state");
}

void ObservationNormalizer::update(std::span<const double> obs) {
  if (obs.size() != mean_.size()) throw InvalidInput("normalizer dimension mismatch");
  for (double v : obs) {
    if (!std::isfinite(v)) throw InvalidInput("non-finite observation");
  }
  count_ += 1.0;
  for (std::size_t i = 0; i < obs.size(); ++i) {
    const double delta = obs[i] - mean_[i];
    mean_[i] += delta / count_;
    m2_[i] += delta * (obs[i] - mean_[i]);
  }
}

std::vector<double> ObservationNormalizer::normalize(std::span<const double> obs) const {
  if (obs.size() != mean_.size()) {
    throw InvalidInput("observation has dimension " + std::to_string(obs.size()) + ", expected " +
                       std::to_string(mean_.size()));
  }
  std::vector<double> out(obs.begin(), obs.end());
  for (double v : out) {
    if (!std::isfinite(v)) throw InvalidInput("non-finite observation");
  }
  if (count_ < 1.0) return out;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double var = count_ > 1.0 ? m2_[i] / count_ : 0.0;
    out[i] = (out[i] - mean_[i]) / std::sqrt(var + 1e-8);
  }
  return out;
}

PolicyBundle PolicyBundle::create(std::size_t obs_dim, const demandsim::BufferActionSet& actions,
                                  const std::vector<std::size_t>& hidden, std::uint64_t seed) {
  std::vector<std::size_t> policy_sizes{obs_dim};
  policy_sizes.insert(policy_sizes.end(), hidden.begin(), hidden.end());
  std::vector<std::size_t> value_sizes = policy_sizes;
  policy_sizes.push_back(actions.size());
  value_sizes.push_back(1);
  PolicyBundle b;
  // Small output layer keeps the initial policy close to uniform.
  b.policy = Mlp(policy_sizes, mix_seed(seed, 1), 0.01);
  b.value = Mlp(value_sizes, mix_seed(seed, 2), 1.0);
  b.normalizer = ObservationNormalizer(obs_dim);
  b.action_fractions = actions.fractions();
  return b;
}

std::vector<double> softmax(std::span<const double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp(logits[i] - mx);
    sum += p[i];
  }
  for (auto& v : p) v /= sum;
  return p;
}

namespace {

std::vector<double> log_softmax(std::span<const double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double z : logits) sum += std::exp(z - mx);
  const double lse = mx + std::log(sum);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace

std::vector<double> action_probs(const PolicyBundle& bundle, std::span<const double> observation) {
  return softmax(bundle.policy.forward(bundle.normalizer.normalize(observation)));
}

double state_value(const PolicyBundle& bundle, std::span<const double> observation) {
  return bundle.value.forward(bundle.normalizer.normalize(observation))[0];
}

std::vector<double> compute_returns(const TrajectoryBatch& batch, double gamma) {
  std::vector<double> out;
  for (const auto& ep : batch) {
    std::vector<double> g(ep.size());
    double acc = 0.0;
    for (std::size_t t = ep.size(); t-- > 0;) {
      acc = ep[t].reward + gamma * acc;
      g[t] = acc;
    }
    out.insert(out.end(), g.begin(), g.end());
  }
  return out;
}

std::vector<double> compute_gae(const TrajectoryBatch& batch, double gamma, double lambda,
                                std::span<const double> values) {
  std::size_t total = 0;
  for (const auto& ep : batch) total += ep.size();
  if (values.size() != total) throw InvalidInput("compute_gae needs one value estimate per transition");
  std::vector<double> out(total);
  std::size_t base = 0;
  for (const auto& ep : batch) {
    double acc = 0.0;
    for (std::size_t t = ep.size(); t-- > 0;) {
      const double next_value = t + 1 < ep.size() ? values[base + t + 1] : 0.0;
      const double delta = ep[t].reward + gamma * next_value - values[base + t];
      acc = delta + gamma * lambda * acc;
      out[base + t] = acc;
    }
    base += ep.size();
  }
  return out;
}

void annotate_batch(TrajectoryBatch& batch, double gamma, double lambda) {
  std::vector<double> values;
  for (const auto& ep : batch) {
    for (const auto& tr : ep) values.push_back(tr.value_estimate);
  }
  const auto returns = compute_returns(batch, gamma);
  const auto adv = compute_gae(batch, gamma, lambda, values);
  std::size_t i = 0;
  for (auto& ep : batch) {
    for (auto& tr : ep) {
      tr.return_to_go = returns[i];
      tr.advantage = adv[i];
      ++i;
    }
  }
}

void normalize_advantages(TrajectoryBatch& batch) {
  double n = 0.0;
  double mean = 0.0;
  for (const auto& ep : batch) {
    for (const auto& tr : ep) {
      mean += tr.advantage;
      n += 1.0;
    }
  }
  if (n == 0.0) return;
  mean /= n;
  double var = 0.0;
  for (const auto& ep : batch) {
    for (const auto& tr : ep) var += (tr.advantage - mean) * (tr.advantage - mean);
  }
  const double sd = std::sqrt(var / n);
  for (auto& ep : batch) {
    for (auto& tr : ep) tr.advantage = sd > 1e-12 ? (tr.advantage - mean) / sd : 0.0;
  }
}

double clipped_objective(double ratio, double advantage, double epsilon) {
  const double clipped = std::clamp(ratio, 1.0 - epsilon, 1.0 + epsilon);
  return std::min(ratio * advantage, clipped * advantage);
}

ObjectiveEval policy_objective(const PolicyBundle& bundle, std::span<const Transition* const> samples, double epsilon,
                               double entropy_coef) {
  ObjectiveEval out;
  out.grad.assign(bundle.policy.params().size(), 0.0);
  if (samples.empty()) return out;
  const double inv_n = 1.0 / static_cast<double>(samples.size());
  const std::size_t k = bundle.action_count();
  std::vector<double> dlogits(k);
  for (const Transition* tr : samples) {
    if (tr->action_index >= k) throw InvalidInput("transition action index outside the policy's action set");
    const auto cache = bundle.policy.forward_cached(bundle.normalizer.normalize(tr->state.observation));
    const auto logp = log_softmax(cache.output);
    std::vector<double> p(k);
    double entropy = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      p[j] = std::exp(logp[j]);
      entropy -= p[j] * logp[j];
    }
    const double ratio = std::exp(logp[tr->action_index] - tr->old_log_prob);
    const double adv = tr->advantage;
    const double unclipped = ratio * adv;
    const double clipped = std::clamp(ratio, 1.0 - epsilon, 1.0 + epsilon) * adv;
    out.surrogate += std::min(unclipped, clipped) * inv_n;
    out.entropy += entropy * inv_n;
    if (std::abs(ratio - 1.0) > epsilon) out.clip_fraction += inv_n;

    // The clipped branch is constant in theta, so only the unclipped branch
    // carries gradient.
    const double surrogate_scale = unclipped <= clipped ? adv * ratio : 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const double onehot = j == tr->action_index ? 1.0 : 0.0;
      dlogits[j] = inv_n * (surrogate_scale * (onehot - p[j]) - entropy_coef * p[j] * (logp[j] + entropy));
    }
    bundle.policy.backward(cache, dlogits, out.grad);
  }
  out.value = out.surrogate + entropy_coef * out.entropy;
  return out;
}

ValueLossEval value_loss(const PolicyBundle& bundle, std::span<const Transition* const> samples) {
  ValueLossEval out;
  out.grad.assign(bundle.value.params().size(), 0.0);
  if (samples.empty()) return out;
  const double inv_n = 1.0 / static_cast<double>(samples.size());
  for (const Transition* tr : samples) {
    const auto cache = bundle.value.forward_cached(bundle.normalizer.normalize(tr->state.observation));
    const double err = cache.output[0] - tr->return_to_go;
    out.value += err * err * inv_n;
    const double d = 2.0 * err * inv_n;
    bundle.value.backward(cache, std::span<const double>(&d, 1), out.grad);
  }
  return out;
}

void AdamState::step(std::vector<double>& params, std::span<const double> grad, double step_size, double sign) {
  constexpr double b1 = 0.9;
  constexpr double b2 = 0.999;
  constexpr double eps = 1e-8;
  if (m.size() != params.size()) {
    m.assign(params.size(), 0.0);
    v.assign(params.size(), 0.0);
    steps = 0;
  }
  ++steps;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps));
  for (std::size_t i = 0; i < params.size(); ++i) {
    m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
    v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
    params[i] += sign * step_size * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
  }
}

UpdateDiagnostics ppo_update(PolicyBundle& bundle, const TrajectoryBatch& batch, const PpoConfig& cfg, Rng& rng,
                             OptimizerState* optimizer) {
  cfg.validate();
  std::vector<const Transition*> samples;
  for (const auto& ep : batch) {
    for (const auto& tr : ep) samples.push_back(&tr);
  }
  if (samples.empty()) throw InvalidInput("ppo_update needs a non-empty batch");

  PolicyBundle next = bundle;
  OptimizerState local;
  OptimizerState& opt = optimizer ? *optimizer : local;
  OptimizerState opt_next = opt;

  UpdateDiagnostics diag;
  double n_minibatches = 0.0;
  const auto mb = static_cast<std::size_t>(cfg.minibatch_size);
  for (int epoch = 0; epoch < cfg.epochs_per_update; ++epoch) {
    for (std::size_t i = samples.size(); i > 1; --i) std::swap(samples[i - 1], samples[rng.below(i)]);
    for (std::size_t start = 0; start < samples.size(); start += mb) {
      const std::span<const Transition* const> chunk(samples.data() + start, std::min(mb, samples.size() - start));
      auto obj = policy_objective(next, chunk, cfg.clip_epsilon, cfg.entropy_coef);
      auto vl = value_loss(next, chunk);
      if (!all_finite(obj.grad) || !all_finite(vl.grad) || !std::isfinite(obj.value) || !std::isfinite(vl.value)) {
        throw NumericalError("non-finite gradient in PPO update (epoch " + std::to_string(epoch) + ")");
      }
      if (cfg.use_adam) {
        opt_next.policy.step(next.policy.params(), obj.grad, cfg.policy_step_size, +1.0);
        opt_next.value.step(next.value.params(), vl.grad, cfg.value_step_size, -1.0);
      } else {
        auto& pp = next.policy.params();
        for (std::size_t j = 0; j < pp.size(); ++j) pp[j] += cfg.policy_step_size * obj.grad[j];
        auto& vp = next.value.params();
        for (std::size_t j = 0; j < vp.size(); ++j) vp[j] -= cfg.value_step_size * vl.grad[j];
      }
      diag.objective += obj.value;
      diag.value_loss += vl.value;
      diag.entropy += obj.entropy;
      diag.clip_fraction += obj.clip_fraction;
      n_minibatches += 1.0;
    }
  }
  if (!all_finite(next.policy.params()) || !all_finite(next.value.params())) {
    throw NumericalError("PPO update produced non-finite parameters");
  }
  diag.objective /= n_minibatches;
  diag.value_loss /= n_minibatches;
  diag.entropy /= n_minibatches;
  diag.clip_fraction /= n_minibatches;
  bundle = std::move(next);
  opt = std::move(opt_next);
  return diag;
}

std::size_t sample_action(std::span<const double> probs, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t k = 0; k < probs.size(); ++k) {
    acc += probs[k];
    if (u < acc) return k;
  }
  return probs.size() - 1;
}

std::size_t greedy_action(std::span<const double> probs) {
  return static_cast<std::size_t>(std::max_element(probs.begin(), probs.end()) - probs.begin());
}

Episode run_episode(demandsim::BufferEnv& env, const PolicyBundle& bundle, Rng* rng) {
  if (env.actions().size() != bundle.action_count()) throw InvalidInput("environment and policy action counts differ");
  Episode ep;
  std::optional<demandsim::EnvState> state = env.reset();
  while (state) {
    const auto x = bundle.normalizer.normalize(state->observation);
    const auto logits = bundle.policy.forward(x);
    const auto probs = softmax(logits);
    const std::size_t a = rng ? sample_action(probs, *rng) : greedy_action(probs);
    const double value = bundle.value.forward(x)[0];
    auto result = env.step(a);
    result.transition.old_log_prob = log_softmax(logits)[a];
    result.transition.value_estimate = value;
    ep.push_back(std::move(result.transition));
    state = std::move(result.next);
  }
  return ep;
}

TrainResult train_loop(const EnvFactory& make_env, PolicyBundle bundle, const PpoConfig& cfg, std::uint64_t seed,
                       std::size_t jobs) {
  cfg.validate();
  const auto slots = static_cast<std::size_t>(cfg.rollout_episodes);
  std::vector<demandsim::BufferEnv> envs;
  std::vector<Rng> rngs;
  envs.reserve(slots);
  for (std::size_t s = 0; s < slots; ++s) {
    envs.push_back(make_env(s, mix_seed(seed, 100 + s)));
    if (envs.back().track().size() == 0 || envs.back().actions().size() != bundle.action_count()) {
      throw InvalidInput("environment inconsistent with policy bundle");
    }
    rngs.emplace_back(mix_seed(seed, 10'000 + s));
  }
  Rng update_rng(mix_seed(seed, 7));
  OptimizerState optimizer;

  auto collect = [&] {
    TrajectoryBatch batch(slots);
    parallel_for(slots, jobs, [&](std::size_t s) { batch[s] = run_episode(envs[s], bundle, &rngs[s]); });
    return batch;
  };
  auto absorb_observations = [&](const TrajectoryBatch& batch) {
    for (const auto& ep : batch) {
      for (const auto& tr : ep) bundle.normalizer.update(tr.state.observation);
    }
  };

  if (bundle.normalizer.count() == 0.0) absorb_observations(collect());

  TrainResult result;
  for (int u = 0; u < cfg.max_updates; ++u) {
    auto batch = collect();
    double reward_sum = 0.0;
    double steps = 0.0;
    for (const auto& ep : batch) {
      for (const auto& tr : ep) {
        reward_sum += tr.reward;
        steps += 1.0;
      }
    }
    annotate_batch(batch, cfg.gamma, cfg.gae_lambda);
    normalize_advantages(batch);
    const auto diag = ppo_update(bundle, batch, cfg, update_rng, &optimizer);
    absorb_observations(batch);
    result.curve.push_back({u, reward_sum / steps, diag.clip_fraction, diag.entropy});
  }
  result.bundle = std::move(bundle);
  return result;
}

std::string curve_to_csv(const std::vector<CurvePoint>& curve, const std::vector<std::string>& comments) {
  textio::CsvTable table;
  table.comments = comments;
  table.header = {"update", "mean_reward", "clip_fraction", "entropy"};
  for (const auto& p : curve) {
    table.rows.push_back({std::to_string(p.update), textio::format_double(p.mean_reward),
                          textio::format_double(p.clip_fraction), textio::format_double(p.entropy)});
  }
  return textio::write_csv(table);
}

namespace {

json network_json(const Mlp& m) { return {{"sizes", m.sizes()}, {"params", m.params()}}; }

Mlp network_from_json(const json& j, const std::string& path) {
  if (!j.is_object() || !j.contains("sizes") || !j.contains("params")) {
    throw FormatError("policy document: " + path + " needs sizes and params");
  }
  try {
    return Mlp::from_params(j["sizes"].get<std::vector<std::size_t>>(), j["params"].get<std::vector<double>>());
  } catch (const json::exception& e) {
    throw FormatError("policy document: " + path + ": " + e.what());
  } catch (const InvalidInput& e) {
    throw FormatError("policy document: " + path + ": " + e.what());
  }
}

}  // namespace

std::string save_bundle(const PolicyBundle& bundle, const PpoConfig& cfg,
                        const std::map<std::string, std::string>& metadata) {
  json doc;
  doc["format"] = "opcomm.policy_bundle";
  doc["version"] = 1;
  doc["action_fractions"] = bundle.action_fractions;
  doc["policy"] = network_json(bundle.policy);
  doc["value"] = network_json(bundle.value);
  doc["normalizer"] = {{"count", bundle.normalizer.count()},
                       {"mean", bundle.normalizer.mean()},
                       {"m2", bundle.normalizer.m2()}};
  doc["ppo"] = {{"clip_epsilon", cfg.clip_epsilon},
                {"gamma", cfg.gamma},
                {"gae_lambda", cfg.gae_lambda},
                {"epochs_per_update", cfg.epochs_per_update},
                {"minibatch_size", cfg.minibatch_size},
                {"policy_step_size", cfg.policy_step_size},
                {"value_step_size", cfg.value_step_size},
                {"entropy_coef", cfg.entropy_coef},
                {"rollout_episodes", cfg.rollout_episodes},
                {"max_updates", cfg.max_updates},
                {"use_adam", cfg.use_adam},
                {"hidden", cfg.hidden}};
  doc["metadata"] = metadata;
  return doc.dump(1) + "\n";
}

LoadedBundle load_bundle(std::string_view document) {
  json doc;
  try {
    doc = json::parse(document);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("policy document: ") + e.what());
  }
  if (!doc.is_object() || doc.value("format", "") != "opcomm.policy_bundle") {
    throw FormatError("policy document: /format is not opcomm.policy_bundle");
  }
  if (doc.value("version", 0) != 1) throw FormatError("policy document: unsupported /version");
  LoadedBundle out;
  try {
    out.bundle.action_fractions = doc.at("action_fractions").get<std::vector<double>>();
    out.bundle.policy = network_from_json(doc.at("policy"), "/policy");
    out.bundle.value = network_from_json(doc.at("value"), "/value");
    const auto& nj = doc.at("normalizer");
    out.bundle.normalizer = ObservationNormalizer(nj.at("count").get<double>(), nj.at("mean").get<std::vector<double>>(),
                                                  nj.at("m2").get<std::vector<double>>());
    const auto& pj = doc.at("ppo");
    auto& c = out.config;
    c.clip_epsilon = pj.at("clip_epsilon").get<double>();
    c.gamma = pj.at("gamma").get<double>();
    c.gae_lambda = pj.at("gae_lambda").get<double>();
    c.epochs_per_update = pj.at("epochs_per_update").get<int>();
    c.minibatch_size = pj.at("minibatch_size").get<int>();
    c.policy_step_size = pj.at("policy_step_size").get<double>();
    c.value_step_size = pj.at("value_step_size").get<double>();
    c.entropy_coef = pj.at("entropy_coef").get<double>();
    c.rollout_episodes = pj.at("rollout_episodes").get<int>();
    c.max_updates = pj.at("max_updates").get<int>();
    c.use_adam = pj.at("use_adam").get<bool>();
    c.hidden = pj.at("hidden").get<std::vector<std::size_t>>();
    if (doc.contains("metadata")) out.metadata = doc["metadata"].get<std::map<std::string, std::string>>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("policy document: ") + e.what());
  }
  const auto& b = out.bundle;
  if (b.policy.input_dim() != b.value.input_dim() || b.normalizer.dimension() != b.policy.input_dim() ||
      b.value.output_dim() != 1 || b.action_fractions.size() != b.policy.output_dim()) {
    throw FormatError("policy document: network shapes are inconsistent");
  }
  return out;
}

}  // namespace opcomm::ppo
