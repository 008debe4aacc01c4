#pragma once

// The inner loop: an afferent array (plus optional predictive component and
// episodic memory) senses the twin, PPO learns a policy on the shaped reward.
// The genome is fixed for the whole run.

#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "afferent/afferent_core.hpp"
#include "afferent/common.hpp"
#include "afferent/env_twin.hpp"
#include "afferent/memory_amm.hpp"
#include "afferent/policy_rl.hpp"
#include "afferent/predictive.hpp"

namespace afferent {

enum class Variant { full, no_cat, no_evolution, no_amm, no_predictive };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::no_cat: return "no_cat";
    case Variant::no_evolution: return "no_evolution";
    case Variant::no_amm: return "no_amm";
    case Variant::no_predictive: return "no_predictive";
  }
  return "full";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "full") return Variant::full;
  if (s == "no_cat") return Variant::no_cat;
  if (s == "no_evolution") return Variant::no_evolution;
  if (s == "no_amm") return Variant::no_amm;
  if (s == "no_predictive") return Variant::no_predictive;
  throw ConfigError("unknown ablation '" + s + "'");
}

/// Which sensing pathways the agent uses.
struct AgentConfig {
  bool use_cat = true;         // afferent signals in obs and reward
  bool use_predictive = true;  // blend c_pred into the CAT
  bool use_memory = true;      // episodic memory
  bool memory_in_obs = true;   // y_hat, d_mean observed (epi layout)
  bool memory_in_reward = true;
  bool memory_bias = false;    // 70/30 historical CAT blend
  bool reduced_obs = false;    // [cat, age_norm] observation
  MemoryParams memory;

  ObservationLayout layout() const {
    if (!use_cat) return ObservationLayout::features;
    if (reduced_obs) return ObservationLayout::reduced;
    if (use_memory && memory_in_obs) return ObservationLayout::epi;
    return ObservationLayout::base;
  }
};

/// Applies an ablation to a base agent/reward configuration.
inline void apply_variant(Variant v, AgentConfig& agent, RewardParams& reward) {
  switch (v) {
    case Variant::full:
    case Variant::no_evolution:
      break;
    case Variant::no_cat:
      agent.use_cat = false;
      agent.use_predictive = false;
      agent.use_memory = false;
      reward.lambda_cat = 0.0;
      reward.lambda_mem = 0.0;
      break;
    case Variant::no_amm:
      agent.use_memory = false;
      reward.lambda_mem = 0.0;
      break;
    case Variant::no_predictive:
      agent.use_predictive = false;
      break;
  }
}

struct Sensed {
  double cat_env = 0.0;
  double cat_pred = 0.0;
  double cat = 0.0;
  RecallResult recall;
  Observation obs;
};

/// Turns raw twin features into the policy observation and penalty signals.
class SensingPipeline {
 public:
  SensingPipeline(AfferentArray array, std::shared_ptr<const PredictiveComponent> predictive,
                  AgentConfig cfg, std::string scenario, double age)
      : array_(std::move(array)),
        predictive_(std::move(predictive)),
        cfg_(std::move(cfg)),
        scenario_(std::move(scenario)),
        age_(age),
        memory_(cfg_.memory) {
    if (array_.features() != kTwinFeatures) {
      throw ConfigError("afferent array must read the twin's 3 features");
    }
    if (cfg_.use_cat && cfg_.use_predictive && !predictive_) {
      throw ConfigError("predictive component enabled but no safe-state model supplied");
    }
  }

  const AgentConfig& config() const { return cfg_; }
  const AfferentArray& array() const { return array_; }
  const MemoryStore& memory() const { return memory_; }
  void set_memory(MemoryStore m) { memory_ = std::move(m); }
  const Sensed& current() const { return current_; }
  std::size_t obs_dim() const {
    return observation_size(cfg_.layout(), array_.features(), array_.size());
  }

  const Sensed& begin_episode(const EnvState& s0) {
    array_.reset();
    if (cfg_.use_memory) memory_.end_trajectory();
    sense(s0.x, nullptr, 0.0, 0.0, s0.t);
    return current_;
  }

  /// Senses the post-action state. `prev` is the state before the step.
  const Sensed& advance(const EnvState& prev, double action, const StepResult& r,
                        std::int64_t t_after) {
    Transition tr{Vec(prev.x.begin(), prev.x.end()), action, phase_context(prev.t),
                  Vec(r.x_next.begin(), r.x_next.end())};
    sense(r.x_next, &tr, action, r.delta_d, t_after);
    return current_;
  }

  void end_episode() {
    if (cfg_.use_memory) memory_.end_trajectory();
  }

 private:
  void sense(const Features& x, const Transition* tr, double action, double delta_d,
             std::int64_t t) {
    Sensed s;
    if (cfg_.use_cat) {
      s.cat_env = array_.compute_cat(x);
      s.cat = s.cat_env;
      if (cfg_.use_predictive) {
        const auto& p = predictive_->params;
        s.cat_pred = tr ? predictive_->signal(tr->x, tr->action, tr->context, tr->x_next)
                        : pred_signal(0.0, p);
        s.cat = combine_cat(s.cat_env, s.cat_pred, p);
      }
      if (cfg_.use_memory && cfg_.memory_bias) s.cat = apply_memory_bias(s.cat, memory_, scenario_);
      if (cfg_.use_memory) {
        StepRecord rec{Vec(x.begin(), x.end()), array_.activations(), s.cat, action, delta_d};
        memory_.observe(rec, scenario_, t);
        EncodedKey q;
        if (memory_.current_key(q)) s.recall = memory_.recall(q.key);
      }
    }
    s.obs = build_observation(x, array_.activations(), s.cat, s.recall.y_hat, s.recall.d_mean,
                              age_, cfg_.layout(), array_.features(), array_.size());
    current_ = std::move(s);
  }

  AfferentArray array_;
  std::shared_ptr<const PredictiveComponent> predictive_;
  AgentConfig cfg_;
  std::string scenario_;
  double age_;
  MemoryStore memory_;
  Sensed current_;
};

/// Healthy-regime transitions (normal scenario, youngest age, uniform random
/// work intensity) for fitting the safe-state model.
inline std::vector<Transition> healthy_rollouts(std::size_t samples, std::uint64_t seed,
                                                int episode_len = 200) {
  KneeTwin env(ScenarioConfig::preset("normal"), episode_len);
  Rng rng(seed);
  std::vector<Transition> out;
  out.reserve(samples);
  std::uint64_t ep = 0;
  EnvState s = env.reset(kMinAge, derive_seed(seed, 0x4EA1, ep));
  while (out.size() < samples) {
    const double a = rng.uniform();
    const EnvState prev = s;
    const StepResult r = env.step(s, a);
    out.push_back({Vec(prev.x.begin(), prev.x.end()), a, phase_context(prev.t),
                   Vec(r.x_next.begin(), r.x_next.end())});
    if (r.done) s = env.reset(kMinAge, derive_seed(seed, 0x4EA1, ++ep));
  }
  return out;
}

struct PredictiveDefaults {
  std::size_t fit_samples = 2000;
  double kappa = 10.0;
  double lambda_env = 0.5;
  double lambda_pred = 0.5;
  double offset_quantile = 0.95;
};

/// Fits the safe-state model on healthy rollouts and calibrates delta0 on a
/// disjoint healthy sample.
inline std::shared_ptr<const PredictiveComponent> build_predictive(
    std::uint64_t seed, const PredictiveDefaults& d = {}) {
  auto comp = std::make_shared<PredictiveComponent>();
  const auto fit = healthy_rollouts(d.fit_samples, derive_seed(seed, 0xF17));
  comp->model = fit_safe_model(fit);
  comp->params.w_delta.assign(kTwinFeatures, 1.0);
  comp->params.kappa = d.kappa;
  comp->params.lambda_env = d.lambda_env;
  comp->params.lambda_pred = d.lambda_pred;
  const auto cal = healthy_rollouts(d.fit_samples, derive_seed(seed, 0xCA1));
  calibrate_offset(comp->model, cal, comp->params, d.offset_quantile);
  comp->params.validate();
  return comp;
}

struct TrainSpec {
  ScenarioConfig scenario = ScenarioConfig::preset("normal");
  double age = 60.0;
  int episode_len = 200;
  PPOConfig ppo;
  RewardParams reward;
  AgentConfig agent;
  std::uint64_t seed = 0;
};

struct IterationStats {
  std::int64_t step = 0;
  double mean_reward = 0.0;
  double mean_cat = 0.0;
  double mean_delta_d = 0.0;
  double mean_action = 0.0;
  double clip_fraction = 0.0;
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
};

struct TrainResult {
  PolicyParams policy;
  std::vector<IterationStats> curve;
  MemoryStore memory;
};

namespace seed_tags {
inline constexpr std::uint64_t kInit = 0x1A17;
inline constexpr std::uint64_t kEnv = 0xE17;
inline constexpr std::uint64_t kAct = 0xAC7;
inline constexpr std::uint64_t kShuffle = 0x5F1;
inline constexpr std::uint64_t kEval = 0xE7A1;
}  // namespace seed_tags

/// RLTrain: PPO for spec.ppo.total_steps environment steps with the array
/// held fixed.
inline TrainResult rl_train(const AfferentArray& array,
                            std::shared_ptr<const PredictiveComponent> predictive,
                            const TrainSpec& spec) {
  spec.ppo.validate();
  spec.reward.validate();
  KneeTwin env(spec.scenario, spec.episode_len);
  SensingPipeline pipe(array, std::move(predictive), spec.agent, spec.scenario.name, spec.age);
  const ObservationLayout layout = spec.agent.layout();

  TrainResult result{PolicyParams::create(pipe.obs_dim(), spec.ppo.hidden,
                                          derive_seed(spec.seed, seed_tags::kInit), layout,
                                          spec.ppo.init_log_std),
                     {},
                     MemoryStore(spec.agent.memory)};
  if (spec.ppo.total_steps == 0) return result;

  PolicyParams& policy = result.policy;
  Adam opt(policy.num_params(), spec.ppo.lr);
  Rng act_rng(derive_seed(spec.seed, seed_tags::kAct));
  Rng shuffle_rng(derive_seed(spec.seed, seed_tags::kShuffle));

  std::uint64_t episode = 0;
  EnvState state = env.reset(spec.age, derive_seed(spec.seed, seed_tags::kEnv, episode));
  pipe.begin_episode(state);

  RolloutBuffer buf;
  buf.obs_dim = pipe.obs_dim();
  std::int64_t steps = 0;
  while (steps < spec.ppo.total_steps) {
    buf.clear();
    const std::size_t len = static_cast<std::size_t>(
        std::min<std::int64_t>(static_cast<std::int64_t>(spec.ppo.rollout_len),
                               spec.ppo.total_steps - steps));
    IterationStats it;
    for (std::size_t i = 0; i < len; ++i) {
      const Observation obs = pipe.current().obs;
      const ActionSample a = sample_action(policy, obs.values, act_rng);
      const double v = policy.value(obs.values);
      const EnvState prev = state;
      const StepResult r = env.step(state, a.action);
      const Sensed& s = pipe.advance(prev, a.action, r, state.t);
      const double reward = shaped_reward(r.task_reward, spec.agent.use_cat ? s.cat : 0.0,
                                          r.delta_d,
                                          spec.agent.memory_in_reward ? s.recall.y_hat : 0.0,
                                          spec.reward);
      buf.add(obs.values, a.z, a.logprob, v, reward, r.done);
      it.mean_reward += reward;
      it.mean_cat += s.cat;
      it.mean_delta_d += r.delta_d;
      it.mean_action += a.action;
      if (r.done) {
        pipe.end_episode();
        state = env.reset(spec.age, derive_seed(spec.seed, seed_tags::kEnv, ++episode));
        pipe.begin_episode(state);
      }
    }
    buf.last_value = policy.value(pipe.current().obs.values);
    steps += static_cast<std::int64_t>(len);

    const UpdateStats u = ppo_update(policy, buf, spec.ppo, opt, shuffle_rng);
    const double n = static_cast<double>(len);
    it.step = steps;
    it.mean_reward /= n;
    it.mean_cat /= n;
    it.mean_delta_d /= n;
    it.mean_action /= n;
    it.clip_fraction = u.clip_fraction;
    it.policy_loss = u.policy_loss;
    it.value_loss = u.value_loss;
    it.entropy = u.entropy;
    result.curve.push_back(it);
  }
  pipe.end_episode();
  result.memory = pipe.memory();
  return result;
}

struct EvalSpec {
  std::size_t episodes = 2;
  std::vector<std::uint64_t> seeds{1000, 1001};
  bool stochastic = true;
  bool keep_steps = false;
};

struct StepLog {
  std::int64_t episode = 0;
  std::int64_t t = 0;
  double action = 0.0;
  Features x{};
  double cat = 0.0;
  double y_hat = 0.0;
  double d_mean = 0.0;
  double delta_d = 0.0;
  double damage = 0.0;
  double task_reward = 0.0;
};

struct EvalResult {
  Vec episode_performance;  // mean per-step task reward, one per episode
  Vec episode_damage;       // terminal D, one per episode
  Vec actions;              // every action taken
  Vec cats;                 // every post-action CAT (empty without CAT)
  Vec recall;               // every y_hat (empty without memory)
  std::vector<StepLog> steps;

  double mean_performance() const {
    double s = 0.0;
    for (double v : episode_performance) s += v;
    return episode_performance.empty() ? 0.0 : s / static_cast<double>(episode_performance.size());
  }
  double mean_damage() const {
    double s = 0.0;
    for (double v : episode_damage) s += v;
    return episode_damage.empty() ? 0.0 : s / static_cast<double>(episode_damage.size());
  }
};

/// Rolls the policy out on episodes x seeds. The trained memory is carried
/// into evaluation and keeps capturing.
inline EvalResult evaluate_policy(const PolicyParams& policy, const AfferentArray& array,
                                  std::shared_ptr<const PredictiveComponent> predictive,
                                  const TrainSpec& spec, const MemoryStore* memory,
                                  const EvalSpec& eval) {
  KneeTwin env(spec.scenario, spec.episode_len);
  SensingPipeline pipe(array, std::move(predictive), spec.agent, spec.scenario.name, spec.age);
  if (memory && spec.agent.use_memory) pipe.set_memory(*memory);
  if (pipe.obs_dim() != policy.obs_dim()) {
    throw ConfigError("policy input size does not match the agent observation layout");
  }
  EvalResult out;
  std::int64_t ep_index = 0;
  for (std::uint64_t seed : eval.seeds) {
    for (std::size_t e = 0; e < eval.episodes; ++e, ++ep_index) {
      Rng rng(derive_seed(seed, seed_tags::kEval, e));
      EnvState state = env.reset(spec.age, derive_seed(seed, seed_tags::kEnv, e));
      pipe.begin_episode(state);
      double perf = 0.0;
      int steps = 0;
      while (true) {
        const Vec obs = pipe.current().obs.values;
        const double a = eval.stochastic ? sample_action(policy, obs, rng).action
                                         : deterministic_action(policy, obs);
        const EnvState prev = state;
        const StepResult r = env.step(state, a);
        const Sensed& s = pipe.advance(prev, a, r, state.t);
        perf += r.task_reward;
        ++steps;
        out.actions.push_back(a);
        if (spec.agent.use_cat) out.cats.push_back(s.cat);
        if (spec.agent.use_cat && spec.agent.use_memory) out.recall.push_back(s.recall.y_hat);
        if (eval.keep_steps) {
          out.steps.push_back({ep_index, prev.t, a, r.x_next, s.cat, s.recall.y_hat,
                               s.recall.d_mean, r.delta_d, state.damage, r.task_reward});
        }
        if (r.done) break;
      }
      pipe.end_episode();
      out.episode_performance.push_back(perf / static_cast<double>(steps));
      out.episode_damage.push_back(state.damage);
    }
  }
  return out;
}

}  // namespace afferent
