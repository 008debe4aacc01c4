#pragma once

// Experiment configuration as a plain-text key = value document. Every module
// default is a named key; unknown keys are rejected.

#include <charconv>
#include <cstdint>
#include <functional>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "afferent/evolve_cmaes.hpp"
#include "afferent/training.hpp"

namespace afferent {

struct SimulateConfig {
  std::vector<std::string> scenarios{"normal", "acl_deficient", "meniscus_overload"};
  std::size_t repeats = 5;
  int steps = 80;
  double action = 0.5;  // constant work intensity, no agent in the loop
  double age = 40.0;
};

struct ProbeConfig {
  std::size_t pairs = 100;
  double radius = 0.1;
  double pert_sd = 0.01;
  double quantile = 0.95;
};

struct ExperimentConfig {
  std::string scenario = "normal";
  std::vector<double> ages{20.0, 40.0, 60.0, 80.0};
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  Variant ablation = Variant::full;
  std::vector<Variant> variants{Variant::full, Variant::no_cat, Variant::no_evolution,
                                Variant::no_amm, Variant::no_predictive};
  std::string out = "out";
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  std::string genome_path;  // empty: evolve one (baseline for no_evolution)
  std::string policy_path;  // evaluate: checkpoint to load instead of training

  std::size_t m = 64;
  std::size_t k = 3;
  double dt = 1.0;
  int episode_len = 200;
  double noise_sd = 0.02;

  PPOConfig ppo;
  RewardParams reward;
  AgentConfig agent;
  PredictiveDefaults predictive;
  EvolutionSpec evolution;
  FitnessSpec fitness;
  std::vector<double> evolution_ages{60.0};
  EvalSpec eval;
  SimulateConfig simulate;
  ProbeConfig probe;

  ScenarioConfig scenario_config(const std::string& name) const {
    ScenarioConfig s = ScenarioConfig::preset(name);
    s.noise_sd = noise_sd;
    return s;
  }

  void validate() const {
    (void)ScenarioConfig::preset(scenario);
    for (const auto& s : simulate.scenarios) (void)ScenarioConfig::preset(s);
    if (ages.empty()) throw ConfigError("ages must not be empty");
    for (double a : ages) {
      if (a < kMinAge || a > kMaxAge) throw ConfigError("ages must lie in [20, 90]");
    }
    for (double a : evolution_ages) {
      if (a < kMinAge || a > kMaxAge) throw ConfigError("evolution.ages must lie in [20, 90]");
    }
    if (simulate.age < kMinAge || simulate.age > kMaxAge) throw ConfigError("simulate.age must lie in [20, 90]");
    if (seeds.empty()) throw ConfigError("seeds must not be empty");
    if (variants.empty()) throw ConfigError("variants must not be empty");
    if (m == 0) throw ConfigError("afferent.m must be positive");
    if (k != kTwinFeatures) throw ConfigError("afferent.k must equal the twin's 3 features");
    if (!(dt > 0.0)) throw ConfigError("afferent.dt must be positive");
    if (episode_len <= 0) throw ConfigError("env.episode_len must be positive");
    if (noise_sd < 0.0) throw ConfigError("env.noise_sd must be non-negative");
    if (workers == 0) throw ConfigError("workers must be positive");
    if (evolution.generations == 0 || evolution.popsize < 2) {
      throw ConfigError("evolution needs at least one generation and two candidates");
    }
    if (!(evolution.sigma0 > 0.0)) throw ConfigError("evolution.sigma0 must be positive");
    if (simulate.repeats == 0 || simulate.steps <= 0) throw ConfigError("simulate sizes must be positive");
    if (simulate.action < 0.0 || simulate.action > 1.0) throw ConfigError("simulate.action must be in [0,1]");
    if (probe.pairs == 0 || !(probe.radius > 0.0) || !(probe.pert_sd > 0.0)) {
      throw ConfigError("probe sizes must be positive");
    }
    if (eval.episodes == 0 || eval.seeds.empty()) throw ConfigError("eval needs episodes and seeds");
    if (predictive.lambda_env < 0.0 || predictive.lambda_pred < 0.0 ||
        !(predictive.lambda_env + predictive.lambda_pred > 0.0)) {
      throw ConfigError("predictive.lambda_env and lambda_pred must be non-negative with a positive sum");
    }
    if (!(predictive.offset_quantile > 0.0 && predictive.offset_quantile < 1.0)) {
      throw ConfigError("predictive.offset_quantile must be in (0,1)");
    }
    if (predictive.fit_samples < 16) throw ConfigError("predictive.fit_samples must be at least 16");
    ppo.validate();
    reward.validate();
    agent.memory.validate();
    fitness.validate();
  }
};

namespace cfgio {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream ss(s);
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <typename T>
T parse_number(const std::string& key, const std::string& s) {
  T v{};
  const auto* end = s.data() + s.size();
  const auto r = std::from_chars(s.data(), end, v);
  if (r.ec != std::errc{} || r.ptr != end) throw ConfigError("bad value for '" + key + "': '" + s + "'");
  return v;
}

template <typename T>
std::string format_number(T v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

template <typename T>
  requires(std::is_arithmetic_v<T> && !std::is_same_v<T, bool>)
void from_text(const std::string& key, const std::string& s, T& v) {
  v = parse_number<T>(key, s);
}
inline void from_text(const std::string& key, const std::string& s, bool& v) {
  if (s == "true" || s == "1") {
    v = true;
  } else if (s == "false" || s == "0") {
    v = false;
  } else {
    throw ConfigError("bad boolean for '" + key + "': '" + s + "'");
  }
}
inline void from_text(const std::string&, const std::string& s, std::string& v) { v = s; }
inline void from_text(const std::string&, const std::string& s, Variant& v) { v = parse_variant(s); }
template <typename T>
void from_text(const std::string& key, const std::string& s, std::vector<T>& v) {
  std::vector<T> out;
  for (const auto& item : split_list(s)) {
    T x{};
    from_text(key, item, x);
    out.push_back(x);
  }
  v = std::move(out);
}

template <typename T>
  requires(std::is_arithmetic_v<T> && !std::is_same_v<T, bool>)
std::string to_text(T v) {
  return format_number(v);
}
inline std::string to_text(bool v) { return v ? "true" : "false"; }
inline std::string to_text(const std::string& v) { return v; }
inline std::string to_text(Variant v) { return to_string(v); }
template <typename T>
std::string to_text(const std::vector<T>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + to_text(v[i]);
  return out;
}

struct Field {
  std::string key;
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
};

template <typename T>
Field field(std::string key, T& ref) {
  return {key, [key, &ref](const std::string& s) { from_text(key, s, ref); },
          [&ref] { return to_text(ref); }};
}

}  // namespace cfgio

/// Every configurable key, in document order.
inline std::vector<cfgio::Field> config_fields(ExperimentConfig& c) {
  using cfgio::field;
  return {
      field("scenario", c.scenario),
      field("ages", c.ages),
      field("seeds", c.seeds),
      field("seed", c.seed),
      field("ablation", c.ablation),
      field("variants", c.variants),
      field("workers", c.workers),
      field("genome", c.genome_path),
      field("policy", c.policy_path),

      field("afferent.m", c.m),
      field("afferent.k", c.k),
      field("afferent.dt", c.dt),

      field("env.episode_len", c.episode_len),
      field("env.noise_sd", c.noise_sd),

      field("ppo.total_steps", c.ppo.total_steps),
      field("ppo.clip", c.ppo.clip),
      field("ppo.gamma", c.ppo.gamma),
      field("ppo.gae_lambda", c.ppo.gae_lambda),
      field("ppo.lr", c.ppo.lr),
      field("ppo.rollout_len", c.ppo.rollout_len),
      field("ppo.epochs", c.ppo.epochs),
      field("ppo.minibatch", c.ppo.minibatch),
      field("ppo.value_coef", c.ppo.value_coef),
      field("ppo.entropy_coef", c.ppo.entropy_coef),
      field("ppo.max_grad_norm", c.ppo.max_grad_norm),
      field("ppo.hidden", c.ppo.hidden),
      field("ppo.init_log_std", c.ppo.init_log_std),

      field("reward.lambda_cat", c.reward.lambda_cat),
      field("reward.lambda_d", c.reward.lambda_d),
      field("reward.lambda_mem", c.reward.lambda_mem),

      field("agent.memory_in_obs", c.agent.memory_in_obs),
      field("agent.memory_in_reward", c.agent.memory_in_reward),
      field("agent.memory_bias", c.agent.memory_bias),
      field("agent.reduced_obs", c.agent.reduced_obs),

      field("memory.eps_d", c.agent.memory.eps_d),
      field("memory.kappa_cat", c.agent.memory.kappa_cat),
      field("memory.capacity", c.agent.memory.capacity),
      field("memory.k_ret", c.agent.memory.k_ret),
      field("memory.pre_window", c.agent.memory.pre_window),
      field("memory.post_window", c.agent.memory.post_window),
      field("memory.horizon", c.agent.memory.horizon),
      field("memory.epsilon", c.agent.memory.epsilon),

      field("predictive.fit_samples", c.predictive.fit_samples),
      field("predictive.kappa", c.predictive.kappa),
      field("predictive.lambda_env", c.predictive.lambda_env),
      field("predictive.lambda_pred", c.predictive.lambda_pred),
      field("predictive.offset_quantile", c.predictive.offset_quantile),

      field("evolution.generations", c.evolution.generations),
      field("evolution.popsize", c.evolution.popsize),
      field("evolution.sigma0", c.evolution.sigma0),
      field("evolution.seed", c.evolution.seed),
      field("evolution.ages", c.evolution_ages),
      field("evolution.gamma_d", c.fitness.gamma_d),
      field("evolution.eval_episodes", c.fitness.eval_episodes),
      field("evolution.eval_seeds", c.fitness.eval_seeds),
      field("evolution.rl_steps_short", c.fitness.rl_steps_short),
      field("evolution.rl_steps_long", c.fitness.rl_steps_long),
      field("evolution.top_fraction", c.fitness.top_fraction),
      field("evolution.rl_seeds_short", c.fitness.rl_seeds_short),
      field("evolution.rl_seeds_long", c.fitness.rl_seeds_long),

      field("eval.episodes", c.eval.episodes),
      field("eval.seeds", c.eval.seeds),
      field("eval.stochastic", c.eval.stochastic),

      field("simulate.scenarios", c.simulate.scenarios),
      field("simulate.repeats", c.simulate.repeats),
      field("simulate.steps", c.simulate.steps),
      field("simulate.action", c.simulate.action),
      field("simulate.age", c.simulate.age),

      field("probe.pairs", c.probe.pairs),
      field("probe.radius", c.probe.radius),
      field("probe.pert_sd", c.probe.pert_sd),
      field("probe.quantile", c.probe.quantile),
  };
}

/// Applies `key = value` lines on top of `base`. '#' starts a comment.
inline ExperimentConfig parse_config(const std::string& text, ExperimentConfig base = {}) {
  auto fields = config_fields(base);
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = cfgio::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = cfgio::trim(std::string_view(line).substr(0, eq));
    const std::string value = cfgio::trim(std::string_view(line).substr(eq + 1));
    auto it = std::find_if(fields.begin(), fields.end(), [&](const cfgio::Field& f) { return f.key == key; });
    if (it == fields.end()) throw ConfigError("line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    it->set(value);
  }
  return base;
}

inline void set_config_value(ExperimentConfig& c, const std::string& key, const std::string& value) {
  auto fields = config_fields(c);
  auto it = std::find_if(fields.begin(), fields.end(), [&](const cfgio::Field& f) { return f.key == key; });
  if (it == fields.end()) throw ConfigError("unknown key '" + key + "'");
  it->set(value);
}

/// Full document with every key; parse_config(render_config(c)) == c.
inline std::string render_config(const ExperimentConfig& c) {
  ExperimentConfig copy = c;
  std::string out;
  for (const auto& f : config_fields(copy)) out += f.key + " = " + f.get() + "\n";
  return out;
}

}  // namespace afferent
