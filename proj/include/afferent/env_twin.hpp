#pragma once

// Synthetic knee digital twin. Stress, strain and shear are smooth functions
// of work intensity, gait phase, scenario multipliers and age; damage grows
// quadratically once the weighted load exceeds an age-dependent safe level.
// Damage is internal state and never part of what a policy observes.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <utility>

#include "afferent/common.hpp"

namespace afferent {

using Features = std::array<double, 3>;  // stress, strain, shear

inline constexpr std::size_t kTwinFeatures = 3;
inline constexpr int kGaitCycleSteps = 80;
inline constexpr double kMinAge = 20.0;
inline constexpr double kMaxAge = 90.0;

struct ScenarioConfig {
  std::string name = "normal";
  double stress_mult = 1.0;
  double strain_mult = 1.0;
  double shear_mult = 1.0;
  double instability = 0.05;
  double noise_sd = 0.02;

  static ScenarioConfig preset(const std::string& name) {
    if (name == "normal") return {"normal", 1.0, 1.0, 1.0, 0.05, 0.02};
    if (name == "acl_deficient") return {"acl_deficient", 1.15, 1.05, 1.5, 0.4, 0.02};
    if (name == "meniscus_overload") return {"meniscus_overload", 1.4, 1.2, 1.1, 0.15, 0.02};
    throw ConfigError("unknown scenario '" + name + "'");
  }

  void validate() const {
    if (!(stress_mult > 0.0 && strain_mult > 0.0 && shear_mult > 0.0)) {
      throw ConfigError("scenario multipliers must be positive");
    }
    if (instability < 0.0 || instability > 1.0) throw ConfigError("instability must be in [0,1]");
    if (noise_sd < 0.0) throw ConfigError("noise_sd must be non-negative");
  }
};

inline const std::array<std::string, 3>& scenario_names() {
  static const std::array<std::string, 3> names{"normal", "acl_deficient", "meniscus_overload"};
  return names;
}

struct EnvState {
  std::int64_t t = 0;
  Features x{0.0, 0.0, 0.0};
  double damage = 0.0;
  double age = kMinAge;
  double years_worked = 0.0;
  std::uint64_t rng_seed = 0;
};

struct StepResult {
  Features x_next{0.0, 0.0, 0.0};
  double delta_d = 0.0;
  double task_reward = 0.0;
  bool done = false;
};

inline double age_multiplier(double age) { return 1.0 + 0.01 * (age - kMinAge); }
inline double safe_load(double age) { return std::max(0.2, 0.6 - 0.004 * (age - kMinAge)); }
inline double optimal_intensity(double age) { return 0.8 - 0.003 * (age - kMinAge); }

inline double gait_phase(std::int64_t t) {
  return 2.0 * std::numbers::pi * static_cast<double>(t % kGaitCycleSteps) /
         static_cast<double>(kGaitCycleSteps);
}

/// Phase basis [sin, cos, |sin|] for step t; the context input of the
/// safe-state model.
inline Vec phase_context(std::int64_t t) {
  const double phi = gait_phase(t);
  return {std::sin(phi), std::cos(phi), std::abs(std::sin(phi))};
}

inline Features gen_features(const EnvState& state, double action, const ScenarioConfig& cfg) {
  const double phi = gait_phase(state.t);
  const double am = age_multiplier(state.age) * action;
  const auto t = static_cast<std::uint64_t>(state.t);
  const double n1 = cfg.noise_sd * counter_normal(state.rng_seed, t, 0);
  const double n2 = cfg.noise_sd * counter_normal(state.rng_seed, t, 1);
  const double n3 = cfg.noise_sd * counter_normal(state.rng_seed, t, 2);
  return {
      clamp01(cfg.stress_mult * am * (0.45 + 0.25 * std::sin(phi)) + n1),
      clamp01(cfg.strain_mult * am * (0.40 + 0.20 * std::sin(phi + std::numbers::pi / 3.0)) + n2),
      clamp01(cfg.shear_mult * am *
                  (0.30 + 0.20 * std::abs(std::sin(phi)) + 0.3 * cfg.instability) +
              n3),
  };
}

inline double weighted_load(const Features& x) { return 0.5 * x[0] + 0.3 * x[2] + 0.2 * x[1]; }

inline double damage_increment(const Features& x, double /*action*/, double age) {
  const double excess = std::max(0.0, weighted_load(x) - safe_load(age));
  return 0.01 * excess * excess;
}

inline double task_reward(double action, double age) {
  const double over = std::max(0.0, action - optimal_intensity(age));
  return action - 0.5 * over * over;
}

/// Scenario x age load multiplier reported in rollout logs (1.0 for a healthy
/// 20-year-old).
inline double load_factor(const ScenarioConfig& cfg, double age) {
  return cfg.stress_mult * age_multiplier(age);
}

class KneeTwin {
 public:
  explicit KneeTwin(ScenarioConfig cfg = ScenarioConfig::preset("normal"), int episode_len = 200)
      : cfg_(std::move(cfg)), episode_len_(episode_len) {
    cfg_.validate();
    if (episode_len_ <= 0) throw ConfigError("episode length must be positive");
  }

  const ScenarioConfig& scenario() const { return cfg_; }
  int episode_len() const { return episode_len_; }

  EnvState reset(double age, std::uint64_t seed) const {
    if (!(age >= kMinAge && age <= kMaxAge)) {
      throw ValidationError("age must lie in [20, 90], got " + std::to_string(age));
    }
    EnvState s;
    s.t = 0;
    s.damage = 0.0;
    s.age = age;
    s.years_worked = age - kMinAge;
    s.rng_seed = seed;
    s.x = gen_features(s, 0.0, cfg_);
    return s;
  }

  /// Generates features under `action`, accrues damage, advances time.
  StepResult step(EnvState& state, double action) const {
    if (!(action >= 0.0 && action <= 1.0)) throw ValidationError("action must be in [0,1]");
    StepResult r;
    r.x_next = gen_features(state, action, cfg_);
    r.delta_d = damage_increment(r.x_next, action, state.age);
    r.task_reward = task_reward(action, state.age);
    state.x = r.x_next;
    state.damage += r.delta_d;
    state.t += 1;
    r.done = state.t >= episode_len_;
    return r;
  }

 private:
  ScenarioConfig cfg_;
  int episode_len_ = 200;
};

}  // namespace afferent
