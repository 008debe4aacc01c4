#pragma once

// Shared fixtures for the unit and acceptance suites.

#include <cmath>
#include <cstdint>
#include <vector>

#include "afferent/policy_rl.hpp"

namespace afferent::testing {

/// One-step continuous bandit: constant observation, reward -|a - optimum|,
/// every step terminal. Returns the mean sampled action of the trained policy
/// over `eval_steps` draws.
inline double train_bandit(double optimum, std::uint64_t seed, std::int64_t steps = 20000,
                           std::size_t eval_steps = 2000) {
  PPOConfig cfg;
  PolicyParams policy = PolicyParams::create(1, cfg.hidden, seed, ObservationLayout::reduced, cfg.init_log_std);
  Adam opt(policy.num_params(), cfg.lr);
  Rng act_rng(derive_seed(seed, 0xBA, 1));
  Rng shuffle_rng(derive_seed(seed, 0xBA, 2));
  const std::vector<double> obs{1.0};
  RolloutBuffer buf;
  buf.obs_dim = 1;
  for (std::int64_t done = 0; done < steps;) {
    buf.clear();
    const auto len = static_cast<std::size_t>(std::min<std::int64_t>(cfg.rollout_len, steps - done));
    for (std::size_t i = 0; i < len; ++i) {
      const ActionSample a = sample_action(policy, obs, act_rng);
      const double r = -std::abs(a.action - optimum);
      buf.add(obs, a.z, a.logprob, policy.value(obs), r, true);
    }
    done += static_cast<std::int64_t>(len);
    ppo_update(policy, buf, cfg, opt, shuffle_rng);
  }
  Rng eval_rng(derive_seed(seed, 0xBA, 3));
  double sum = 0.0;
  for (std::size_t i = 0; i < eval_steps; ++i) sum += sample_action(policy, obs, eval_rng).action;
  return sum / static_cast<double>(eval_steps);
}

}  // namespace afferent::testing
