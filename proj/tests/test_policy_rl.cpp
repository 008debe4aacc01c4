#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>

#include "afferent/afferent_core.hpp"
#include "afferent/policy_rl.hpp"
#include "afferent/training.hpp"
#include "support.hpp"

using namespace afferent;
using Catch::Approx;

namespace {

PolicyParams zero_mean_policy(double log_std) {
  PolicyParams p = PolicyParams::create(2, {8}, 3, ObservationLayout::reduced, log_std);
  Vec flat = p.flatten();
  std::fill(flat.begin(), flat.begin() + static_cast<std::ptrdiff_t>(p.actor.num_params()), 0.0);
  p.unflatten(flat);
  return p;
}

PpoBatch random_batch(const PolicyParams& policy, Eigen::Index b, Rng& rng, bool zero_adv) {
  PpoBatch batch;
  const auto d = static_cast<Eigen::Index>(policy.obs_dim());
  batch.obs = Eigen::MatrixXd(d, b);
  batch.z = Eigen::VectorXd(b);
  batch.old_logprob = Eigen::VectorXd(b);
  batch.advantages = Eigen::VectorXd(b);
  batch.returns = Eigen::VectorXd(b);
  for (Eigen::Index i = 0; i < b; ++i) {
    Vec o(static_cast<std::size_t>(d));
    for (Eigen::Index r = 0; r < d; ++r) batch.obs(r, i) = o[static_cast<std::size_t>(r)] = rng.uniform(-1.0, 1.0);
    const double mu = policy.mean(o);
    batch.z[i] = mu + std::exp(policy.log_std) * rng.normal();
    batch.old_logprob[i] = action_logprob(batch.z[i], mu, policy.log_std) - rng.uniform(-0.1, 0.1);
    batch.advantages[i] = zero_adv ? 0.0 : rng.normal();
    batch.returns[i] = rng.normal();
  }
  return batch;
}

// O(T^2) reference: A_t = sum_l (gamma lam)^l delta_{t+l}, cut at episode ends.
Vec brute_gae(const Vec& r, const Vec& v, const std::vector<std::uint8_t>& done, double last,
              double gamma, double lam) {
  const std::size_t n = r.size();
  Vec out(n, 0.0);
  for (std::size_t t = 0; t < n; ++t) {
    double w = 1.0;
    for (std::size_t j = t; j < n; ++j) {
      const double next = j + 1 < n ? v[j + 1] : last;
      const double nonterminal = done[j] ? 0.0 : 1.0;
      out[t] += w * (r[j] + gamma * next * nonterminal - v[j]);
      if (done[j]) break;
      w *= gamma * lam;
    }
  }
  return out;
}

}  // namespace

TEST_CASE("observation layouts") {
  const Vec x{0.1, 0.2, 0.3};
  const Vec act{0.4, 0.5};
  const auto base = build_observation(x, act, 0.6, 0.0, 0.0, 60.0, ObservationLayout::base, 3, 2);
  CHECK(base.values == Vec{0.1, 0.2, 0.3, 0.4, 0.5, 0.6});
  const auto epi = build_observation(x, act, 0.6, 0.7, 0.8, 60.0, ObservationLayout::epi, 3, 2);
  CHECK(epi.values.size() == 8);
  CHECK(epi.values[6] == 0.7);
  CHECK(epi.values[7] == 0.8);
  const auto empty = build_observation(x, act, 0.6, 0.0, 0.0, 60.0, ObservationLayout::epi, 3, 2);
  CHECK(empty.values[6] == 0.0);
  CHECK(empty.values[7] == 0.0);
  const auto red = build_observation(x, act, 0.6, 0.0, 0.0, 55.0, ObservationLayout::reduced, 3, 2);
  CHECK(red.values == Vec{0.6, 0.5});
  CHECK(build_observation(x, act, 0.6, 0.0, 0.0, 55.0, ObservationLayout::features, 3, 2).values == x);
  CHECK(observation_size(ObservationLayout::epi, 3, 64) == 70);
  CHECK_THROWS_AS(build_observation(Vec{0.1}, act, 0.6, 0.0, 0.0, 60.0, ObservationLayout::base, 3, 2),
                  ValidationError);
  CHECK_THROWS_AS(parse_layout("wide"), ConfigError);
}

TEST_CASE("shaped reward") {
  RewardParams zero{0.0, 0.0, 0.0};
  CHECK(shaped_reward(0.37, 0.9, 0.2, 0.5, zero) == 0.37);
  RewardParams p{0.5, 0.0, 0.0};
  CHECK(shaped_reward(1.0, 0.4, 0.0, 0.0, p) == Approx(0.8).margin(1e-15));

  SECTION("no_cat ablation leaves only damage shaping") {
    AgentConfig agent;
    RewardParams r;
    apply_variant(Variant::no_cat, agent, r);
    CHECK(shaped_reward(1.0, 0.9, 0.01, 0.7, r) == Approx(1.0 - r.lambda_d * 0.01).margin(1e-15));
    CHECK(agent.layout() == ObservationLayout::features);
  }
  SECTION("monotone non-increasing in every penalty input") {
    const RewardParams d;
    Rng rng(6);
    for (int i = 0; i < 500; ++i) {
      const double task = rng.uniform(), cat = rng.uniform(), dd = rng.uniform(0.0, 0.01), y = rng.uniform();
      const double base = shaped_reward(task, cat, dd, y, d);
      CHECK(shaped_reward(task, cat + 0.01, dd, y, d) <= base);
      CHECK(shaped_reward(task, cat, dd + 0.001, y, d) <= base);
      CHECK(shaped_reward(task, cat, dd, y + 0.01, d) <= base);
    }
  }
  CHECK_THROWS_AS((RewardParams{-1.0, 0.0, 0.0}).validate(), ConfigError);
}

TEST_CASE("action sampling") {
  const Vec obs{0.3, -0.2};
  SECTION("minimum log-std is nearly deterministic at 0.5") {
    const PolicyParams p = zero_mean_policy(kLogStdMin);
    Rng rng(1);
    Vec a;
    for (int i = 0; i < 5000; ++i) a.push_back(sample_action(p, obs, rng).action);
    double mean = 0.0, var = 0.0;
    for (double v : a) mean += v;
    mean /= static_cast<double>(a.size());
    for (double v : a) var += (v - mean) * (v - mean);
    CHECK(mean == Approx(0.5).margin(1e-3));
    CHECK(std::sqrt(var / static_cast<double>(a.size())) < 0.004);
  }
  SECTION("log-std outside the clamp range is clamped when sampling") {
    PolicyParams p = zero_mean_policy(0.0);
    p.log_std = -40.0;
    Rng rng(2);
    const ActionSample s = sample_action(p, obs, rng);
    CHECK(std::isfinite(s.logprob));
    CHECK(s.action == Approx(0.5).margin(0.03));
  }
  SECTION("same seed gives the same action") {
    const PolicyParams p = PolicyParams::create(2, {8}, 4, ObservationLayout::reduced, -0.5);
    Rng a(9), b(9);
    for (int i = 0; i < 20; ++i) CHECK(sample_action(p, obs, a).action == sample_action(p, obs, b).action);
  }
  SECTION("log density integrates to the empirical distribution") {
    PolicyParams p = PolicyParams::create(2, {8}, 5, ObservationLayout::reduced, -0.4);
    const double mu = p.mean(obs);
    Rng rng(10);
    Vec a;
    const std::size_t n = 100000;
    for (std::size_t i = 0; i < n; ++i) a.push_back(sample_action(p, obs, rng).action);
    std::sort(a.begin(), a.end());
    // CDF by trapezoid integration of exp(logprob) over a fine action grid.
    const int grid = 20000;
    Vec cdf(grid + 1, 0.0);
    auto density = [&](double u) {
      const double z = std::atanh(2.0 * u - 1.0);
      return std::exp(action_logprob(z, mu, p.log_std));
    };
    const double h = 1.0 / grid;
    double prev = 0.0;
    for (int i = 1; i <= grid; ++i) {
      const double u = std::min(i * h, 1.0 - 1e-12);
      const double cur = density(u);
      cdf[i] = cdf[i - 1] + 0.5 * (prev + cur) * h;
      prev = cur;
    }
    CHECK(cdf[grid] == Approx(1.0).margin(1e-3));
    double ks = 0.0;
    for (std::size_t i = 0; i < n; i += 50) {
      const auto cell = std::min(static_cast<int>(a[i] * grid), grid);
      ks = std::max(ks, std::abs(cdf[cell] - static_cast<double>(i) / static_cast<double>(n)));
    }
    CHECK(ks < 0.02);
  }
}

TEST_CASE("generalized advantage estimation") {
  SECTION("lam = 0 gives the TD residual") {
    const Vec r{1.0, 0.5, -0.2};
    const Vec v{0.3, 0.1, 0.4};
    const std::vector<std::uint8_t> d{0, 0, 0};
    const auto g = gae(r, v, d, 0.25, 0.9, 0.0);
    CHECK(g.advantages[0] == Approx(1.0 + 0.9 * 0.1 - 0.3).margin(1e-15));
    CHECK(g.advantages[1] == Approx(0.5 + 0.9 * 0.4 - 0.1).margin(1e-15));
    CHECK(g.advantages[2] == Approx(-0.2 + 0.9 * 0.25 - 0.4).margin(1e-15));
    CHECK(g.returns[1] == Approx(g.advantages[1] + 0.1).margin(1e-15));
  }
  SECTION("lam = 1, gamma = 1, zero values gives reward suffix sums") {
    const Vec r{1.0, 2.0, 3.0, 4.0};
    const Vec v(4, 0.0);
    const std::vector<std::uint8_t> d{0, 0, 0, 1};
    const auto g = gae(r, v, d, 99.0, 1.0, 1.0);
    CHECK(g.advantages == Vec{10.0, 9.0, 7.0, 4.0});
  }
  SECTION("matches the double-loop oracle on random rollouts") {
    Rng rng(12);
    for (int trial = 0; trial < 50; ++trial) {
      Vec r, v;
      std::vector<std::uint8_t> d;
      for (int t = 0; t < 20; ++t) {
        r.push_back(rng.normal());
        v.push_back(rng.normal());
        d.push_back(rng.uniform() < 0.15 ? 1 : 0);
      }
      const double last = rng.normal();
      const auto g = gae(r, v, d, last, 0.97, 0.9);
      const Vec ref = brute_gae(r, v, d, last, 0.97, 0.9);
      for (std::size_t t = 0; t < 20; ++t) CHECK(g.advantages[t] == Approx(ref[t]).margin(1e-10));
    }
  }
  SECTION("normalization") {
    const Vec n = normalize_advantages(Vec{1.0, 2.0, 3.0, 6.0});
    double m = 0.0, s = 0.0;
    for (double x : n) m += x;
    for (double x : n) s += x * x;
    CHECK(m == Approx(0.0).margin(1e-12));
    CHECK(s / 4.0 == Approx(1.0).margin(1e-12));
    CHECK(normalize_advantages(Vec{2.0, 2.0}) == Vec{0.0, 0.0});
  }
  CHECK_THROWS_AS(gae(Vec{1.0}, Vec{}, std::vector<std::uint8_t>{0}, 0.0, 0.9, 0.9), ValidationError);
}

TEST_CASE("PPO loss") {
  PPOConfig cfg;
  Rng rng(21);
  SECTION("zero advantages: actor gradient vanishes, log-std sees only entropy") {
    const PolicyParams p = PolicyParams::create(2, {6}, 8, ObservationLayout::reduced, -0.2);
    const PpoBatch batch = random_batch(p, 32, rng, true);
    Vec grad;
    const LossTerms lt = ppo_loss(p, batch, cfg, &grad);
    CHECK(lt.policy == 0.0);
    for (std::size_t i = 0; i < p.actor.num_params(); ++i) CHECK(grad[i] == 0.0);
    CHECK(grad[p.actor.num_params()] == Approx(-cfg.entropy_coef).margin(1e-15));
    double critic = 0.0;
    for (std::size_t i = p.actor.num_params() + 1; i < grad.size(); ++i) critic += std::abs(grad[i]);
    CHECK(critic > 0.0);
  }
  SECTION("gradient matches central differences on a linear toy policy") {
    PolicyParams p = PolicyParams::create(1, {}, 2, ObservationLayout::reduced, -0.3);
    Vec flat = p.flatten();
    REQUIRE(flat.size() == 5);
    flat = {0.4, -0.2, -0.3, 0.7, 0.1};
    p.unflatten(flat);
    const PpoBatch batch = random_batch(p, 24, rng, false);
    Vec grad;
    ppo_loss(p, batch, cfg, &grad);
    for (std::size_t j = 0; j < flat.size(); ++j) {
      PolicyParams q = p;
      Vec f = flat;
      f[j] += 1e-6;
      q.unflatten(f);
      const double up = ppo_loss(q, batch, cfg, nullptr).total;
      f[j] -= 2e-6;
      q.unflatten(f);
      const double dn = ppo_loss(q, batch, cfg, nullptr).total;
      const double fd = (up - dn) / 2e-6;
      CHECK(std::abs(fd - grad[j]) / std::max({std::abs(fd), std::abs(grad[j]), 1e-6}) < 1e-4);
    }
  }
}

TEST_CASE("first minibatch has unit probability ratio") {
  PPOConfig cfg;
  cfg.minibatch = 32;
  cfg.epochs = 2;
  PolicyParams p = PolicyParams::create(1, {8}, 4, ObservationLayout::reduced, 0.0);
  Adam opt(p.num_params(), cfg.lr);
  Rng rng(3), sh(4);
  RolloutBuffer buf;
  buf.obs_dim = 1;
  const Vec obs{1.0};
  for (int i = 0; i < 128; ++i) {
    const ActionSample a = sample_action(p, obs, rng);
    buf.add(obs, a.z, a.logprob, p.value(obs), -std::abs(a.action - 0.3), true);
  }
  const UpdateStats s = ppo_update(p, buf, cfg, opt, sh);
  CHECK(s.minibatches == 8);
  CHECK(s.first_clipped_surrogate == Approx(s.first_unclipped_surrogate).margin(1e-6));
  CHECK(p.log_std >= kLogStdMin);
  CHECK(p.log_std <= kLogStdMax);
}

TEST_CASE("non-finite loss restores parameters and throws") {
  PPOConfig cfg;
  PolicyParams p = PolicyParams::create(1, {4}, 4, ObservationLayout::reduced, 0.0);
  const Vec before = p.flatten();
  Adam opt(p.num_params(), cfg.lr);
  Rng sh(1);
  RolloutBuffer buf;
  buf.obs_dim = 1;
  for (int i = 0; i < 64; ++i) buf.add(Vec{1.0}, 0.1, 0.0, 0.0, std::nan(""), true);
  CHECK_THROWS_AS(ppo_update(p, buf, cfg, opt, sh), RuntimeFailure);
  CHECK(p.flatten() == before);
}

TEST_CASE("bandit converges to the optimum", "[slow]") {
  for (std::uint64_t seed = 0; seed < 2; ++seed) {
    CHECK(testing::train_bandit(0.5, seed) == Approx(0.5).margin(0.1));
  }
}

TEST_CASE("training loop") {
  const AfferentArray array = decode_genome(baseline_genome(8, 3));
  PredictiveDefaults pd;
  pd.fit_samples = 400;
  const auto pred = build_predictive(3, pd);

  SECTION("zero steps returns the initial policy") {
    TrainSpec spec;
    spec.ppo.total_steps = 0;
    spec.seed = 7;
    const TrainResult r = rl_train(array, pred, spec);
    const PolicyParams init = PolicyParams::create(r.policy.obs_dim(), spec.ppo.hidden,
                                                   derive_seed(7, seed_tags::kInit),
                                                   spec.agent.layout(), spec.ppo.init_log_std);
    CHECK(r.policy.flatten() == init.flatten());
    CHECK(r.curve.empty());
    CHECK(r.memory.size() == 0);
  }
  SECTION("training is reproducible") {
    TrainSpec spec;
    spec.ppo.total_steps = 2048;
    spec.seed = 3;
    const TrainResult a = rl_train(array, pred, spec);
    const TrainResult b = rl_train(array, pred, spec);
    CHECK(a.policy.flatten() == b.policy.flatten());
    CHECK(a.curve.size() == 2);
  }
  SECTION("a heavy damage penalty lowers realized damage", "[slow]") {
    EvalSpec eval;
    int lower = 0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      TrainSpec spec;
      spec.age = 70.0;
      spec.reward.lambda_d = 5000.0;
      spec.ppo.total_steps = 20000;
      spec.seed = seed;
      TrainSpec init_spec = spec;
      init_spec.ppo.total_steps = 0;
      const TrainResult before = rl_train(array, pred, init_spec);
      const TrainResult after = rl_train(array, pred, spec);
      const double d0 = evaluate_policy(before.policy, array, pred, spec, nullptr, eval).mean_damage();
      const double d1 = evaluate_policy(after.policy, array, pred, spec, &after.memory, eval).mean_damage();
      lower += d1 < d0 ? 1 : 0;
    }
    CHECK(lower == 5);
  }
}
