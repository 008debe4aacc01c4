#pragma once

// Observation construction, reward shaping and a small PPO learner:
// tanh-MLP actor-critic, tanh-squashed Gaussian over a 1-D action in [0,1],
// GAE, clipped surrogate, Adam with global-norm gradient clipping.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "afferent/common.hpp"

namespace afferent {

// ---------------------------------------------------------------------------
// Observations

enum class ObservationLayout {
  base,      // [x(K), activations(M), cat]
  epi,       // [x(K), activations(M), cat, y_hat, d_mean]
  reduced,   // [cat, age_norm]
  features,  // [x(K)]; no afferent signal at all (no_cat ablation)
};

inline std::string to_string(ObservationLayout l) {
  switch (l) {
    case ObservationLayout::base: return "base";
    case ObservationLayout::epi: return "epi";
    case ObservationLayout::reduced: return "reduced";
    case ObservationLayout::features: return "features";
  }
  return "base";
}

inline ObservationLayout parse_layout(const std::string& s) {
  if (s == "base") return ObservationLayout::base;
  if (s == "epi") return ObservationLayout::epi;
  if (s == "reduced") return ObservationLayout::reduced;
  if (s == "features") return ObservationLayout::features;
  throw ConfigError("unknown observation layout '" + s + "'");
}

inline std::size_t observation_size(ObservationLayout l, std::size_t k, std::size_t m) {
  switch (l) {
    case ObservationLayout::base: return k + m + 1;
    case ObservationLayout::epi: return k + m + 3;
    case ObservationLayout::reduced: return 2;
    case ObservationLayout::features: return k;
  }
  return 0;
}

struct Observation {
  Vec values;
  ObservationLayout layout = ObservationLayout::base;
};

/// Concatenates policy inputs in the documented order. Damage is not a
/// parameter, so it cannot leak into an observation.
inline Observation build_observation(std::span<const double> x, std::span<const double> activations,
                                     double cat, double y_hat, double d_mean, double age,
                                     ObservationLayout layout, std::size_t k, std::size_t m) {
  if (x.size() != k || activations.size() != m) {
    throw ValidationError("observation inputs do not match configured (K, M)");
  }
  Observation o;
  o.layout = layout;
  auto& v = o.values;
  v.reserve(observation_size(layout, k, m));
  switch (layout) {
    case ObservationLayout::reduced:
      v = {cat, (age - 20.0) / 70.0};
      break;
    case ObservationLayout::features:
      v.assign(x.begin(), x.end());
      break;
    case ObservationLayout::base:
    case ObservationLayout::epi:
      v.assign(x.begin(), x.end());
      v.insert(v.end(), activations.begin(), activations.end());
      v.push_back(cat);
      if (layout == ObservationLayout::epi) {
        v.push_back(y_hat);
        v.push_back(d_mean);
      }
      break;
  }
  return o;
}

// ---------------------------------------------------------------------------
// Reward

struct RewardParams {
  double lambda_cat = 0.5;
  double lambda_d = 5.0;
  double lambda_mem = 0.2;

  void validate() const {
    if (lambda_cat < 0.0 || lambda_d < 0.0 || lambda_mem < 0.0) {
      throw ConfigError("reward penalty weights must be non-negative");
    }
  }
};

inline double shaped_reward(double task, double cat, double delta_d, double y_hat,
                            const RewardParams& p) {
  return task - p.lambda_cat * cat - p.lambda_d * delta_d - p.lambda_mem * y_hat;
}

// ---------------------------------------------------------------------------
// MLP with tanh hidden layers and a linear output, batched column-wise.

class Mlp {
 public:
  struct Cache {
    std::vector<Eigen::MatrixXd> acts;  // acts[0] = input, acts[l+1] = layer l output
  };

  Mlp() = default;

  /// Layer l weights are drawn from a counter-based stream keyed by
  /// (seed, l, column), so networks that differ only in trailing input
  /// columns share every other initial weight.
  Mlp(std::vector<int> sizes, std::uint64_t seed, double out_scale)
      : sizes_(std::move(sizes)) {
    if (sizes_.size() < 2) throw ConfigError("MLP needs input and output sizes");
    for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
      const int in = sizes_[l];
      const int out = sizes_[l + 1];
      const bool last = l + 2 == sizes_.size();
      const double scale = (last ? out_scale : 1.0) / std::sqrt(static_cast<double>(in));
      Eigen::MatrixXd w(out, in);
      const std::uint64_t layer_seed = derive_seed(seed, 0x4D4C50 + l);
      for (int c = 0; c < in; ++c) {
        for (int r = 0; r < out; ++r) {
          w(r, c) = scale * counter_normal(layer_seed, static_cast<std::uint64_t>(c),
                                           static_cast<std::uint64_t>(r));
        }
      }
      weights_.push_back(std::move(w));
      biases_.push_back(Eigen::VectorXd::Zero(out));
    }
  }

  int input_size() const { return sizes_.front(); }
  int output_size() const { return sizes_.back(); }
  const std::vector<int>& sizes() const { return sizes_; }
  std::size_t layers() const { return weights_.size(); }
  const Eigen::MatrixXd& weight(std::size_t l) const { return weights_[l]; }
  const Eigen::VectorXd& bias(std::size_t l) const { return biases_[l]; }

  std::size_t num_params() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      n += static_cast<std::size_t>(weights_[l].size() + biases_[l].size());
    }
    return n;
  }

  /// in: input_size x B. Returns output_size x B.
  Eigen::MatrixXd forward(const Eigen::MatrixXd& in, Cache* cache = nullptr) const {
    Eigen::MatrixXd h = in;
    if (cache) {
      cache->acts.clear();
      cache->acts.push_back(in);
    }
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      Eigen::MatrixXd z = (weights_[l] * h).colwise() + biases_[l];
      if (l + 1 < weights_.size()) z = z.array().tanh().matrix();
      h = std::move(z);
      if (cache) cache->acts.push_back(h);
    }
    return h;
  }

  /// Accumulates d(loss)/d(params) into grad (same layout as write_params)
  /// given d(loss)/d(output).
  void backward(const Cache& cache, const Eigen::MatrixXd& dout, double* grad) const {
    Eigen::MatrixXd delta = dout;
    std::vector<std::size_t> offsets(weights_.size());
    std::size_t off = 0;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      offsets[l] = off;
      off += static_cast<std::size_t>(weights_[l].size() + biases_[l].size());
    }
    for (std::size_t li = weights_.size(); li-- > 0;) {
      if (li + 1 < weights_.size()) {
        const Eigen::MatrixXd& a = cache.acts[li + 1];
        delta = (delta.array() * (1.0 - a.array().square())).matrix();
      }
      const Eigen::MatrixXd gw = delta * cache.acts[li].transpose();
      const Eigen::VectorXd gb = delta.rowwise().sum();
      Eigen::Map<Eigen::MatrixXd> mw(grad + offsets[li], weights_[li].rows(), weights_[li].cols());
      mw += gw;
      Eigen::Map<Eigen::VectorXd> mb(grad + offsets[li] + weights_[li].size(), biases_[li].size());
      mb += gb;
      if (li > 0) delta = weights_[li].transpose() * delta;
    }
  }

  void write_params(double* out) const {
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      std::copy(weights_[l].data(), weights_[l].data() + weights_[l].size(), out);
      out += weights_[l].size();
      std::copy(biases_[l].data(), biases_[l].data() + biases_[l].size(), out);
      out += biases_[l].size();
    }
  }

  void read_params(const double* in) {
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      std::copy(in, in + weights_[l].size(), weights_[l].data());
      in += weights_[l].size();
      std::copy(in, in + biases_[l].size(), biases_[l].data());
      in += biases_[l].size();
    }
  }

 private:
  std::vector<int> sizes_;
  std::vector<Eigen::MatrixXd> weights_;
  std::vector<Eigen::VectorXd> biases_;
};

// ---------------------------------------------------------------------------
// Policy

inline constexpr double kLogStdMin = -5.0;
inline constexpr double kLogStdMax = 1.0;

struct PolicyParams {
  Mlp actor;   // obs -> pre-squash mean
  Mlp critic;  // obs -> value
  double log_std = 0.0;
  ObservationLayout layout = ObservationLayout::epi;

  static PolicyParams create(std::size_t obs_dim, std::vector<int> hidden, std::uint64_t seed,
                             ObservationLayout layout, double init_log_std = 0.0) {
    std::vector<int> sizes{static_cast<int>(obs_dim)};
    sizes.insert(sizes.end(), hidden.begin(), hidden.end());
    sizes.push_back(1);
    PolicyParams p;
    p.actor = Mlp(sizes, derive_seed(seed, 0xAC7), 0.01);
    p.critic = Mlp(sizes, derive_seed(seed, 0xC817), 1.0);
    p.log_std = std::clamp(init_log_std, kLogStdMin, kLogStdMax);
    p.layout = layout;
    return p;
  }

  std::size_t obs_dim() const { return static_cast<std::size_t>(actor.input_size()); }
  std::size_t num_params() const { return actor.num_params() + 1 + critic.num_params(); }

  /// Flat layout: [actor, log_std, critic].
  Vec flatten() const {
    Vec out(num_params());
    actor.write_params(out.data());
    out[actor.num_params()] = log_std;
    critic.write_params(out.data() + actor.num_params() + 1);
    return out;
  }

  void unflatten(std::span<const double> flat) {
    if (flat.size() != num_params()) throw ValidationError("parameter vector length mismatch");
    actor.read_params(flat.data());
    log_std = flat[actor.num_params()];
    critic.read_params(flat.data() + actor.num_params() + 1);
  }

  double mean(std::span<const double> obs) const {
    const Eigen::Map<const Eigen::VectorXd> o(obs.data(), static_cast<Eigen::Index>(obs.size()));
    return actor.forward(o)(0, 0);
  }

  double value(std::span<const double> obs) const {
    const Eigen::Map<const Eigen::VectorXd> o(obs.data(), static_cast<Eigen::Index>(obs.size()));
    return critic.forward(o)(0, 0);
  }
};

inline double squash(double z) { return 0.5 * (std::tanh(z) + 1.0); }

/// log|d action / dz| for action = (tanh z + 1)/2, computed stably.
inline double log_squash_jacobian(double z) {
  // log((1 - tanh^2 z) / 2) = log 2 - 2|z| - 2 log(1 + exp(-2|z|))
  const double az = std::abs(z);
  return std::numbers::ln2 - 2.0 * az - 2.0 * std::log1p(std::exp(-2.0 * az));
}

/// Gaussian log density of z under N(mean, exp(log_std)^2).
inline double gaussian_logpdf(double z, double mean, double log_std) {
  const double sd = std::exp(log_std);
  const double u = (z - mean) / sd;
  return -0.5 * u * u - log_std - 0.5 * std::log(2.0 * std::numbers::pi);
}

/// Density of the squashed action, including the change-of-variables term.
inline double action_logprob(double z, double mean, double log_std) {
  return gaussian_logpdf(z, mean, log_std) - log_squash_jacobian(z);
}

struct ActionSample {
  double action = 0.5;
  double logprob = 0.0;
  double z = 0.0;  // pre-squash sample
};

inline ActionSample sample_action(const PolicyParams& policy, std::span<const double> obs, Rng& rng) {
  const double mu = policy.mean(obs);
  const double ls = std::clamp(policy.log_std, kLogStdMin, kLogStdMax);
  ActionSample s;
  s.z = mu + std::exp(ls) * rng.normal();
  s.action = clamp01(squash(s.z));
  s.logprob = action_logprob(s.z, mu, ls);
  return s;
}

inline double deterministic_action(const PolicyParams& policy, std::span<const double> obs) {
  return squash(policy.mean(obs));
}

// ---------------------------------------------------------------------------
// Advantage estimation

struct GaeResult {
  Vec advantages;  // raw, before normalization
  Vec returns;     // advantages + values
};

/// Recursive GAE. values[t] is V(s_t); last_value bootstraps past the final
/// step unless it is terminal. done[t] marks the end of an episode at step t.
inline GaeResult gae(std::span<const double> rewards, std::span<const double> values,
                     std::span<const std::uint8_t> dones, double last_value, double gamma,
                     double lam) {
  const std::size_t n = rewards.size();
  if (values.size() != n || dones.size() != n) throw ValidationError("gae input length mismatch");
  GaeResult out;
  out.advantages.assign(n, 0.0);
  out.returns.assign(n, 0.0);
  double next_adv = 0.0;
  for (std::size_t i = n; i-- > 0;) {
    const double nonterminal = dones[i] ? 0.0 : 1.0;
    const double next_value = (i + 1 < n) ? values[i + 1] : last_value;
    const double delta = rewards[i] + gamma * next_value * nonterminal - values[i];
    next_adv = delta + gamma * lam * nonterminal * next_adv;
    out.advantages[i] = next_adv;
    out.returns[i] = next_adv + values[i];
  }
  return out;
}

inline Vec normalize_advantages(std::span<const double> adv) {
  const double n = static_cast<double>(adv.size());
  if (adv.empty()) return {};
  double mean = 0.0;
  for (double a : adv) mean += a;
  mean /= n;
  double var = 0.0;
  for (double a : adv) var += (a - mean) * (a - mean);
  const double sd = std::max(std::sqrt(var / n), 1e-8);
  Vec out(adv.size());
  for (std::size_t i = 0; i < adv.size(); ++i) out[i] = (adv[i] - mean) / sd;
  return out;
}

// ---------------------------------------------------------------------------
// PPO

struct PPOConfig {
  double clip = 0.2;
  double gamma = 0.99;
  double gae_lambda = 0.95;
  double lr = 3e-4;
  std::size_t rollout_len = 1024;
  std::size_t epochs = 4;
  std::size_t minibatch = 64;
  std::int64_t total_steps = 20000;
  double value_coef = 0.5;
  double entropy_coef = 0.01;
  double max_grad_norm = 0.5;
  std::vector<int> hidden{64, 64};
  double init_log_std = 0.0;

  void validate() const {
    if (!(clip > 0.0)) throw ConfigError("clip must be positive");
    if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("gamma must be in (0,1]");
    if (gae_lambda < 0.0 || gae_lambda > 1.0) throw ConfigError("gae_lambda must be in [0,1]");
    if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
    if (rollout_len == 0 || epochs == 0 || minibatch == 0) {
      throw ConfigError("rollout_len, epochs and minibatch must be positive");
    }
    if (total_steps < 0) throw ConfigError("total_steps must be non-negative");
    for (int h : hidden) {
      if (h <= 0) throw ConfigError("hidden layer sizes must be positive");
    }
  }
};

/// Transitions collected under the current policy.
struct RolloutBuffer {
  std::size_t obs_dim = 0;
  Vec obs;  // row-major, obs_dim per step
  Vec z;
  Vec logprob;
  Vec value;
  Vec reward;
  std::vector<std::uint8_t> done;
  double last_value = 0.0;

  std::size_t size() const { return reward.size(); }

  void clear() {
    obs.clear();
    z.clear();
    logprob.clear();
    value.clear();
    reward.clear();
    done.clear();
    last_value = 0.0;
  }

  void add(std::span<const double> o, double z_, double logp, double v, double r, bool d) {
    obs.insert(obs.end(), o.begin(), o.end());
    z.push_back(z_);
    logprob.push_back(logp);
    value.push_back(v);
    reward.push_back(r);
    done.push_back(d ? 1 : 0);
  }
};

struct PpoBatch {
  Eigen::MatrixXd obs;  // obs_dim x B
  Eigen::VectorXd z;
  Eigen::VectorXd old_logprob;
  Eigen::VectorXd advantages;
  Eigen::VectorXd returns;
};

struct LossTerms {
  double total = 0.0;
  double policy = 0.0;
  double value = 0.0;
  double entropy = 0.0;
  double clip_fraction = 0.0;
  double approx_kl = 0.0;
  double unclipped_surrogate = 0.0;  // -mean(rho * A)
};

/// PPO objective on one minibatch:
///   L = -mean(min(rho A, clip(rho, 1-eps, 1+eps) A)) + c_v mean((V-R)^2) - c_e H
/// H is the entropy of the pre-squash Gaussian. If grad is non-null it
/// receives dL/dparams in PolicyParams::flatten() layout.
inline LossTerms ppo_loss(const PolicyParams& policy, const PpoBatch& batch, const PPOConfig& cfg,
                          Vec* grad) {
  const auto b = batch.obs.cols();
  const double inv_b = 1.0 / static_cast<double>(b);
  Mlp::Cache actor_cache;
  Mlp::Cache critic_cache;
  const Eigen::MatrixXd mu = policy.actor.forward(batch.obs, grad ? &actor_cache : nullptr);
  const Eigen::MatrixXd v = policy.critic.forward(batch.obs, grad ? &critic_cache : nullptr);
  const double ls = policy.log_std;
  const double var = std::exp(2.0 * ls);

  LossTerms out;
  Eigen::MatrixXd dmu(1, b);
  Eigen::MatrixXd dv(1, b);
  double dls = 0.0;
  std::size_t clipped = 0;
  for (Eigen::Index i = 0; i < b; ++i) {
    const double diff = batch.z[i] - mu(0, i);
    const double logp = action_logprob(batch.z[i], mu(0, i), ls);
    const double log_ratio = logp - batch.old_logprob[i];
    const double rho = std::exp(log_ratio);
    const double a = batch.advantages[i];
    const double s1 = rho * a;
    const double s2 = std::clamp(rho, 1.0 - cfg.clip, 1.0 + cfg.clip) * a;
    out.policy -= std::min(s1, s2) * inv_b;
    out.unclipped_surrogate -= s1 * inv_b;
    if (std::abs(rho - 1.0) > cfg.clip) ++clipped;
    out.approx_kl += ((rho - 1.0) - log_ratio) * inv_b;
    const double dl_drho = (s1 <= s2) ? -a * inv_b : 0.0;
    dmu(0, i) = dl_drho * rho * diff / var;
    dls += dl_drho * rho * (diff * diff / var - 1.0);

    const double err = v(0, i) - batch.returns[i];
    out.value += err * err * inv_b;
    dv(0, i) = cfg.value_coef * 2.0 * err * inv_b;
  }
  out.entropy = 0.5 + 0.5 * std::log(2.0 * std::numbers::pi) + ls;
  out.clip_fraction = static_cast<double>(clipped) * inv_b;
  out.total = out.policy + cfg.value_coef * out.value - cfg.entropy_coef * out.entropy;

  if (grad) {
    grad->assign(policy.num_params(), 0.0);
    policy.actor.backward(actor_cache, dmu, grad->data());
    (*grad)[policy.actor.num_params()] = dls - cfg.entropy_coef;
    policy.critic.backward(critic_cache, dv, grad->data() + policy.actor.num_params() + 1);
  }
  return out;
}

class Adam {
 public:
  Adam() = default;
  explicit Adam(std::size_t n, double lr, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps), m_(n, 0.0), v_(n, 0.0) {}

  std::size_t size() const { return m_.size(); }

  void step(Vec& params, std::span<const double> grad) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = b1_ * m_[i] + (1.0 - b1_) * grad[i];
      v_[i] = b2_ * v_[i] + (1.0 - b2_) * grad[i] * grad[i];
      params[i] -= lr_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
    }
  }

 private:
  double lr_ = 3e-4, b1_ = 0.9, b2_ = 0.999, eps_ = 1e-8;
  Vec m_, v_;
  std::int64_t t_ = 0;
};

struct UpdateStats {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double clip_fraction = 0.0;
  double approx_kl = 0.0;
  std::size_t minibatches = 0;
  double first_clipped_surrogate = 0.0;
  double first_unclipped_surrogate = 0.0;
};

inline double clip_global_norm(Vec& g, double max_norm) {
  double s = 0.0;
  for (double x : g) s += x * x;
  const double n = std::sqrt(s);
  if (max_norm > 0.0 && n > max_norm) {
    const double scale = max_norm / n;
    for (double& x : g) x *= scale;
  }
  return n;
}

/// Runs cfg.epochs passes of shuffled minibatch Adam steps over the buffer.
/// A non-finite loss restores the pre-update parameters and throws.
inline UpdateStats ppo_update(PolicyParams& policy, const RolloutBuffer& buf, const PPOConfig& cfg,
                              Adam& opt, Rng& rng) {
  const std::size_t n = buf.size();
  if (n == 0) return {};
  const std::size_t d = buf.obs_dim;
  const GaeResult g = gae(buf.reward, buf.value, buf.done, buf.last_value, cfg.gamma, cfg.gae_lambda);
  const Vec adv = normalize_advantages(g.advantages);

  const Vec snapshot = policy.flatten();
  Vec params = snapshot;
  Vec grad;
  UpdateStats stats;
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  const std::size_t mb = std::min(cfg.minibatch, n);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(idx);
    for (std::size_t start = 0; start + mb <= n; start += mb) {
      PpoBatch batch;
      batch.obs.resize(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(mb));
      batch.z.resize(static_cast<Eigen::Index>(mb));
      batch.old_logprob.resize(static_cast<Eigen::Index>(mb));
      batch.advantages.resize(static_cast<Eigen::Index>(mb));
      batch.returns.resize(static_cast<Eigen::Index>(mb));
      for (std::size_t j = 0; j < mb; ++j) {
        const std::size_t s = idx[start + j];
        const auto c = static_cast<Eigen::Index>(j);
        for (std::size_t r = 0; r < d; ++r) batch.obs(static_cast<Eigen::Index>(r), c) = buf.obs[s * d + r];
        batch.z[c] = buf.z[s];
        batch.old_logprob[c] = buf.logprob[s];
        batch.advantages[c] = adv[s];
        batch.returns[c] = g.returns[s];
      }
      const LossTerms lt = ppo_loss(policy, batch, cfg, &grad);
      if (!std::isfinite(lt.total) || !all_finite(grad)) {
        policy.unflatten(snapshot);
        throw RuntimeFailure("non-finite PPO loss (policy " + std::to_string(lt.policy) +
                             ", value " + std::to_string(lt.value) + ", log_std " +
                             std::to_string(policy.log_std) + ")");
      }
      if (stats.minibatches == 0) {
        stats.first_clipped_surrogate = lt.policy;
        stats.first_unclipped_surrogate = lt.unclipped_surrogate;
      }
      clip_global_norm(grad, cfg.max_grad_norm);
      opt.step(params, grad);
      params[policy.actor.num_params()] =
          std::clamp(params[policy.actor.num_params()], kLogStdMin, kLogStdMax);
      policy.unflatten(params);

      stats.policy_loss += lt.policy;
      stats.value_loss += lt.value;
      stats.entropy += lt.entropy;
      stats.clip_fraction += lt.clip_fraction;
      stats.approx_kl += lt.approx_kl;
      ++stats.minibatches;
    }
  }
  if (stats.minibatches > 0) {
    const double k = static_cast<double>(stats.minibatches);
    stats.policy_loss /= k;
    stats.value_loss /= k;
    stats.entropy /= k;
    stats.clip_fraction /= k;
    stats.approx_kl /= k;
  }
  return stats;
}

}  // namespace afferent
