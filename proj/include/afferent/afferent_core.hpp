#pragma once

// Afferent units, array dynamics, CAT aggregation and the genome codec.
//
// Each unit i projects the feature vector onto a unit-norm direction w_i and
// integrates a thresholded sigmoid of that projection with a leaky AR(1)
// update:
//
//   a_i(t) = (1 - beta_i) a_i(t-1) + beta_i * sigmoid(alpha_i (w_i.x - theta_i))
//   beta_i = dt / (tau_i + dt)
//
// The CAT is the convex combination sum_i v_i a_i(t).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "afferent/common.hpp"

namespace afferent {

struct AfferentUnitParams {
  Vec w;               // unit norm, length K
  double alpha = 1.0;  // gain > 0
  double theta = 0.5;  // threshold in [0, 1]
  double tau = 1.0;    // time constant > 0, in units of dt
};

/// Flattened array parameters: M blocks of [w_raw(K), alpha_raw, theta_raw,
/// tau_raw, v_raw]. Any real vector of the right length is a valid genome.
struct Genome {
  Vec raw;
  std::size_t m = 0;
  std::size_t k = 0;

  static std::size_t length_for(std::size_t m, std::size_t k) {
    return m * (k + 4);
  }

  static Genome zeros(std::size_t m, std::size_t k) {
    return Genome{Vec(length_for(m, k), 0.0), m, k};
  }

  std::size_t block() const { return k + 4; }
};

inline double beta_for(double tau, double dt) { return dt / (tau + dt); }

/// One leaky-integrator update. Total on a_prev in [0, 1].
inline double step_unit(const AfferentUnitParams& u, double a_prev,
                        double signal, double dt) {
  const double beta = beta_for(u.tau, dt);
  return (1.0 - beta) * a_prev + beta * sigmoid(u.alpha * (signal - u.theta));
}

class AfferentArray {
 public:
  AfferentArray() = default;

  AfferentArray(std::vector<AfferentUnitParams> units, Vec v, double dt)
      : units_(std::move(units)), v_(std::move(v)), dt_(dt) {
    if (units_.empty()) throw ConfigError("afferent array needs at least one unit");
    if (v_.size() != units_.size()) {
      throw ConfigError("aggregation weight count does not match unit count");
    }
    if (!(dt_ > 0.0)) throw ConfigError("dt must be positive");
    k_ = units_.front().w.size();
    double vsum = 0.0;
    for (std::size_t i = 0; i < units_.size(); ++i) {
      const auto& u = units_[i];
      if (u.w.size() != k_) throw ConfigError("inconsistent projection length");
      if (!(u.alpha > 0.0) || !(u.tau > 0.0) || u.theta < 0.0 || u.theta > 1.0) {
        throw ValidationError("unit parameters out of range");
      }
      if (std::abs(norm2(u.w) - 1.0) > 1e-9) {
        throw ValidationError("projection weights must be unit norm");
      }
      if (v_[i] < 0.0) throw ValidationError("aggregation weights must be >= 0");
      vsum += v_[i];
    }
    if (std::abs(vsum - 1.0) > 1e-9) {
      throw ValidationError("aggregation weights must sum to one");
    }
    state_.assign(units_.size(), 0.0);
  }

  std::size_t size() const { return units_.size(); }
  std::size_t features() const { return k_; }
  double dt() const { return dt_; }
  const std::vector<AfferentUnitParams>& units() const { return units_; }
  const Vec& weights() const { return v_; }
  const Vec& activations() const { return state_; }
  double beta(std::size_t i) const { return beta_for(units_[i].tau, dt_); }

  void reset() { std::fill(state_.begin(), state_.end(), 0.0); }

  /// Advances every unit one step on feature vector x and returns the CAT.
  double compute_cat(std::span<const double> x) {
    if (x.size() != k_) {
      throw ValidationError("feature vector has length " + std::to_string(x.size()) +
                            ", expected " + std::to_string(k_));
    }
    if (!all_finite(x)) throw ValidationError("non-finite feature value");
    double cat = 0.0;
    for (std::size_t i = 0; i < units_.size(); ++i) {
      const double signal = dot(units_[i].w, x);
      state_[i] = step_unit(units_[i], state_[i], signal, dt_);
      cat += v_[i] * state_[i];
    }
    return clamp01(cat);
  }

  /// Overwrites the activation state; used by tests and replay.
  void set_activations(Vec a) {
    if (a.size() != state_.size()) throw ValidationError("activation length mismatch");
    for (double x : a) {
      if (x < 0.0 || x > 1.0) throw ValidationError("activation outside [0,1]");
    }
    state_ = std::move(a);
  }

 private:
  std::vector<AfferentUnitParams> units_;
  Vec v_;
  Vec state_;
  double dt_ = 1.0;
  std::size_t k_ = 0;
};

inline constexpr double kMinGain = 1e-3;

inline AfferentArray decode_genome(const Genome& g, double dt = 1.0) {
  if (g.m == 0 || g.k == 0) throw ConfigError("genome needs m > 0 and k > 0");
  if (g.raw.size() != Genome::length_for(g.m, g.k)) {
    throw ConfigError("genome length " + std::to_string(g.raw.size()) +
                      " does not equal m*(k+4) = " +
                      std::to_string(Genome::length_for(g.m, g.k)));
  }
  if (!all_finite(g.raw)) throw ValidationError("genome contains non-finite values");
  if (!(dt > 0.0)) throw ConfigError("dt must be positive");

  std::vector<AfferentUnitParams> units(g.m);
  Vec v_raw(g.m);
  const std::size_t b = g.block();
  for (std::size_t i = 0; i < g.m; ++i) {
    const double* blk = g.raw.data() + i * b;
    AfferentUnitParams& u = units[i];
    u.w.assign(blk, blk + g.k);
    const double n = norm2(u.w);
    if (n < 1e-12) {
      std::fill(u.w.begin(), u.w.end(), 0.0);
      u.w[0] = 1.0;
    } else {
      for (double& x : u.w) x /= n;
    }
    u.alpha = softplus(blk[g.k]) + kMinGain;
    u.theta = clamp01(blk[g.k + 1]);
    u.tau = softplus(blk[g.k + 2]) + dt / 10.0;
    v_raw[i] = blk[g.k + 3];
  }

  const double vmax = *std::max_element(v_raw.begin(), v_raw.end());
  Vec v(g.m);
  double sum = 0.0;
  for (std::size_t i = 0; i < g.m; ++i) {
    v[i] = std::exp(v_raw[i] - vmax);
    sum += v[i];
  }
  for (double& x : v) x /= sum;
  return AfferentArray(std::move(units), std::move(v), dt);
}

/// Inverse of decode_genome on the constrained parameters. Aggregation
/// weights come back as log(v), i.e. up to the softmax's additive constant.
inline Genome encode_genome(const AfferentArray& arr) {
  Genome g = Genome::zeros(arr.size(), arr.features());
  const std::size_t b = g.block();
  const double dt = arr.dt();
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const auto& u = arr.units()[i];
    double* blk = g.raw.data() + i * b;
    std::copy(u.w.begin(), u.w.end(), blk);
    blk[g.k] = softplus_inv(std::max(u.alpha - kMinGain, 1e-300));
    blk[g.k + 1] = u.theta;
    blk[g.k + 2] = softplus_inv(std::max(u.tau - dt / 10.0, 1e-300));
    blk[g.k + 3] = std::log(std::max(arr.weights()[i], 1e-300));
  }
  return g;
}

/// Rule-based envelope detector: unit i watches feature (i mod K) with
/// theta = 0.6, alpha = 8, tau = 5 steps and uniform aggregation.
inline Genome baseline_genome(std::size_t m, std::size_t k, double dt = 1.0) {
  std::vector<AfferentUnitParams> units(m);
  for (std::size_t i = 0; i < m; ++i) {
    units[i].w.assign(k, 0.0);
    units[i].w[i % k] = 1.0;
    units[i].alpha = 8.0;
    units[i].theta = 0.6;
    units[i].tau = 5.0;
  }
  return encode_genome(AfferentArray(std::move(units), Vec(m, 1.0 / static_cast<double>(m)), dt));
}

inline Genome random_genome(std::size_t m, std::size_t k, std::uint64_t seed,
                            double sd = 0.5) {
  Genome g = Genome::zeros(m, k);
  Rng rng(seed);
  for (double& x : g.raw) x = sd * rng.normal();
  return g;
}

}  // namespace afferent
