#pragma once

// CMA-ES over afferent genomes with fitness measured after policy learning,
// a two-stage (short / long RL budget) evaluation schedule and an empirical
// local Lipschitz probe. Maximization throughout.

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <exception>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <thread>
#include <vector>

#include "afferent/afferent_core.hpp"
#include "afferent/common.hpp"
#include "afferent/predictive.hpp"
#include "afferent/training.hpp"

namespace afferent {

struct CmaesParams {
  std::size_t lambda = 0;
  std::size_t mu = 0;
  Vec weights;  // length mu, positive, sum 1
  double mu_eff = 0.0;
  double c_sigma = 0.0;
  double d_sigma = 0.0;
  double c_c = 0.0;
  double c_1 = 0.0;
  double c_mu = 0.0;
  double chi_n = 0.0;

  /// Default strategy parameters for dimension n and population lambda.
  static CmaesParams defaults(std::size_t n, std::size_t lambda) {
    if (n == 0) throw ConfigError("CMA-ES dimension must be positive");
    if (lambda < 2) throw ConfigError("CMA-ES population must be at least 2");
    CmaesParams p;
    const double nd = static_cast<double>(n);
    p.lambda = lambda;
    p.mu = lambda / 2;
    p.weights.resize(p.mu);
    double sum = 0.0;
    for (std::size_t i = 0; i < p.mu; ++i) {
      p.weights[i] = std::log((static_cast<double>(lambda) + 1.0) / 2.0) -
                     std::log(static_cast<double>(i + 1));
      sum += p.weights[i];
    }
    double sq = 0.0;
    for (double& w : p.weights) {
      w /= sum;
      sq += w * w;
    }
    p.mu_eff = 1.0 / sq;
    p.c_c = (4.0 + p.mu_eff / nd) / (nd + 4.0 + 2.0 * p.mu_eff / nd);
    p.c_sigma = (p.mu_eff + 2.0) / (nd + p.mu_eff + 5.0);
    p.c_1 = 2.0 / ((nd + 1.3) * (nd + 1.3) + p.mu_eff);
    p.c_mu = std::min(1.0 - p.c_1, 2.0 * (p.mu_eff - 2.0 + 1.0 / p.mu_eff) /
                                       ((nd + 2.0) * (nd + 2.0) + p.mu_eff));
    p.d_sigma = 1.0 + 2.0 * std::max(0.0, std::sqrt((p.mu_eff - 1.0) / (nd + 1.0)) - 1.0) +
                p.c_sigma;
    p.chi_n = std::sqrt(nd) * (1.0 - 1.0 / (4.0 * nd) + 1.0 / (21.0 * nd * nd));
    return p;
  }
};

struct EvolutionState {
  Eigen::VectorXd mean;
  double sigma = 0.5;
  Eigen::MatrixXd cov;
  Eigen::VectorXd p_sigma;
  Eigen::VectorXd p_c;
  std::int64_t generation = 0;
  CmaesParams params;
  Rng rng;
  // Cached decomposition cov = B diag(d^2) B^T.
  Eigen::MatrixXd basis;
  Eigen::VectorXd scales;
  std::size_t nonfinite_flags = 0;

  std::size_t dim() const { return static_cast<std::size_t>(mean.size()); }

  static EvolutionState create(const Vec& mean0, double sigma0, std::size_t lambda,
                               std::uint64_t seed) {
    if (!(sigma0 > 0.0)) throw ConfigError("initial sigma must be positive");
    EvolutionState s;
    const auto n = static_cast<Eigen::Index>(mean0.size());
    s.mean = Eigen::Map<const Eigen::VectorXd>(mean0.data(), n);
    s.sigma = sigma0;
    s.cov = Eigen::MatrixXd::Identity(n, n);
    s.p_sigma = Eigen::VectorXd::Zero(n);
    s.p_c = Eigen::VectorXd::Zero(n);
    s.params = CmaesParams::defaults(mean0.size(), lambda);
    s.rng = Rng(seed);
    s.basis = Eigen::MatrixXd::Identity(n, n);
    s.scales = Eigen::VectorXd::Ones(n);
    return s;
  }

  /// Symmetrizes cov, floors eigenvalues at 1e-14 and refreshes the cached
  /// decomposition.
  void repair_and_decompose() {
    cov = 0.5 * (cov + cov.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    if (es.info() != Eigen::Success) {
      cov += 1e-12 * Eigen::MatrixXd::Identity(cov.rows(), cov.cols());
      es.compute(cov);
      if (es.info() != Eigen::Success) {
        throw RuntimeFailure("covariance eigendecomposition failed after repair");
      }
    }
    Eigen::VectorXd ev = es.eigenvalues().cwiseMax(1e-14);
    basis = es.eigenvectors();
    scales = ev.cwiseSqrt();
    cov = basis * ev.asDiagonal() * basis.transpose();
    cov = 0.5 * (cov + cov.transpose());
  }

  /// cov^{-1/2} v using the cached decomposition.
  Eigen::VectorXd inv_sqrt_times(const Eigen::VectorXd& v) const {
    return basis * (basis.transpose() * v).cwiseQuotient(scales);
  }
};

/// Draws lambda candidates mean + sigma * cov^{1/2} z.
inline std::vector<Vec> ask(EvolutionState& state, std::size_t lambda) {
  const auto n = static_cast<Eigen::Index>(state.dim());
  std::vector<Vec> out(lambda, Vec(state.dim()));
  for (std::size_t j = 0; j < lambda; ++j) {
    Eigen::VectorXd z(n);
    for (Eigen::Index i = 0; i < n; ++i) z[i] = state.rng.normal();
    const Eigen::VectorXd x = state.mean + state.sigma * (state.basis * state.scales.cwiseProduct(z));
    for (Eigen::Index i = 0; i < n; ++i) out[j][static_cast<std::size_t>(i)] = x[i];
  }
  return out;
}

/// Rank weights per candidate: best-first position weights, averaged within
/// groups of equal fitness. Non-finite fitness ranks last.
inline Vec rank_weights(std::span<const double> fitness, const CmaesParams& p,
                        std::size_t* nonfinite = nullptr) {
  const std::size_t lam = fitness.size();
  Vec f(fitness.begin(), fitness.end());
  std::size_t bad = 0;
  for (double& v : f) {
    if (!std::isfinite(v)) {
      v = -std::numeric_limits<double>::infinity();
      ++bad;
    }
  }
  if (nonfinite) *nonfinite = bad;
  std::vector<std::size_t> order(lam);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return f[a] > f[b]; });
  Vec w(lam, 0.0);
  std::size_t i = 0;
  while (i < lam) {
    std::size_t j = i;
    while (j + 1 < lam && f[order[j + 1]] == f[order[i]]) ++j;
    double s = 0.0;
    for (std::size_t r = i; r <= j; ++r) s += r < p.mu ? p.weights[r] : 0.0;
    const double avg = s / static_cast<double>(j - i + 1);
    for (std::size_t r = i; r <= j; ++r) w[order[r]] = avg;
    i = j + 1;
  }
  return w;
}

/// Standard CMA-ES update (weighted recombination, cumulative step-size
/// adaptation, rank-one and rank-mu covariance updates). A population with
/// all-equal fitness carries no ranking information and leaves the
/// distribution unchanged.
inline void tell(EvolutionState& s, const std::vector<Vec>& candidates, std::span<const double> fitness) {
  const std::size_t lam = candidates.size();
  if (fitness.size() != lam || lam != s.params.lambda) {
    throw ValidationError("tell expects lambda candidates and lambda fitness values");
  }
  const CmaesParams& p = s.params;
  std::size_t bad = 0;
  const Vec w = rank_weights(fitness, p, &bad);
  s.nonfinite_flags += bad;
  s.generation += 1;

  bool all_tied = true;
  for (std::size_t i = 1; i < lam; ++i) {
    const bool same = (fitness[i] == fitness[0]) ||
                      (!std::isfinite(fitness[i]) && !std::isfinite(fitness[0]));
    if (!same) all_tied = false;
  }
  if (all_tied) return;

  const auto n = static_cast<Eigen::Index>(s.dim());
  const double nd = static_cast<double>(n);
  Eigen::MatrixXd ys(n, static_cast<Eigen::Index>(lam));
  for (std::size_t j = 0; j < lam; ++j) {
    for (Eigen::Index i = 0; i < n; ++i) {
      ys(i, static_cast<Eigen::Index>(j)) = (candidates[j][static_cast<std::size_t>(i)] - s.mean[i]) / s.sigma;
    }
  }
  Eigen::VectorXd yw = Eigen::VectorXd::Zero(n);
  for (std::size_t j = 0; j < lam; ++j) yw += w[j] * ys.col(static_cast<Eigen::Index>(j));

  s.mean += s.sigma * yw;

  s.p_sigma = (1.0 - p.c_sigma) * s.p_sigma +
              std::sqrt(p.c_sigma * (2.0 - p.c_sigma) * p.mu_eff) * s.inv_sqrt_times(yw);
  const double ps_norm = s.p_sigma.norm();
  const double denom = std::sqrt(1.0 - std::pow(1.0 - p.c_sigma, 2.0 * static_cast<double>(s.generation)));
  const bool h_sigma = ps_norm / denom < (1.4 + 2.0 / (nd + 1.0)) * p.chi_n;
  s.p_c = (1.0 - p.c_c) * s.p_c +
          (h_sigma ? std::sqrt(p.c_c * (2.0 - p.c_c) * p.mu_eff) : 0.0) * yw;

  Eigen::MatrixXd rank_mu = Eigen::MatrixXd::Zero(n, n);
  for (std::size_t j = 0; j < lam; ++j) {
    if (w[j] == 0.0) continue;
    const auto y = ys.col(static_cast<Eigen::Index>(j));
    rank_mu.noalias() += w[j] * y * y.transpose();
  }
  const double hs_corr = h_sigma ? 0.0 : p.c_1 * p.c_c * (2.0 - p.c_c);
  s.cov = (1.0 - p.c_1 - p.c_mu + hs_corr) * s.cov + p.c_1 * s.p_c * s.p_c.transpose() +
          p.c_mu * rank_mu;

  s.sigma *= std::exp((p.c_sigma / p.d_sigma) * (ps_norm / p.chi_n - 1.0));
  if (!(s.sigma > 0.0) || !std::isfinite(s.sigma)) {
    throw RuntimeFailure("step size degenerated to " + std::to_string(s.sigma));
  }
  s.repair_and_decompose();
}

// ---------------------------------------------------------------------------
// Fitness on learning outcomes

struct FitnessSpec {
  double gamma_d = 1.0;
  std::size_t eval_episodes = 2;
  std::vector<std::uint64_t> eval_seeds{1000, 1001};
  std::int64_t rl_steps_short = 2000;
  std::int64_t rl_steps_long = 5000;
  double top_fraction = 0.25;
  std::size_t rl_seeds_short = 1;
  std::size_t rl_seeds_long = 2;

  void validate() const {
    if (!(gamma_d > 0.0)) throw ConfigError("gamma_d must be positive");
    if (!(top_fraction > 0.0 && top_fraction <= 1.0)) throw ConfigError("top_fraction must be in (0,1]");
    if (eval_episodes == 0 || eval_seeds.empty()) throw ConfigError("need evaluation episodes and seeds");
    if (rl_seeds_short == 0 || rl_seeds_long == 0) throw ConfigError("need at least one RL seed");
  }
};

/// Everything besides the genome that a fitness evaluation depends on.
struct FitnessContext {
  TrainSpec train;  // scenario, ppo, reward, agent; age/seed overridden per run
  std::vector<double> ages{60.0};
  std::shared_ptr<const PredictiveComponent> predictive;
  double dt = 1.0;
};

/// J = mean(P) - gamma_d * mean(D_total) after rl_train with the genome
/// fixed, averaged over RL seeds and ages. Training failures give -inf.
inline double evaluate_fitness(const Genome& genome, const FitnessSpec& spec, const FitnessContext& ctx,
                               std::int64_t rl_steps, std::uint64_t rl_seed_base,
                               std::size_t rl_seeds = 1) {
  const AfferentArray array = decode_genome(genome, ctx.dt);
  EvalSpec ev;
  ev.episodes = spec.eval_episodes;
  ev.seeds = spec.eval_seeds;
  double total = 0.0;
  std::size_t runs = 0;
  try {
    for (double age : ctx.ages) {
      for (std::size_t r = 0; r < rl_seeds; ++r) {
        TrainSpec ts = ctx.train;
        ts.age = age;
        ts.ppo.total_steps = rl_steps;
        ts.seed = derive_seed(rl_seed_base, 0x5EED, r);
        const TrainResult tr = rl_train(array, ctx.predictive, ts);
        const EvalResult er = evaluate_policy(tr.policy, array, ctx.predictive, ts, &tr.memory, ev);
        total += er.mean_performance() - spec.gamma_d * er.mean_damage();
        ++runs;
      }
    }
  } catch (const RuntimeFailure&) {
    return -std::numeric_limits<double>::infinity();
  }
  return total / static_cast<double>(runs);
}

/// Signature shared by real and stub evaluators: (genome, rl_steps,
/// seed_base, rl_seeds) -> fitness.
using FitnessFn = std::function<double(const Genome&, std::int64_t, std::uint64_t, std::size_t)>;

inline FitnessFn make_fitness_fn(FitnessSpec spec, FitnessContext ctx) {
  return [spec = std::move(spec), ctx = std::move(ctx)](const Genome& g, std::int64_t steps,
                                                        std::uint64_t seed, std::size_t n) {
    return evaluate_fitness(g, spec, ctx, steps, seed, n);
  };
}

/// Evaluates jobs on up to `workers` threads; output order never depends on
/// scheduling.
template <typename Fn>
Vec parallel_map(std::size_t count, std::size_t workers, Fn&& fn) {
  Vec out(count, 0.0);
  if (workers <= 1 || count <= 1) {
    for (std::size_t i = 0; i < count; ++i) out[i] = fn(i);
    return out;
  }
  std::vector<std::jthread> pool;
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(count);
  for (std::size_t w = 0; w < std::min(workers, count); ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) {
        try {
          out[i] = fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  pool.clear();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

struct EvolutionSpec {
  std::size_t generations = 5;
  std::size_t popsize = 8;
  std::size_t m = 8;
  std::size_t k = 3;
  double sigma0 = 0.5;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
};

struct GenerationStats {
  std::int64_t generation = 0;
  double best = 0.0;
  double mean = 0.0;
  double std = 0.0;
  Genome best_genome;
};

struct EvolutionResult {
  Genome best;
  double best_fitness = -std::numeric_limits<double>::infinity();
  std::vector<GenerationStats> history;
  EvolutionState final_state;
};

/// Outer loop: ask, stage-1 evaluation at the short RL budget, stage-2
/// re-evaluation of the top ceil(top_fraction * lambda) at the long budget
/// (their long fitness replaces the short one), tell.
inline EvolutionResult run_evolution(const EvolutionSpec& es, const FitnessSpec& fs, const FitnessFn& fitness,
                                     const std::function<void(const GenerationStats&)>& on_generation = {}) {
  fs.validate();
  const std::size_t n = Genome::length_for(es.m, es.k);
  EvolutionResult result;
  result.final_state = EvolutionState::create(Vec(n, 0.0), es.sigma0, es.popsize, derive_seed(es.seed, 0xC3A));
  result.best = Genome{Vec(n, 0.0), es.m, es.k};
  EvolutionState& state = result.final_state;

  for (std::size_t gen = 0; gen < es.generations; ++gen) {
    const std::vector<Vec> cands = ask(state, es.popsize);
    const std::uint64_t gen_seed = derive_seed(es.seed, 0x6E4, gen);
    auto genome_of = [&](std::size_t i) { return Genome{cands[i], es.m, es.k}; };

    Vec f = parallel_map(cands.size(), es.workers, [&](std::size_t i) {
      return fitness(genome_of(i), fs.rl_steps_short, gen_seed, fs.rl_seeds_short);
    });

    const auto top = static_cast<std::size_t>(std::ceil(fs.top_fraction * static_cast<double>(es.popsize)));
    std::vector<std::size_t> order(cands.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      const double fa = std::isfinite(f[a]) ? f[a] : -std::numeric_limits<double>::infinity();
      const double fb = std::isfinite(f[b]) ? f[b] : -std::numeric_limits<double>::infinity();
      return fa > fb;
    });
    order.resize(std::min(top, order.size()));
    const Vec long_f = parallel_map(order.size(), es.workers, [&](std::size_t j) {
      return fitness(genome_of(order[j]), fs.rl_steps_long, derive_seed(gen_seed, 0x106), fs.rl_seeds_long);
    });
    for (std::size_t j = 0; j < order.size(); ++j) f[order[j]] = long_f[j];

    GenerationStats gs;
    gs.generation = static_cast<std::int64_t>(gen);
    gs.best = -std::numeric_limits<double>::infinity();
    double sum = 0.0;
    std::size_t finite = 0;
    std::size_t best_i = 0;
    for (std::size_t i = 0; i < f.size(); ++i) {
      if (!std::isfinite(f[i])) continue;
      sum += f[i];
      ++finite;
      if (f[i] > gs.best) {
        gs.best = f[i];
        best_i = i;
      }
    }
    gs.mean = finite ? sum / static_cast<double>(finite) : -std::numeric_limits<double>::infinity();
    double var = 0.0;
    for (double v : f) {
      if (std::isfinite(v)) var += (v - gs.mean) * (v - gs.mean);
    }
    gs.std = finite ? std::sqrt(var / static_cast<double>(finite)) : 0.0;
    gs.best_genome = genome_of(best_i);
    if (gs.best > result.best_fitness) {
      result.best_fitness = gs.best;
      result.best = gs.best_genome;
    }

    tell(state, cands, f);
    result.history.push_back(gs);
    if (on_generation) on_generation(result.history.back());
  }
  return result;
}

// ---------------------------------------------------------------------------
// Local smoothness probe

struct ProbeResult {
  double constant = 0.0;
  std::size_t accepted = 0;
  Vec ratios;
};

/// 95th percentile of |J(phi) - J(phi + u)| / ||u|| over perturbations
/// u ~ N(0, pert_sd^2 I) with ||u|| <= radius.
inline ProbeResult lipschitz_probe(const Genome& genome, const std::function<double(const Genome&)>& fitness,
                                   std::size_t n_pairs = 100, double radius = 0.1, double pert_sd = 0.01,
                                   std::uint64_t seed = 0, double quantile = 0.95) {
  Rng rng(seed);
  const double f0 = fitness(genome);
  ProbeResult out;
  for (std::size_t i = 0; i < n_pairs; ++i) {
    Genome g = genome;
    double sq = 0.0;
    for (double& x : g.raw) {
      const double u = pert_sd * rng.normal();
      x += u;
      sq += u * u;
    }
    const double dist = std::sqrt(sq);
    if (dist > radius || dist == 0.0) continue;
    out.ratios.push_back(std::abs(fitness(g) - f0) / dist);
  }
  out.accepted = out.ratios.size();
  if (out.ratios.empty()) {
    throw ValidationError("no perturbation pairs within the probe radius");
  }
  out.constant = percentile(out.ratios, quantile);
  return out;
}

}  // namespace afferent
