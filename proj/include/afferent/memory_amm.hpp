#pragma once

// Episodic memory: event-triggered capture with deferred future-damage
// finalization, cosine kNN retrieval, inverse-distance recall risk and FIFO
// eviction.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "afferent/common.hpp"

namespace afferent {

/// What the agent saw and did at one step: features, afferent activations,
/// CAT, chosen action and the damage increment it caused.
struct StepRecord {
  Vec x;
  Vec activations;
  double cat = 0.0;
  double action = 0.0;
  double delta_d = 0.0;
};

struct MemoryParams {
  double eps_d = 1e-3;
  double kappa_cat = 0.7;
  std::size_t capacity = 512;
  std::size_t k_ret = 5;
  std::size_t pre_window = 8;
  std::size_t post_window = 4;
  std::size_t horizon = 10;
  double epsilon = 1e-6;

  void validate() const {
    if (capacity == 0) throw ConfigError("memory capacity must be positive");
    if (k_ret == 0) throw ConfigError("k_ret must be positive");
    if (pre_window < 2) throw ConfigError("pre-event window must be at least 2");
    if (horizon == 0) throw ConfigError("horizon must be positive");
    if (!(epsilon > 0.0)) throw ConfigError("epsilon must be positive");
  }
};

struct Episode {
  Vec key;                  // unit norm once finalized
  double delta = 0.0;       // cumulative damage over the horizon
  double cat_hist = 0.0;    // window-mean CAT before normalization
  std::string scenario;
  std::int64_t t_event = 0;
  std::uint64_t seq = 0;    // insertion order
  bool finalized = false;
  std::vector<StepRecord> window;  // pre-window, event and post-window steps
  std::size_t steps_seen = 0;      // horizon steps accumulated so far
};

struct EncodedKey {
  Vec key;
  double mean_cat = 0.0;
};

/// Handcrafted context key normalize([mean x, mean activations, mean CAT,
/// (x_last - x_first)/(k-1)]), dimension 2K+M+1.
inline EncodedKey encode_key(std::span<const StepRecord> window) {
  if (window.size() < 2) throw ValidationError("key window needs at least two steps");
  const std::size_t k = window.front().x.size();
  const std::size_t m = window.front().activations.size();
  const double n = static_cast<double>(window.size());
  Vec key(2 * k + m + 1, 0.0);
  double cat_sum = 0.0;
  for (const StepRecord& r : window) {
    if (r.x.size() != k || r.activations.size() != m) {
      throw ValidationError("inconsistent record dimensions in key window");
    }
    for (std::size_t i = 0; i < k; ++i) key[i] += r.x[i];
    for (std::size_t i = 0; i < m; ++i) key[k + i] += r.activations[i];
    cat_sum += r.cat;
  }
  for (std::size_t i = 0; i < k + m; ++i) key[i] /= n;
  key[k + m] = cat_sum / n;
  const Vec& first = window.front().x;
  const Vec& last = window.back().x;
  for (std::size_t i = 0; i < k; ++i) key[k + m + 1 + i] = (last[i] - first[i]) / (n - 1.0);

  const double nrm = norm2(key);
  if (nrm < 1e-12) {
    std::fill(key.begin(), key.end(), 0.0);
    key[0] = 1.0;
  } else {
    for (double& v : key) v /= nrm;
  }
  return {std::move(key), cat_sum / n};
}

inline double cosine_distance(std::span<const double> a, std::span<const double> b) {
  return 1.0 - dot(a, b);
}

struct Retrieved {
  const Episode* episode = nullptr;
  double distance = 0.0;
};

struct RecallResult {
  double y_hat = 0.0;
  double d_mean = 0.0;
};

inline RecallResult recall_risk(std::span<const Retrieved> retrieved, double epsilon = 1e-6) {
  if (retrieved.empty()) return {0.0, 0.0};
  double wsum = 0.0;
  double dsum = 0.0;
  Vec w(retrieved.size());
  for (std::size_t i = 0; i < retrieved.size(); ++i) {
    w[i] = 1.0 / (retrieved[i].distance + epsilon);
    wsum += w[i];
    dsum += retrieved[i].distance;
  }
  double y = 0.0;
  for (std::size_t i = 0; i < retrieved.size(); ++i) y += (w[i] / wsum) * retrieved[i].episode->delta;
  return {y, dsum / static_cast<double>(retrieved.size())};
}

class MemoryStore {
 public:
  explicit MemoryStore(MemoryParams params = {}) : params_(params) { params_.validate(); }

  const MemoryParams& params() const { return params_; }
  const std::deque<Episode>& episodes() const { return episodes_; }
  const std::vector<Episode>& pending() const { return pending_; }
  std::size_t size() const { return episodes_.size(); }
  std::uint64_t inserted() const { return next_seq_; }

  /// Forgets the running trajectory buffer (episode boundary). Pending
  /// episodes are finalized with their partial damage sums.
  void end_trajectory() {
    for (Episode& e : pending_) finalize(std::move(e));
    pending_.clear();
    buffer_.clear();
  }

  /// Appends a step to the trajectory buffer, advances pending episodes and
  /// captures a new one when delta_d > eps_d or cat > kappa_cat. Returns
  /// whether a capture happened at this step.
  bool observe(const StepRecord& rec, const std::string& scenario, std::int64_t t) {
    buffer_.push_back(rec);
    while (buffer_.size() > params_.pre_window) buffer_.pop_front();

    // Pending episodes accumulate damage from the steps after their event.
    std::vector<Episode> still;
    still.reserve(pending_.size());
    for (Episode& e : pending_) {
      e.delta += rec.delta_d;
      e.steps_seen += 1;
      if (e.window.size() < params_.pre_window + 1 + params_.post_window) e.window.push_back(rec);
      if (e.steps_seen >= params_.horizon) {
        finalize(std::move(e));
      } else {
        still.push_back(std::move(e));
      }
    }
    pending_ = std::move(still);

    const bool trigger = rec.delta_d > params_.eps_d || rec.cat > params_.kappa_cat;
    if (!trigger || buffer_.size() < 2) return false;

    std::vector<StepRecord> win(buffer_.begin(), buffer_.end());
    EncodedKey ek = encode_key(win);
    Episode e;
    e.key = std::move(ek.key);
    e.cat_hist = ek.mean_cat;
    e.scenario = scenario;
    e.t_event = t;
    e.delta = rec.delta_d;  // j = 0 term of the horizon sum
    e.steps_seen = 1;
    e.window = std::move(win);
    if (e.steps_seen >= params_.horizon) {
      finalize(std::move(e));
    } else {
      pending_.push_back(std::move(e));
    }
    return true;
  }

  /// Query key for the current context (the same encoding as stored keys),
  /// or nothing when the buffer is too short.
  bool current_key(EncodedKey& out) const {
    if (buffer_.size() < 2) return false;
    std::vector<StepRecord> win(buffer_.begin(), buffer_.end());
    out = encode_key(win);
    return true;
  }

  /// Linear-scan kNN by cosine distance; ties go to the older episode.
  std::vector<Retrieved> retrieve(std::span<const double> key, std::size_t k_ret) const {
    std::vector<Retrieved> all;
    all.reserve(episodes_.size());
    for (const Episode& e : episodes_) all.push_back({&e, cosine_distance(key, e.key)});
    const std::size_t n = std::min(k_ret, all.size());
    auto cmp = [](const Retrieved& a, const Retrieved& b) {
      if (a.distance != b.distance) return a.distance < b.distance;
      return a.episode->seq < b.episode->seq;
    };
    std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n), all.end(), cmp);
    all.resize(n);
    return all;
  }

  std::vector<Retrieved> retrieve(std::span<const double> key) const {
    return retrieve(key, params_.k_ret);
  }

  RecallResult recall(std::span<const double> key) const {
    const auto r = retrieve(key);
    return recall_risk(r, params_.epsilon);
  }

  /// Inserts an already finalized episode (used by merge and loaders).
  void insert(Episode e) {
    e.finalized = true;
    e.seq = next_seq_++;
    episodes_.push_back(std::move(e));
    while (episodes_.size() > params_.capacity) episodes_.pop_front();
  }

 private:
  void finalize(Episode&& e) { insert(std::move(e)); }

  MemoryParams params_;
  std::deque<Episode> episodes_;
  std::vector<Episode> pending_;
  std::deque<StepRecord> buffer_;
  std::uint64_t next_seq_ = 0;
};

/// Hybrid bias: with at least three stored episodes for the scenario, blend
/// 70% mechanical CAT with 30% of their mean historical CAT.
inline double apply_memory_bias(double cat_mech, const MemoryStore& store,
                                const std::string& scenario) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const Episode& e : store.episodes()) {
    if (e.scenario == scenario) {
      sum += e.cat_hist;
      ++n;
    }
  }
  if (n < 3) return cat_mech;
  return clamp01(0.7 * cat_mech + 0.3 * (sum / static_cast<double>(n)));
}

/// Offline merge: concatenation in (a, b) order followed by FIFO re-eviction.
inline MemoryStore merge_stores(const MemoryStore& a, const MemoryStore& b) {
  MemoryStore out(a.params());
  for (const Episode& e : a.episodes()) out.insert(e);
  for (const Episode& e : b.episodes()) out.insert(e);
  return out;
}

}  // namespace afferent
