#pragma once

// Predictive-discrepancy risk component. A linear forward model fitted on
// healthy transitions predicts the next feature vector; the weighted residual
// norm is squashed into c_pred and blended with the envelope CAT.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "afferent/common.hpp"

namespace afferent {

/// One healthy-regime transition (x_t, a_t, s_t) -> x_{t+1}.
struct Transition {
  Vec x;
  double action = 0.0;
  Vec context;
  Vec x_next;
};

struct SafeStateModel {
  Eigen::MatrixXd A;  // K x (K + 1 + S)
  Eigen::VectorXd b;  // K
  std::size_t k = 0;
  std::size_t s = 0;
  double residual_rms = 0.0;
  bool ridge_fallback = false;

  Vec predict(std::span<const double> x, double action,
              std::span<const double> context) const {
    if (x.size() != k || context.size() != s) {
      throw ValidationError("safe-state model input dimension mismatch");
    }
    Eigen::VectorXd z(k + 1 + s);
    for (std::size_t i = 0; i < k; ++i) z[static_cast<Eigen::Index>(i)] = x[i];
    z[static_cast<Eigen::Index>(k)] = action;
    for (std::size_t i = 0; i < s; ++i) z[static_cast<Eigen::Index>(k + 1 + i)] = context[i];
    const Eigen::VectorXd y = A * z + b;
    return Vec(y.data(), y.data() + y.size());
  }
};

/// Least-squares fit of x_{t+1} ~ A [x; a; s] + b. Falls back to ridge
/// (penalty 1e-6) when the design matrix is rank deficient.
inline SafeStateModel fit_safe_model(std::span<const Transition> data) {
  if (data.empty()) throw ValidationError("no transitions to fit");
  const std::size_t k = data.front().x.size();
  const std::size_t s = data.front().context.size();
  const std::size_t cols = k + 2 + s;
  if (data.size() < cols) {
    throw ValidationError("need at least K+2+S transitions to fit the safe-state model");
  }
  const auto n = static_cast<Eigen::Index>(data.size());
  Eigen::MatrixXd X(n, static_cast<Eigen::Index>(cols));
  Eigen::MatrixXd Y(n, static_cast<Eigen::Index>(k));
  for (Eigen::Index r = 0; r < n; ++r) {
    const Transition& tr = data[static_cast<std::size_t>(r)];
    if (tr.x.size() != k || tr.x_next.size() != k || tr.context.size() != s) {
      throw ValidationError("inconsistent transition dimensions");
    }
    Eigen::Index c = 0;
    for (double v : tr.x) X(r, c++) = v;
    X(r, c++) = tr.action;
    for (double v : tr.context) X(r, c++) = v;
    X(r, c) = 1.0;
    for (std::size_t j = 0; j < k; ++j) Y(r, static_cast<Eigen::Index>(j)) = tr.x_next[j];
  }

  SafeStateModel model;
  model.k = k;
  model.s = s;
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
  Eigen::MatrixXd coef;
  if (qr.rank() < static_cast<Eigen::Index>(cols)) {
    model.ridge_fallback = true;
    Eigen::MatrixXd gram = X.transpose() * X;
    gram.diagonal().array() += 1e-6;
    coef = gram.ldlt().solve(X.transpose() * Y);
  } else {
    coef = qr.solve(Y);
  }
  // coef is cols x K; the last row is the bias.
  model.A = coef.topRows(static_cast<Eigen::Index>(cols - 1)).transpose();
  model.b = coef.row(static_cast<Eigen::Index>(cols - 1)).transpose();
  const Eigen::MatrixXd resid = Y - X * coef;
  model.residual_rms = std::sqrt(resid.squaredNorm() / static_cast<double>(resid.size()));
  return model;
}

struct DiscrepancyParams {
  Vec w_delta;  // diagonal weights, one per feature
  double kappa = 10.0;
  double delta0 = 0.0;
  double lambda_env = 0.5;
  double lambda_pred = 0.5;

  void validate() const {
    if (!(kappa > 0.0)) throw ConfigError("kappa must be positive");
    if (delta0 < 0.0) throw ConfigError("delta0 must be non-negative");
    if (lambda_env < 0.0 || lambda_pred < 0.0) {
      throw ConfigError("combination weights must be non-negative");
    }
    if (!(lambda_env + lambda_pred > 0.0)) {
      throw ConfigError("at least one combination weight must be positive");
    }
    for (double w : w_delta) {
      if (w < 0.0) throw ConfigError("w_delta must be non-negative");
    }
  }
};

inline double discrepancy(std::span<const double> x_next, std::span<const double> x_hat,
                          const DiscrepancyParams& p) {
  if (x_next.size() != x_hat.size() || p.w_delta.size() != x_next.size()) {
    throw ValidationError("discrepancy dimension mismatch");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < x_next.size(); ++i) {
    const double d = p.w_delta[i] * (x_next[i] - x_hat[i]);
    s += d * d;
  }
  return std::sqrt(s);
}

inline double pred_signal(double delta, const DiscrepancyParams& p) {
  return sigmoid(p.kappa * (delta - p.delta0));
}

inline double combine_cat(double c_env, double c_pred, const DiscrepancyParams& p) {
  const double total = p.lambda_env + p.lambda_pred;
  if (!(total > 0.0)) throw ConfigError("lambda_env + lambda_pred must be positive");
  return (p.lambda_env * c_env + p.lambda_pred * c_pred) / total;
}

/// Linear-interpolated percentile (q in [0, 1]) of an unsorted sample.
inline double percentile(Vec values, double q) {
  if (values.empty()) throw ValidationError("percentile of empty sample");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

/// Sets delta0 to the q-quantile of discrepancies on held transitions, so the
/// 0.5 crossing of c_pred sits at abnormal residuals.
inline void calibrate_offset(const SafeStateModel& model, std::span<const Transition> data,
                             DiscrepancyParams& p, double q = 0.95) {
  Vec d;
  d.reserve(data.size());
  for (const Transition& tr : data) {
    const Vec xh = model.predict(tr.x, tr.action, tr.context);
    d.push_back(discrepancy(tr.x_next, xh, p));
  }
  p.delta0 = percentile(std::move(d), q);
}

/// Fitted model plus parameters; evaluates c_pred for one observed transition.
struct PredictiveComponent {
  SafeStateModel model;
  DiscrepancyParams params;

  double signal(std::span<const double> x_prev, double action,
                std::span<const double> context, std::span<const double> x_next) const {
    const Vec xh = model.predict(x_prev, action, context);
    return pred_signal(discrepancy(x_next, xh, params), params);
  }
};

}  // namespace afferent
