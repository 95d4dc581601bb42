#pragma once

#include <cmath>
#include <vector>

#include "trajectory.hpp"

namespace forge {

/**
 * Variance-preserving noise schedule: cumulative products alpha_bar[0..T]
 * with alpha_bar[0] = 1 and a strictly decreasing tail floored at kAlphaBarFloor.
 */
struct NoiseSchedule {
  int steps = 0;                   // T
  std::vector<double> alpha_bar;   // T + 1 entries

  double at(int t) const { return alpha_bar[t]; }
  double sqrt_ab(int t) const { return std::sqrt(alpha_bar[t]); }
  double sqrt_one_minus_ab(int t) const { return std::sqrt(1.0 - alpha_bar[t]); }

  bool valid_timestep(int t) const { return t >= 0 && t <= steps; }
};

constexpr double kAlphaBarFloor = 1e-5;
constexpr double kCosineOffset = 0.008;

/**
 * Cosine schedule. The raw cosine form reaches ~0 at t = T, which would blow
 * up the clean estimator; entries below the floor are replaced by a geometric
 * descent from the last unfloored value down to the floor at t = T, keeping
 * the sequence strictly decreasing inside [floor, 1].
 */
inline NoiseSchedule build_cosine_schedule(int T) {
  if (T < 1) throw_invalid("build_cosine_schedule: step count must be >= 1");
  NoiseSchedule s;
  s.steps = T;
  s.alpha_bar.resize(T + 1);
  const double denom = std::cos((kCosineOffset / (1.0 + kCosineOffset)) * M_PI / 2.0);
  const double denom2 = denom * denom;
  auto raw = [&](int t) {
    const double u = ((static_cast<double>(t) / T) + kCosineOffset) / (1.0 + kCosineOffset);
    const double c = std::cos(u * M_PI / 2.0);
    return (c * c) / denom2;
  };
  int first_floored = T + 1;
  for (int t = 0; t <= T; ++t) {
    const double v = std::min(1.0, raw(t));
    if (v < kAlphaBarFloor) {
      first_floored = t;
      break;
    }
    s.alpha_bar[t] = v;
  }
  if (first_floored <= T) {
    const int j = first_floored;
    const double top = s.alpha_bar[j - 1];
    const double span = static_cast<double>(T - (j - 1));
    for (int t = j; t < T; ++t)
      s.alpha_bar[t] = top * std::pow(kAlphaBarFloor / top, (t - (j - 1)) / span);
    s.alpha_bar[T] = kAlphaBarFloor;
  }
  return s;
}

inline void check_shapes(const Trajectory& a, const Trajectory& b, const TimestepVector& t,
                         const NoiseSchedule& sched, const char* who) {
  if (!a.same_shape(b)) throw_invalid(std::string(who) + ": trajectory shape mismatch");
  if (static_cast<int>(t.size()) != a.length) throw_invalid(std::string(who) + ": timestep length mismatch");
  for (int v : t)
    if (!sched.valid_timestep(v)) throw_invalid(std::string(who) + ": timestep out of range");
}

/// x_t[i] = sqrt(ab_t) x0[i] + sqrt(1 - ab_t) eps[i]; t = 0 tokens pass through untouched.
inline Trajectory forward_noise(const Trajectory& x0, const Trajectory& eps, const TimestepVector& t,
                                const NoiseSchedule& sched) {
  check_shapes(x0, eps, t, sched, "forward_noise");
  Trajectory out(x0.length, x0.dim);
  for (int i = 0; i < x0.length; ++i) {
    const double* xr = x0.row(i);
    const double* er = eps.row(i);
    double* or_ = out.row(i);
    if (t[i] == 0) {
      for (int d = 0; d < x0.dim; ++d) or_[d] = xr[d];
    } else {
      const double a = sched.sqrt_ab(t[i]);
      const double b = sched.sqrt_one_minus_ab(t[i]);
      for (int d = 0; d < x0.dim; ++d) or_[d] = a * xr[d] + b * er[d];
    }
  }
  return out;
}

/// xhat0[i] = (x_t[i] - sqrt(1 - ab_t) eps_pred[i]) / sqrt(ab_t); identity at t = 0.
inline Trajectory clean_estimate(const Trajectory& x_t, const Trajectory& eps_pred,
                                 const TimestepVector& t, const NoiseSchedule& sched) {
  check_shapes(x_t, eps_pred, t, sched, "clean_estimate");
  Trajectory out(x_t.length, x_t.dim);
  for (int i = 0; i < x_t.length; ++i) {
    const double* xr = x_t.row(i);
    const double* er = eps_pred.row(i);
    double* or_ = out.row(i);
    if (t[i] == 0) {
      for (int d = 0; d < x_t.dim; ++d) or_[d] = xr[d];
    } else {
      const double a = sched.sqrt_ab(t[i]);
      const double b = sched.sqrt_one_minus_ab(t[i]);
      for (int d = 0; d < x_t.dim; ++d) or_[d] = (xr[d] - b * er[d]) / a;
    }
  }
  return out;
}

/**
 * Masked DDIM blend: masked tokens move to
 * sqrt(ab_{t_prev}) xhat0 + sqrt(1 - ab_{t_prev}) eta, unmasked tokens are
 * copied from x_t bit-exactly.
 */
inline Trajectory ddim_blend(const Trajectory& x_t, const Trajectory& x_hat0, const Trajectory& eta,
                             const TimestepVector& t_prev, const NoiseSchedule& sched,
                             const SegmentMask& mask) {
  check_shapes(x_t, x_hat0, t_prev, sched, "ddim_blend");
  if (!x_t.same_shape(eta)) throw_invalid("ddim_blend: eta shape mismatch");
  if (static_cast<int>(mask.size()) != x_t.length) throw_invalid("ddim_blend: mask length mismatch");
  Trajectory out(x_t.length, x_t.dim);
  for (int i = 0; i < x_t.length; ++i) {
    double* or_ = out.row(i);
    if (!mask[i]) {
      const double* xr = x_t.row(i);
      for (int d = 0; d < x_t.dim; ++d) or_[d] = xr[d];
    } else if (t_prev[i] == 0) {
      const double* hr = x_hat0.row(i);
      for (int d = 0; d < x_t.dim; ++d) or_[d] = hr[d];
    } else {
      const double a = sched.sqrt_ab(t_prev[i]);
      const double b = sched.sqrt_one_minus_ab(t_prev[i]);
      const double* hr = x_hat0.row(i);
      const double* er = eta.row(i);
      for (int d = 0; d < x_t.dim; ++d) or_[d] = a * hr[d] + b * er[d];
    }
  }
  return out;
}

}  // namespace forge
