#pragma once

#include <vector>

#include "guidance.hpp"
#include "head.hpp"
#include "schedule.hpp"

namespace forge {

/**
 * One denoising edit: which segment to regenerate and how. `start` is the
 * 0-based first token of the segment; tokens outside [start, start+len)
 * stay frozen.
 */
struct MetaAction {
  int start = 0;
  int len = 8;
  int stride = 4;
  double guidance = 0.0;       // w in [0, 5]
  double temperature = 1.0;    // tau in [0.5, 1.0]; 0 allowed for deterministic runs
  int t_start = 700;

  void validate(int L, int T) const {
    if (start < 0 || len < 1 || start + len > L) throw_invalid("MetaAction: segment out of range");
    if (stride < 1) throw_invalid("MetaAction: stride must be >= 1");
    if (guidance < 0.0) throw_invalid("MetaAction: guidance must be nonnegative");
    if (temperature < 0.0) throw_invalid("MetaAction: temperature must be nonnegative");
    if (t_start < 1 || t_start > T) throw_invalid("MetaAction: t_start out of schedule range");
  }
};

/// Contiguous token mask; out-of-range segments are rejected, not clipped.
inline SegmentMask segment_mask(int start, int len, int L) {
  if (start < 0 || len < 1 || start + len > L) throw_invalid("segment_mask: segment out of range");
  SegmentMask m(L, 0);
  for (int i = start; i < start + len; ++i) m[i] = 1;
  return m;
}

struct SamplerConfig {
  bool flip_guidance_sign = false;  // restores the ascend-U update
  double step_cap = 0.05;           // max per-token clean-estimate displacement per step (m)
};

/// Strictly decreasing timestep grid t_start, t_start - s, ..., 0.
inline std::vector<int> denoise_grid(int t_start, int stride) {
  std::vector<int> grid{t_start};
  while (grid.back() > 0) grid.push_back(std::max(0, grid.back() - stride));
  return grid;
}

/**
 * Segment-masked jumpy DDIM with geometry guidance. Walks the stride grid
 * from t_start to 0; at each step predicts noise on the segment, forms the
 * clean estimate, biases the noise estimate down the guidance potential
 * (gradient computed once per step and shared across the segment), then
 * blends toward the previous grid level under the segment mask. The
 * complement of the segment is never written. Returns the clean estimate
 * from the last step.
 *
 * The predictor is any callable (x_t, timesteps, first, last) -> Trajectory;
 * the HeadParams overload below wires in the learned head.
 */
template <class Predictor>
Trajectory partial_denoise_with(const Trajectory& x_init, const MetaAction& a, Predictor&& predict,
                                const NoiseSchedule& sched, const SceneGraph& graph,
                                const StageAnnotation& ann, const WorldState& world,
                                const GuidanceWeights& gw, Rng& rng,
                                const SamplerConfig& cfg = {}, int* nfe = nullptr) {
  a.validate(x_init.length, sched.steps);
  const int L = x_init.length;
  const int d = x_init.dim;
  const int seg_lo = a.start;
  const int seg_hi = a.start + a.len;
  const SegmentMask mask = segment_mask(a.start, a.len, L);
  const std::vector<int> grid = denoise_grid(a.t_start, a.stride);

  Trajectory x = x_init;
  Trajectory xhat = x_init;
  TimestepVector tvec(L, 0);
  TimestepVector tprev(L, 0);
  Trajectory eta(L, d);

  for (size_t j = 0; j + 1 < grid.size(); ++j) {
    const int t_j = grid[j];
    const int t_p = grid[j + 1];
    for (int i = seg_lo; i < seg_hi; ++i) {
      tvec[i] = t_j;
      tprev[i] = t_p;
    }

    Trajectory eps = predict(x, tvec, seg_lo, seg_hi);
    if (nfe) ++*nfe;
    xhat = clean_estimate(x, eps, tvec, sched);

    if (a.guidance > 0.0) {
      const Trajectory gu = grad_U(xhat, graph, ann, world, gw);
      const double inv_sab = 1.0 / sched.sqrt_ab(t_j);
      const double to_xhat = sched.sqrt_one_minus_ab(t_j) * inv_sab;
      const double sign = cfg.flip_guidance_sign ? -1.0 : 1.0;
      for (int i = seg_lo; i < seg_hi; ++i) {
        // Cap the induced clean-estimate displacement per token; the raw
        // coefficient grows without bound as alpha_bar approaches its floor.
        double disp2 = 0.0;
        for (int c = 0; c < d; ++c) {
          const double v = to_xhat * a.guidance * inv_sab * gu.at(i, c);
          disp2 += v * v;
        }
        double scale = 1.0;
        const double disp = std::sqrt(disp2);
        if (cfg.step_cap > 0.0 && disp > cfg.step_cap) scale = cfg.step_cap / disp;
        for (int c = 0; c < d; ++c)
          eps.at(i, c) += sign * scale * a.guidance * inv_sab * gu.at(i, c);
      }
      xhat = clean_estimate(x, eps, tvec, sched);
    }

    if (a.temperature > 0.0) {
      for (int i = seg_lo; i < seg_hi; ++i)
        for (int c = 0; c < d; ++c) eta.at(i, c) = a.temperature * rng.gaussian();
    } else {
      for (int i = seg_lo; i < seg_hi; ++i)
        for (int c = 0; c < d; ++c) eta.at(i, c) = 0.0;
    }

    x = ddim_blend(x, xhat, eta, tprev, sched, mask);
  }
  // xhat's complement equals x_init (clean estimate is the identity at t=0).
  return xhat;
}

inline Trajectory partial_denoise(const Trajectory& x_init, const MetaAction& a,
                                  const HeadParams& params, const std::vector<double>& context,
                                  const NoiseSchedule& sched, const SceneGraph& graph,
                                  const StageAnnotation& ann, const WorldState& world,
                                  const GuidanceWeights& gw, Rng& rng,
                                  const SamplerConfig& cfg = {}, int* nfe = nullptr) {
  if (sched.steps != params.cfg.schedule_steps)
    throw_invalid("partial_denoise: schedule horizon differs from the head's");
  const StageContext sc = StageContext::from(ann);
  auto predict = [&](const Trajectory& x_t, const TimestepVector& t, int first, int last) {
    return predict_noise_range(x_t, context, t, params, first, last, &sc);
  };
  return partial_denoise_with(x_init, a, predict, sched, graph, ann, world, gw, rng, cfg, nfe);
}

}  // namespace forge
