#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "common.hpp"
#include "rng.hpp"

namespace forge {

/// Token layout: 0..2 = EE position (m), 3 = yaw (rad), 4..5 reserved, 6 = gripper.
constexpr int kDimX = 0;
constexpr int kDimYaw = 3;
constexpr int kDimGrip = 6;
constexpr int kDefaultActionDim = 7;

/**
 * Dense row-major sequence of action tokens (length x dim doubles).
 * Token indices are 0-based throughout the library.
 */
struct Trajectory {
  int length = 0;
  int dim = 0;
  std::vector<double> data;

  Trajectory() = default;
  Trajectory(int len, int d, double fill = 0.0)
      : length(len), dim(d), data(static_cast<size_t>(len) * d, fill) {}

  double& at(int token, int d) { return data[static_cast<size_t>(token) * dim + d]; }
  double at(int token, int d) const { return data[static_cast<size_t>(token) * dim + d]; }

  double* row(int token) { return data.data() + static_cast<size_t>(token) * dim; }
  const double* row(int token) const { return data.data() + static_cast<size_t>(token) * dim; }

  Vec3 pos(int token) const { return {at(token, 0), at(token, 1), at(token, 2)}; }
  void set_pos(int token, const Vec3& p) {
    at(token, 0) = p[0];
    at(token, 1) = p[1];
    at(token, 2) = p[2];
  }

  bool same_shape(const Trajectory& o) const { return length == o.length && dim == o.dim; }

  bool finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  static Trajectory gaussian(int len, int d, Rng& rng) {
    Trajectory t(len, d);
    for (double& v : t.data) v = rng.gaussian();
    return t;
  }
};

/// Per-token diffusion timestep; value 0 means "clean / frozen at data".
using TimestepVector = std::vector<int>;

/// Binary token mask; masks built from a meta-action are one contiguous run.
using SegmentMask = std::vector<uint8_t>;

/**
 * Stage structure of a trajectory: which tokens end a stage, the positional
 * goal attached to each stage end, and the final goal.
 */
struct StageAnnotation {
  std::vector<uint8_t> end_mask;          // length L, 1 at stage-end tokens
  std::vector<Vec3> stage_goals;          // length L, valid where end_mask = 1
  Vec3 final_goal{0, 0, 0};
  std::vector<int> boundaries;            // sorted 0-based stage-end indices

  int length() const { return static_cast<int>(end_mask.size()); }

  static StageAnnotation from_mask(std::vector<uint8_t> mask, std::vector<Vec3> goals, Vec3 final) {
    StageAnnotation a;
    a.end_mask = std::move(mask);
    a.stage_goals = std::move(goals);
    a.final_goal = final;
    for (int i = 0; i < a.length(); ++i)
      if (a.end_mask[i]) a.boundaries.push_back(i);
    return a;
  }

  /// Stage ordinal per token: tokens up to and including boundary j carry j.
  std::vector<int> ordinals() const {
    std::vector<int> ord(end_mask.size(), 0);
    int stage = 0;
    for (size_t i = 0; i < end_mask.size(); ++i) {
      ord[i] = stage;
      if (end_mask[i]) ++stage;
    }
    return ord;
  }

  /// Token runs [start, end] per stage; a trailing run past the last
  /// boundary (if any) is included without a goal.
  std::vector<std::pair<int, int>> runs() const {
    std::vector<std::pair<int, int>> out;
    int start = 0;
    for (int b : boundaries) {
      out.emplace_back(start, b);
      start = b + 1;
    }
    if (start < length()) out.emplace_back(start, length() - 1);
    return out;
  }
};

}  // namespace forge
