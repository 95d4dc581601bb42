#pragma once

#include <algorithm>
#include <limits>
#include <vector>

#include "scene_graph.hpp"
#include "trajectory.hpp"
#include "world.hpp"

namespace forge {

/// EE height above a movable's center when grasping (inside the grasp
/// radius, outside the hard-collision core).
constexpr double kGraspZOffset = 0.018;
/// Pregrasp hover height above an object center.
constexpr double kHoverZ = 0.06;
/// Transport height while carrying.
constexpr double kCarryZ = 0.12;
/// Vertical pop after releasing, before the next lateral move.
constexpr double kRetreatZ = 0.05;
/// Drop depth below a container's rim top.
constexpr double kDropBelowRim = 0.01;

struct GoalAnchor {
  Vec3 position{0, 0, 0};
  int edge_index = -1;
  bool grasp = false;  // approach the subject vs. land the placement
};

/// Lateral spread of drop points when several objects share a container.
constexpr double kDropSlotSpread = 0.0225;

/// Ordinal of this goal edge among in-edges targeting the same container;
/// placements are spread laterally so drops never coincide.
inline int container_slot(const SceneGraph& graph, int edge_index) {
  const SceneEdge& e = graph.edges[edge_index];
  if (e.rel != Relation::in) return 0;
  int slot = 0;
  for (int i = 0; i < edge_index; ++i)
    if (graph.edges[i].goal && graph.edges[i].rel == Relation::in &&
        graph.edges[i].object == e.object)
      ++slot;
  return slot;
}

inline Vec3 place_anchor(const SceneEdge& edge, const WorldState& world, int slot = 0) {
  const WorldObject* subject = world.find(edge.subject);
  const WorldObject* object = world.find(edge.object);
  if (!subject || !object) throw_invalid("place_anchor: unknown edge endpoint");
  switch (edge.rel) {
    case Relation::in: {
      const double dx = (slot % 2 == 0 ? -1.0 : 1.0) * kDropSlotSpread;
      const double dy = (slot / 2) * 0.03;
      return {object->position[0] + dx, object->position[1] + dy,
              object->position[2] + object->rim_height - kDropBelowRim};
    }
    case Relation::on_top_of:
      return {object->position[0], object->position[1],
              object->position[2] + object->radius + subject->radius};
    case Relation::left_of:
      return {object->position[0] - (edge.params.margin + subject->radius + object->radius + 0.01),
              object->position[1], std::max(object->position[2], 0.03)};
    default:
      return object->position;
  }
}

/// Plausible subgoal positions for the unmet goal edges: where to grasp each
/// pending subject and where to land it.
inline std::vector<GoalAnchor> goal_anchors(const SceneGraph& graph, const WorldState& world) {
  std::vector<GoalAnchor> out;
  for (size_t e = 0; e < graph.edges.size(); ++e) {
    const SceneEdge& edge = graph.edges[e];
    if (!edge.goal || edge.satisfied) continue;
    if (world.attachment != edge.subject) {
      const WorldObject* subject = world.find(edge.subject);
      if (subject)
        out.push_back({subject->position + Vec3{0, 0, kGraspZOffset}, static_cast<int>(e), true});
    }
    out.push_back({place_anchor(edge, world, container_slot(graph, static_cast<int>(e))),
                   static_cast<int>(e), false});
  }
  return out;
}

/// Position the planner should currently be moving toward: the grasp anchor
/// of the first pending subject, or its placement once held.
inline Vec3 active_goal(const SceneGraph& graph, const WorldState& world, bool* found = nullptr) {
  for (size_t e = 0; e < graph.edges.size(); ++e) {
    const SceneEdge& edge = graph.edges[e];
    if (!edge.goal || edge.satisfied) continue;
    if (found) *found = true;
    if (world.attachment == edge.subject)
      return place_anchor(edge, world, container_slot(graph, static_cast<int>(e)));
    const WorldObject* subject = world.find(edge.subject);
    if (subject) return subject->position + Vec3{0, 0, kGraspZOffset};
  }
  if (found) *found = false;
  return world.ee.position;
}

/**
 * Nominal stage layout implied by the instruction alone: reach, grasp,
 * transport, place per pending object, boundaries spread evenly over the
 * window, goals at the corresponding anchors. Used where no decoded tokens
 * exist yet (the first reference decode) and by the open-loop baseline.
 */
inline StageAnnotation nominal_annotation(const SceneGraph& graph, const WorldState& world,
                                          int L) {
  std::vector<Vec3> goal_seq;
  for (size_t e = 0; e < graph.edges.size(); ++e) {
    const SceneEdge& edge = graph.edges[e];
    if (!edge.goal || edge.satisfied) continue;
    const WorldObject* subject = world.find(edge.subject);
    if (!subject) continue;
    const Vec3 drop = place_anchor(edge, world, container_slot(graph, static_cast<int>(e)));
    goal_seq.push_back(subject->position + Vec3{0, 0, kHoverZ});
    goal_seq.push_back(subject->position + Vec3{0, 0, kGraspZOffset});
    goal_seq.push_back({drop[0], drop[1], kCarryZ});
    goal_seq.push_back(drop);
  }
  std::vector<uint8_t> mask(L, 0);
  std::vector<Vec3> goals(L, Vec3{0, 0, 0});
  Vec3 final_goal{0, 0, 0};
  if (!goal_seq.empty()) {
    const int n = static_cast<int>(goal_seq.size());
    for (int s = 0; s < n; ++s) {
      const int b = std::min(L - 1, (s + 1) * L / n - 1);
      mask[b] = 1;
      goals[b] = goal_seq[s];
    }
    final_goal = goal_seq.back();
  }
  return StageAnnotation::from_mask(std::move(mask), std::move(goals), final_goal);
}

/// Shortest stage the boundary predictor will report.
constexpr int kMinStageGap = 4;

/**
 * Stage boundaries read off a decoded trajectory: gripper threshold
 * crossings plus low-speed local minima, thinned to a minimum gap (gripper
 * events take precedence, then slower minima), always including the final
 * token. No stage labels are consumed.
 */
inline std::vector<int> predict_boundaries(const Trajectory& decoded, int t_now,
                                           double speed_eps = 0.004) {
  const int L = decoded.length;
  std::vector<int> picked;
  auto far_enough = [&](int i) {
    for (int b : picked)
      if (std::abs(b - i) < kMinStageGap) return false;
    return true;
  };

  // gripper transitions first; chatter collapses to the first of each cluster
  for (int i = std::max(1, t_now + 1); i < L; ++i) {
    const bool prev = decoded.at(i - 1, kDimGrip) >= 0.5;
    const bool cur = decoded.at(i, kDimGrip) >= 0.5;
    if (prev != cur && far_enough(i)) picked.push_back(i);
  }
  if (far_enough(L - 1)) picked.push_back(L - 1);

  // speed minima, slowest first
  std::vector<std::pair<double, int>> minima;
  for (int i = std::max(2, t_now + 1); i + 1 < L; ++i) {
    const double s0 = dist(decoded.pos(i - 1), decoded.pos(i - 2));
    const double s1 = dist(decoded.pos(i), decoded.pos(i - 1));
    const double s2 = dist(decoded.pos(i + 1), decoded.pos(i));
    if (s1 < speed_eps && s1 <= s0 && s1 <= s2) minima.emplace_back(s1, i);
  }
  std::sort(minima.begin(), minima.end());
  for (const auto& [speed, i] : minima)
    if (far_enough(i)) picked.push_back(i);

  std::sort(picked.begin(), picked.end());
  return picked;
}

/// Nominal stage length when the decoded trajectory exposes no boundary
/// ahead of the prefix.
constexpr int kFallbackStageLen = 12;

/**
 * Test-time annotation: predicted boundaries with each stage goal snapped to
 * the nearest plausible subgoal anchor, and the final goal at the last
 * pending placement. When no boundary lands in the plannable range ahead of
 * the prefix, a synthetic one is inserted a nominal stage length out so the
 * segment window and stage anchoring stay defined.
 */
inline StageAnnotation predict_annotation(const Trajectory& decoded, const SceneGraph& graph,
                                          const WorldState& world, int t_now,
                                          double speed_eps = 0.004) {
  const int L = decoded.length;
  // Boundaries over the whole window: past ones keep the stage ordinals
  // aligned with training, future ones drive the segment window.
  std::vector<int> bounds = predict_boundaries(decoded, 0, speed_eps);
  const std::vector<GoalAnchor> anchors = goal_anchors(graph, world);
  {
    bool near = false;
    for (int b : bounds)
      if (b > t_now && b <= t_now + 2 * kFallbackStageLen) near = true;
    if (!near) {
      const int synth = std::min(L - 1, t_now + kFallbackStageLen);
      bounds.push_back(synth);
      std::sort(bounds.begin(), bounds.end());
      bounds.erase(std::unique(bounds.begin(), bounds.end()), bounds.end());
    }
  }

  std::vector<uint8_t> mask(L, 0);
  std::vector<Vec3> goals(L, Vec3{0, 0, 0});
  for (int b : bounds) {
    mask[b] = 1;
    Vec3 g = decoded.pos(b);
    double best = std::numeric_limits<double>::infinity();
    for (const GoalAnchor& a : anchors) {
      const double d = dist(decoded.pos(b), a.position);
      if (d < best) {
        best = d;
        g = a.position;
      }
    }
    goals[b] = g;
  }

  Vec3 final_goal = decoded.pos(L - 1);
  for (auto it = anchors.rbegin(); it != anchors.rend(); ++it) {
    if (!it->grasp) {
      final_goal = it->position;
      break;
    }
  }
  return StageAnnotation::from_mask(std::move(mask), std::move(goals), final_goal);
}

}  // namespace forge
