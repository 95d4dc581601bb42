#pragma once

#include <algorithm>
#include <vector>

#include "common.hpp"
#include "trajectory.hpp"

namespace forge {

enum class ObjectKind : int { movable = 0, container = 1, obstacle = 2 };

inline const char* kind_name(ObjectKind k) {
  switch (k) {
    case ObjectKind::movable: return "movable";
    case ObjectKind::container: return "container";
    case ObjectKind::obstacle: return "obstacle";
  }
  return "?";
}

struct WorldObject {
  int id = 0;
  ObjectKind kind = ObjectKind::movable;
  Vec3 position{0, 0, 0};
  double radius = 0.02;
  double rim_height = 0.0;  // containers only
};

struct EndEffector {
  Vec3 position{0, 0, 0};
  double yaw = 0.0;
  double gripper = 0.0;  // [0, 1]
  double radius = 0.008;
};

/// Gripper closing within this distance of a movable object's center attaches it.
constexpr double kGraspRadius = 0.02;

/**
 * 2.5D tabletop state. Objects are spheres; containers are open vessels
 * (they do not participate in collision terms, their radius is the
 * aperture). At most one object can be attached to the EE; an attached
 * object tracks the EE position.
 */
struct WorldState {
  std::vector<WorldObject> objects;
  EndEffector ee;
  int attachment = -1;          // held object id, -1 = none
  bool hard_collision = false;  // event flag set by the last step

  const WorldObject* find(int id) const {
    for (const auto& o : objects)
      if (o.id == id) return &o;
    return nullptr;
  }
  WorldObject* find(int id) {
    for (auto& o : objects)
      if (o.id == id) return &o;
    return nullptr;
  }
};

inline bool collidable(const WorldObject& o) { return o.kind != ObjectKind::container; }

/**
 * Execute one absolute-pose token. Order inside the step: move EE (held
 * object tracks it), check hard collisions against non-held collidable
 * objects, then apply the gripper action (attach / release). The ordering
 * means a release never flags against the object just let go.
 *
 * Hard collision: penetration deeper than half the combined radii.
 */
inline WorldState step_world(const WorldState& world, const double* token, int dim) {
  WorldState next = world;
  next.hard_collision = false;
  for (int d = 0; d < std::min(dim, 3); ++d) next.ee.position[d] = token[d];
  if (dim > kDimYaw) next.ee.yaw = token[kDimYaw];
  const double grip_raw = dim > kDimGrip ? token[kDimGrip] : 0.0;
  next.ee.gripper = std::clamp(grip_raw, 0.0, 1.0);

  if (next.attachment >= 0)
    if (WorldObject* held = next.find(next.attachment)) held->position = next.ee.position;

  for (const auto& o : next.objects) {
    if (!collidable(o) || o.id == next.attachment) continue;
    const double combined = next.ee.radius + o.radius;
    const double penetration = combined - dist(next.ee.position, o.position);
    if (penetration > 0.5 * combined) next.hard_collision = true;
  }

  const bool closing = next.ee.gripper >= 0.5;
  if (closing && next.attachment < 0) {
    int best = -1;
    double best_d = 0.0;
    for (const auto& o : next.objects) {
      if (o.kind != ObjectKind::movable) continue;
      const double d = dist(next.ee.position, o.position);
      if (d <= kGraspRadius && (best < 0 || d < best_d)) {
        best_d = d;
        best = o.id;
      }
    }
    next.attachment = best;
  } else if (!closing && next.attachment >= 0) {
    next.attachment = -1;  // object stays where it was released
  }
  return next;
}

inline WorldState step_world(const WorldState& world, const Trajectory& traj, int token) {
  return step_world(world, traj.row(token), traj.dim);
}

/**
 * Kinematic surrogate for how object poses evolve along a candidate
 * trajectory: mirrors step_world's grasp/release rules, tracking which
 * object is held after each token and where each object ends up.
 */
struct AttachmentTimeline {
  std::vector<int> held;            // length L+1; held[0] = initial attachment
  std::vector<Vec3> final_pos;      // per object (world order)
  std::vector<int> source_token;    // token whose EE position the object took, -1 = static
};

inline AttachmentTimeline simulate_attachment(const Trajectory& x, const WorldState& world) {
  AttachmentTimeline tl;
  const int L = x.length;
  tl.held.assign(L + 1, -1);
  tl.held[0] = world.attachment;
  tl.final_pos.resize(world.objects.size());
  tl.source_token.assign(world.objects.size(), -1);
  for (size_t j = 0; j < world.objects.size(); ++j) tl.final_pos[j] = world.objects[j].position;

  auto obj_index = [&](int id) -> int {
    for (size_t j = 0; j < world.objects.size(); ++j)
      if (world.objects[j].id == id) return static_cast<int>(j);
    return -1;
  };

  int held = world.attachment;
  for (int i = 0; i < L; ++i) {
    const Vec3 p = x.pos(i);
    if (held >= 0) {
      const int j = obj_index(held);
      tl.final_pos[j] = p;
      tl.source_token[j] = i;
    }
    const bool closing = x.at(i, kDimGrip) >= 0.5;
    if (closing && held < 0) {
      int best = -1;
      double best_d = 0.0;
      for (size_t j = 0; j < world.objects.size(); ++j) {
        if (world.objects[j].kind != ObjectKind::movable) continue;
        const double d = dist(p, tl.final_pos[j]);
        if (d <= kGraspRadius && (best < 0 || d < best_d)) {
          best_d = d;
          best = world.objects[j].id;
        }
      }
      if (best >= 0) {
        held = best;
        const int j = obj_index(held);
        tl.final_pos[j] = p;
        tl.source_token[j] = i;
      }
    } else if (!closing && held >= 0) {
      held = -1;
    }
    tl.held[i + 1] = held;
  }
  return tl;
}

/// True when the object is excluded from the sweep segment (i, i+1): held
/// near either endpoint. The window extends one token each way beyond the
/// endpoints so approach and retreat segments around a grasp or release do
/// not count the object being handled.
inline bool sweep_excluded(const AttachmentTimeline& tl, int seg, int object_id) {
  const int n = static_cast<int>(tl.held.size());
  for (int j = std::max(0, seg - 1); j <= std::min(n - 1, seg + 3); ++j)
    if (tl.held[j] == object_id) return true;
  return false;
}

/**
 * One penetrating sweep contact: segment (token, token+1) against the object
 * whose implied position came from `source_token` (-1 = static).
 */
struct SweepContact {
  int token = 0;
  int object_index = 0;
  int source_token = -1;
  double s = 0.0;         // minimizing segment parameter
  double penetration = 0.0;
  Vec3 object_pos{0, 0, 0};
};

/**
 * Swept-capsule clearance scan: for every consecutive token pair and every
 * collidable object not being handled at that time, the penetration of the
 * safety margin (r_EE + r_o) against the object's position as of that
 * segment. Objects that were carried and released are checked at their
 * release position.
 */
inline std::vector<SweepContact> sweep_contacts(const Trajectory& traj, const WorldState& world,
                                                const AttachmentTimeline& tl) {
  std::vector<SweepContact> out;
  if (traj.length < 2) return out;
  std::vector<Vec3> pos(world.objects.size());
  std::vector<int> src(world.objects.size(), -1);
  for (size_t j = 0; j < world.objects.size(); ++j) pos[j] = world.objects[j].position;
  auto obj_index = [&](int id) -> int {
    for (size_t j = 0; j < world.objects.size(); ++j)
      if (world.objects[j].id == id) return static_cast<int>(j);
    return -1;
  };
  for (int i = 0; i < traj.length; ++i) {
    if (tl.held[i] >= 0) {
      const int j = obj_index(tl.held[i]);
      pos[j] = traj.pos(i);
      src[j] = i;
    }
    if (i + 1 >= traj.length) break;
    const Vec3 a = traj.pos(i);
    const Vec3 b = traj.pos(i + 1);
    for (size_t j = 0; j < world.objects.size(); ++j) {
      const WorldObject& o = world.objects[j];
      if (!collidable(o) || sweep_excluded(tl, i, o.id)) continue;
      SweepContact c;
      const double d = seg_point_dist(a, b, pos[j], &c.s);
      const double pen = (world.ee.radius + o.radius) - d;
      if (pen <= 0.0) continue;
      c.token = i;
      c.object_index = static_cast<int>(j);
      c.source_token = src[j];
      c.penetration = pen;
      c.object_pos = pos[j];
      out.push_back(c);
    }
  }
  return out;
}

/// Sum of squared margin penetrations along the EE sweep.
inline double collision_cost(const Trajectory& traj, const WorldState& world) {
  const AttachmentTimeline tl = simulate_attachment(traj, world);
  double cost = 0.0;
  for (const SweepContact& c : sweep_contacts(traj, world, tl)) cost += c.penetration * c.penetration;
  return cost;
}

}  // namespace forge
