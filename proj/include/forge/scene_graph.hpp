#pragma once

#include <string>
#include <vector>

#include "common.hpp"
#include "task.hpp"
#include "world.hpp"

namespace forge {

enum class Relation : int { in = 0, on_top_of = 1, left_of = 2, aligned_with = 3, holding = 4 };

inline const char* relation_name(Relation r) {
  switch (r) {
    case Relation::in: return "in";
    case Relation::on_top_of: return "on-top-of";
    case Relation::left_of: return "left-of";
    case Relation::aligned_with: return "aligned-with";
    case Relation::holding: return "holding";
  }
  return "?";
}

/// Geometric parameters of a relation predicate. `inverted_on_top_hinge`
/// flips the perpendicular hinge of on-top-of to the legacy orientation
/// (penalizing small offsets instead of large ones).
struct RelationParams {
  double perp_tol = 0.05;    // allowed perpendicular offset (m)
  double h_min = 0.02;       // required height difference (m)
  double gamma = 50.0;       // satisfaction sharpness
  double margin = 0.02;      // left-of margin (m)
  double yaw_tol = 0.1;      // aligned-with tolerance (rad)
  bool inverted_on_top_hinge = false;

  void validate() const {
    if (perp_tol < 0 || h_min < 0 || gamma <= 0 || margin < 0 || yaw_tol < 0)
      throw_invalid("RelationParams: parameters must be nonnegative (gamma positive)");
  }
};

/// Pose of a scene body as seen by the predicates.
struct BodyPose {
  Vec3 position{0, 0, 0};
  double yaw = 0.0;
  double radius = 0.0;
  double rim_height = 0.0;
};

/**
 * Hinge-quadratic relation potential: nonnegative, zero exactly when the
 * relation geometrically holds within tolerance.
 */
inline double relation_phi(Relation rel, const BodyPose& subject, const BodyPose& object,
                           const RelationParams& params) {
  params.validate();
  const double perp = dist_xy(subject.position, object.position);
  const double dz = subject.position[2] - object.position[2];
  switch (rel) {
    case Relation::on_top_of: {
      const double h1 = params.inverted_on_top_hinge ? std::max(0.0, params.perp_tol - perp)
                                                     : std::max(0.0, perp - params.perp_tol);
      const double h2 = std::max(0.0, params.h_min - dz);
      return h1 * h1 + h2 * h2;
    }
    case Relation::in: {
      const double h1 = std::max(0.0, perp - (object.radius - subject.radius));
      const double h2 = std::max(0.0, subject.position[2] - (object.position[2] + object.rim_height));
      return h1 * h1 + h2 * h2;
    }
    case Relation::left_of: {
      const double h = std::max(0.0, subject.position[0] - object.position[0] + params.margin);
      return h * h;
    }
    case Relation::aligned_with: {
      const double h = std::max(0.0, std::fabs(wrap_angle(subject.yaw - object.yaw)) - params.yaw_tol);
      return h * h;
    }
    case Relation::holding: {
      const double h = std::max(0.0, dist(subject.position, object.position) - kGraspRadius);
      return h * h;
    }
  }
  return 0.0;
}

/// Satisfaction score sigma(-gamma * phi): 0.5 at phi = 0, decreasing to 0.
inline double relation_sat(double phi, double gamma) {
  if (gamma <= 0) throw_invalid("relation_sat: gamma must be positive");
  return sigmoid(-gamma * phi);
}

constexpr int kNodeEE = -2;
constexpr int kNodeTable = -3;
constexpr double kSatisfiedTol = 1e-4;

struct SceneEdge {
  Relation rel = Relation::in;
  int subject = 0;
  int object = 0;
  RelationParams params;
  bool goal = false;
  bool satisfied = false;
};

struct SceneGraph {
  std::vector<int> node_ids;  // object ids plus kNodeEE and kNodeTable
  std::vector<SceneEdge> edges;

  int unmet_goals() const {
    int n = 0;
    for (const auto& e : edges)
      if (e.goal && !e.satisfied) ++n;
    return n;
  }
  bool goals_met() const { return unmet_goals() == 0; }
};

inline BodyPose pose_of(const WorldState& world, int node_id) {
  if (node_id == kNodeEE) return {world.ee.position, world.ee.yaw, world.ee.radius, 0.0};
  if (node_id == kNodeTable) return {{0, 0, 0}, 0.0, 0.0, 0.0};
  const WorldObject* o = world.find(node_id);
  if (!o) throw_invalid("pose_of: unknown object id");
  return {o->position, 0.0, o->radius, o->rim_height};
}

/**
 * Instantiate the scene graph for a task: one node per object plus the EE
 * and the table, goal edges expanded from the instruction template, and
 * `satisfied` evaluated from current geometry.
 */
inline SceneGraph build_scene_graph(const WorldState& world, const TaskSpec& task,
                                    const RelationParams& params = {}) {
  SceneGraph g;
  for (const auto& o : world.objects) g.node_ids.push_back(o.id);
  g.node_ids.push_back(kNodeEE);
  g.node_ids.push_back(kNodeTable);

  auto require_id = [&](int id) {
    if (!world.find(id)) throw_invalid("build_scene_graph: task references unknown object id");
  };
  auto add_goal = [&](Relation rel, int subject, int object) {
    require_id(subject);
    require_id(object);
    SceneEdge e;
    e.rel = rel;
    e.subject = subject;
    e.object = object;
    e.params = params;
    e.goal = true;
    e.satisfied =
        relation_phi(rel, pose_of(world, subject), pose_of(world, object), params) < kSatisfiedTol;
    g.edges.push_back(e);
  };

  switch (task.tmpl) {
    case TaskTemplate::put_in:
      add_goal(Relation::in, task.subjects.at(0), task.target);
      break;
    case TaskTemplate::stack_on:
      add_goal(Relation::on_top_of, task.subjects.at(0), task.target);
      break;
    case TaskTemplate::move_left_of:
      add_goal(Relation::left_of, task.subjects.at(0), task.target);
      break;
    case TaskTemplate::two_object_put_in:
      add_goal(Relation::in, task.subjects.at(0), task.target);
      add_goal(Relation::in, task.subjects.at(1), task.target);
      break;
  }

  if (world.attachment >= 0) {
    SceneEdge e;
    e.rel = Relation::holding;
    e.subject = kNodeEE;
    e.object = world.attachment;
    e.params = params;
    e.goal = false;
    e.satisfied = true;
    g.edges.push_back(e);
  }
  return g;
}

}  // namespace forge
