#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "scene_graph.hpp"
#include "trajectory.hpp"
#include "world.hpp"

namespace forge {

struct GuidanceWeights {
  double terminal = 1.0;
  double stage = 1.0;
  double relation = 1.0;
  double collision = 1.0;
};

/// Gradient of a relation potential with respect to both endpoint poses.
struct PoseGrad {
  Vec3 dpos{0, 0, 0};
  double dyaw = 0.0;
};

inline double relation_phi_grad(Relation rel, const BodyPose& subject, const BodyPose& object,
                                const RelationParams& params, PoseGrad& d_subject, PoseGrad& d_object) {
  d_subject = {};
  d_object = {};
  const double perp = dist_xy(subject.position, object.position);
  const double dz = subject.position[2] - object.position[2];
  const double dx = subject.position[0] - object.position[0];
  const double dy = subject.position[1] - object.position[1];

  auto add_perp_hinge = [&](double h, double sign) {
    // d(h^2)/dpos for h = max(0, sign*(perp - threshold)) style hinges
    if (h <= 0.0 || perp <= 0.0) return;
    const double c = 2.0 * h * sign / perp;
    d_subject.dpos[0] += c * dx;
    d_subject.dpos[1] += c * dy;
    d_object.dpos[0] -= c * dx;
    d_object.dpos[1] -= c * dy;
  };

  switch (rel) {
    case Relation::on_top_of: {
      double phi = 0.0;
      if (params.inverted_on_top_hinge) {
        const double h1 = std::max(0.0, params.perp_tol - perp);
        phi += h1 * h1;
        add_perp_hinge(h1, -1.0);
      } else {
        const double h1 = std::max(0.0, perp - params.perp_tol);
        phi += h1 * h1;
        add_perp_hinge(h1, 1.0);
      }
      const double h2 = std::max(0.0, params.h_min - dz);
      phi += h2 * h2;
      if (h2 > 0.0) {
        d_subject.dpos[2] += -2.0 * h2;
        d_object.dpos[2] += 2.0 * h2;
      }
      return phi;
    }
    case Relation::in: {
      const double h1 = std::max(0.0, perp - (object.radius - subject.radius));
      const double h2 =
          std::max(0.0, subject.position[2] - (object.position[2] + object.rim_height));
      add_perp_hinge(h1, 1.0);
      if (h2 > 0.0) {
        d_subject.dpos[2] += 2.0 * h2;
        d_object.dpos[2] += -2.0 * h2;
      }
      return h1 * h1 + h2 * h2;
    }
    case Relation::left_of: {
      const double h = std::max(0.0, dx + params.margin);
      if (h > 0.0) {
        d_subject.dpos[0] += 2.0 * h;
        d_object.dpos[0] += -2.0 * h;
      }
      return h * h;
    }
    case Relation::aligned_with: {
      const double w = wrap_angle(subject.yaw - object.yaw);
      const double h = std::max(0.0, std::fabs(w) - params.yaw_tol);
      if (h > 0.0) {
        const double sgn = w >= 0.0 ? 1.0 : -1.0;
        d_subject.dyaw += 2.0 * h * sgn;
        d_object.dyaw += -2.0 * h * sgn;
      }
      return h * h;
    }
    case Relation::holding: {
      const double d = dist(subject.position, object.position);
      const double h = std::max(0.0, d - kGraspRadius);
      if (h > 0.0 && d > 0.0) {
        const double c = 2.0 * h / d;
        d_subject.dpos = d_subject.dpos + c * (subject.position - object.position);
        d_object.dpos = d_object.dpos + (-c) * (subject.position - object.position);
      }
      return h * h;
    }
  }
  return 0.0;
}

/// Pose a graph node takes at the end of a candidate trajectory, together
/// with the token its position is tied to (-1 = static).
struct ImpliedPose {
  BodyPose pose;
  int pos_source = -1;  // token index whose position dims carry the gradient
  int yaw_source = -1;  // token index whose yaw dim carries the gradient
};

inline ImpliedPose implied_pose(int node_id, const Trajectory& x, const WorldState& world,
                                const AttachmentTimeline& tl) {
  ImpliedPose ip;
  const int last = x.length - 1;
  if (node_id == kNodeEE) {
    ip.pose = {x.pos(last), x.at(last, kDimYaw), world.ee.radius, 0.0};
    ip.pos_source = last;
    ip.yaw_source = last;
    return ip;
  }
  if (node_id == kNodeTable) {
    ip.pose = {{0, 0, 0}, 0.0, 0.0, 0.0};
    return ip;
  }
  for (size_t j = 0; j < world.objects.size(); ++j) {
    if (world.objects[j].id != node_id) continue;
    ip.pose = {tl.final_pos[j], 0.0, world.objects[j].radius, world.objects[j].rim_height};
    ip.pos_source = tl.source_token[j];
    return ip;
  }
  throw_invalid("implied_pose: unknown node id");
}

/**
 * Guidance potential over a clean candidate: terminal alignment + stage
 * anchoring + goal-relation violations (on poses implied by the attachment
 * model) + swept collision cost. Nonnegative; zero iff every term is zero.
 */
inline double potential_U(const Trajectory& x, const SceneGraph& graph, const StageAnnotation& ann,
                          const WorldState& world, const GuidanceWeights& gw) {
  const int last = x.length - 1;
  double u = 0.0;

  {
    const Vec3 e = x.pos(last) - ann.final_goal;
    u += gw.terminal * dot(e, e);
  }
  for (int b : ann.boundaries) {
    const Vec3 e = x.pos(b) - ann.stage_goals[b];
    u += gw.stage * dot(e, e);
  }
  if (gw.relation > 0.0 || gw.collision > 0.0) {
    const AttachmentTimeline tl = simulate_attachment(x, world);
    if (gw.relation > 0.0) {
      for (const auto& edge : graph.edges) {
        if (!edge.goal) continue;
        const ImpliedPose a = implied_pose(edge.subject, x, world, tl);
        const ImpliedPose b = implied_pose(edge.object, x, world, tl);
        u += gw.relation * relation_phi(edge.rel, a.pose, b.pose, edge.params);
      }
    }
    if (gw.collision > 0.0) {
      for (const SweepContact& c : sweep_contacts(x, world, tl))
        u += gw.collision * c.penetration * c.penetration;
    }
  }
  return u;
}

/**
 * Exact gradient of potential_U with respect to the candidate, with the
 * attachment event pattern held fixed (hinges use subgradient 0 at kinks).
 */
inline Trajectory grad_U(const Trajectory& x, const SceneGraph& graph, const StageAnnotation& ann,
                         const WorldState& world, const GuidanceWeights& gw) {
  Trajectory g(x.length, x.dim);
  const int last = x.length - 1;

  {
    const Vec3 e = x.pos(last) - ann.final_goal;
    for (int d = 0; d < 3; ++d) g.at(last, d) += gw.terminal * 2.0 * e[d];
  }
  for (int b : ann.boundaries) {
    const Vec3 e = x.pos(b) - ann.stage_goals[b];
    for (int d = 0; d < 3; ++d) g.at(b, d) += gw.stage * 2.0 * e[d];
  }

  if (gw.relation <= 0.0 && gw.collision <= 0.0) return g;
  const AttachmentTimeline tl = simulate_attachment(x, world);

  if (gw.relation > 0.0) {
    auto route = [&](const ImpliedPose& ip, const PoseGrad& pg, double w) {
      if (ip.pos_source >= 0)
        for (int d = 0; d < 3; ++d) g.at(ip.pos_source, d) += w * pg.dpos[d];
      if (ip.yaw_source >= 0) g.at(ip.yaw_source, kDimYaw) += w * pg.dyaw;
    };
    for (const auto& edge : graph.edges) {
      if (!edge.goal) continue;
      const ImpliedPose a = implied_pose(edge.subject, x, world, tl);
      const ImpliedPose b = implied_pose(edge.object, x, world, tl);
      PoseGrad da, db;
      relation_phi_grad(edge.rel, a.pose, b.pose, edge.params, da, db);
      route(a, da, gw.relation);
      route(b, db, gw.relation);
    }
  }

  if (gw.collision > 0.0) {
    for (const SweepContact& c : sweep_contacts(x, world, tl)) {
      const WorldObject& o = world.objects[c.object_index];
      const double margin = world.ee.radius + o.radius;
      const double d = margin - c.penetration;
      if (d <= 0.0) continue;  // kink at zero distance
      const Vec3 a = x.pos(c.token);
      const Vec3 b = x.pos(c.token + 1);
      const Vec3 q = a + c.s * (b - a);
      const Vec3 u = (1.0 / d) * (q - c.object_pos);
      const double coef = -2.0 * c.penetration * gw.collision;
      for (int dd = 0; dd < 3; ++dd) {
        g.at(c.token, dd) += coef * (1.0 - c.s) * u[dd];
        g.at(c.token + 1, dd) += coef * c.s * u[dd];
        if (c.source_token >= 0) g.at(c.source_token, dd) -= coef * u[dd];
      }
    }
  }
  return g;
}

struct ReturnWeights {
  double pos = 1.0;
  double relation = 1.0;
  double collision = 1.0;
  double smooth = 0.1;
  double sigma_pos = 0.05;      // m
  double sigma_col = 0.001;     // collision cost saturation
  double sigma_smooth = 0.05;   // boundary jerk saturation

  double floor() const { return -(collision + smooth); }
  double ceiling() const { return pos + relation; }
};

/**
 * Scalar geometry return for a candidate: terminal accuracy at the active
 * stage end, relation satisfaction on implied final poses, saturated
 * collision penalty, and a saturated jerk term around the edited boundary.
 * Every component is bounded to [0, 1] before weighting.
 */
inline double true_return(const Trajectory& x, const SceneGraph& graph, const StageAnnotation& ann,
                          const WorldState& world, int boundary_index, const ReturnWeights& rw = {}) {
  if (boundary_index < 0 || boundary_index >= x.length)
    throw_invalid("true_return: boundary index out of range");
  if (!x.finite()) return rw.floor();

  // Anchor at the stage end nearest the edited boundary so the position term
  // discriminates between candidates of the same stage; stage ends deep in
  // the frozen future are identical across candidates.
  int anchor = x.length - 1;
  Vec3 target = ann.final_goal;
  {
    int best = -1;
    for (int b : ann.boundaries) {
      if (std::abs(b - boundary_index) > 8) continue;
      if (best < 0 || std::abs(b - boundary_index) < std::abs(best - boundary_index) ||
          (std::abs(b - boundary_index) == std::abs(best - boundary_index) && b > best))
        best = b;
    }
    if (best < 0)
      for (int b : ann.boundaries)
        if (b >= boundary_index) {
          best = b;
          break;
        }
    if (best >= 0) {
      anchor = best;
      target = ann.stage_goals[best];
    }
  }
  const double pos_term = std::exp(-dist(x.pos(anchor), target) / rw.sigma_pos);

  const AttachmentTimeline tl = simulate_attachment(x, world);
  double rel_term = 1.0;
  {
    double sum = 0.0;
    int n = 0;
    for (const auto& edge : graph.edges) {
      if (!edge.goal) continue;
      const ImpliedPose a = implied_pose(edge.subject, x, world, tl);
      const ImpliedPose b = implied_pose(edge.object, x, world, tl);
      const double phi = relation_phi(edge.rel, a.pose, b.pose, edge.params);
      sum += 2.0 * relation_sat(phi, edge.params.gamma);
      ++n;
    }
    if (n > 0) rel_term = sum / n;
  }

  double col = 0.0;
  for (const SweepContact& c : sweep_contacts(x, world, tl)) col += c.penetration * c.penetration;
  const double col_term = std::min(1.0, col / rw.sigma_col);

  double jerk = 0.0;
  {
    int n = 0;
    for (int i = boundary_index - 1; i <= boundary_index + 1; ++i) {
      if (i < 2 || i >= x.length) continue;
      const Vec3 second = (x.pos(i) - x.pos(i - 1)) - (x.pos(i - 1) - x.pos(i - 2));
      jerk += norm(second);
      ++n;
    }
    if (n > 0) jerk /= n;
  }
  const double smooth_term = std::min(1.0, jerk / rw.sigma_smooth);

  return rw.pos * pos_term + rw.relation * rel_term - rw.collision * col_term -
         rw.smooth * smooth_term;
}

/**
 * Smallest margin to any hinge kink or attachment-event threshold along a
 * candidate. Finite-difference checks resample configurations whose margin
 * is below the probe step.
 */
inline double guidance_kink_margin(const Trajectory& x, const SceneGraph& graph,
                                   const StageAnnotation& ann, const WorldState& world) {
  (void)ann;
  double m = std::numeric_limits<double>::infinity();
  const AttachmentTimeline tl = simulate_attachment(x, world);

  for (const auto& edge : graph.edges) {
    if (!edge.goal) continue;
    const ImpliedPose a = implied_pose(edge.subject, x, world, tl);
    const ImpliedPose b = implied_pose(edge.object, x, world, tl);
    const double perp = dist_xy(a.pose.position, b.pose.position);
    const double dz = a.pose.position[2] - b.pose.position[2];
    switch (edge.rel) {
      case Relation::on_top_of:
        m = std::min(m, std::fabs(perp - edge.params.perp_tol));
        m = std::min(m, std::fabs(edge.params.h_min - dz));
        break;
      case Relation::in:
        m = std::min(m, std::fabs(perp - (b.pose.radius - a.pose.radius)));
        m = std::min(m, std::fabs(a.pose.position[2] - (b.pose.position[2] + b.pose.rim_height)));
        break;
      case Relation::left_of:
        m = std::min(m, std::fabs(a.pose.position[0] - b.pose.position[0] + edge.params.margin));
        break;
      case Relation::aligned_with:
        m = std::min(m, std::fabs(std::fabs(wrap_angle(a.pose.yaw - b.pose.yaw)) - edge.params.yaw_tol));
        break;
      case Relation::holding:
        m = std::min(m, std::fabs(dist(a.pose.position, b.pose.position) - kGraspRadius));
        break;
    }
  }

  // Collision hinges, gripper crossings, and grasp-radius crossings, all
  // evaluated against object positions as of each token.
  std::vector<Vec3> pos(world.objects.size());
  for (size_t j = 0; j < world.objects.size(); ++j) pos[j] = world.objects[j].position;
  for (int i = 0; i < x.length; ++i) {
    if (tl.held[i] >= 0)
      for (size_t j = 0; j < world.objects.size(); ++j)
        if (world.objects[j].id == tl.held[i]) pos[j] = x.pos(i);

    m = std::min(m, std::fabs(x.at(i, kDimGrip) - 0.5));
    for (size_t j = 0; j < world.objects.size(); ++j) {
      if (world.objects[j].kind != ObjectKind::movable) continue;
      if (tl.held[i] == world.objects[j].id) continue;
      m = std::min(m, std::fabs(dist(x.pos(i), pos[j]) - kGraspRadius));
    }

    if (i + 1 >= x.length) continue;
    for (size_t j = 0; j < world.objects.size(); ++j) {
      const WorldObject& o = world.objects[j];
      if (!collidable(o) || sweep_excluded(tl, i, o.id)) continue;
      const double d = seg_point_dist(x.pos(i), x.pos(i + 1), pos[j]);
      m = std::min(m, std::fabs((world.ee.radius + o.radius) - d));
      m = std::min(m, d);
    }
  }
  return m;
}

}  // namespace forge
