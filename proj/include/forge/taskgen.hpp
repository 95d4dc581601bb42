#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "scene_graph.hpp"
#include "stage_infer.hpp"
#include "train.hpp"

namespace forge {

struct TaskGenConfig {
  int horizon = 64;
  double noise_std = 0.01;        // augmentation on non-snapped tokens (m)
  double workspace = 0.3;         // sampling half-extent for object centers
  double obstacle_prob = 0.25;
  int min_tokens_per_stage = 4;
  int retries = 10;
  RelationParams relations;
};

namespace detail {

struct StagePath {
  std::vector<Vec3> waypoints;  // polyline for this stage
  double grip_before = 0.0;     // gripper value on interior tokens
  double grip_end = 0.0;        // gripper value at the stage-end token
  bool fast_start = false;      // ease-out timing: clears a just-released object
  double length() const {
    double s = 0.0;
    for (size_t i = 1; i < waypoints.size(); ++i) s += dist(waypoints[i], waypoints[i - 1]);
    return s;
  }
  Vec3 at_arc(double target) const {
    double s = 0.0;
    for (size_t i = 1; i < waypoints.size(); ++i) {
      const double seg = dist(waypoints[i], waypoints[i - 1]);
      if (s + seg >= target && seg > 0.0) {
        const double u = (target - s) / seg;
        return waypoints[i - 1] + u * (waypoints[i] - waypoints[i - 1]);
      }
      s += seg;
    }
    return waypoints.back();
  }
};

}  // namespace detail

/**
 * Scripted pick-and-place demonstration: per object, reach (hover above),
 * grasp (descend and close), transport (lift, carry high, hover above the
 * target), place (descend and open). Waypoints are interpolated with
 * smoothstep timing into the token budget, stages sized proportionally to
 * path length. Gaussian action noise is added, then stage-end tokens are
 * snapped back onto their exact goals.
 */
inline std::pair<Trajectory, StageAnnotation> script_expert(const TaskSpec& task,
                                                            const WorldState& world, Rng& rng,
                                                            const TaskGenConfig& cfg = {}) {
  const int L = task.horizon;
  const double ws = cfg.workspace + 0.05;
  auto in_bounds = [&](const Vec3& p) {
    return std::fabs(p[0]) <= ws && std::fabs(p[1]) <= ws && p[2] >= 0.0 && p[2] <= 0.5;
  };

  const SceneGraph graph = build_scene_graph(world, task, cfg.relations);
  std::vector<detail::StagePath> stages;
  Vec3 cursor = world.ee.position;

  for (size_t ei = 0; ei < graph.edges.size(); ++ei) {
    const SceneEdge& edge = graph.edges[ei];
    if (!edge.goal) continue;
    const WorldObject* subject = world.find(edge.subject);
    if (!subject) throw_invalid("script_expert: unknown subject");
    const Vec3 grasp = subject->position + Vec3{0, 0, kGraspZOffset};
    const Vec3 hover = subject->position + Vec3{0, 0, kHoverZ};
    const Vec3 drop = place_anchor(edge, world, container_slot(graph, static_cast<int>(ei)));
    const Vec3 drop_hover{drop[0], drop[1], kCarryZ};
    const Vec3 carry{subject->position[0], subject->position[1], kCarryZ};
    for (const Vec3& p : {grasp, hover, drop, carry})
      if (!in_bounds(p)) throw_invalid("script_expert: target outside workspace bounds");

    detail::StagePath reach;  // pop up from wherever we are, then hover over the subject
    reach.waypoints = {cursor, Vec3{cursor[0], cursor[1], std::max(cursor[2] + kRetreatZ, kHoverZ)},
                       hover};
    reach.grip_before = 0.0;
    reach.grip_end = 0.0;
    reach.fast_start = true;  // previous stage may have just released an object here
    stages.push_back(reach);

    detail::StagePath grasp_st;  // descend, close at the end token
    grasp_st.waypoints = {hover, grasp};
    grasp_st.grip_before = 0.0;
    grasp_st.grip_end = 1.0;
    stages.push_back(grasp_st);

    detail::StagePath transport;  // lift then carry at height
    transport.waypoints = {grasp, carry, drop_hover};
    transport.grip_before = 1.0;
    transport.grip_end = 1.0;
    stages.push_back(transport);

    detail::StagePath place;  // descend, open at the end token
    place.waypoints = {drop_hover, drop};
    place.grip_before = 1.0;
    place.grip_end = 0.0;
    stages.push_back(place);

    cursor = drop;
  }
  if (stages.empty()) throw_invalid("script_expert: task has no goal edges");

  // Token budget proportional to path length, floored per stage.
  const int n_stages = static_cast<int>(stages.size());
  if (L < n_stages * cfg.min_tokens_per_stage)
    throw_invalid("script_expert: horizon too short for stage count");
  std::vector<int> counts(n_stages, cfg.min_tokens_per_stage);
  {
    double total = 0.0;
    for (const auto& s : stages) total += std::max(s.length(), 1e-6);
    int rest = L - n_stages * cfg.min_tokens_per_stage;
    std::vector<double> frac(n_stages);
    int used = 0;
    for (int i = 0; i < n_stages; ++i) {
      const double share = rest * std::max(stages[i].length(), 1e-6) / total;
      const int add = static_cast<int>(share);
      counts[i] += add;
      used += add;
      frac[i] = share - add;
    }
    // Distribute the rounding remainder to the largest fractional parts.
    for (int k = 0; k < rest - used; ++k) {
      int best = 0;
      for (int i = 1; i < n_stages; ++i)
        if (frac[i] > frac[best]) best = i;
      counts[best] += 1;
      frac[best] = -1.0;
    }
  }

  Trajectory x0(L, kDefaultActionDim);
  std::vector<uint8_t> mask(L, 0);
  std::vector<Vec3> goals(L, Vec3{0, 0, 0});

  int tok = 0;
  for (int si = 0; si < n_stages; ++si) {
    const detail::StagePath& st = stages[si];
    const int n = counts[si];
    const double len = st.length();
    for (int j = 0; j < n; ++j) {
      const double u = n == 1 ? 1.0 : static_cast<double>(j + 1) / n;
      // ease-out leaves the release point quickly; smoothstep gives the slow
      // stage ends that mark boundaries
      const double w = st.fast_start ? 1.0 - (1.0 - u) * (1.0 - u) * (1.0 - u) : smoothstep(u);
      const Vec3 p = st.at_arc(w * len);
      x0.set_pos(tok, p);
      x0.at(tok, kDimYaw) = 0.0;
      x0.at(tok, kDimGrip) = (j + 1 == n) ? st.grip_end : st.grip_before;
      ++tok;
    }
    mask[tok - 1] = 1;
    goals[tok - 1] = st.waypoints.back();
  }

  // Augmentation noise on positions, then snap stage ends back exactly.
  for (int i = 0; i < L; ++i)
    for (int d = 0; d < 3; ++d) x0.at(i, d) += cfg.noise_std * rng.gaussian();
  for (int i = 0; i < L; ++i)
    if (mask[i]) x0.set_pos(i, goals[i]);

  StageAnnotation ann = StageAnnotation::from_mask(std::move(mask), std::move(goals),
                                                   x0.pos(L - 1));
  return {x0, ann};
}

/// Replay a trajectory through the world; true when all goal edges end up
/// satisfied with zero hard collisions.
inline bool execute_and_verify(const TaskSpec& task, const WorldState& world0,
                               const Trajectory& traj, const RelationParams& rel_params) {
  WorldState w = world0;
  for (int i = 0; i < traj.length; ++i) {
    w = step_world(w, traj, i);
    if (w.hard_collision) return false;
  }
  return build_scene_graph(w, task, rel_params).goals_met();
}

/**
 * Randomized task + world: objects placed in the workspace with pairwise
 * center gaps of at least twice the larger radius beyond touching.
 */
inline std::pair<TaskSpec, WorldState> sample_task_world(TaskTemplate tmpl, Rng& rng,
                                                         const TaskGenConfig& cfg = {}) {
  WorldState w;
  w.ee.position = {0.0, -0.25, 0.15};
  w.ee.yaw = 0.0;
  w.ee.gripper = 0.0;
  w.ee.radius = 0.008;

  auto clear_of_others = [&](const Vec3& p, double r) {
    for (const auto& o : w.objects) {
      const double need = o.radius + r + 2.0 * std::max(o.radius, r);
      if (dist(o.position, p) < need) return false;
    }
    return true;
  };
  auto place = [&](ObjectKind kind, double r_lo, double r_hi, double rim) {
    const double r = rng.uniform(r_lo, r_hi);
    for (int attempt = 0; attempt < 200; ++attempt) {
      Vec3 p{rng.uniform(-cfg.workspace, cfg.workspace), rng.uniform(-cfg.workspace, cfg.workspace),
             0.0};
      p[2] = kind == ObjectKind::container ? 0.01 : r;
      if (!clear_of_others(p, r)) continue;
      WorldObject o;
      o.id = static_cast<int>(w.objects.size()) + 1;
      o.kind = kind;
      o.position = p;
      o.radius = r;
      o.rim_height = rim;
      w.objects.push_back(o);
      return o.id;
    }
    throw std::runtime_error("sample_task_world: could not place object");
  };

  TaskSpec task;
  task.tmpl = tmpl;
  task.horizon = cfg.horizon;
  switch (tmpl) {
    case TaskTemplate::put_in: {
      const int a = place(ObjectKind::movable, 0.018, 0.022, 0.0);
      const int c = place(ObjectKind::container, 0.06, 0.08, 0.05);
      task.subjects = {a};
      task.target = c;
      break;
    }
    case TaskTemplate::stack_on: {
      const int a = place(ObjectKind::movable, 0.018, 0.022, 0.0);
      const int b = place(ObjectKind::movable, 0.02, 0.024, 0.0);
      task.subjects = {a};
      task.target = b;
      break;
    }
    case TaskTemplate::move_left_of: {
      const int a = place(ObjectKind::movable, 0.018, 0.022, 0.0);
      const int b = place(ObjectKind::movable, 0.018, 0.022, 0.0);
      task.subjects = {a};
      task.target = b;
      break;
    }
    case TaskTemplate::two_object_put_in: {
      const int a = place(ObjectKind::movable, 0.018, 0.022, 0.0);
      const int b = place(ObjectKind::movable, 0.018, 0.022, 0.0);
      const int c = place(ObjectKind::container, 0.06, 0.08, 0.05);
      task.subjects = {a, b};
      task.target = c;
      break;
    }
  }
  if (rng.uniform() < cfg.obstacle_prob) place(ObjectKind::obstacle, 0.03, 0.04, 0.0);
  return {task, w};
}

/**
 * Verified dataset: every sample is rejected unless its scripted trajectory
 * replays to success (all goals, zero hard collisions). Mixed templates by
 * default.
 */
inline Dataset make_dataset(int n, uint64_t seed, const TaskGenConfig& cfg = {},
                            const std::vector<TaskTemplate>& mix = {
                                TaskTemplate::put_in, TaskTemplate::stack_on,
                                TaskTemplate::move_left_of, TaskTemplate::two_object_put_in}) {
  if (n < 1) throw_invalid("make_dataset: sample count must be >= 1");
  Dataset ds;
  ds.length = cfg.horizon;
  ds.action_dim = kDefaultActionDim;
  ds.seed = seed;
  ds.samples.reserve(n);
  for (int i = 0; i < n; ++i) {
    bool ok = false;
    for (int attempt = 0; attempt < cfg.retries; ++attempt) {
      Rng rng(derive_seed(seed, {static_cast<uint64_t>(i), static_cast<uint64_t>(attempt)}));
      const TaskTemplate tmpl = mix[rng.uniform_int(0, static_cast<int>(mix.size()) - 1)];
      try {
        auto [task, world] = sample_task_world(tmpl, rng, cfg);
        auto [traj, ann] = script_expert(task, world, rng, cfg);
        if (!execute_and_verify(task, world, traj, cfg.relations)) continue;
        ds.samples.push_back({task, world, std::move(traj), std::move(ann)});
        ok = true;
        break;
      } catch (const std::exception&) {
        continue;  // resample geometry
      }
    }
    if (!ok)
      throw std::runtime_error("make_dataset: sample " + std::to_string(i) +
                               " failed verification after retries");
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Dataset file format: header record then per-sample records; numeric
// payloads are little-endian 64-bit floats.
// ---------------------------------------------------------------------------

constexpr char kDatasetMagic[8] = {'F', 'O', 'R', 'G', 'E', 'D', 'S', '1'};

inline std::string serialize_dataset(const Dataset& ds) {
  std::string out(kDatasetMagic, sizeof(kDatasetMagic));
  detail::put_u32(out, ds.version);
  detail::put_u32(out, static_cast<uint32_t>(ds.length));
  detail::put_u32(out, static_cast<uint32_t>(ds.action_dim));
  detail::put_u64(out, ds.seed);
  detail::put_u32(out, static_cast<uint32_t>(ds.samples.size()));
  for (const DatasetSample& s : ds.samples) {
    detail::put_u32(out, static_cast<uint32_t>(s.task.tmpl));
    detail::put_u32(out, static_cast<uint32_t>(s.task.subjects.size()));
    for (int id : s.task.subjects) detail::put_u32(out, static_cast<uint32_t>(id));
    detail::put_u32(out, static_cast<uint32_t>(s.task.target));
    detail::put_u32(out, static_cast<uint32_t>(s.task.horizon));

    detail::put_u32(out, static_cast<uint32_t>(s.world.objects.size()));
    for (const WorldObject& o : s.world.objects) {
      detail::put_u32(out, static_cast<uint32_t>(o.id));
      detail::put_u32(out, static_cast<uint32_t>(o.kind));
      for (double v : {o.position[0], o.position[1], o.position[2], o.radius, o.rim_height})
        detail::put_f64(out, v);
    }
    for (double v : {s.world.ee.position[0], s.world.ee.position[1], s.world.ee.position[2],
                     s.world.ee.yaw, s.world.ee.gripper, s.world.ee.radius})
      detail::put_f64(out, v);
    detail::put_u32(out, static_cast<uint32_t>(s.world.attachment));

    for (double v : s.actions.data) detail::put_f64(out, v);
    for (uint8_t b : s.ann.end_mask) out.push_back(static_cast<char>(b));
    for (const Vec3& g : s.ann.stage_goals)
      for (double v : g) detail::put_f64(out, v);
    for (double v : s.ann.final_goal) detail::put_f64(out, v);
  }
  return out;
}

inline Dataset deserialize_dataset(const std::string& buf) {
  if (buf.size() < sizeof(kDatasetMagic) ||
      std::memcmp(buf.data(), kDatasetMagic, sizeof(kDatasetMagic)) != 0)
    throw_invalid("dataset: bad magic");
  detail::Reader r(buf);
  r.pos = sizeof(kDatasetMagic);
  Dataset ds;
  ds.version = r.u32();
  ds.length = static_cast<int>(r.u32());
  ds.action_dim = static_cast<int>(r.u32());
  ds.seed = r.u64();
  const uint32_t n = r.u32();
  ds.samples.resize(n);
  for (uint32_t k = 0; k < n; ++k) {
    DatasetSample& s = ds.samples[k];
    s.task.tmpl = static_cast<TaskTemplate>(r.u32());
    const uint32_t ns = r.u32();
    s.task.subjects.resize(ns);
    for (uint32_t j = 0; j < ns; ++j) s.task.subjects[j] = static_cast<int>(r.u32());
    s.task.target = static_cast<int>(r.u32());
    s.task.horizon = static_cast<int>(r.u32());

    const uint32_t no = r.u32();
    s.world.objects.resize(no);
    for (uint32_t j = 0; j < no; ++j) {
      WorldObject& o = s.world.objects[j];
      o.id = static_cast<int>(r.u32());
      o.kind = static_cast<ObjectKind>(r.u32());
      o.position = {r.f64(), r.f64(), r.f64()};
      o.radius = r.f64();
      o.rim_height = r.f64();
    }
    s.world.ee.position = {r.f64(), r.f64(), r.f64()};
    s.world.ee.yaw = r.f64();
    s.world.ee.gripper = r.f64();
    s.world.ee.radius = r.f64();
    s.world.attachment = static_cast<int>(r.u32());

    s.actions = Trajectory(ds.length, ds.action_dim);
    for (double& v : s.actions.data) v = r.f64();
    std::vector<uint8_t> mask(ds.length);
    for (int i = 0; i < ds.length; ++i) {
      r.need(1);
      mask[i] = static_cast<uint8_t>(buf[r.pos++]);
    }
    std::vector<Vec3> goals(ds.length);
    for (int i = 0; i < ds.length; ++i) goals[i] = {r.f64(), r.f64(), r.f64()};
    Vec3 fg{r.f64(), r.f64(), r.f64()};
    s.ann = StageAnnotation::from_mask(std::move(mask), std::move(goals), fg);
  }
  return ds;
}

inline void save_dataset(const std::string& path, const Dataset& ds) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write dataset: " + path);
  const std::string buf = serialize_dataset(ds);
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read dataset: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return deserialize_dataset(ss.str());
}

/// FNV-1a over a byte buffer; stable content fingerprint for logs and tests.
inline uint64_t fnv1a(const std::string& buf) {
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : buf) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace forge
