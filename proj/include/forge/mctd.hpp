#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "guidance.hpp"
#include "sampler.hpp"
#include "stage_infer.hpp"
#include "train.hpp"

namespace forge {

struct PlannerConfig {
  int budget = 32;
  double c_puct = 1.5;
  int max_depth = 3;
  enum class RolloutPolicy { greedy, softmax } rollout = RolloutPolicy::greedy;
  int window_radius = 16;  // segment starts allowed this close before the next boundary
  std::vector<int> len_grid{8, 12, 16};
  std::vector<int> stride_grid{2, 4, 8};
  std::vector<double> guidance_grid{0.0, 1.0, 2.5, 5.0};
  std::vector<double> temp_grid{0.5, 0.75, 1.0};
  int t_start = 700;
  bool oracle_boundaries = false;
  bool uniform_priors = false;  // ablation: drop the scene-graph prior
  double prior_boundary = 1.0;
  double prior_progress = 1.0;
  double prior_risk = 1.0;
  int ref_stride = 8;
  double ref_temperature = 0.0;
  double speed_eps = 0.004;
  int max_steps_factor = 4;
  SamplerConfig sampler;
  ReturnWeights ret;

  void validate() const {
    if (budget < 1 || c_puct <= 0 || max_depth < 1 || window_radius < 1 || t_start < 1 ||
        ref_stride < 1 || max_steps_factor < 1 || len_grid.empty() || stride_grid.empty() ||
        guidance_grid.empty() || temp_grid.empty())
      throw_invalid("PlannerConfig: invalid field");
  }
};

/// P-UCT with +1 smoothing inside both the logarithm and the denominator,
/// finite for every count state including all-zero.
inline double puct_score(double q, double prior, int n_parent, int n_edge, double c_puct) {
  return q + c_puct * prior * std::sqrt(std::log(static_cast<double>(n_parent) + 1.0) /
                                        (static_cast<double>(n_edge) + 1.0));
}

/// Max-subtracted softmax; well-defined for equal inputs.
inline std::vector<double> softmax_policy(const std::vector<double>& rewards) {
  if (rewards.empty()) throw_invalid("softmax_policy: empty reward vector");
  double mx = rewards[0];
  for (double r : rewards) mx = std::max(mx, r);
  std::vector<double> p(rewards.size());
  double sum = 0.0;
  for (size_t i = 0; i < rewards.size(); ++i) {
    p[i] = std::exp(rewards[i] - mx);
    sum += p[i];
  }
  for (double& v : p) v /= sum;
  return p;
}

namespace detail {

/// Clearance of the straight line between two points against collidable,
/// non-held objects, normalized by the largest safety margin.
inline double line_clearance(const Vec3& a, const Vec3& b, const WorldState& world) {
  double dmin = std::numeric_limits<double>::infinity();
  double rmax = 0.0;
  for (const auto& o : world.objects) {
    if (!collidable(o) || o.id == world.attachment) continue;
    dmin = std::min(dmin, seg_point_dist(a, b, o.position));
    rmax = std::max(rmax, o.radius);
  }
  if (!std::isfinite(dmin)) return 1.0;  // nothing to hit
  const double denom = world.ee.radius + rmax;
  return std::clamp(dmin / denom, 0.0, 1.0);
}

struct PsiTerms {
  double boundary = 0.0;
  double progress = 0.0;
  double risk = 0.0;
};

inline PsiTerms psi_terms(const Trajectory& ref, const MetaAction& a, int next_boundary,
                          const Vec3& goal, bool have_goal, const WorldState& world) {
  PsiTerms t;
  const int seg_end = a.start + a.len - 1;
  if (next_boundary >= 0)
    t.boundary = std::exp(-std::fabs(static_cast<double>(seg_end - next_boundary)) / 4.0);
  const Vec3 p0 = ref.pos(a.start);
  const Vec3 p1 = ref.pos(seg_end);
  if (have_goal) {
    const double d0 = dist(goal, p0);
    const double d1 = dist(goal, p1);
    t.progress = std::clamp((d0 - d1) / std::max(d0, 1e-6), -1.0, 1.0);
  }
  t.risk = 1.0 - line_clearance(p0, p1, world);
  return t;
}

}  // namespace detail

/**
 * Pre-rollout heuristic in [0, 1]: mean of (i) alignment of the straight-line
 * segment displacement with the direction to the active goal (surrogate for
 * the instruction-consistency likelihood), (ii) the rescaled scene-graph
 * prior exponent, (iii) straight-line clearance. Ignores the denoising knobs
 * (stride, guidance, temperature) by construction.
 */
inline double fast_reward(const Trajectory& ref, const MetaAction& a, int next_boundary,
                          const SceneGraph& graph, const WorldState& world,
                          const PlannerConfig& cfg) {
  bool have_goal = false;
  const Vec3 goal = active_goal(graph, world, &have_goal);
  const detail::PsiTerms t = detail::psi_terms(ref, a, next_boundary, goal, have_goal, world);

  const Vec3 p0 = ref.pos(a.start);
  const Vec3 p1 = ref.pos(a.start + a.len - 1);
  double heading = 0.5;
  if (have_goal) {
    const Vec3 disp = p1 - p0;
    const Vec3 dir = goal - p0;
    const double nd = norm(disp), ng = norm(dir);
    if (nd > 1e-9 && ng > 1e-9) heading = 0.5 * (dot(disp, dir) / (nd * ng) + 1.0);
  }

  const double wb = cfg.uniform_priors ? 0.0 : cfg.prior_boundary;
  const double wp = cfg.uniform_priors ? 0.0 : cfg.prior_progress;
  const double wr = cfg.uniform_priors ? 0.0 : cfg.prior_risk;
  const double psi = wb * t.boundary + wp * t.progress - wr * t.risk;
  const double lo = -(wp + wr);
  const double hi = wb + wp;
  const double psi01 = hi > lo ? (psi - lo) / (hi - lo) : 0.5;

  const double clearance = detail::line_clearance(p0, p1, world);
  return (heading + psi01 + clearance) / 3.0;
}

struct CandidateAction {
  MetaAction action;
  double prior = 0.0;
  double fast = 0.0;
};

/**
 * Meta-action grid: segment starts within the window before the next
 * predicted boundary (or directly ahead when none), crossed with the length,
 * stride, guidance and temperature grids, clipped to the horizon. Priors are
 * a softmax over the scene-graph exponent; empty result signals the stage
 * is complete (no segment fits).
 */
inline std::vector<CandidateAction> enumerate_meta_actions(const Trajectory& ref,
                                                           const SceneGraph& graph,
                                                           const StageAnnotation& ann_pred,
                                                           int t_now, const WorldState& world,
                                                           const PlannerConfig& cfg) {
  const int L = ref.length;
  int next_boundary = -1;
  for (int b : ann_pred.boundaries)
    if (b > t_now) {
      next_boundary = b;
      break;
    }

  int k_lo = t_now, k_hi = t_now + cfg.window_radius - 1;
  if (next_boundary >= 0) {
    k_lo = std::max(t_now, next_boundary - (cfg.window_radius - 1));
    k_hi = next_boundary;
  }

  bool have_goal = false;
  const Vec3 goal = active_goal(graph, world, &have_goal);

  std::vector<CandidateAction> out;
  std::vector<double> psis;
  for (int k = k_lo; k <= k_hi; ++k) {
    for (int m : cfg.len_grid) {
      if (k + m > L) continue;
      for (int s : cfg.stride_grid)
        for (double w : cfg.guidance_grid)
          for (double tau : cfg.temp_grid) {
            CandidateAction c;
            c.action = {k, m, s, w, tau, cfg.t_start};
            const detail::PsiTerms t =
                detail::psi_terms(ref, c.action, next_boundary, goal, have_goal, world);
            const double psi = cfg.uniform_priors
                                   ? 0.0
                                   : cfg.prior_boundary * t.boundary +
                                         cfg.prior_progress * t.progress - cfg.prior_risk * t.risk;
            c.fast = fast_reward(ref, c.action, next_boundary, graph, world, cfg);
            out.push_back(c);
            psis.push_back(psi);
          }
    }
  }
  if (out.empty()) return out;
  const std::vector<double> priors = softmax_policy(psis);
  for (size_t i = 0; i < out.size(); ++i) out[i].prior = priors[i];
  return out;
}

struct PlanEdge {
  MetaAction action;
  double prior = 0.0;
  double fast = 0.0;
  int visits = 0;
  double total_return = 0.0;
  double mean_return = 0.0;
  int child = -1;
};

struct PlanNode {
  int depth = 0;
  Trajectory base;
  std::vector<PlanEdge> edges;
  bool enumerated = false;
  int visits = 0;
};

/// Visit/value/prior update along a stored path.
inline void backup(std::vector<PlanNode>& nodes, const std::vector<std::pair<int, int>>& path,
                   double ret) {
  for (const auto& [n, e] : path) {
    PlanEdge& edge = nodes[n].edges[e];
    edge.visits += 1;
    edge.total_return += ret;
    edge.mean_return = edge.total_return / edge.visits;
    nodes[n].visits += 1;
  }
}

/// Unvisited edges are ordered by fast reward; otherwise P-UCT. Ties break
/// to the lowest enumeration index.
inline int select_child(const PlanNode& node, double c_puct) {
  if (node.edges.empty()) throw_invalid("select_child: node has no edges");
  int best = -1;
  double best_v = 0.0;
  for (size_t e = 0; e < node.edges.size(); ++e) {
    if (node.edges[e].visits != 0) continue;
    if (best < 0 || node.edges[e].fast > best_v) {
      best = static_cast<int>(e);
      best_v = node.edges[e].fast;
    }
  }
  if (best >= 0) return best;
  for (size_t e = 0; e < node.edges.size(); ++e) {
    const PlanEdge& edge = node.edges[e];
    const double v = puct_score(edge.mean_return, edge.prior, node.visits, edge.visits, c_puct);
    if (best < 0 || v > best_v) {
      best = static_cast<int>(e);
      best_v = v;
    }
  }
  return best;
}

struct SearchStats {
  int iterations = 0;
  int max_depth = 0;
  double best_return = -std::numeric_limits<double>::infinity();
  long nfe = 0;            // denoiser calls spent on rollouts
  long expected_nfe = 0;   // sum of grid lengths over rollouts
  int considered = 0;      // root actions enumerated
};

struct PlanResult {
  MetaAction action;
  Trajectory candidate;
  SearchStats stats;
  bool infeasible = false;
  std::string diagnostic;
};

/**
 * One stage of tree search: descend by fast-reward / P-UCT (or softmax
 * sampling), expand, rollout the selected edge by re-noising its segment and
 * partially denoising it, score with the geometry return, and back the value
 * up the stored path. Commits the root edge with the most visits (ties:
 * higher mean return, then lower index).
 */
inline std::optional<PlanResult> plan_stage(const Trajectory& root_base, int t_now,
                                            const HeadParams& params,
                                            const std::vector<double>& context,
                                            const NoiseSchedule& sched, const SceneGraph& graph,
                                            const StageAnnotation& ann_pred,
                                            const WorldState& world, const GuidanceWeights& gw,
                                            const PlannerConfig& cfg, uint64_t stage_seed) {
  cfg.validate();
  std::vector<PlanNode> nodes;
  nodes.push_back({0, root_base, {}, false, 0});
  {
    auto cands = enumerate_meta_actions(root_base, graph, ann_pred, t_now, world, cfg);
    if (cands.empty()) return std::nullopt;  // stage complete: no segment fits
    for (auto& c : cands) nodes[0].edges.push_back({c.action, c.prior, c.fast, 0, 0.0, 0.0, -1});
    nodes[0].enumerated = true;
  }

  SearchStats stats;
  stats.considered = static_cast<int>(nodes[0].edges.size());
  std::vector<double> best_at_root(nodes[0].edges.size(),
                                   -std::numeric_limits<double>::infinity());
  std::vector<Trajectory> cand_at_root(nodes[0].edges.size());
  int valid_candidates = 0;

  const StageContext stage_ctx = StageContext::from(ann_pred);
  for (int iter = 0; iter < cfg.budget; ++iter) {
    Rng rng(derive_seed(stage_seed, {static_cast<uint64_t>(iter)}));
    std::vector<std::pair<int, int>> path;
    int n = 0;
    while (true) {
      PlanNode& node = nodes[n];
      if (!node.enumerated) {
        auto cands = enumerate_meta_actions(node.base, graph, ann_pred, t_now, world, cfg);
        for (auto& c : cands) node.edges.push_back({c.action, c.prior, c.fast, 0, 0.0, 0.0, -1});
        node.enumerated = true;
      }
      if (node.edges.empty()) break;  // nothing to refine below this node
      int e;
      if (cfg.rollout == PlannerConfig::RolloutPolicy::softmax) {
        std::vector<double> fr(node.edges.size());
        for (size_t i = 0; i < fr.size(); ++i) fr[i] = node.edges[i].fast;
        const std::vector<double> p = softmax_policy(fr);
        double u = rng.uniform(), acc = 0.0;
        e = static_cast<int>(p.size()) - 1;
        for (size_t i = 0; i < p.size(); ++i) {
          acc += p[i];
          if (u < acc) {
            e = static_cast<int>(i);
            break;
          }
        }
      } else {
        e = select_child(node, cfg.c_puct);
      }
      path.emplace_back(n, e);
      if (nodes[n].edges[e].child < 0) break;                       // expansion point
      if (static_cast<int>(path.size()) >= cfg.max_depth) break;    // depth cap: re-rollout
      n = nodes[n].edges[e].child;
    }
    if (path.empty()) break;

    const auto [pn, pe] = path.back();
    const MetaAction act = nodes[pn].edges[pe].action;

    // Re-noise the chosen segment of the parent's candidate to the edit level,
    // then run the guided partial denoise.
    Trajectory x_in = nodes[pn].base;
    const double sa = sched.sqrt_ab(act.t_start);
    const double sb = sched.sqrt_one_minus_ab(act.t_start);
    for (int i = act.start; i < act.start + act.len; ++i)
      for (int d = 0; d < x_in.dim; ++d)
        x_in.at(i, d) = sa * nodes[pn].base.at(i, d) + sb * rng.gaussian();

    int nfe = 0;
    auto predict = [&](const Trajectory& x_t, const TimestepVector& t, int first, int last) {
      return predict_noise_range(x_t, context, t, params, first, last, &stage_ctx);
    };
    const Trajectory cand = partial_denoise_with(x_in, act, predict, sched, graph, ann_pred, world,
                                                 gw, rng, cfg.sampler, &nfe);
    stats.nfe += nfe;
    stats.expected_nfe += static_cast<long>(denoise_grid(act.t_start, act.stride).size()) - 1;

    const double ret =
        true_return(cand, graph, ann_pred, world, act.start + act.len - 1, cfg.ret);
    if (cand.finite()) ++valid_candidates;

    if (nodes[pn].edges[pe].child < 0) {
      nodes.push_back({nodes[pn].depth + 1, cand, {}, false, 0});
      nodes[pn].edges[pe].child = static_cast<int>(nodes.size()) - 1;
    }
    const int root_edge = path.front().second;
    if (ret > best_at_root[root_edge]) {
      best_at_root[root_edge] = ret;
      cand_at_root[root_edge] = cand;
    }
    backup(nodes, path, ret);
    stats.best_return = std::max(stats.best_return, ret);
    stats.max_depth = std::max(stats.max_depth, static_cast<int>(path.size()));
    ++stats.iterations;
  }

  PlanResult out;
  out.stats = stats;
  if (valid_candidates == 0) {
    out.infeasible = true;
    out.diagnostic = "no finite candidate produced within budget";
    return out;
  }
  int commit = -1;
  for (size_t e = 0; e < nodes[0].edges.size(); ++e) {
    const PlanEdge& edge = nodes[0].edges[e];
    if (edge.visits == 0) continue;
    if (commit < 0) {
      commit = static_cast<int>(e);
      continue;
    }
    const PlanEdge& best = nodes[0].edges[commit];
    if (edge.visits > best.visits ||
        (edge.visits == best.visits && edge.mean_return > best.mean_return))
      commit = static_cast<int>(e);
  }
  out.action = nodes[0].edges[commit].action;
  out.candidate = cand_at_root[commit];
  return out;
}

struct ExecutedToken {
  int step = 0;
  int stage = 0;
  double x = 0, y = 0, z = 0, yaw = 0, gripper = 0;
};

struct WorldSnapshot {
  std::vector<std::pair<int, Vec3>> object_positions;
  int attachment = -1;
};

struct StageRecord {
  int stage = 0;
  MetaAction chosen;
  SearchStats stats;
  int commit_from = 0;
  int commit_to = 0;  // exclusive
  double stage_return = 0.0;
  WorldSnapshot world_after;
};

struct EpisodeTrace {
  bool success = false;
  std::string failure;
  int steps_executed = 0;
  int hard_collisions = 0;
  int stages = 0;
  long plan_nfe = 0;
  long expected_plan_nfe = 0;
  long decode_nfe = 0;
  double terminal_error = 0.0;       // mean sqrt(phi) over goal edges at the end
  double mean_relation_sat = 0.0;    // mean 2*sat over goal edges at the end
  std::vector<StageRecord> stage_records;
  std::vector<ExecutedToken> executed;
  WorldState final_world;
};

inline WorldSnapshot snapshot(const WorldState& w) {
  WorldSnapshot s;
  for (const auto& o : w.objects) s.object_positions.emplace_back(o.id, o.position);
  s.attachment = w.attachment;
  return s;
}

inline void finish_metrics(EpisodeTrace& tr, const WorldState& world, const TaskSpec& task,
                           const RelationParams& rel_params) {
  const SceneGraph g = build_scene_graph(world, task, rel_params);
  double err = 0.0, sat = 0.0;
  int n = 0;
  for (const auto& e : g.edges) {
    if (!e.goal) continue;
    const double phi = relation_phi(e.rel, pose_of(world, e.subject), pose_of(world, e.object), e.params);
    err += std::sqrt(phi);
    sat += 2.0 * relation_sat(phi, e.params.gamma);
    ++n;
  }
  tr.terminal_error = n ? err / n : 0.0;
  tr.mean_relation_sat = n ? sat / n : 1.0;
  tr.success = g.goals_met() && tr.hard_collisions == 0;
  tr.final_world = world;
}

/**
 * Receding-horizon episode: decode a reference suffix once, then per stage
 * rebuild the scene graph, predict boundaries from the decoded tokens, run
 * the tree search, execute through the chosen segment's end, and continue
 * from the refreshed world. Pure function of (inputs, seed).
 */
inline EpisodeTrace plan_episode(const TaskSpec& task, const WorldState& world0,
                                 const HeadParams& params, const NoiseSchedule& sched,
                                 const GuidanceWeights& gw, const PlannerConfig& cfg,
                                 const RelationParams& rel_params, uint64_t seed,
                                 const StageAnnotation* oracle_ann = nullptr) {
  cfg.validate();
  const int L = task.horizon;
  const int d = params.cfg.action_dim;
  EpisodeTrace tr;
  WorldState world = world0;

  const int min_len = *std::min_element(cfg.len_grid.begin(), cfg.len_grid.end());
  const int max_steps = cfg.max_steps_factor * L;

  // Reference decode of the whole window from Gaussian init, conditioned on
  // the instruction's nominal stage layout (no decoded tokens exist yet).
  Rng init_rng(derive_seed(seed, {0xdec0de}));
  Trajectory x_ref = Trajectory::gaussian(L, d, init_rng);
  {
    SceneGraph g0 = build_scene_graph(world, task, rel_params);
    const StageAnnotation nominal = nominal_annotation(g0, world, L);
    const std::vector<double> c0 = encode_context(task, world, params.cfg.context_dim);
    MetaAction ref_act{0, L, cfg.ref_stride, 0.0, cfg.ref_temperature, cfg.t_start};
    int nfe = 0;
    x_ref = partial_denoise(x_ref, ref_act, params, c0, sched, g0, nominal, world, gw, init_rng,
                            cfg.sampler, &nfe);
    tr.decode_nfe += nfe;
  }

  int t_now = 0;
  for (int stage = 0; stage < L; ++stage) {
    SceneGraph graph = build_scene_graph(world, task, rel_params);
    if (graph.goals_met()) break;
    if (t_now + min_len > L || tr.steps_executed >= max_steps) break;

    const std::vector<double> c = encode_context(task, world, params.cfg.context_dim);
    const StageAnnotation ann_pred =
        (cfg.oracle_boundaries && oracle_ann)
            ? *oracle_ann
            : predict_annotation(x_ref, graph, world, t_now, cfg.speed_eps);

    const uint64_t stage_seed = derive_seed(seed, {0x57a6e, static_cast<uint64_t>(stage)});
    auto plan = plan_stage(x_ref, t_now, params, c, sched, graph, ann_pred, world, gw, cfg,
                           stage_seed);
    if (!plan) break;  // no segment fits in the remaining window
    if (plan->infeasible) {
      tr.failure = "stage " + std::to_string(stage) + " infeasible: " + plan->diagnostic;
      break;
    }

    // Committed prefix must never change: the candidate's complement was
    // frozen through every edit.
    for (int i = 0; i < t_now; ++i)
      for (int c2 = 0; c2 < d; ++c2)
        if (plan->candidate.at(i, c2) != x_ref.at(i, c2))
          throw std::logic_error("plan_episode: committed prefix was modified");

    StageRecord rec;
    rec.stage = stage;
    rec.chosen = plan->action;
    rec.stats = plan->stats;
    rec.commit_from = t_now;
    rec.commit_to = plan->action.start + plan->action.len;
    rec.stage_return = plan->stats.best_return;

    for (int i = t_now; i < rec.commit_to; ++i) {
      world = step_world(world, plan->candidate, i);
      if (world.hard_collision) ++tr.hard_collisions;
      ExecutedToken et;
      et.step = i;
      et.stage = stage;
      et.x = plan->candidate.at(i, 0);
      et.y = plan->candidate.at(i, 1);
      et.z = plan->candidate.at(i, 2);
      et.yaw = plan->candidate.at(i, kDimYaw);
      et.gripper = plan->candidate.at(i, kDimGrip);
      tr.executed.push_back(et);
      ++tr.steps_executed;
    }
    t_now = rec.commit_to;
    x_ref = plan->candidate;
    tr.plan_nfe += plan->stats.nfe;
    tr.expected_plan_nfe += plan->stats.expected_nfe;
    rec.world_after = snapshot(world);
    tr.stage_records.push_back(rec);
    ++tr.stages;
  }

  // Tail: if goals are pending but no segment fits, run out the decoded window.
  {
    SceneGraph graph = build_scene_graph(world, task, rel_params);
    if (!graph.goals_met() && tr.failure.empty()) {
      while (t_now < L && tr.steps_executed < max_steps) {
        world = step_world(world, x_ref, t_now);
        if (world.hard_collision) ++tr.hard_collisions;
        ExecutedToken et;
        et.step = t_now;
        et.stage = tr.stages;
        et.x = x_ref.at(t_now, 0);
        et.y = x_ref.at(t_now, 1);
        et.z = x_ref.at(t_now, 2);
        et.yaw = x_ref.at(t_now, kDimYaw);
        et.gripper = x_ref.at(t_now, kDimGrip);
        tr.executed.push_back(et);
        ++tr.steps_executed;
        ++t_now;
        if (build_scene_graph(world, task, rel_params).goals_met()) break;
      }
    }
  }

  finish_metrics(tr, world, task, rel_params);
  if (!tr.success && tr.failure.empty()) tr.failure = "goals unmet at horizon";
  return tr;
}

}  // namespace forge
