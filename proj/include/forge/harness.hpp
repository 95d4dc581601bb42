#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "config.hpp"
#include "metrics.hpp"
#include "taskgen.hpp"

namespace forge {

using ordered_json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Evaluation suites
// ---------------------------------------------------------------------------

inline TaskTemplate suite_template(const std::string& suite, int episode) {
  if (suite == "two_object") return TaskTemplate::two_object_put_in;
  if (suite == "put_in") return TaskTemplate::put_in;
  if (suite == "stack") return TaskTemplate::stack_on;
  if (suite == "left") return TaskTemplate::move_left_of;
  // mixed: rotate
  const TaskTemplate all[4] = {TaskTemplate::put_in, TaskTemplate::stack_on,
                               TaskTemplate::move_left_of, TaskTemplate::two_object_put_in};
  return all[episode % 4];
}

/// Episode world for a suite: verified solvable by the scripted expert so
/// failures measure the planner, not impossible geometry.
inline std::tuple<TaskSpec, WorldState, StageAnnotation> suite_episode(const RunConfig& cfg,
                                                                       int episode) {
  const TaskTemplate tmpl = suite_template(cfg.eval_suite, episode);
  for (int attempt = 0; attempt < cfg.taskgen.retries; ++attempt) {
    Rng rng(derive_seed(cfg.seed, {0x5c31e, static_cast<uint64_t>(episode),
                                   static_cast<uint64_t>(attempt)}));
    try {
      auto [task, world] = sample_task_world(tmpl, rng, cfg.taskgen);
      auto [traj, ann] = script_expert(task, world, rng, cfg.taskgen);
      if (!execute_and_verify(task, world, traj, cfg.relations)) continue;
      return {task, world, ann};
    } catch (const std::exception&) {
      continue;
    }
  }
  throw std::runtime_error("suite_episode: no solvable world for episode " +
                           std::to_string(episode));
}

// ---------------------------------------------------------------------------
// Episode runners
// ---------------------------------------------------------------------------

/// Full planner arm.
inline EpisodeTrace run_planner_episode(const RunConfig& cfg, const HeadParams& params,
                                        const TaskSpec& task, const WorldState& world,
                                        const StageAnnotation* oracle_ann, uint64_t episode_seed) {
  const NoiseSchedule sched = build_cosine_schedule(cfg.schedule_steps);
  return plan_episode(task, world, params, sched, cfg.guide, cfg.planner, cfg.relations,
                      episode_seed, oracle_ann);
}

/**
 * Equal-budget reference: one full-window jumpy DDIM pass with fixed
 * hyperparameters and no guidance, executed open loop. A single pass can
 * spend at most t_start denoiser calls, so stride 1 is its compute ceiling.
 */
inline EpisodeTrace run_baseline_episode(const RunConfig& cfg, const HeadParams& params,
                                         const TaskSpec& task, const WorldState& world0,
                                         uint64_t episode_seed) {
  const NoiseSchedule sched = build_cosine_schedule(cfg.schedule_steps);
  const int L = task.horizon;
  const int d = params.cfg.action_dim;
  EpisodeTrace tr;
  WorldState world = world0;

  Rng rng(derive_seed(episode_seed, {0xba5e}));
  Trajectory x = Trajectory::gaussian(L, d, rng);
  const SceneGraph graph = build_scene_graph(world, task, cfg.relations);
  const StageAnnotation nominal = nominal_annotation(graph, world, L);
  const std::vector<double> c = encode_context(task, world, params.cfg.context_dim);
  MetaAction act{0, L, cfg.baseline_stride, 0.0, cfg.baseline_tau, cfg.baseline_t_start};
  int nfe = 0;
  x = partial_denoise(x, act, params, c, sched, graph, nominal, world, cfg.guide, rng,
                      cfg.planner.sampler, &nfe);
  tr.decode_nfe = nfe;

  for (int i = 0; i < L; ++i) {
    world = step_world(world, x, i);
    if (world.hard_collision) ++tr.hard_collisions;
    ExecutedToken et;
    et.step = i;
    et.stage = 0;
    et.x = x.at(i, 0);
    et.y = x.at(i, 1);
    et.z = x.at(i, 2);
    et.yaw = x.at(i, kDimYaw);
    et.gripper = x.at(i, kDimGrip);
    tr.executed.push_back(et);
    ++tr.steps_executed;
    if (build_scene_graph(world, task, cfg.relations).goals_met()) break;
  }
  finish_metrics(tr, world, task, cfg.relations);
  if (!tr.success && tr.failure.empty()) tr.failure = "goals unmet at horizon";
  return tr;
}

inline EpisodeMetrics trace_metrics(const EpisodeTrace& tr, int episode) {
  EpisodeMetrics m;
  m.episode = episode;
  m.success = tr.success;
  m.terminal_error = tr.terminal_error;
  m.relation_sat = tr.mean_relation_sat;
  m.collisions = tr.hard_collisions;
  m.nfe = tr.plan_nfe + tr.decode_nfe;
  m.failure = tr.failure;
  int iters = 0;
  double best = 0.0;
  for (const auto& sr : tr.stage_records) {
    iters += sr.stats.iterations;
    best = std::max(best, sr.stats.best_return);
  }
  m.planner_iterations = iters;
  m.best_return = best;
  return m;
}

/// Evaluate one arm over the suite. Episodes own independent seed streams,
/// so the loop order is irrelevant to the result.
inline MetricsReport run_eval(const RunConfig& cfg, const HeadParams& params,
                              const std::string& arm) {
  MetricsReport rep;
  rep.label = arm;
  for (int ep = 0; ep < cfg.eval_episodes; ++ep) {
    auto [task, world, ann] = suite_episode(cfg, ep);
    const uint64_t ep_seed = derive_seed(cfg.seed, {0xe9, static_cast<uint64_t>(ep)});
    EpisodeTrace tr;
    if (arm == "baseline")
      tr = run_baseline_episode(cfg, params, task, world, ep_seed);
    else
      tr = run_planner_episode(cfg, params, task, world,
                               cfg.planner.oracle_boundaries ? &ann : nullptr, ep_seed);
    rep.episodes.push_back(trace_metrics(tr, ep));
  }
  rep.aggregate(cfg.seed);
  return rep;
}

/// Planner ablation: scene graph removed from search (uniform priors, no
/// relation/collision guidance terms).
inline RunConfig without_scene_graph(RunConfig cfg) {
  cfg.planner.uniform_priors = true;
  cfg.guide.relation = 0.0;
  cfg.guide.collision = 0.0;
  return cfg;
}

// ---------------------------------------------------------------------------
// Serialization: traces, metrics, scene graphs, plots. All output is
// deterministic (ordered fields, shortest-round-trip doubles, no clocks).
// ---------------------------------------------------------------------------

inline ordered_json meta_action_json(const MetaAction& a) {
  return ordered_json{{"start", a.start},       {"len", a.len},
                      {"stride", a.stride},     {"guidance", a.guidance},
                      {"temperature", a.temperature}, {"t_start", a.t_start}};
}

inline ordered_json trace_to_json(const EpisodeTrace& tr) {
  ordered_json j;
  j["success"] = tr.success;
  j["failure"] = tr.failure;
  j["steps_executed"] = tr.steps_executed;
  j["hard_collisions"] = tr.hard_collisions;
  j["stages"] = tr.stages;
  j["plan_nfe"] = tr.plan_nfe;
  j["expected_plan_nfe"] = tr.expected_plan_nfe;
  j["decode_nfe"] = tr.decode_nfe;
  j["terminal_error"] = tr.terminal_error;
  j["mean_relation_sat"] = tr.mean_relation_sat;
  j["stage_records"] = ordered_json::array();
  for (const auto& sr : tr.stage_records) {
    ordered_json rec;
    rec["stage"] = sr.stage;
    rec["chosen"] = meta_action_json(sr.chosen);
    rec["considered"] = sr.stats.considered;
    rec["iterations"] = sr.stats.iterations;
    rec["max_depth"] = sr.stats.max_depth;
    rec["best_return"] = sr.stats.best_return;
    rec["nfe"] = sr.stats.nfe;
    rec["commit_from"] = sr.commit_from;
    rec["commit_to"] = sr.commit_to;
    rec["stage_return"] = sr.stage_return;
    ordered_json objs = ordered_json::array();
    for (const auto& [id, p] : sr.world_after.object_positions)
      objs.push_back(ordered_json{{"id", id}, {"x", p[0]}, {"y", p[1]}, {"z", p[2]}});
    rec["world_after"] = ordered_json{{"objects", objs}, {"attachment", sr.world_after.attachment}};
    j["stage_records"].push_back(rec);
  }
  return j;
}

inline std::string executed_csv(const EpisodeTrace& tr) {
  std::string out = "step,x,y,z,yaw,gripper,stage\n";
  char buf[256];
  for (const auto& e : tr.executed) {
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%d\n", e.step, e.x, e.y, e.z,
                  e.yaw, e.gripper, e.stage);
    out += buf;
  }
  return out;
}

inline ordered_json scene_graph_to_json(const SceneGraph& g, const WorldState& world) {
  ordered_json j;
  j["nodes"] = ordered_json::array();
  for (int id : g.node_ids) {
    ordered_json n;
    if (id == kNodeEE) {
      n["id"] = "ee";
      n["x"] = world.ee.position[0];
      n["y"] = world.ee.position[1];
      n["z"] = world.ee.position[2];
    } else if (id == kNodeTable) {
      n["id"] = "table";
    } else {
      const WorldObject* o = world.find(id);
      n["id"] = id;
      n["kind"] = kind_name(o->kind);
      n["x"] = o->position[0];
      n["y"] = o->position[1];
      n["z"] = o->position[2];
      n["radius"] = o->radius;
      if (o->kind == ObjectKind::container) n["rim_height"] = o->rim_height;
    }
    j["nodes"].push_back(n);
  }
  j["edges"] = ordered_json::array();
  for (const auto& e : g.edges) {
    ordered_json ej;
    ej["relation"] = relation_name(e.rel);
    ej["subject"] = e.subject == kNodeEE ? ordered_json("ee") : ordered_json(e.subject);
    ej["object"] = e.object == kNodeEE ? ordered_json("ee") : ordered_json(e.object);
    ej["params"] = ordered_json{{"perp_tol", e.params.perp_tol},
                                {"h_min", e.params.h_min},
                                {"gamma", e.params.gamma},
                                {"margin", e.params.margin},
                                {"yaw_tol", e.params.yaw_tol}};
    ej["goal"] = e.goal;
    ej["satisfied"] = e.satisfied;
    j["edges"].push_back(ej);
  }
  return j;
}

inline ordered_json report_to_json(const MetricsReport& r) {
  auto iv = [](const Interval& i) {
    return ordered_json{{"mean", i.mean}, {"lo", i.lo}, {"hi", i.hi}};
  };
  ordered_json j;
  j["label"] = r.label;
  j["episodes"] = static_cast<int>(r.episodes.size());
  j["success_rate"] = iv(r.success_rate);
  j["terminal_error"] = iv(r.terminal_error);
  j["relation_sat"] = iv(r.relation_sat);
  j["collisions"] = iv(r.collisions);
  j["mean_nfe"] = r.mean_nfe;
  j["mean_planner_iterations"] = r.mean_iterations;
  j["per_episode"] = ordered_json::array();
  for (const auto& e : r.episodes) {
    j["per_episode"].push_back(ordered_json{{"episode", e.episode},
                                            {"success", e.success},
                                            {"terminal_error", e.terminal_error},
                                            {"relation_sat", e.relation_sat},
                                            {"collisions", e.collisions},
                                            {"iterations", e.planner_iterations},
                                            {"nfe", e.nfe},
                                            {"best_return", e.best_return},
                                            {"failure", e.failure}});
  }
  return j;
}

inline std::string report_csv(const MetricsReport& r) {
  std::string out = "episode,success,terminal_error,relation_sat,collisions,iterations,nfe\n";
  char buf[256];
  for (const auto& e : r.episodes) {
    std::snprintf(buf, sizeof(buf), "%d,%d,%.17g,%.17g,%d,%d,%ld\n", e.episode, e.success ? 1 : 0,
                  e.terminal_error, e.relation_sat, e.collisions, e.planner_iterations, e.nfe);
    out += buf;
  }
  return out;
}

// ---------------------------------------------------------------------------
// SVG plot: top-down view of the table, objects, executed path and edited
// segments. Self-contained paths/circles/text, no external assets.
// ---------------------------------------------------------------------------

inline std::string svg_plot(const EpisodeTrace& tr, const WorldState& world0,
                            const TaskSpec& task) {
  const double extent = 0.42;
  const int size = 720;
  auto sx = [&](double x) { return (x + extent) / (2 * extent) * size; };
  auto sy = [&](double y) { return size - (y + extent) / (2 * extent) * size; };
  auto sr = [&](double r) { return r / (2 * extent) * size; };
  char buf[512];
  std::string s;
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"720\" height=\"760\" "
       "viewBox=\"0 0 720 760\">\n";
  s += "<rect x=\"0\" y=\"0\" width=\"720\" height=\"720\" fill=\"#fafaf7\" "
       "stroke=\"#888\"/>\n";

  for (const auto& o : world0.objects) {
    const char* fill = o.kind == ObjectKind::movable ? "#7ec8a9"
                       : o.kind == ObjectKind::container ? "none" : "#d88";
    std::snprintf(buf, sizeof(buf),
                  "<circle cx=\"%.2f\" cy=\"%.2f\" r=\"%.2f\" fill=\"%s\" stroke=\"#333\" "
                  "stroke-width=\"1.5\"%s/>\n",
                  sx(o.position[0]), sy(o.position[1]), sr(o.radius), fill,
                  o.kind == ObjectKind::container ? " stroke-dasharray=\"6 3\"" : "");
    s += buf;
    std::snprintf(buf, sizeof(buf),
                  "<text x=\"%.2f\" y=\"%.2f\" font-size=\"12\" fill=\"#333\">%d</text>\n",
                  sx(o.position[0]) + sr(o.radius) + 2, sy(o.position[1]), o.id);
    s += buf;
  }

  static const char* palette[6] = {"#2b6cb0", "#c05621", "#2f855a", "#822727", "#6b46c1", "#986801"};
  if (!tr.executed.empty()) {
    int seg_start = 0;
    for (size_t i = 1; i <= tr.executed.size(); ++i) {
      if (i == tr.executed.size() || tr.executed[i].stage != tr.executed[seg_start].stage) {
        std::string pts;
        for (size_t k = seg_start; k < i; ++k) {
          std::snprintf(buf, sizeof(buf), "%.2f,%.2f ", sx(tr.executed[k].x), sy(tr.executed[k].y));
          pts += buf;
        }
        std::snprintf(buf, sizeof(buf),
                      "<polyline points=\"%s\" fill=\"none\" stroke=\"%s\" stroke-width=\"2\"/>\n",
                      pts.c_str(), palette[tr.executed[seg_start].stage % 6]);
        s += buf;
        seg_start = static_cast<int>(i);
      }
    }
    // grasp/release markers
    for (size_t i = 1; i < tr.executed.size(); ++i) {
      const bool was = tr.executed[i - 1].gripper >= 0.5;
      const bool now = tr.executed[i].gripper >= 0.5;
      if (was != now) {
        std::snprintf(buf, sizeof(buf),
                      "<circle cx=\"%.2f\" cy=\"%.2f\" r=\"4\" fill=\"%s\"/>\n",
                      sx(tr.executed[i].x), sy(tr.executed[i].y), now ? "#000" : "#fff");
        s += buf;
      }
    }
  }

  std::snprintf(buf, sizeof(buf),
                "<text x=\"10\" y=\"745\" font-size=\"14\" fill=\"#222\">%s | %s | stages %d | "
                "collisions %d</text>\n",
                template_name(task.tmpl), tr.success ? "success" : "failure", tr.stages,
                tr.hard_collisions);
  s += buf;
  s += "</svg>\n";
  return s;
}

inline void write_file(const std::string& path, const std::string& content) {
  std::filesystem::create_directories(std::filesystem::path(path).parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write: " + path);
  f.write(content.data(), static_cast<std::streamsize>(content.size()));
}

}  // namespace forge
