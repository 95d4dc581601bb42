// forge: data generation, training, planning, evaluation and ablations for
// the stage-aligned diffusion control stack on the synthetic tabletop world.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <string>

#include <forge/config.hpp>
#include <forge/harness.hpp>

namespace fs = std::filesystem;
using namespace forge;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;
constexpr int kExitSuiteFailed = 3;

RunConfig load_run_config(const std::string& config_path, uint64_t seed_override, bool has_seed,
                          const std::string& out_override) {
  RunConfig cfg = config_path.empty() ? RunConfig{} : load_config(config_path);
  if (has_seed) cfg.seed = seed_override;
  if (!out_override.empty()) cfg.out_dir = out_override;
  cfg.taskgen.relations = cfg.relations;
  cfg.planner.ret = cfg.ret;
  cfg.train.schedule_steps = cfg.schedule_steps;
  cfg.validate();
  return cfg;
}

int cmd_gen_data(const RunConfig& cfg, int n_override) {
  const int n = n_override > 0 ? n_override : cfg.gen_n;
  const Dataset ds = make_dataset(n, cfg.seed, cfg.taskgen);
  const std::string payload = serialize_dataset(ds);
  const std::string path = cfg.out_dir + "/dataset.bin";
  write_file(path, payload);

  ordered_json index;
  index["format_version"] = ds.version;
  index["length"] = ds.length;
  index["action_dim"] = ds.action_dim;
  index["seed"] = ds.seed;
  index["n"] = static_cast<int>(ds.samples.size());
  index["samples"] = ordered_json::array();
  for (size_t i = 0; i < ds.samples.size(); ++i) {
    const auto& s = ds.samples[i];
    ordered_json js;
    js["i"] = static_cast<int>(i);
    js["template"] = template_name(s.task.tmpl);
    js["objects"] = static_cast<int>(s.world.objects.size());
    js["stages"] = static_cast<int>(s.ann.boundaries.size());
    index["samples"].push_back(js);
  }
  write_file(cfg.out_dir + "/dataset.index.json", index.dump(2) + "\n");

  std::printf("wrote %zu samples to %s\n", ds.samples.size(), path.c_str());
  std::printf("hash %016llx\n", static_cast<unsigned long long>(fnv1a(payload)));
  return kExitOk;
}

int cmd_train(const RunConfig& cfg, const std::string& data_path, const std::string& resume_path) {
  const Dataset ds = load_dataset(data_path.empty() ? cfg.out_dir + "/dataset.bin" : data_path);
  std::vector<TrainLogEntry> log;
  TrainState state;
  HeadParams params;
  if (!resume_path.empty()) {
    const TrainState prev = load_train_state(resume_path + ".state");
    params = train(cfg.head, cfg.train, ds, cfg.seed, &log, &state, &prev);
  } else {
    params = train(cfg.head, cfg.train, ds, cfg.seed, &log, &state);
  }
  const std::string ckpt = cfg.out_dir + "/head.ckpt";
  save_checkpoint(ckpt, params, cfg.seed);
  save_train_state(ckpt + ".state", state, cfg.seed);

  std::string csv = "step,loss,lr\n";
  char buf[128];
  for (const auto& e : log) {
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g\n", e.step, e.loss, e.lr);
    csv += buf;
  }
  write_file(cfg.out_dir + "/train_log.csv", csv);
  std::printf("checkpoint %s (%zu parameters)\n", ckpt.c_str(), param_count(params));
  if (!log.empty()) std::printf("loss %.6f -> %.6f\n", log.front().loss, log.back().loss);
  return kExitOk;
}

int cmd_plan(RunConfig cfg, const std::string& ckpt_path, int budget_override, int episode) {
  if (budget_override > 0) cfg.planner.budget = budget_override;
  const HeadParams params = load_checkpoint(ckpt_path);
  auto [task, world, ann] = suite_episode(cfg, episode);
  const uint64_t ep_seed = derive_seed(cfg.seed, {0xe9, static_cast<uint64_t>(episode)});
  const EpisodeTrace tr = run_planner_episode(cfg, params, task, world,
                                              cfg.planner.oracle_boundaries ? &ann : nullptr,
                                              ep_seed);

  write_file(cfg.out_dir + "/trace.json", trace_to_json(tr).dump(2) + "\n");
  write_file(cfg.out_dir + "/executed.csv", executed_csv(tr));
  write_file(cfg.out_dir + "/plot.svg", svg_plot(tr, world, task));
  {
    const SceneGraph g0 = build_scene_graph(world, task, cfg.relations);
    write_file(cfg.out_dir + "/scene_initial.json",
               scene_graph_to_json(g0, world).dump(2) + "\n");
    const SceneGraph g1 = build_scene_graph(tr.final_world, task, cfg.relations);
    write_file(cfg.out_dir + "/scene_final.json",
               scene_graph_to_json(g1, tr.final_world).dump(2) + "\n");
  }
  std::printf("%s | stages %d | steps %d | collisions %d | plan NFE %ld | decode NFE %ld\n",
              tr.success ? "success" : ("failure: " + tr.failure).c_str(), tr.stages,
              tr.steps_executed, tr.hard_collisions, tr.plan_nfe, tr.decode_nfe);
  return kExitOk;
}

int cmd_eval(const RunConfig& cfg, const std::string& ckpt_path, int episodes_override) {
  RunConfig c = cfg;
  if (episodes_override > 0) c.eval_episodes = episodes_override;
  const HeadParams params = load_checkpoint(ckpt_path);

  const MetricsReport planner_rep = run_eval(c, params, "planner");
  const MetricsReport baseline_rep = run_eval(c, params, "baseline");

  ordered_json j;
  j["suite"] = c.eval_suite;
  j["episodes"] = c.eval_episodes;
  j["planner"] = report_to_json(planner_rep);
  j["baseline"] = report_to_json(baseline_rep);
  write_file(c.out_dir + "/metrics.json", j.dump(2) + "\n");
  write_file(c.out_dir + "/metrics_planner.csv", report_csv(planner_rep));
  write_file(c.out_dir + "/metrics_baseline.csv", report_csv(baseline_rep));

  auto show = [](const MetricsReport& r) {
    std::printf("%-9s SR %.3f [%.3f, %.3f]  terr %.4f  rsat %.3f  coll %.2f  NFE %.0f\n",
                r.label.c_str(), r.success_rate.mean, r.success_rate.lo, r.success_rate.hi,
                r.terminal_error.mean, r.relation_sat.mean, r.collisions.mean, r.mean_nfe);
  };
  show(planner_rep);
  show(baseline_rep);
  if (planner_rep.success_rate.mean < cfg.eval_min_sr) return kExitSuiteFailed;
  return kExitOk;
}

int cmd_ablate(const RunConfig& cfg, const std::string& ckpt_path,
               const std::string& nostage_ckpt) {
  const HeadParams full = load_checkpoint(ckpt_path);

  std::vector<std::pair<std::string, MetricsReport>> rows;
  rows.emplace_back("full", run_eval(cfg, full, "planner"));

  {
    RunConfig nog = without_scene_graph(cfg);
    MetricsReport r = run_eval(nog, full, "planner");
    r.label = "no_scene_graph";
    rows.emplace_back("no_scene_graph", r);
  }
  if (!nostage_ckpt.empty()) {
    const HeadParams nostage = load_checkpoint(nostage_ckpt);
    MetricsReport r = run_eval(cfg, nostage, "planner");
    r.label = "no_stage_guidance";
    rows.emplace_back("no_stage_guidance", r);
  }

  ordered_json j;
  j["suite"] = cfg.eval_suite;
  j["episodes"] = cfg.eval_episodes;
  for (auto& [name, rep] : rows) j[name] = report_to_json(rep);
  write_file(cfg.out_dir + "/ablation.json", j.dump(2) + "\n");

  std::string csv = "variant,sr,terminal_error,relation_sat,collisions,mean_nfe\n";
  char buf[256];
  for (auto& [name, rep] : rows) {
    std::snprintf(buf, sizeof(buf), "%s,%.17g,%.17g,%.17g,%.17g,%.17g\n", name.c_str(),
                  rep.success_rate.mean, rep.terminal_error.mean, rep.relation_sat.mean,
                  rep.collisions.mean, rep.mean_nfe);
    csv += buf;
  }
  write_file(cfg.out_dir + "/ablation.csv", csv);
  for (auto& [name, rep] : rows)
    std::printf("%-18s SR %.3f  terr %.4f  rsat %.3f  coll %.2f\n", name.c_str(),
                rep.success_rate.mean, rep.terminal_error.mean, rep.relation_sat.mean,
                rep.collisions.mean);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"stage-aligned diffusion planning on a synthetic tabletop world"};
  app.require_subcommand(1);

  std::string config_path, out_dir, ckpt, data_path, resume_path, nostage_ckpt, suite;
  uint64_t seed = 0;
  bool has_seed = false;
  int n = 0, budget = 0, episodes = 0, episode = 0;

  app.add_option("--config", config_path, "configuration file (key = value lines)");
  auto* seed_opt = app.add_option("--seed", seed, "master seed");
  app.add_option("--out", out_dir, "output directory");

  auto* gen = app.add_subcommand("gen-data", "generate a verified demonstration dataset");
  gen->add_option("--n", n, "sample count (overrides gen.n)");

  auto* tr = app.add_subcommand("train", "train the noise-prediction head");
  tr->add_option("--data", data_path, "dataset file (default <out>/dataset.bin)");
  tr->add_option("--resume", resume_path, "checkpoint whose .state sidecar to resume from");

  auto* pl = app.add_subcommand("plan", "plan and execute one episode, writing trace artifacts");
  pl->add_option("--ckpt", ckpt, "checkpoint file")->required();
  pl->add_option("--budget", budget, "search budget override");
  pl->add_option("--episode", episode, "suite episode index");

  auto* ev = app.add_subcommand("eval", "evaluate planner and baseline over a suite");
  ev->add_option("--ckpt", ckpt, "checkpoint file")->required();
  ev->add_option("--episodes", episodes, "episode count override");
  ev->add_option("--suite", suite, "suite override");

  auto* ab = app.add_subcommand("ablate", "compare full model against ablated variants");
  ab->add_option("--ckpt", ckpt, "checkpoint file")->required();
  ab->add_option("--ckpt-nostage", nostage_ckpt, "checkpoint trained without stage guidance");
  ab->add_option("--episodes", episodes, "episode count override");
  ab->add_option("--suite", suite, "suite override");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }
  has_seed = seed_opt->count() > 0;

  try {
    RunConfig cfg = load_run_config(config_path, seed, has_seed, out_dir);
    if (!suite.empty()) {
      cfg.eval_suite = suite;
      cfg.validate();
    }
    if (episodes > 0) cfg.eval_episodes = episodes;

    if (gen->parsed()) return cmd_gen_data(cfg, n);
    if (tr->parsed()) return cmd_train(cfg, data_path, resume_path);
    if (pl->parsed()) return cmd_plan(cfg, ckpt, budget, episode);
    if (ev->parsed()) return cmd_eval(cfg, ckpt, episodes);
    if (ab->parsed()) return cmd_ablate(cfg, ckpt, nostage_ckpt);
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
}
