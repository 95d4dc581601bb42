#pragma once

#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "mctd.hpp"
#include "taskgen.hpp"
#include "train.hpp"

namespace forge {

/**
 * Flat key-value run configuration with dotted section keys. Unknown keys
 * are rejected by name; every field is validated before a run starts.
 */
struct RunConfig {
  uint64_t seed = 7;
  std::string out_dir = "runs/out";

  int schedule_steps = 1000;

  HeadConfig head;
  TrainConfig train;
  TaskGenConfig taskgen;
  RelationParams relations;
  GuidanceWeights guide;
  ReturnWeights ret;
  PlannerConfig planner;

  int gen_n = 500;

  int eval_episodes = 50;
  std::string eval_suite = "two_object";
  double eval_min_sr = 0.0;

  int baseline_stride = 1;
  double baseline_tau = 0.75;
  int baseline_t_start = 700;

  void validate() const {
    if (schedule_steps < 1) throw_invalid("schedule.steps must be >= 1");
    head.validate();
    train.validate();
    planner.validate();
    relations.validate();
    if (gen_n < 1) throw_invalid("gen.n must be >= 1");
    if (eval_episodes < 1) throw_invalid("eval.episodes must be >= 1");
    if (baseline_stride < 1) throw_invalid("baseline.stride must be >= 1");
    if (eval_suite != "two_object" && eval_suite != "put_in" && eval_suite != "stack" &&
        eval_suite != "left" && eval_suite != "mixed")
      throw_invalid("eval.suite must be one of two_object|put_in|stack|left|mixed");
    if (guide.terminal < 0 || guide.stage < 0 || guide.relation < 0 || guide.collision < 0)
      throw_invalid("guide.* weights must be nonnegative");
  }
};

namespace detail {

inline bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw_invalid("config: boolean expected for " + key);
}

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace detail

/// Apply one key=value setting; throws naming the key when it is unknown.
inline void apply_config_key(RunConfig& c, const std::string& key, const std::string& value) {
  auto as_int = [&] { return std::stoi(value); };
  auto as_u64 = [&] { return static_cast<uint64_t>(std::stoull(value)); };
  auto as_double = [&] { return std::stod(value); };
  auto as_bool = [&] { return detail::parse_bool(value, key); };

  if (key == "seed") c.seed = as_u64();
  else if (key == "out") c.out_dir = value;
  else if (key == "schedule.steps")
    c.schedule_steps = c.train.schedule_steps = c.head.schedule_steps = as_int();

  else if (key == "head.hidden") c.head.hidden = as_int();
  else if (key == "head.layers") c.head.layers = as_int();
  else if (key == "head.window") c.head.window = as_int();
  else if (key == "head.context_dim") c.head.context_dim = as_int();
  else if (key == "head.time_dim") c.head.time_dim = as_int();
  else if (key == "head.stage_dim") c.head.stage_dim = as_int();
  else if (key == "head.stage_slots") c.head.stage_slots = as_int();
  else if (key == "head.time_floor") c.head.time_floor = as_int();

  else if (key == "train.steps") c.train.steps = as_int();
  else if (key == "train.batch") c.train.batch = as_int();
  else if (key == "train.warmup") c.train.warmup = as_int();
  else if (key == "train.lr") c.train.lr = as_double();
  else if (key == "train.weight_decay") c.train.weight_decay = as_double();
  else if (key == "train.clip_norm") c.train.clip_norm = as_double();
  else if (key == "train.ema") c.train.ema_decay = as_double();
  else if (key == "train.adam") c.train.adam = as_bool();
  else if (key == "train.cosine_lr") c.train.cosine_lr = as_bool();
  else if (key == "train.t_lo") c.train.t_lo = as_int();
  else if (key == "train.t_hi") c.train.t_hi = as_int();
  else if (key == "train.log_every") c.train.log_every = as_int();
  else if (key == "train.loss.eot") c.train.loss.eot = as_double();
  else if (key == "train.loss.stage") c.train.loss.stage = as_double();
  else if (key == "train.loss.traj") c.train.loss.traj = as_double();
  else if (key == "train.loss.smooth") c.train.loss.smooth = as_double();

  else if (key == "taskgen.horizon") c.taskgen.horizon = as_int();
  else if (key == "taskgen.noise_std") c.taskgen.noise_std = as_double();
  else if (key == "taskgen.workspace") c.taskgen.workspace = as_double();
  else if (key == "taskgen.obstacle_prob") c.taskgen.obstacle_prob = as_double();
  else if (key == "taskgen.retries") c.taskgen.retries = as_int();

  else if (key == "relations.gamma") c.relations.gamma = as_double();
  else if (key == "relations.perp_tol") c.relations.perp_tol = as_double();
  else if (key == "relations.h_min") c.relations.h_min = as_double();
  else if (key == "relations.margin") c.relations.margin = as_double();
  else if (key == "relations.yaw_tol") c.relations.yaw_tol = as_double();
  else if (key == "relations.inverted_on_top_hinge")
    c.relations.inverted_on_top_hinge = as_bool();

  else if (key == "guide.terminal") c.guide.terminal = as_double();
  else if (key == "guide.stage") c.guide.stage = as_double();
  else if (key == "guide.relation") c.guide.relation = as_double();
  else if (key == "guide.collision") c.guide.collision = as_double();

  else if (key == "return.pos") c.ret.pos = as_double();
  else if (key == "return.relation") c.ret.relation = as_double();
  else if (key == "return.collision") c.ret.collision = as_double();
  else if (key == "return.smooth") c.ret.smooth = as_double();
  else if (key == "return.sigma_pos") c.ret.sigma_pos = as_double();
  else if (key == "return.sigma_col") c.ret.sigma_col = as_double();
  else if (key == "return.sigma_smooth") c.ret.sigma_smooth = as_double();

  else if (key == "planner.budget") c.planner.budget = as_int();
  else if (key == "planner.c_puct") c.planner.c_puct = as_double();
  else if (key == "planner.max_depth") c.planner.max_depth = as_int();
  else if (key == "planner.window_radius") c.planner.window_radius = as_int();
  else if (key == "planner.t_start") c.planner.t_start = as_int();
  else if (key == "planner.rollout") {
    if (value == "greedy") c.planner.rollout = PlannerConfig::RolloutPolicy::greedy;
    else if (value == "softmax") c.planner.rollout = PlannerConfig::RolloutPolicy::softmax;
    else throw_invalid("config: planner.rollout must be greedy or softmax");
  } else if (key == "planner.oracle_boundaries") c.planner.oracle_boundaries = as_bool();
  else if (key == "planner.uniform_priors") c.planner.uniform_priors = as_bool();
  else if (key == "planner.prior_boundary") c.planner.prior_boundary = as_double();
  else if (key == "planner.prior_progress") c.planner.prior_progress = as_double();
  else if (key == "planner.prior_risk") c.planner.prior_risk = as_double();
  else if (key == "planner.ref_stride") c.planner.ref_stride = as_int();
  else if (key == "planner.ref_temperature") c.planner.ref_temperature = as_double();
  else if (key == "planner.speed_eps") c.planner.speed_eps = as_double();
  else if (key == "planner.max_steps_factor") c.planner.max_steps_factor = as_int();
  else if (key == "sampler.flip_guidance_sign") c.planner.sampler.flip_guidance_sign = as_bool();
  else if (key == "sampler.step_cap") c.planner.sampler.step_cap = as_double();

  else if (key == "gen.n") c.gen_n = as_int();
  else if (key == "eval.episodes") c.eval_episodes = as_int();
  else if (key == "eval.suite") c.eval_suite = value;
  else if (key == "eval.min_sr") c.eval_min_sr = as_double();
  else if (key == "baseline.stride") c.baseline_stride = as_int();
  else if (key == "baseline.tau") c.baseline_tau = as_double();
  else if (key == "baseline.t_start") c.baseline_t_start = as_int();

  else throw_invalid("config: unknown key '" + key + "'");
}

inline RunConfig parse_config_text(const std::string& text) {
  RunConfig c;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw_invalid("config: line " + std::to_string(lineno) + " is not key = value");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    apply_config_key(c, key, value);
  }
  // keep dependent sections in sync
  c.taskgen.relations = c.relations;
  c.planner.ret = c.ret;
  c.head.action_dim = kDefaultActionDim;
  c.head.schedule_steps = c.schedule_steps;
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read config: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  RunConfig c = parse_config_text(ss.str());
  c.validate();
  return c;
}

}  // namespace forge
