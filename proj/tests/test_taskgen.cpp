#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include <forge/taskgen.hpp>

using namespace forge;

TEST_CASE("script_expert: one-object put-in replays to success") {
  Rng rng(3);
  const TaskGenConfig cfg;
  auto [task, world] = sample_task_world(TaskTemplate::put_in, rng, cfg);
  auto [traj, ann] = script_expert(task, world, rng, cfg);

  REQUIRE(ann.boundaries.size() == 4);  // reach, grasp, transport, place
  REQUIRE(ann.boundaries.back() == task.horizon - 1);
  REQUIRE(execute_and_verify(task, world, traj, cfg.relations));
}

TEST_CASE("script_expert: two-object template has eight stages, both placed") {
  Rng rng(11);
  const TaskGenConfig cfg;
  auto [task, world] = sample_task_world(TaskTemplate::two_object_put_in, rng, cfg);
  auto [traj, ann] = script_expert(task, world, rng, cfg);
  REQUIRE(ann.boundaries.size() == 8);

  WorldState w = world;
  for (int i = 0; i < traj.length; ++i) {
    w = step_world(w, traj, i);
    REQUIRE_FALSE(w.hard_collision);
  }
  const SceneGraph g = build_scene_graph(w, task, cfg.relations);
  for (const auto& e : g.edges)
    if (e.goal) REQUIRE(e.satisfied);
}

TEST_CASE("script_expert: deterministic under the same seed") {
  const TaskGenConfig cfg;
  Rng r1(7), r2(7);
  auto [task1, world1] = sample_task_world(TaskTemplate::stack_on, r1, cfg);
  auto [task2, world2] = sample_task_world(TaskTemplate::stack_on, r2, cfg);
  auto [a, ann_a] = script_expert(task1, world1, r1, cfg);
  auto [b, ann_b] = script_expert(task2, world2, r2, cfg);
  REQUIRE(a.data == b.data);
  REQUIRE(ann_a.boundaries == ann_b.boundaries);
}

TEST_CASE("script_expert: stage ends strictly increase and land exactly on goals") {
  Rng rng(19);
  const TaskGenConfig cfg;
  auto [task, world] = sample_task_world(TaskTemplate::move_left_of, rng, cfg);
  auto [traj, ann] = script_expert(task, world, rng, cfg);
  for (size_t i = 1; i < ann.boundaries.size(); ++i)
    REQUIRE(ann.boundaries[i] > ann.boundaries[i - 1]);
  for (int b : ann.boundaries) {
    REQUIRE(dist(traj.pos(b), ann.stage_goals[b]) == 0.0);  // snapped, not approximate
  }
  REQUIRE(ann.final_goal == traj.pos(traj.length - 1));
}

TEST_CASE("script_expert: unreachable geometry rejected") {
  const TaskGenConfig cfg;
  WorldState w;
  w.ee.position = {0, -0.2, 0.1};
  w.objects = {{1, ObjectKind::movable, {0.9, 0.9, 0.02}, 0.02, 0.0},
               {2, ObjectKind::container, {-0.1, 0.1, 0.01}, 0.07, 0.05}};
  const TaskSpec task{TaskTemplate::put_in, {1}, 2, 64};
  Rng rng(1);
  REQUIRE_THROWS_AS(script_expert(task, w, rng, cfg), std::invalid_argument);
}

TEST_CASE("make_dataset: verified, reproducible, clearance respected") {
  TaskGenConfig cfg;
  const Dataset a = make_dataset(20, 42, cfg);
  REQUIRE(a.samples.size() == 20);

  // reproducible bytes
  const Dataset b = make_dataset(20, 42, cfg);
  REQUIRE(fnv1a(serialize_dataset(a)) == fnv1a(serialize_dataset(b)));

  for (const auto& s : a.samples) {
    REQUIRE(execute_and_verify(s.task, s.world, s.actions, cfg.relations));
    REQUIRE(s.actions.length == cfg.horizon);
    // pairwise clearance: gap of at least twice the larger radius
    for (size_t i = 0; i < s.world.objects.size(); ++i)
      for (size_t j = i + 1; j < s.world.objects.size(); ++j) {
        const auto& oi = s.world.objects[i];
        const auto& oj = s.world.objects[j];
        const double need = oi.radius + oj.radius + 2.0 * std::max(oi.radius, oj.radius);
        REQUIRE(dist(oi.position, oj.position) >= need);
      }
    // stage ends strictly increasing, last at the horizon
    REQUIRE(s.ann.boundaries.back() == cfg.horizon - 1);
  }
}

TEST_CASE("make_dataset: minimal dataset trains") {
  const Dataset ds = make_dataset(1, 7);
  REQUIRE(ds.samples.size() == 1);
  HeadConfig hc;
  hc.hidden = 8;
  hc.layers = 1;
  hc.window = 1;
  hc.time_dim = 4;
  hc.stage_dim = 2;
  TrainConfig tc;
  tc.steps = 3;
  tc.batch = 2;
  const HeadParams p = train(hc, tc, ds, 5);
  REQUIRE(param_count(p) > 0);
}

TEST_CASE("dataset round-trip preserves bytes") {
  const Dataset ds = make_dataset(5, 99);
  const std::string buf = serialize_dataset(ds);
  const Dataset back = deserialize_dataset(buf);
  REQUIRE(serialize_dataset(back) == buf);
  REQUIRE(back.samples.size() == ds.samples.size());
  REQUIRE(back.samples[2].actions.data == ds.samples[2].actions.data);
  REQUIRE(back.samples[3].ann.boundaries == ds.samples[3].ann.boundaries);

  const auto path = std::filesystem::temp_directory_path() / "forge_ds_test.bin";
  save_dataset(path.string(), ds);
  const Dataset loaded = load_dataset(path.string());
  REQUIRE(serialize_dataset(loaded) == buf);
  std::filesystem::remove(path);
}

TEST_CASE("make_dataset: invalid count rejected") {
  REQUIRE_THROWS_AS(make_dataset(0, 1), std::invalid_argument);
}
