#include <catch2/catch_amalgamated.hpp>

#include <forge/head.hpp>

using namespace forge;

namespace {

HeadConfig small_cfg() {
  HeadConfig c;
  c.action_dim = 7;
  c.context_dim = 32;
  c.window = 2;
  c.hidden = 10;
  c.layers = 2;
  c.time_dim = 8;
  c.stage_dim = 4;
  c.stage_slots = 6;
  c.schedule_steps = 100;  // tests run on a short horizon
  c.time_floor = 40;
  return c;
}

StageAnnotation make_ann(int L, std::vector<int> bounds, Rng& rng) {
  std::vector<uint8_t> mask(L, 0);
  std::vector<Vec3> goals(L, Vec3{0, 0, 0});
  for (int b : bounds) {
    mask[b] = 1;
    goals[b] = {rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), rng.uniform(0.0, 0.2)};
  }
  return StageAnnotation::from_mask(std::move(mask), std::move(goals),
                                    {rng.uniform(-0.2, 0.2), 0.0, 0.05});
}

TrainSample random_sample(const HeadConfig& cfg, int L, Rng& rng) {
  TrainSample s;
  s.x0 = Trajectory::gaussian(L, cfg.action_dim, rng);
  for (double& v : s.x0.data) v *= 0.2;
  s.ann = make_ann(L, {L / 3, L - 1}, rng);
  s.context.assign(cfg.context_dim, 0.0);
  for (double& v : s.context) v = rng.uniform(-1.0, 1.0);
  s.t = assign_stage_timesteps(s.ann, rng, 40, 90);
  s.eps = Trajectory::gaussian(L, cfg.action_dim, rng);
  return s;
}

WorldState tiny_world() {
  WorldState w;
  w.ee.position = {0, -0.2, 0.1};
  w.objects = {{1, ObjectKind::movable, {0.1, 0.0, 0.02}, 0.02, 0.0},
               {2, ObjectKind::container, {-0.1, 0.1, 0.01}, 0.07, 0.05}};
  return w;
}

}  // namespace

TEST_CASE("encode_context: deterministic and sensitive to geometry") {
  const WorldState w = tiny_world();
  const TaskSpec task{TaskTemplate::put_in, {1}, 2, 64};
  const auto a = encode_context(task, w, 32);
  const auto b = encode_context(task, w, 32);
  REQUIRE(a == b);
  REQUIRE(a.size() == 32);
  REQUIRE(a[0] == 1.0);  // put-in slot

  WorldState shifted = w;
  for (auto& o : shifted.objects) o.position[0] += 0.1;
  const auto c = encode_context(task, shifted, 32);
  for (int i = 0; i < 4; ++i) REQUIRE(a[i] == c[i]);  // template block unchanged
  REQUIRE(c[4] == Catch::Approx(a[4] + 0.1 / kWorkspaceHalf).epsilon(1e-12));
  REQUIRE(c[5] == a[5]);  // y slot unchanged
}

TEST_CASE("encode_context: degenerate empty world pads zeros") {
  WorldState w;
  TaskSpec task;
  task.tmpl = TaskTemplate::stack_on;
  task.subjects = {};
  task.target = -1;
  const auto c = encode_context(task, w, 32);
  REQUIRE(c[1] == 1.0);
  for (size_t i = 4; i < c.size(); ++i) REQUIRE(c[i] == 0.0);
}

TEST_CASE("encode_context: capacity overflow rejected") {
  WorldState w = tiny_world();
  for (int i = 0; i < 6; ++i)
    w.objects.push_back({10 + i, ObjectKind::obstacle, {0.0, 0.0, 0.03}, 0.03, 0.0});
  const TaskSpec task{TaskTemplate::put_in, {1}, 2, 64};
  REQUIRE_THROWS_AS(encode_context(task, w, 32), std::invalid_argument);
}

TEST_CASE("predict_noise: zero weights give zero output (direct noise head)") {
  HeadConfig cfg = small_cfg();
  cfg.clean_value_output = false;
  const HeadParams p = HeadParams::zeros(cfg);
  Rng rng(1);
  const Trajectory x = Trajectory::gaussian(9, cfg.action_dim, rng);
  const std::vector<double> c(cfg.context_dim, 0.3);
  const Trajectory out = predict_noise(x, c, TimestepVector(9, 50), p);
  for (double v : out.data) REQUIRE(v == 0.0);
}

TEST_CASE("predict_noise: zero weights on the clean-value head imply a zero clean estimate") {
  const HeadConfig cfg = small_cfg();  // clean_value_output on by default
  const HeadParams p = HeadParams::zeros(cfg);
  Rng rng(1);
  const NoiseSchedule sched = build_cosine_schedule(cfg.schedule_steps);
  const Trajectory x = Trajectory::gaussian(9, cfg.action_dim, rng);
  const std::vector<double> c(cfg.context_dim, 0.3);
  const TimestepVector t(9, 50);
  const Trajectory out = predict_noise(x, c, t, p);
  for (int i = 0; i < 9; ++i)
    for (int d = 0; d < cfg.action_dim; ++d)
      REQUIRE(out.at(i, d) ==
              Catch::Approx(x.at(i, d) / sched.sqrt_one_minus_ab(50)).margin(1e-14));
  const Trajectory xh = clean_estimate(x, out, t, sched);
  for (double v : xh.data) REQUIRE(std::fabs(v) < 1e-12);
}

TEST_CASE("predict_noise: shape contract across lengths") {
  const HeadConfig cfg = small_cfg();
  Rng rng(2);
  const HeadParams p = HeadParams::init(cfg, rng);
  const std::vector<double> c(cfg.context_dim, 0.1);
  for (int L : {1, 5, 33}) {
    const Trajectory x = Trajectory::gaussian(L, cfg.action_dim, rng);
    const Trajectory out = predict_noise(x, c, TimestepVector(L, 10), p);
    REQUIRE(out.length == L);
    REQUIRE(out.dim == cfg.action_dim);
  }
}

TEST_CASE("predict_noise: token-wise parameter sharing on a constant trajectory") {
  const HeadConfig cfg = small_cfg();
  Rng rng(3);
  const HeadParams p = HeadParams::init(cfg, rng);
  const std::vector<double> c(cfg.context_dim, -0.2);
  const int L = 12;
  Trajectory x(L, cfg.action_dim);
  for (int i = 0; i < L; ++i)
    for (int d = 0; d < cfg.action_dim; ++d) x.at(i, d) = 0.1 * (d + 1);
  const Trajectory out = predict_noise(x, c, TimestepVector(L, 42), p);
  // interior tokens see identical windows
  for (int i = cfg.window + 1; i < L - cfg.window; ++i)
    for (int d = 0; d < cfg.action_dim; ++d)
      REQUIRE(out.at(i, d) == Catch::Approx(out.at(cfg.window, d)).margin(1e-14));
}

TEST_CASE("predict_noise: conditioning sensitivity") {
  const HeadConfig cfg = small_cfg();
  Rng rng(4);
  const HeadParams p = HeadParams::init(cfg, rng);
  const Trajectory x = Trajectory::gaussian(6, cfg.action_dim, rng);
  std::vector<double> c1(cfg.context_dim, 0.2), c2(cfg.context_dim, 0.2);
  c2[5] += 0.5;
  const Trajectory o1 = predict_noise(x, c1, TimestepVector(6, 30), p);
  const Trajectory o2 = predict_noise(x, c2, TimestepVector(6, 30), p);
  double diff = 0.0;
  for (size_t k = 0; k < o1.data.size(); ++k) diff += std::fabs(o1.data[k] - o2.data[k]);
  REQUIRE(diff > 1e-8);
}

TEST_CASE("assign_stage_timesteps: single-stage plateau in range") {
  Rng rng(5);
  StageAnnotation ann = make_ann(16, {15}, rng);
  const TimestepVector t = assign_stage_timesteps(ann, rng);
  REQUIRE(t[0] >= 400);
  REQUIRE(t[0] <= 900);
  for (int v : t) REQUIRE(v == t[0]);
}

TEST_CASE("assign_stage_timesteps: reproducible under the same seed") {
  Rng a(77), b(77);
  StageAnnotation ann = make_ann(20, {6, 13, 19}, a);
  StageAnnotation ann2 = ann;
  const TimestepVector t1 = assign_stage_timesteps(ann, a);
  Rng c(77);
  make_ann(20, {6, 13, 19}, c);  // consume the same draws
  const TimestepVector t2 = assign_stage_timesteps(ann2, c);
  REQUIRE(t1 == t2);
}

TEST_CASE("assign_stage_timesteps: plateaus align with stage runs") {
  Rng rng(11);
  StageAnnotation ann = make_ann(24, {7, 23}, rng);
  bool saw_two_distinct = false;
  for (int trial = 0; trial < 40; ++trial) {
    const TimestepVector t = assign_stage_timesteps(ann, rng);
    // piecewise constant on runs [0,7] and [8,23]
    for (int i = 1; i <= 7; ++i) REQUIRE(t[i] == t[0]);
    for (int i = 9; i <= 23; ++i) REQUIRE(t[i] == t[8]);
    const bool r0 = t[0] != 0, r1 = t[8] != 0;
    REQUIRE((r0 || r1));
    if (r0 && r1 && t[0] != t[8]) saw_two_distinct = true;
    for (int v : t) REQUIRE((v == 0 || (v >= 400 && v <= 900)));
  }
  REQUIRE(saw_two_distinct);
}

TEST_CASE("df_loss: zero when prediction is perfect and geometry weights are off") {
  HeadConfig cfg = small_cfg();
  cfg.clean_value_output = false;  // zero weights then predict exactly zero noise
  Rng rng(6);
  const int L = 10;
  TrainSample s = random_sample(cfg, L, rng);
  // oracle head is impossible; instead check the loss formula directly with
  // a zero-noise sample: eps = 0 and zero-weight head predict 0 -> mse = 0
  for (double& v : s.eps.data) v = 0.0;
  const HeadParams p = HeadParams::zeros(cfg);
  const NoiseSchedule sched = build_cosine_schedule(100);
  LossWeights lw{0, 0, 0, 0};
  REQUIRE(df_loss(p, {s}, lw, sched) == 0.0);
}

TEST_CASE("df_loss: geometric terms vanish on an exact constant landing") {
  const HeadConfig cfg = small_cfg();
  const int L = 8;
  Rng rng(7);
  TrainSample s;
  s.x0 = Trajectory(L, cfg.action_dim);
  for (int i = 0; i < L; ++i) s.x0.set_pos(i, {0.1, 0.2, 0.05});
  std::vector<uint8_t> mask(L, 0);
  std::vector<Vec3> goals(L, Vec3{0, 0, 0});
  mask[L - 1] = 1;
  goals[L - 1] = {0.1, 0.2, 0.05};
  s.ann = StageAnnotation::from_mask(std::move(mask), std::move(goals), {0.1, 0.2, 0.05});
  s.context.assign(cfg.context_dim, 0.0);
  s.t = TimestepVector(L, 0);  // all clean: xhat == x0 exactly
  s.eps = Trajectory(L, cfg.action_dim);
  const HeadParams p = HeadParams::zeros(cfg);
  const NoiseSchedule sched = build_cosine_schedule(100);
  const LossWeights lw{5.0, 3.0, 1.0, 0.1};
  REQUIRE(df_loss(p, {s}, lw, sched) == 0.0);
}

TEST_CASE("df_loss: decomposition matches independently computed terms") {
  const HeadConfig cfg = small_cfg();
  Rng rng(8);
  const int L = 12;
  const TrainSample s = random_sample(cfg, L, rng);
  Rng prng(9);
  const HeadParams p = HeadParams::init(cfg, prng);
  const NoiseSchedule sched = build_cosine_schedule(100);

  // independent recomputation of each term
  const Trajectory x_t = forward_noise(s.x0, s.eps, s.t, sched);
  const StageContext sctx = StageContext::from(s.ann);
  const Trajectory ep = predict_noise(x_t, s.context, s.t, p, &sctx);
  const Trajectory xhat = clean_estimate(x_t, ep, s.t, sched);

  double mse = 0, eot = 0, stage = 0, traj = 0, smooth = 0;
  for (size_t k = 0; k < ep.data.size(); ++k) {
    const double e = ep.data[k] - s.eps.data[k];
    mse += e * e;
  }
  mse /= L;
  {
    const Vec3 e = xhat.pos(L - 1) - s.ann.final_goal;
    eot = dot(e, e);
  }
  for (int b : s.ann.boundaries) {
    const Vec3 e = xhat.pos(b) - s.ann.stage_goals[b];
    stage += dot(e, e);
  }
  for (size_t k = 0; k < ep.data.size(); ++k) {
    const double e = xhat.data[k] - s.x0.data[k];
    traj += e * e;
  }
  traj /= L;
  for (int i = 1; i < L; ++i)
    for (int d = 0; d < cfg.action_dim; ++d) {
      const double e = xhat.at(i, d) - xhat.at(i - 1, d);
      smooth += e * e;
    }
  smooth /= L;

  REQUIRE(df_loss(p, {s}, {0, 0, 0, 0}, sched) == Catch::Approx(mse).margin(1e-10));
  REQUIRE(df_loss(p, {s}, {1, 0, 0, 0}, sched) == Catch::Approx(mse + eot).margin(1e-10));
  REQUIRE(df_loss(p, {s}, {0, 1, 0, 0}, sched) == Catch::Approx(mse + stage).margin(1e-10));
  REQUIRE(df_loss(p, {s}, {0, 0, 1, 0}, sched) == Catch::Approx(mse + traj).margin(1e-10));
  REQUIRE(df_loss(p, {s}, {0, 0, 0, 1}, sched) == Catch::Approx(mse + smooth).margin(1e-10));
}

TEST_CASE("df_loss: duplicated batch entry leaves the mean unchanged") {
  const HeadConfig cfg = small_cfg();
  Rng rng(10);
  const TrainSample s = random_sample(cfg, 10, rng);
  Rng prng(11);
  const HeadParams p = HeadParams::init(cfg, prng);
  const NoiseSchedule sched = build_cosine_schedule(100);
  const LossWeights lw;
  const double l1 = df_loss(p, {s}, lw, sched);
  const double l2 = df_loss(p, {s, s}, lw, sched);
  REQUIRE(l1 == Catch::Approx(l2).margin(1e-12));
}

TEST_CASE("loss_gradient matches central finite differences") {
  const HeadConfig cfg = small_cfg();
  const NoiseSchedule sched = build_cosine_schedule(100);
  Rng rng(12);
  const LossWeights lw{5.0, 3.0, 1.0, 0.1};
  TrainBatch batch{random_sample(cfg, 10, rng), random_sample(cfg, 10, rng)};

  Rng prng(13);
  HeadParams p = HeadParams::init(cfg, prng);
  const HeadParams g = loss_gradient(p, batch, lw, sched);

  auto p_t = tensor_list(p);
  auto g_t = tensor_list(const_cast<HeadParams&>(g));
  const double h = 1e-5;
  Rng pick(14);
  int checked = 0;
  while (checked < 60) {
    const int ti = pick.uniform_int(0, static_cast<int>(p_t.size()) - 1);
    if (p_t[ti]->empty()) continue;
    const int j = pick.uniform_int(0, static_cast<int>(p_t[ti]->size()) - 1);
    const double orig = (*p_t[ti])[j];
    (*p_t[ti])[j] = orig + h;
    const double lp = df_loss(p, batch, lw, sched);
    (*p_t[ti])[j] = orig - h;
    const double lm = df_loss(p, batch, lw, sched);
    (*p_t[ti])[j] = orig;
    const double fd = (lp - lm) / (2 * h);
    const double an = (*g_t[ti])[j];
    const double denom = std::max({std::fabs(fd), std::fabs(an), 1e-6});
    REQUIRE(std::fabs(fd - an) / denom < 1e-5);
    ++checked;
  }
}

TEST_CASE("loss_gradient: duplicated entry keeps the gradient (mean semantics)") {
  const HeadConfig cfg = small_cfg();
  const NoiseSchedule sched = build_cosine_schedule(100);
  Rng rng(15);
  const TrainSample s = random_sample(cfg, 8, rng);
  Rng prng(16);
  HeadParams p = HeadParams::init(cfg, prng);
  const HeadParams g1 = loss_gradient(p, {s}, {}, sched);
  const HeadParams g2 = loss_gradient(p, {s, s}, {}, sched);
  auto a = tensor_list(const_cast<HeadParams&>(g1));
  auto b = tensor_list(const_cast<HeadParams&>(g2));
  for (size_t k = 0; k < a.size(); ++k)
    for (size_t j = 0; j < a[k]->size(); ++j)
      REQUIRE((*a[k])[j] == Catch::Approx((*b[k])[j]).margin(1e-12));
}

TEST_CASE("loss_gradient: geometric terms scale linearly in the weights") {
  HeadConfig cfg = small_cfg();
  const NoiseSchedule sched = build_cosine_schedule(100);
  Rng rng(17);
  const TrainSample s = random_sample(cfg, 8, rng);
  Rng prng(18);
  HeadParams p = HeadParams::init(cfg, prng);

  // isolate geometry: subtract the mse-only gradient
  const HeadParams g_mse = loss_gradient(p, {s}, {0, 0, 0, 0}, sched);
  const HeadParams g_1x = loss_gradient(p, {s}, {5, 3, 1, 0.1}, sched);
  const HeadParams g_2x = loss_gradient(p, {s}, {10, 6, 2, 0.2}, sched);
  auto m = tensor_list(const_cast<HeadParams&>(g_mse));
  auto a = tensor_list(const_cast<HeadParams&>(g_1x));
  auto b = tensor_list(const_cast<HeadParams&>(g_2x));
  for (size_t k = 0; k < a.size(); ++k)
    for (size_t j = 0; j < a[k]->size(); ++j) {
      const double geo1 = (*a[k])[j] - (*m[k])[j];
      const double geo2 = (*b[k])[j] - (*m[k])[j];
      REQUIRE(geo2 == Catch::Approx(2.0 * geo1).margin(1e-9));
    }
}
