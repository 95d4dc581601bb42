#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>

#include <forge/taskgen.hpp>
#include <forge/train.hpp>

using namespace forge;

namespace {

/// Toy motion data: straight lines in x with stage ends, everything else flat.
Dataset toy_dataset(int n, uint64_t seed) {
  Dataset ds;
  ds.length = 16;
  ds.action_dim = 7;
  ds.seed = seed;
  Rng rng(seed);
  for (int k = 0; k < n; ++k) {
    DatasetSample s;
    s.task = {TaskTemplate::put_in, {1}, 2, ds.length};
    s.world.ee.position = {0, -0.2, 0.1};
    s.world.objects = {{1, ObjectKind::movable, {rng.uniform(-0.2, 0.2), 0.0, 0.02}, 0.02, 0.0},
                       {2, ObjectKind::container, {0.2, 0.2, 0.01}, 0.07, 0.05}};
    s.actions = Trajectory(ds.length, 7);
    const double x0 = rng.uniform(-0.3, 0.0);
    const double x1 = rng.uniform(0.0, 0.3);
    for (int i = 0; i < ds.length; ++i) {
      const double u = static_cast<double>(i) / (ds.length - 1);
      s.actions.set_pos(i, {x0 + u * (x1 - x0), 0.05, 0.1});
      s.actions.at(i, kDimGrip) = u > 0.5 ? 1.0 : 0.0;
    }
    std::vector<uint8_t> mask(ds.length, 0);
    std::vector<Vec3> goals(ds.length, Vec3{0, 0, 0});
    mask[7] = 1;
    goals[7] = s.actions.pos(7);
    mask[15] = 1;
    goals[15] = s.actions.pos(15);
    s.ann = StageAnnotation::from_mask(std::move(mask), std::move(goals), s.actions.pos(15));
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

HeadConfig smoke_cfg() {
  HeadConfig c;
  c.window = 2;
  c.hidden = 16;
  c.layers = 1;
  c.time_dim = 8;
  c.stage_dim = 4;
  c.stage_slots = 8;
  return c;
}

}  // namespace

TEST_CASE("train: smoke run halves the evaluation loss") {
  const Dataset data = toy_dataset(8, 21);
  HeadConfig hc = smoke_cfg();
  // the clean-value head starts nearly calibrated; benchmark the optimizer
  // on the direct-noise parameterization where initialization is far off
  hc.clean_value_output = false;
  TrainConfig tc;
  tc.steps = 200;
  tc.batch = 8;
  tc.warmup = 10;
  tc.lr = 1e-2;
  tc.adam = true;
  tc.ema_decay = 0.9;

  // fixed evaluation batch
  const NoiseSchedule sched = build_cosine_schedule(tc.schedule_steps);
  Rng erng(99);
  TrainBatch eval;
  for (int k = 0; k < 8; ++k) {
    const DatasetSample& ds = data.samples[k % data.samples.size()];
    TrainSample ts;
    ts.x0 = ds.actions;
    ts.ann = ds.ann;
    ts.context = encode_context(ds.task, ds.world, hc.context_dim);
    ts.t = assign_stage_timesteps(ds.ann, erng);
    ts.eps = Trajectory::gaussian(ds.actions.length, 7, erng);
    eval.push_back(std::move(ts));
  }

  Rng init_rng(derive_seed(21, {0x696e6974}));
  const HeadParams init = HeadParams::init(hc, init_rng);
  const double loss0 = df_loss(init, eval, tc.loss, sched);

  const HeadParams trained = train(hc, tc, data, 21);
  const double loss1 = df_loss(trained, eval, tc.loss, sched);
  INFO("loss " << loss0 << " -> " << loss1);
  REQUIRE(loss1 <= 0.5 * loss0);
}

TEST_CASE("train: bit-identical under the same seed") {
  const Dataset data = toy_dataset(4, 5);
  const HeadConfig hc = smoke_cfg();
  TrainConfig tc;
  tc.steps = 25;
  tc.batch = 4;
  const HeadParams a = train(hc, tc, data, 123);
  const HeadParams b = train(hc, tc, data, 123);
  auto at = tensor_list(const_cast<HeadParams&>(a));
  auto bt = tensor_list(const_cast<HeadParams&>(b));
  for (size_t k = 0; k < at.size(); ++k) REQUIRE(*at[k] == *bt[k]);
}

TEST_CASE("train: rejects an empty dataset") {
  Dataset empty;
  TrainConfig tc;
  tc.steps = 1;
  REQUIRE_THROWS_AS(train(smoke_cfg(), tc, empty, 1), std::invalid_argument);
}

TEST_CASE("train: matches plain gradient descent on a quadratic probe") {
  // Linear head (no hidden layers, no window) makes the objective quadratic.
  HeadConfig hc;
  hc.window = 0;
  hc.hidden = 1;
  hc.layers = 0;
  hc.time_dim = 2;
  hc.stage_dim = 0;
  hc.stage_slots = 1;
  hc.phase_dim = 0;  // inputs are exactly the token values
  hc.clean_value_output = false;

  const Dataset data = toy_dataset(3, 7);
  TrainConfig tc;
  tc.steps = 6;
  tc.batch = 2;
  tc.warmup = 0;
  tc.cosine_lr = false;
  tc.weight_decay = 0.0;
  tc.clip_norm = 1e9;
  tc.ema_decay = 0.0;  // averaged params track the raw ones
  tc.adam = false;
  tc.loss = {0, 0, 0, 0};  // pure noise MSE: exactly quadratic in the weights
  tc.lr = 0.05;

  const uint64_t seed = 31;
  const HeadParams got = train(hc, tc, data, seed);

  // Closed-form descent oracle over the same batch stream.
  const NoiseSchedule sched = build_cosine_schedule(tc.schedule_steps);
  std::vector<std::vector<double>> contexts;
  for (const auto& s : data.samples)
    contexts.push_back(encode_context(s.task, s.world, hc.context_dim));
  Rng rng(derive_seed(seed, {0x7261696e}));
  Rng init_rng(derive_seed(seed, {0x696e6974}));
  HeadParams theta = HeadParams::init(hc, init_rng);
  const int D = hc.action_dim;
  for (int step = 0; step < tc.steps; ++step) {
    const TrainBatch batch = make_batch(data, contexts, tc, rng);
    std::vector<double> gw(theta.out_w.size(), 0.0), gb(D, 0.0);
    for (const TrainSample& s : batch) {
      const Trajectory x_t = forward_noise(s.x0, s.eps, s.t, sched);
      const int L = s.x0.length;
      for (int i = 0; i < L; ++i)
        for (int o = 0; o < D; ++o) {
          double pred = theta.out_b[o];
          for (int j = 0; j < D; ++j) pred += theta.out_w[o * D + j] * x_t.at(i, j);
          const double r = 2.0 * (pred - s.eps.at(i, o)) / (L * batch.size());
          for (int j = 0; j < D; ++j) gw[o * D + j] += r * x_t.at(i, j);
          gb[o] += r;
        }
    }
    for (size_t j = 0; j < gw.size(); ++j) theta.out_w[j] -= tc.lr * gw[j];
    for (int o = 0; o < D; ++o) theta.out_b[o] -= tc.lr * gb[o];
  }
  for (size_t j = 0; j < theta.out_w.size(); ++j)
    REQUIRE(std::fabs(theta.out_w[j] - got.out_w[j]) < 1e-8);
  for (int o = 0; o < D; ++o) REQUIRE(std::fabs(theta.out_b[o] - got.out_b[o]) < 1e-8);
}

TEST_CASE("checkpoint round-trip preserves parameters bit-exactly") {
  Rng rng(3);
  const HeadConfig hc = smoke_cfg();
  HeadParams p = HeadParams::init(hc, rng);
  const std::string buf = serialize_params(p, 42);
  uint64_t seed = 0;
  const HeadParams q = deserialize_params(buf, &seed);
  REQUIRE(seed == 42);
  REQUIRE(q.cfg == p.cfg);
  auto a = tensor_list(p);
  auto b = tensor_list(const_cast<HeadParams&>(q));
  for (size_t k = 0; k < a.size(); ++k) REQUIRE(*a[k] == *b[k]);

  const auto path = std::filesystem::temp_directory_path() / "forge_ckpt_test.bin";
  save_checkpoint(path.string(), p, 42);
  const HeadParams r = load_checkpoint(path.string());
  auto c = tensor_list(const_cast<HeadParams&>(r));
  for (size_t k = 0; k < a.size(); ++k) REQUIRE(*a[k] == *c[k]);
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint: corrupt magic rejected") {
  REQUIRE_THROWS_AS(deserialize_params("NOTAMAGIC_____"), std::invalid_argument);
}

TEST_CASE("train: resume reproduces the uninterrupted trajectory") {
  const Dataset data = toy_dataset(4, 9);
  const HeadConfig hc = smoke_cfg();
  TrainConfig full;
  full.steps = 30;
  full.batch = 4;
  full.adam = true;
  const uint64_t seed = 55;
  const HeadParams straight = train(hc, full, data, seed);

  TrainConfig half = full;
  half.steps = 15;
  TrainState mid;
  train(hc, half, data, seed, nullptr, &mid);

  const auto path = std::filesystem::temp_directory_path() / "forge_state_test.bin";
  save_train_state(path.string(), mid, seed);
  const TrainState loaded = load_train_state(path.string());
  REQUIRE(loaded.step == 15);
  std::filesystem::remove(path);

  const HeadParams resumed = train(hc, full, data, seed, nullptr, nullptr, &loaded);
  auto a = tensor_list(const_cast<HeadParams&>(straight));
  auto b = tensor_list(const_cast<HeadParams&>(resumed));
  for (size_t k = 0; k < a.size(); ++k)
    for (size_t j = 0; j < a[k]->size(); ++j)
      REQUIRE((*a[k])[j] == Catch::Approx((*b[k])[j]).margin(0.0));
}
