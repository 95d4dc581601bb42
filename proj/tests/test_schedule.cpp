#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include <forge/rng.hpp>
#include <forge/schedule.hpp>

using namespace forge;

namespace {

// Independent scalar evaluation of the cosine form (unfloored region).
double cosine_alpha_bar(int t, int T) {
  const double s0 = 0.008;
  const double num = std::cos(((static_cast<double>(t) / T + s0) / (1 + s0)) * M_PI / 2.0);
  const double den = std::cos((s0 / (1 + s0)) * M_PI / 2.0);
  return (num * num) / (den * den);
}

}  // namespace

TEST_CASE("cosine schedule: shape and endpoints") {
  const NoiseSchedule s = build_cosine_schedule(1000);
  REQUIRE(s.steps == 1000);
  REQUIRE(s.alpha_bar.size() == 1001);
  REQUIRE(s.alpha_bar[0] == 1.0);
  REQUIRE(s.alpha_bar[1000] >= kAlphaBarFloor);
  for (int t = 1; t <= 1000; ++t) REQUIRE(s.alpha_bar[t] < s.alpha_bar[t - 1]);
}

TEST_CASE("cosine schedule: minimal T") {
  const NoiseSchedule s = build_cosine_schedule(1);
  REQUIRE(s.alpha_bar.size() == 2);
  REQUIRE(s.alpha_bar[0] == 1.0);
  REQUIRE(s.alpha_bar[1] > 0.0);
  REQUIRE(s.alpha_bar[1] < 1.0);
}

TEST_CASE("cosine schedule: closed form at interior step") {
  const NoiseSchedule s = build_cosine_schedule(10);
  REQUIRE(std::fabs(s.alpha_bar[5] - cosine_alpha_bar(5, 10)) < 1e-12);
}

TEST_CASE("cosine schedule: rejects T = 0") {
  REQUIRE_THROWS_AS(build_cosine_schedule(0), std::invalid_argument);
}

TEST_CASE("schedule monotonicity across sizes") {
  for (int T : {1, 10, 1000}) {
    const NoiseSchedule s = build_cosine_schedule(T);
    for (int t = 1; t <= T; ++t) {
      REQUIRE(s.alpha_bar[t] < s.alpha_bar[t - 1]);
      REQUIRE(s.sqrt_ab(t) >= 0.0);
      REQUIRE(s.sqrt_ab(t) <= 1.0);
      REQUIRE(s.sqrt_one_minus_ab(t) >= 0.0);
      REQUIRE(s.sqrt_one_minus_ab(t) <= 1.0);
    }
  }
}

TEST_CASE("forward_noise: clean tokens pass through bit-exactly") {
  Rng rng(7);
  const NoiseSchedule s = build_cosine_schedule(100);
  const Trajectory x0 = Trajectory::gaussian(6, 7, rng);
  const Trajectory eps = Trajectory::gaussian(6, 7, rng);
  const TimestepVector t(6, 0);
  const Trajectory out = forward_noise(x0, eps, t, s);
  REQUIRE(out.data == x0.data);
}

TEST_CASE("forward_noise: scalar case against direct evaluation") {
  // alpha_bar = 0.25 at some step of a custom schedule
  NoiseSchedule s;
  s.steps = 1;
  s.alpha_bar = {1.0, 0.25};
  Trajectory x0(1, 1);
  x0.at(0, 0) = 1.0;
  Trajectory eps(1, 1);
  eps.at(0, 0) = 0.5;
  const Trajectory out = forward_noise(x0, eps, {1}, s);
  REQUIRE(out.at(0, 0) == Catch::Approx(0.5 * 1.0 + std::sqrt(0.75) * 0.5).epsilon(1e-12));
  REQUIRE(std::fabs(out.at(0, 0) - 0.93301) < 1e-5);
}

TEST_CASE("forward_noise: per-token independence") {
  Rng rng(11);
  const NoiseSchedule s = build_cosine_schedule(50);
  Trajectory x0 = Trajectory::gaussian(2, 3, rng);
  Trajectory eps = Trajectory::gaussian(2, 3, rng);
  const TimestepVector t{12, 37};
  const Trajectory out = forward_noise(x0, eps, t, s);
  for (int i = 0; i < 2; ++i)
    for (int d = 0; d < 3; ++d) {
      const double expect =
          s.sqrt_ab(t[i]) * x0.at(i, d) + s.sqrt_one_minus_ab(t[i]) * eps.at(i, d);
      REQUIRE(out.at(i, d) == Catch::Approx(expect).margin(1e-15));
    }
}

TEST_CASE("forward_noise: shape mismatch rejected") {
  const NoiseSchedule s = build_cosine_schedule(10);
  Trajectory x0(4, 7), eps(5, 7);
  REQUIRE_THROWS_AS(forward_noise(x0, eps, TimestepVector(4, 1), s), std::invalid_argument);
}

TEST_CASE("clean_estimate inverts forward_noise") {
  Rng rng(13);
  const NoiseSchedule s = build_cosine_schedule(1000);
  for (int trial = 0; trial < 20; ++trial) {
    const Trajectory x0 = Trajectory::gaussian(16, 7, rng);
    const Trajectory eps = Trajectory::gaussian(16, 7, rng);
    TimestepVector t(16);
    for (auto& v : t) v = rng.uniform_int(0, 1000);
    const Trajectory x_t = forward_noise(x0, eps, t, s);
    const Trajectory rec = clean_estimate(x_t, eps, t, s);
    for (size_t k = 0; k < rec.data.size(); ++k)
      REQUIRE(std::fabs(rec.data[k] - x0.data[k]) < 1e-10);
  }
}

TEST_CASE("clean_estimate: zero prediction at final step") {
  const NoiseSchedule s = build_cosine_schedule(100);
  Trajectory x_t(1, 2);
  x_t.at(0, 0) = 0.3;
  x_t.at(0, 1) = -0.8;
  Trajectory eps0(1, 2);
  const Trajectory out = clean_estimate(x_t, eps0, {100}, s);
  REQUIRE(out.at(0, 0) == Catch::Approx(0.3 / s.sqrt_ab(100)).epsilon(1e-12));
  REQUIRE(out.at(0, 1) == Catch::Approx(-0.8 / s.sqrt_ab(100)).epsilon(1e-12));
}

TEST_CASE("clean_estimate: identity at t = 0") {
  Rng rng(3);
  const NoiseSchedule s = build_cosine_schedule(10);
  const Trajectory x_t = Trajectory::gaussian(5, 7, rng);
  const Trajectory eps = Trajectory::gaussian(5, 7, rng);
  const Trajectory out = clean_estimate(x_t, eps, TimestepVector(5, 0), s);
  REQUIRE(out.data == x_t.data);
}

TEST_CASE("token permutation commutes with the per-token ops") {
  Rng rng(17);
  const NoiseSchedule s = build_cosine_schedule(200);
  const int L = 8;
  const Trajectory x0 = Trajectory::gaussian(L, 7, rng);
  const Trajectory eps = Trajectory::gaussian(L, 7, rng);
  TimestepVector t(L);
  for (auto& v : t) v = rng.uniform_int(0, 200);

  std::vector<int> perm{3, 1, 7, 0, 5, 2, 6, 4};
  Trajectory x0p(L, 7), epsp(L, 7);
  TimestepVector tp(L);
  for (int i = 0; i < L; ++i) {
    for (int d = 0; d < 7; ++d) {
      x0p.at(i, d) = x0.at(perm[i], d);
      epsp.at(i, d) = eps.at(perm[i], d);
    }
    tp[i] = t[perm[i]];
  }
  const Trajectory a = forward_noise(x0, eps, t, s);
  const Trajectory b = forward_noise(x0p, epsp, tp, s);
  for (int i = 0; i < L; ++i)
    for (int d = 0; d < 7; ++d) REQUIRE(b.at(i, d) == a.at(perm[i], d));
}

TEST_CASE("ddim_blend: freeze and endpoint cases") {
  Rng rng(23);
  const NoiseSchedule s = build_cosine_schedule(100);
  const int L = 6;
  const Trajectory x_t = Trajectory::gaussian(L, 7, rng);
  const Trajectory xh = Trajectory::gaussian(L, 7, rng);
  const Trajectory eta = Trajectory::gaussian(L, 7, rng);

  SECTION("all-zero mask returns x_t bit-exactly") {
    const Trajectory out = ddim_blend(x_t, xh, eta, TimestepVector(L, 50), s, SegmentMask(L, 0));
    REQUIRE(out.data == x_t.data);
  }
  SECTION("all-ones mask at t_prev = 0 returns x_hat0 bit-exactly") {
    const Trajectory out = ddim_blend(x_t, xh, eta, TimestepVector(L, 0), s, SegmentMask(L, 1));
    REQUIRE(out.data == xh.data);
  }
}

TEST_CASE("ddim_blend: single masked token direct value") {
  NoiseSchedule s;
  s.steps = 1;
  s.alpha_bar = {1.0, 0.64};
  Trajectory x_t(1, 1), xh(1, 1), eta(1, 1);
  x_t.at(0, 0) = -5.0;
  xh.at(0, 0) = 2.0;
  eta.at(0, 0) = 1.0;
  const Trajectory out = ddim_blend(x_t, xh, eta, {1}, s, {1});
  REQUIRE(out.at(0, 0) == Catch::Approx(0.8 * 2.0 + 0.6 * 1.0).epsilon(1e-12));
}

TEST_CASE("ddim_blend never alters unmasked tokens") {
  Rng rng(29);
  const NoiseSchedule s = build_cosine_schedule(300);
  for (int trial = 0; trial < 50; ++trial) {
    const int L = 10;
    const Trajectory x_t = Trajectory::gaussian(L, 7, rng);
    const Trajectory xh = Trajectory::gaussian(L, 7, rng);
    const Trajectory eta = Trajectory::gaussian(L, 7, rng);
    SegmentMask m(L, 0);
    const int a = rng.uniform_int(0, L - 1);
    const int b = rng.uniform_int(a, L - 1);
    for (int i = a; i <= b; ++i) m[i] = 1;
    TimestepVector tp(L);
    for (auto& v : tp) v = rng.uniform_int(0, 300);
    const Trajectory out = ddim_blend(x_t, xh, eta, tp, s, m);
    for (int i = 0; i < L; ++i)
      if (!m[i])
        for (int d = 0; d < 7; ++d) REQUIRE(out.at(i, d) == x_t.at(i, d));
  }
}
