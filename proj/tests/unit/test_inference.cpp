#include <doctest.h>

#include <algorithm>

#include "advobs/errors.hpp"
#include "advobs/inference.hpp"
#include "helpers.hpp"

using namespace advobs;
using test::dot;
using test::random_field;
using test::rel_err;

namespace {

const Shape kShape{3, 4, 2};

DenoiserParams params(int n_full = 6) {
  NoiseSchedule s;
  s.n_full = n_full;
  return DenoiserParams::random(kShape.n_var, 6, 21, s);
}

}  // namespace

TEST_CASE("forecast_full") {
  const auto p = params();
  Rng rng(1);
  const Field prev = random_field(kShape, rng), cur = random_field(kShape, rng);
  Rng a(5), b(5);
  const auto fa = forecast_full(p, prev, cur, 1, 6, a);
  CHECK(fa.size() == 1);
  const auto f3 = forecast_full(p, prev, cur, 3, 6, b);
  CHECK(f3.size() == 3);
  Rng c(5);
  CHECK(forecast_full(p, prev, cur, 3, 6, c) == f3);
  for (const auto& f : f3) CHECK(f.all_finite());
}

TEST_CASE("ensemble median") {
  std::vector<std::vector<Field>> members;
  for (double v : {4.0, 1.0, 5.0, 3.0, 2.0}) members.push_back({Field(kShape, v)});
  const auto m = ensemble_median(members);
  for (double x : m.front().data()) CHECK(x == 3.0);
  members.pop_back();
  const auto even = ensemble_median(members);
  for (double x : even.front().data()) CHECK(x == 3.5);

  // Raising one member never lowers the median.
  Rng rng(2);
  std::vector<std::vector<Field>> r;
  for (int k = 0; k < 5; ++k) r.push_back({random_field(kShape, rng)});
  const auto base = ensemble_median(r);
  for (int k = 0; k < 5; ++k) {
    auto up = r;
    up[std::size_t(k)][0] = up[std::size_t(k)][0] + Field(kShape, 0.3);
    const auto m2 = ensemble_median(up);
    for (std::size_t i = 0; i < base[0].size(); ++i) CHECK(m2[0][i] >= base[0][i]);
  }
}

TEST_CASE("forecast_ensemble") {
  const auto p = params();
  Rng rng(3);
  const Field prev = random_field(kShape, rng), cur = random_field(kShape, rng);
  ForecastConfig one;
  one.lead_steps = 2;
  one.n_full = 6;
  one.ensemble = 1;
  one.seed = 77;
  Rng m0(member_seed(77, 0));
  CHECK(forecast_ensemble(p, prev, cur, one) == forecast_full(p, prev, cur, 2, 6, m0));

  const std::vector<std::uint64_t> seeds{11, 12, 13, 14, 15};
  auto rev = seeds;
  std::reverse(rev.begin(), rev.end());
  CHECK(forecast_ensemble(p, prev, cur, 2, 6, seeds) == forecast_ensemble(p, prev, cur, 2, 6, rev));
  CHECK(forecast_members(p, prev, cur, 2, 6, seeds).size() == 5);
}

TEST_CASE("forecast_approx structure") {
  const auto p = params();
  Rng rng(4);
  const Field prev = random_field(kShape, rng), cur = random_field(kShape, rng);
  Rng r(8);
  const auto fa = forecast_approx(p, prev, cur, 2, 2, r);
  CHECK(fa.tape.calls.size() == 4);
  CHECK(fa.tape.states.size() == 4);
  CHECK(fa.output == fa.tape.output());
  CHECK(replay(p, fa.tape) == fa.output);
  for (const auto& lv : fa.tape.sigmas) {
    REQUIRE(lv.size() == 2);
    CHECK(lv[0] > lv[1]);
    CHECK(lv[0] <= p.schedule.sigma(0.0));
    CHECK(lv[0] >= p.schedule.sigma(0.5));
    CHECK(lv[1] >= p.schedule.sigma(1.0));
  }
  Rng r3(9);
  const auto f3 = forecast_approx(p, prev, cur, 3, 5, r3);
  for (const auto& lv : f3.tape.sigmas)
    for (std::size_t k = 1; k < lv.size(); ++k) CHECK(lv[k] < lv[k - 1]);
  CHECK(replay(p, f3.tape) == f3.output);

  Rng bad(1);
  CHECK_THROWS_AS(forecast_approx(p, prev, cur, 1, 0, bad), BadStepCount);
  CHECK_THROWS_AS(forecast_approx(p, prev, cur, 1, 7, bad), BadStepCount);
  CHECK_THROWS_AS(forecast_approx(p, prev, cur, 0, 1, bad), BadStepCount);
}

TEST_CASE("n = 1 is a single denoise step from one sampled level") {
  const auto p = params();
  Rng rng(5);
  const Field prev = random_field(kShape, rng), cur = random_field(kShape, rng);
  Rng r(10);
  const auto fa = forecast_approx(p, prev, cur, 1, 1, r);
  REQUIRE(fa.tape.calls.size() == 1);
  const double s = fa.tape.sigmas[0][0];
  CHECK(fa.output == denoise_step(p, prev, cur, fa.tape.initial_noise[0], s, 0.0));
}

TEST_CASE("mid-quantile unroll with n = n_full reproduces the full sampler") {
  const auto p = params(6);
  Rng rng(6);
  const Field prev = random_field(kShape, rng), cur = random_field(kShape, rng);
  Rng a(12), b(12);
  const auto full = forecast_full(p, prev, cur, 3, 6, a);
  const auto approx = forecast_approx(p, prev, cur, 3, 6, b, SigmaSampling::MidQuantile);
  for (const auto& lv : approx.tape.sigmas) CHECK(lv == p.schedule.mid_quantile_levels(6));
  CHECK(approx.output == full.back());
  for (int l = 0; l < 3; ++l) CHECK(approx.tape.states[std::size_t(2 + l)] == full[std::size_t(l)]);
}

TEST_CASE("forecast_approx_vjp") {
  const auto p = params();
  Rng rng(7);
  const Field prev = random_field(kShape, rng), cur = random_field(kShape, rng);

  SUBCASE("zero cotangent") {
    Rng r(1);
    const auto fa = forecast_approx(p, prev, cur, 2, 2, r);
    const auto g = forecast_approx_vjp(p, fa.tape, Field(kShape));
    CHECK(g.prev.max_abs() == 0.0);
    CHECK(g.cur.max_abs() == 0.0);
  }

  SUBCASE("j = n = 1 equals the denoise step vjp") {
    Rng r(2);
    const auto fa = forecast_approx(p, prev, cur, 1, 1, r);
    const Field cot = random_field(kShape, rng);
    const auto g = forecast_approx_vjp(p, fa.tape, cot);
    const auto d = denoise_step_vjp(p, prev, cur, fa.tape.initial_noise[0], fa.tape.sigmas[0][0], 0.0, cot);
    CHECK((g.prev - d.prev).max_abs() < 1e-14);
    CHECK((g.cur - d.cur).max_abs() < 1e-14);
  }

  SUBCASE("finite differences for j, n in {1,2} x {1,2,3}") {
    for (int j = 1; j <= 2; ++j)
      for (int n = 1; n <= 3; ++n) {
        for (int probe = 0; probe < 5; ++probe) {
          Rng r(std::uint64_t(100 + 10 * j + n + 1000 * probe));
          const auto fa = forecast_approx(p, prev, cur, j, n, r);
          const Field cot = random_field(kShape, rng), dp = random_field(kShape, rng), dc = random_field(kShape, rng);
          const auto g = forecast_approx_vjp(p, fa.tape, cot);
          const double h = 1e-5;
          auto perturbed = [&](double s) {
            UnrollTape t = fa.tape;
            t.states[0] = prev + s * dp;
            t.states[1] = cur + s * dc;
            return dot(cot, replay(p, t));
          };
          const double fd = (perturbed(h) - perturbed(-h)) / (2 * h);
          CAPTURE(j);
          CAPTURE(n);
          CHECK(rel_err(dot(g.prev, dp) + dot(g.cur, dc), fd) < 1e-4);
        }
      }
  }

  SUBCASE("mismatched cotangent") {
    Rng r(3);
    const auto fa = forecast_approx(p, prev, cur, 1, 2, r);
    UnrollTape t = fa.tape;
    t.calls.pop_back();
    CHECK_THROWS_AS(forecast_approx_vjp(p, t, random_field(kShape, rng)), TapeMismatch);
  }
}
