#include <doctest.h>

#include <cmath>

#include "advobs/attack.hpp"
#include "advobs/errors.hpp"
#include "helpers.hpp"

using namespace advobs;
using test::dot;
using test::random_field;
using test::rel_err;

namespace {

VariableStats identity_stats(int n) { return {std::vector<double>(std::size_t(n), 0.0), std::vector<double>(std::size_t(n), 1.0)}; }

VariableStats some_stats() { return {{1.0, -1.0, 280.0, 2.0, 1000.0}, {3.0, 2.5, 8.0, 1.5, 6.0}}; }

Field field_1d(std::vector<double> v) {
  const int n = int(v.size());
  return Field({1, n, 1}, std::move(v));
}

struct Toy {
  std::shared_ptr<const GridSpec> spec = test::small_spec(5, 6);
  DenoiserParams params;
  AttackProblem problem;

  Toy() {
    NoiseSchedule s;
    s.n_full = 4;
    params = DenoiserParams::random(spec->n_var(), 8, 31, s);
    Rng rng(2);
    problem.params = &params;
    problem.prev = random_field(spec->shape(), rng);
    problem.cur = random_field(spec->shape(), rng);
    problem.truth_next = random_field(spec->shape(), rng);
    problem.scale = {0.5, 0.4, 0.3, 0.6, 0.2};
    problem.loss.stats = some_stats();
    LossTerm t;
    t.functional = Functional::NegMinWindSpeed;
    t.quantity = Quantity::wind(0, 1);
    t.mask = SpatialMask::box(*spec, 1, 2, 2, 2);
    problem.loss.terms = {t};
  }
};

double field_std(const Field& f, int v) {
  const int nv = f.shape().n_var;
  double m = 0.0, n = 0.0;
  for (std::size_t i = std::size_t(v); i < f.size(); i += std::size_t(nv)) m += f[i], n += 1;
  m /= n;
  double ss = 0.0;
  for (std::size_t i = std::size_t(v); i < f.size(); i += std::size_t(nv)) ss += (f[i] - m) * (f[i] - m);
  return std::sqrt(ss / n);
}

}  // namespace

TEST_CASE("projection examples") {
  CHECK(project(field_1d({1, -1}), 0.5).data() == std::vector<double>{0.5, -0.5});
  CHECK(project(field_1d({2, 2}), 0.5).data() == std::vector<double>{0.0, 0.0});
  const Field c = project(field_1d({0, 1, 2}), 10.0);
  CHECK(c[0] == doctest::Approx(-1.0));
  CHECK(c[1] == doctest::Approx(0.0));
  CHECK(c[2] == doctest::Approx(1.0));
}

TEST_CASE("projection invariants") {
  Rng rng(3);
  for (int k = 0; k < 200; ++k) {
    const double eps = std::pow(10.0, -4.0 + 5.0 * double(k) / 200.0);
    Field d = random_field({3, 4, 3}, rng, 0.01 + k * 0.05);
    for (std::size_t i = 0; i < d.size(); i += 3) d[i] += 5.0;
    const Field p = project(d, eps);
    const auto mom = channel_moments(p);
    for (int v = 0; v < 3; ++v) {
      CHECK(std::abs(mom.mean[std::size_t(v)]) <= 1e-9);
      CHECK(mom.std[std::size_t(v)] <= eps + 1e-9);
    }
    CHECK((project(p, eps) - p).max_abs() <= 1e-12);
  }
}

TEST_CASE("projection is scale equivariant below budget") {
  Rng rng(4);
  Field d = project(random_field({4, 4, 2}, rng), 1.0);  // mean zero, std <= 1
  for (double c : {0.1, 0.5, 2.0}) {
    const Field lhs = project(c * d, 5.0), rhs = c * project(d, 5.0);
    CHECK((lhs - rhs).max_abs() < 1e-12);
  }
}

TEST_CASE("perturbation projection treats fields independently") {
  Perturbation p{field_1d({1, -1}), field_1d({3, -3})};
  const auto q = project(p, 0.5);
  CHECK(q.delta_t.data() == std::vector<double>{0.5, -0.5});
  CHECK(q.delta_tm1.data() == std::vector<double>{0.5, -0.5});
}

TEST_CASE("apply_perturbation scales per variable") {
  const Shape s{2, 2, 2};
  Perturbation d{Field(s, 1.0), Field(s, -1.0)};
  const auto [prev, cur] = apply_perturbation(Field(s), Field(s, 1.0), d, {2.0, 3.0});
  CHECK(cur(0, 0, 0) == 3.0);
  CHECK(cur(1, 1, 1) == 4.0);
  CHECK(prev(0, 1, 0) == -2.0);
  CHECK(prev(1, 0, 1) == -3.0);
}

TEST_CASE("negate-min-wind-speed on uniform 3-4-5 wind") {
  const auto spec = test::small_spec(4, 4);
  Field x(spec->shape());
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 4; ++c) x(r, c, 0) = 3.0, x(r, c, 1) = 4.0;
  AdversarialLoss loss;
  loss.stats = identity_stats(5);
  LossTerm t;
  t.functional = Functional::NegMinWindSpeed;
  t.quantity = Quantity::wind(0, 1);
  t.mask = SpatialMask::box(*spec, 0, 1, 1, 2);
  loss.terms = {t};
  CHECK(eval_loss(loss, x, false) == doctest::Approx(-5.0));
  CHECK(eval_loss(loss, x, true) == doctest::Approx(-5.0).epsilon(1e-12));
  const Field g = loss_grad(loss, x, true);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 4; ++c) {
      const bool in = t.mask(r, c);
      CHECK(g(r, c, 0) == doctest::Approx(in ? -0.6 / 4.0 : 0.0));
      CHECK(g(r, c, 1) == doctest::Approx(in ? -0.8 / 4.0 : 0.0));
      CHECK(g(r, c, 2) == 0.0);
    }
}

TEST_CASE("minimize-region-mean on one cell") {
  const auto spec = test::small_spec(4, 4);
  Rng rng(5);
  const Field x = random_field(spec->shape(), rng);
  AdversarialLoss loss;
  loss.stats = some_stats();
  LossTerm t;
  t.functional = Functional::MinimizeRegionMean;
  t.quantity = Quantity::variable(2);
  t.mask = SpatialMask::single_cell(*spec, 1, 3);
  loss.terms = {t};
  const Field raw = denormalize(x, loss.stats);
  CHECK(eval_loss(loss, x) == doctest::Approx(raw(1, 3, 2)));
  const Field g = loss_grad(loss, x);
  for (std::size_t i = 0; i < g.size(); ++i) CHECK(g[i] == (i == g.index(1, 3, 2) ? 8.0 : 0.0));
}

TEST_CASE("loss gradients match finite differences") {
  const auto spec = test::small_spec(4, 5);
  Rng rng(6);
  const Functional fs[] = {Functional::NegMinWindSpeed, Functional::NegMaxDeviation, Functional::MinimizeMax,
                           Functional::MinimizeRegionMean, Functional::TargetValue};
  for (Functional f : fs)
    for (bool wind : {false, true})
      for (bool smooth : {true, false}) {
        if (f == Functional::NegMinWindSpeed && !wind) continue;
        AdversarialLoss loss;
        loss.stats = some_stats();
        loss.tau = 0.5;
        LossTerm t;
        t.functional = f;
        t.quantity = wind ? Quantity::wind(0, 1) : Quantity::variable(3);
        t.mask = SpatialMask::box(*spec, 1, 2, 4, 3);
        t.sign = -1.0;
        t.weight = 0.7;
        if (f == Functional::NegMaxDeviation) t.reference = random_field({4, 5, 1}, rng);
        loss.terms = {t, t};
        loss.terms[1].weight = 0.2;
        REQUIRE_NOTHROW(loss.validate(spec->shape()));
        for (int probe = 0; probe < 3; ++probe) {
          const Field x = random_field(spec->shape(), rng), d = random_field(spec->shape(), rng);
          const Field g = loss_grad(loss, x, smooth);
          const double h = 1e-6;
          const double fd = (eval_loss(loss, x + h * d, smooth) - eval_loss(loss, x - h * d, smooth)) / (2 * h);
          CAPTURE(int(f));
          CAPTURE(wind);
          CAPTURE(smooth);
          CHECK(rel_err(dot(g, d), fd) < 1e-4);
        }
      }
}

TEST_CASE("soft minimum approaches the hard minimum") {
  const auto spec = test::small_spec(4, 5);
  Rng rng(7);
  const Field x = random_field(spec->shape(), rng);
  AdversarialLoss loss;
  loss.stats = some_stats();
  LossTerm t;
  t.functional = Functional::NegMinWindSpeed;
  t.quantity = Quantity::wind(0, 1);
  t.mask = SpatialMask::box(*spec, 0, 3, 0, 5);
  loss.terms = {t};
  const double hard = eval_loss(loss, x, false);
  double prev_gap = 1e300;
  for (double tau : {1.0, 0.1, 0.01}) {
    loss.tau = tau;
    const double gap = std::abs(eval_loss(loss, x, true) - hard);
    CHECK(gap < prev_gap);
    CHECK(gap <= tau * std::log(20.0) + 1e-12);
    prev_gap = gap;
  }
}

TEST_CASE("loss validation") {
  const auto spec = test::small_spec(4, 4);
  AdversarialLoss loss;
  loss.stats = some_stats();
  LossTerm t;
  t.mask = SpatialMask(4, 4);
  loss.terms = {t};
  CHECK_THROWS_AS(loss.validate(spec->shape()), EmptyRegion);
  t.mask = SpatialMask::single_cell(*spec, 0, 0);
  t.quantity = Quantity::variable(9);
  loss.terms = {t};
  CHECK_THROWS_AS(loss.validate(spec->shape()), UnknownVariable);
  t.quantity = Quantity::variable(0);
  t.functional = Functional::NegMaxDeviation;
  t.reference = Field({2, 2, 1});
  loss.terms = {t};
  CHECK_THROWS_AS(loss.validate(spec->shape()), ShapeMismatch);
}

TEST_CASE("step size schedule") {
  CHECK(step_size(0.01, 1, 1) == doctest::Approx(0.02));
  CHECK(step_size(0.01, 1, 50) == doctest::Approx(0.02));
  const double e = 0.0025;
  for (int i = 1; i <= 50; ++i)
    CHECK(step_size(e, i, 50) ==
          doctest::Approx(e / 50 + 0.5 * (2 * e - e / 50) * (1 + std::cos((i - 1) * M_PI / 50))));
  for (int i = 2; i <= 50; ++i) CHECK(step_size(e, i, 50) < step_size(e, i - 1, 50));
}

TEST_CASE("variant names") {
  for (Variant v : all_variants()) CHECK(parse_variant(variant_name(v)) == v);
  CHECK(all_variants().size() == 6);
  CHECK_THROWS_AS(parse_variant("fgsm"), UnknownVariant);
}

TEST_CASE("attack config validation") {
  AttackConfig c;
  CHECK_NOTHROW(c.validate());
  c.epsilon = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.iterations = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.beta = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("attack runs within budget, is deterministic and logs its schedule") {
  Toy toy;
  AttackConfig c;
  c.epsilon = 0.05;
  c.iterations = 6;
  c.lead_steps = 2;
  c.n_steps = 2;
  c.seed = 9;
  const AttackResult a = attack(toy.problem, c);
  const AttackResult b = attack(toy.problem, c);
  CHECK(a.delta.delta_t == b.delta.delta_t);
  CHECK(a.delta.delta_tm1 == b.delta.delta_tm1);
  REQUIRE(a.log.size() == 6);
  for (const auto& r : a.log) {
    CHECK(r.denoiser_calls == 4);
    CHECK(r.alpha == doctest::Approx(step_size(0.05, r.iteration, 6) / (1 - std::pow(0.9, r.iteration))));
  }
  for (int v = 0; v < 5; ++v) {
    CHECK(field_std(a.delta.delta_t, v) <= 0.05 + 1e-9);
    CHECK(field_std(a.delta.delta_tm1, v) <= 0.05 + 1e-9);
  }
  CHECK(a.delta.delta_t.max_abs() > 0.0);

  c.seed = 10;
  CHECK_FALSE(attack(toy.problem, c).delta.delta_t == a.delta.delta_t);
}

TEST_CASE("single iteration takes a step of nominal size 2 eps") {
  Toy toy;
  AttackConfig c;
  c.epsilon = 0.05;
  c.iterations = 1;
  c.lead_steps = 1;
  const AttackResult a = attack(toy.problem, c);
  CHECK(a.log.front().alpha == doctest::Approx(0.1 / (1 - 0.9)));
}

TEST_CASE("zero-gradient loss leaves the perturbation at zero") {
  Toy toy;
  toy.problem.loss.terms.front().weight = 0.0;
  AttackConfig c;
  c.iterations = 4;
  c.lead_steps = 1;
  for (Variant v : all_variants()) {
    if (v == Variant::AdvDm) continue;
    c.variant = v;
    const AttackResult a = attack(toy.problem, c);
    CHECK(a.delta.delta_t.max_abs() == 0.0);
    CHECK(a.delta.delta_tm1.max_abs() == 0.0);
  }
}

TEST_CASE("variants") {
  Toy toy;
  AttackConfig c;
  c.epsilon = 0.02;
  c.iterations = 3;
  c.lead_steps = 2;
  c.n_steps = 3;
  for (Variant v : all_variants()) {
    c.variant = v;
    const AttackResult a = attack(toy.problem, c);
    CAPTURE(variant_name(v));
    for (int k = 0; k < 5; ++k) CHECK(field_std(a.delta.delta_t, k) <= 0.02 + 1e-9);
    for (const auto& r : a.log) {
      if (v == Variant::Full || v == Variant::NoSteps) CHECK(r.denoiser_calls == 6);
      if (v == Variant::NoApprox || v == Variant::NoBoth || v == Variant::DpAttacker) CHECK(r.denoiser_calls == 2);
      if (v == Variant::AdvDm) CHECK(r.denoiser_calls == 1);
      if (v == Variant::NoSteps || v == Variant::NoBoth || v == Variant::DpAttacker || v == Variant::AdvDm)
        CHECK(r.alpha == doctest::Approx(0.02));
    }
  }
}

TEST_CASE("induced deviation") {
  Toy toy;
  DeviationEval ev;
  ev.lead_steps = 2;
  ev.n_full = 4;
  ev.member_seeds = {1, 2, 3};
  const Perturbation zero{Field(toy.spec->shape()), Field(toy.spec->shape())};
  CHECK(induced_deviation(toy.problem, zero, ev) == 0.0);
  ev.mode = DeviationMode::MemberMedian;
  CHECK(forecast_losses(toy.problem, toy.problem.prev, toy.problem.cur, ev).size() == 3);
  CHECK(induced_deviation(toy.problem, zero, ev) == 0.0);
}

TEST_CASE("min_budget_search") {
  CHECK(min_budget_search({0, 1}, {0, 10}, 5) == doctest::Approx(0.5));
  CHECK(min_budget_search({0, 1}, {0, 10}, 20) == doctest::Approx(2.0));
  CHECK(min_budget_search({0, 1}, {0, 10}, 0) == 0.0);
  CHECK(min_budget_search({1, 2}, {4, 6}, 2) == doctest::Approx(0.5));
  CHECK(min_budget_search({1, 2, 3}, {1, 3, 2}, 4) == doctest::Approx(6.0));
  CHECK_THROWS_AS(min_budget_search({1, 2}, {-1, -2}, 4), NoCrossing);
  CHECK_THROWS_AS(min_budget_search({1}, {1}, 4), ConfigError);
  CHECK_THROWS_AS(min_budget_search({2, 1}, {1, 2}, 4), ConfigError);
}
