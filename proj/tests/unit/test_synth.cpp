#include <doctest.h>

#include <cmath>

#include "advobs/errors.hpp"
#include "advobs/synth.hpp"
#include "helpers.hpp"

using namespace advobs;

namespace {

std::shared_ptr<const GridSpec> abstract_spec() {
  return std::make_shared<const GridSpec>(4, 8, std::vector<Variable>{{"a", "1"}, {"b", "1"}});
}

SynthParams quick() {
  SynthParams p;
  p.period = 20;
  p.spinup_steps = 20;
  return p;
}

}  // namespace

TEST_CASE("zero forcing, noise and initial state stays at zero") {
  SynthParams p = quick();
  p.forcing = 0.0;
  p.seasonal_amplitude = 0.0;
  p.noise = 0.0;
  p.init_amplitude = 0.0;
  const Trajectory t = simulate(abstract_spec(), p, 1, 30);
  for (const auto& s : t.states) CHECK(s.values.max_abs() == 0.0);
}

TEST_CASE("simulate is deterministic and consecutive") {
  const auto spec = test::small_spec(4, 8);
  const Trajectory a = simulate(spec, quick(), 42, 40);
  const Trajectory b = simulate(spec, quick(), 42, 40);
  const Trajectory c = simulate(spec, quick(), 43, 40);
  REQUIRE(a.size() == 40);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a.states[i].values == b.states[i].values);
    CHECK(a.states[i].values.all_finite());
    if (i > 0) CHECK(a.states[i].time_index == a.states[i - 1].time_index + 1);
  }
  CHECK_FALSE(a.states.back().values == c.states.back().values);
  CHECK_NOTHROW(a.validate());
}

TEST_CASE("precipitation stays nonnegative") {
  const auto spec = test::small_spec(4, 8);
  const Trajectory a = simulate(spec, quick(), 3, 60);
  const int p = spec->var_index("precipitation");
  for (const auto& s : a.states)
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 8; ++c) CHECK(s.values(r, c, p) >= 0.0);
}

TEST_CASE("blow-up cap raises NumericalBlowup") {
  SynthParams p = quick();
  p.blowup_cap = 1e-3;
  CHECK_THROWS_AS(simulate(abstract_spec(), p, 1, 10), NumericalBlowup);
}

TEST_CASE("invalid parameters are rejected") {
  SynthParams p = quick();
  p.period = 5;
  CHECK_THROWS(p.validate());
  p = quick();
  p.substep = 0.0;
  CHECK_THROWS(p.validate());
  p = quick();
  p.noise = -1.0;
  CHECK_THROWS(p.validate());
}

TEST_CASE("default dynamics: persistent but not static") {
  const auto spec = std::make_shared<const GridSpec>(GridSpec::desk_default());
  const Trajectory t = simulate(spec, SynthParams{}, 1, 400);
  const auto f = t.fields();
  const int nv = spec->n_var();
  for (int v = 0; v < nv; ++v) {
    double mean = 0.0, n = 0.0;
    for (const auto& x : f)
      for (std::size_t i = std::size_t(v); i < x.size(); i += std::size_t(nv)) mean += x[i], n += 1;
    mean /= n;
    double c0 = 0.0, c1 = 0.0, se = 0.0;
    for (std::size_t k = 0; k + 1 < f.size(); ++k)
      for (std::size_t i = std::size_t(v); i < f[k].size(); i += std::size_t(nv)) {
        c0 += (f[k][i] - mean) * (f[k][i] - mean);
        c1 += (f[k][i] - mean) * (f[k + 1][i] - mean);
        se += (f[k + 1][i] - f[k][i]) * (f[k + 1][i] - f[k][i]);
      }
    CAPTURE(v);
    CHECK(se > 0.0);
    CHECK(c1 / c0 > 0.5);
  }
}

TEST_CASE("tiny perturbation diverges") {
  const auto spec = std::make_shared<const GridSpec>(GridSpec::desk_default());
  SynthParams p;
  p.noise = 0.0;
  Simulator a(spec, p, 9), b(spec, p, 9);
  b.slow()[37] += 1e-8;
  std::vector<Field> fa, fb;
  for (int k = 0; k < 5 * p.period; ++k) {
    a.advance();
    b.advance();
    fa.push_back(a.raw_state());
    fb.push_back(b.raw_state());
  }
  const VariableStats st = VariableStats::from_fields(fa);
  const Field d = normalize(fa.back(), st) - normalize(fb.back(), st);
  double ss = 0.0;
  for (double x : d.data()) ss += x * x;
  CHECK(std::sqrt(ss / double(d.size())) > 0.1);
}

TEST_CASE("temperature has a seasonal cycle") {
  const auto spec = test::small_spec(4, 8);
  SynthParams p;
  p.period = 40;
  const int years = 6;
  const Trajectory t = simulate(spec, p, 5, years * p.period);
  const int tv = spec->var_index("temperature");
  std::vector<double> series;
  for (const auto& s : t.states) {
    double m = 0.0;
    for (int r = 2; r < 4; ++r)
      for (int c = 0; c < 8; ++c) m += s.values(r, c, tv) / 16.0;
    series.push_back(m);
  }
  // Northern rows only; the forcing has opposite phase per hemisphere.
  // Fitted sinusoid amplitude at `cycles` per year.
  auto amplitude = [&](double cycles) {
    double sc = 0.0, ss = 0.0;
    for (std::size_t k = 0; k < series.size(); ++k) {
      const double ph = 2.0 * M_PI * cycles * double(t.states[k].time_index) / p.period;
      sc += series[k] * std::cos(ph);
      ss += series[k] * std::sin(ph);
    }
    return 2.0 * std::hypot(sc, ss) / double(series.size());
  };
  const double annual = amplitude(1.0);
  CHECK(annual > 0.0);
  for (double off : {2.5, 3.5, 5.5}) CHECK(annual > 2.0 * amplitude(off));
}

TEST_CASE("split_dataset") {
  const auto spec = test::small_spec(4, 4);
  SynthParams p = quick();
  const Trajectory t = simulate(spec, p, 1, 10 * p.period);
  const auto s = split_dataset(t, p.period, 8, 2);
  CHECK(s.train.size() == std::size_t(8 * p.period));
  CHECK(s.eval.size() == std::size_t(2 * p.period));
  CHECK(s.train.states.front().time_index % p.period == 0);
  CHECK(s.eval.states.front().time_index % p.period == 0);
  CHECK(s.eval.states.front().time_index == s.train.states.back().time_index + 1);
  CHECK(s.eval.states.back().values == t.states.back().values);

  const Trajectory one = simulate(spec, p, 1, p.period);
  CHECK_THROWS_AS(split_dataset(one, p.period, 8, 2), InsufficientData);
  CHECK(split_years(t, p.period).size() == 10);
}
