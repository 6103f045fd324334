#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "advobs/errors.hpp"
#include "advobs/model.hpp"
#include "helpers.hpp"

using namespace advobs;
using test::dot;
using test::random_field;
using test::rel_err;

namespace {

const Shape kShape{4, 5, 2};

DenoiserParams small_params(std::uint64_t seed = 1, int hidden = 6) {
  DenoiserParams p = DenoiserParams::random(kShape.n_var, hidden, seed);
  Rng rng(seed + 100);
  std::normal_distribution<double> n(0.0, 0.1);
  for (Eigen::Index i = 0; i < p.b1.size(); ++i) p.b1(i) = n(rng);
  for (Eigen::Index i = 0; i < p.b2.size(); ++i) p.b2(i) = n(rng);
  for (Eigen::Index i = 0; i < p.b3.size(); ++i) p.b3(i) = n(rng);
  return p;
}

// Independent per-cell evaluation of the stencil network.
double reference_output(const DenoiserParams& p, const Field& prev, const Field& cur, const Field& z, double s_in,
                        double s_out, int r, int c, int v) {
  const Shape s = prev.shape();
  const double sd = p.sigma_data;
  const double c_skip = sd * sd / (s_in * s_in + sd * sd);
  const double c_out = s_in * sd / std::sqrt(s_in * s_in + sd * sd);
  const double c_in = 1.0 / std::sqrt(s_in * s_in + sd * sd);
  std::vector<double> x(std::size_t(p.n_features()), 0.0);
  const Field* src[3] = {&prev, &cur, &z};
  for (int f = 0; f < 3; ++f)
    for (int dr = -1; dr <= 1; ++dr)
      for (int dc = -1; dc <= 1; ++dc) {
        const int rr = r + dr;
        if (rr < 0 || rr >= s.n_lat) continue;
        const int cc = (c + dc + s.n_lon) % s.n_lon;
        for (int k = 0; k < s.n_var; ++k)
          x[std::size_t((f * 9 + (dr + 1) * 3 + (dc + 1)) * s.n_var + k)] =
              (f == 2 ? c_in : 1.0) * (*src[f])(rr, cc, k);
      }
  const double u = std::log(s_in / p.schedule.sigma_max) / std::log(p.schedule.sigma_min / p.schedule.sigma_max);
  const std::size_t e = std::size_t(27 * s.n_var);
  x[e] = std::log(s_in) / 4.0;
  x[e + 1] = std::log(s_out + 1e-3) / 4.0;
  x[e + 2] = std::sin(M_PI * u);
  x[e + 3] = std::cos(M_PI * u);
  std::vector<double> h1(std::size_t(p.hidden)), h2(std::size_t(p.hidden));
  for (int i = 0; i < p.hidden; ++i) {
    double a = p.b1(i);
    for (int k = 0; k < p.n_features(); ++k) a += p.w1(i, k) * x[std::size_t(k)];
    h1[std::size_t(i)] = std::tanh(a);
  }
  for (int i = 0; i < p.hidden; ++i) {
    double a = p.b2(i);
    for (int k = 0; k < p.hidden; ++k) a += p.w2(i, k) * h1[std::size_t(k)];
    h2[std::size_t(i)] = std::tanh(a);
  }
  double o = p.b3(v);
  for (int k = 0; k < p.hidden; ++k) o += p.w3(v, k) * h2[std::size_t(k)];
  return c_skip * z(r, c, v) + c_out * o;
}

}  // namespace

TEST_CASE("noise schedule endpoints and mid quantiles") {
  NoiseSchedule s;
  CHECK(s.sigma(0.0) == doctest::Approx(80.0).epsilon(1e-15));
  CHECK(s.sigma(1.0) == doctest::Approx(0.02).epsilon(1e-13));
  CHECK(s.position(s.sigma(0.37)) == doctest::Approx(0.37).epsilon(1e-13));
  const auto lv = s.mid_quantile_levels(4);
  REQUIRE(lv.size() == 4);
  for (int k = 0; k < 4; ++k) CHECK(lv[std::size_t(k)] == s.sigma((k + 0.5) / 4));
  CHECK(std::is_sorted(lv.rbegin(), lv.rend()));
}

TEST_CASE("sample_sigma") {
  NoiseSchedule s;
  Rng rng(1);
  CHECK(sample_sigma(s, 0.0, 1e-12, rng) == doctest::Approx(80.0).epsilon(1e-9));
  CHECK(sample_sigma(s, 1.0 - 1e-12, 1.0, rng) == doctest::Approx(0.02).epsilon(1e-9));
  CHECK_THROWS_AS(sample_sigma(s, 0.5, 0.5, rng), BadInterval);
  CHECK_THROWS_AS(sample_sigma(s, -0.1, 0.5, rng), BadInterval);
  CHECK_THROWS_AS(sample_sigma(s, 0.2, 1.1, rng), BadInterval);

  // log sigma uniform: KS statistic of the schedule position against U(0, 1).
  const int n = 100000;
  std::vector<double> u(n);
  for (auto& x : u) x = s.position(sample_sigma(s, 0.0, 1.0, rng));
  std::sort(u.begin(), u.end());
  double d = 0.0;
  for (int i = 0; i < n; ++i) d = std::max({d, std::abs(u[std::size_t(i)] - double(i) / n), std::abs(double(i + 1) / n - u[std::size_t(i)])});
  CHECK(d < 1.628 / std::sqrt(double(n)));

  Rng a(5), b(5);
  CHECK(sample_sigma(s, 0.2, 0.4, a) == sample_sigma(s, 0.2, 0.4, b));
}

TEST_CASE("sample_noise moments and determinism") {
  Rng rng(2);
  const Field f = sample_noise({100, 100, 10}, 2.5, rng);
  double m = 0.0, ss = 0.0;
  for (double x : f.data()) m += x;
  m /= double(f.size());
  for (double x : f.data()) ss += (x - m) * (x - m);
  CHECK(std::abs(std::sqrt(ss / double(f.size())) / 2.5 - 1.0) < 0.01);
  Rng a(3), b(3);
  CHECK(sample_noise(kShape, 1.0, a) == sample_noise(kShape, 1.0, b));
}

TEST_CASE("preconditioning") {
  for (double s : {0.02, 0.1, 1.0, 10.0, 80.0}) {
    const auto pc = precondition(s, 1.0);
    CHECK(pc.c_skip > 0.0);
    CHECK(pc.c_skip <= 1.0);
    CHECK(pc.c_skip == doctest::Approx(1.0 / (s * s + 1.0)));
    CHECK(pc.c_out == doctest::Approx(s / std::sqrt(s * s + 1.0)));
  }
  CHECK(std::abs(precondition(0.02, 1.0).c_out) <= 0.02);
  const auto tiny = precondition(1e-9, 1.0);
  CHECK(tiny.c_skip == doctest::Approx(1.0));
  CHECK(tiny.c_out == doctest::Approx(0.0));
  CHECK(loss_weight(2.0, 1.0) == doctest::Approx(5.0 / 4.0));
}

TEST_CASE("zero network reduces to c_skip * Z") {
  const DenoiserParams p = DenoiserParams::zeros(kShape.n_var, 5);
  Rng rng(4);
  const Field prev = random_field(kShape, rng), cur = random_field(kShape, rng), z = random_field(kShape, rng);
  const double s = 3.0;
  const Field d = denoiser_forward(p, prev, cur, z, s);
  const double c_skip = precondition(s, 1.0).c_skip;
  for (std::size_t i = 0; i < d.size(); ++i) CHECK(d[i] == c_skip * z[i]);

  const Field cot = random_field(kShape, rng);
  const auto g = denoiser_vjp(p, prev, cur, z, s, 0.0, cot);
  for (std::size_t i = 0; i < d.size(); ++i) CHECK(g.z[i] == doctest::Approx(c_skip * cot[i]).epsilon(1e-14));
  CHECK(g.prev.max_abs() == 0.0);
}

TEST_CASE("small sigma returns nearly Z") {
  const DenoiserParams p = small_params();
  Rng rng(5);
  const Field prev = random_field(kShape, rng), cur = random_field(kShape, rng), z = random_field(kShape, rng);
  const Field d = denoiser_forward(p, prev, cur, z, 1e-6);
  CHECK((d - z).max_abs() < 1e-4);
}

TEST_CASE("denoiser_forward matches a per-cell reference") {
  const DenoiserParams p = small_params(3);
  Rng rng(6);
  const Field prev = random_field(kShape, rng), cur = random_field(kShape, rng), z = random_field(kShape, rng, 3.0);
  for (auto [si, so] : {std::pair{0.7, 0.0}, std::pair{12.0, 4.0}}) {
    const Field d = denoiser_forward(p, prev, cur, z, si, so);
    for (int r = 0; r < kShape.n_lat; ++r)
      for (int c = 0; c < kShape.n_lon; ++c)
        for (int v = 0; v < kShape.n_var; ++v)
          CHECK(d(r, c, v) == doctest::Approx(reference_output(p, prev, cur, z, si, so, r, c, v)).epsilon(1e-12));
  }
  CHECK_THROWS_AS(denoiser_forward(p, prev, Field({4, 5, 3}), z, 1.0), ShapeMismatch);
}

TEST_CASE("denoise_step") {
  const DenoiserParams p = small_params(4);
  Rng rng(7);
  const Field prev = random_field(kShape, rng), cur = random_field(kShape, rng), z = random_field(kShape, rng, 5.0);
  CHECK(denoise_step(p, prev, cur, z, 5.0, 0.0) == denoiser_forward(p, prev, cur, z, 5.0, 0.0));
  CHECK_THROWS_AS(denoise_step(p, prev, cur, z, 5.0, 5.0), BadNoiseOrder);
  CHECK_THROWS_AS(denoise_step(p, prev, cur, z, 5.0, 6.0), BadNoiseOrder);
  CHECK((denoise_step(p, prev, cur, z, 5.0, 5.0 - 1e-15) - z).max_abs() < 1e-12);

  const double sa = 5.0, sb = 0.8;
  const Field d1 = denoiser_forward(p, prev, cur, z, sa, sb);
  const Field z1 = d1 + (sb / sa) * (z - d1);
  const Field z2 = denoiser_forward(p, prev, cur, z1, sb, 0.0);
  const Field got = denoise_step(p, prev, cur, denoise_step(p, prev, cur, z, sa, sb), sb, 0.0);
  CHECK((got - z2).max_abs() < 1e-13);
}

TEST_CASE("denoiser_vjp matches central differences") {
  const DenoiserParams p = small_params(5);
  Rng rng(8);
  int probes = 0;
  for (int trial = 0; trial < 34; ++trial) {
    const Field prev = random_field(kShape, rng), cur = random_field(kShape, rng), z = random_field(kShape, rng, 2.0);
    const double si = 0.05 * std::pow(1.3, trial), so = si / 3.0;
    const Field cot = random_field(kShape, rng);
    const auto g = denoiser_vjp(p, prev, cur, z, si, so, cot);
    const Field dirs[3] = {random_field(kShape, rng), random_field(kShape, rng), random_field(kShape, rng)};
    for (int slot = 0; slot < 3; ++slot) {
      const double h = 1e-5;
      Field in[3] = {prev, cur, z};
      in[slot].axpy(h, dirs[slot]);
      const double fp = dot(cot, denoiser_forward(p, in[0], in[1], in[2], si, so));
      in[slot].axpy(-2 * h, dirs[slot]);
      const double fm = dot(cot, denoiser_forward(p, in[0], in[1], in[2], si, so));
      const Field& grad = slot == 0 ? g.prev : slot == 1 ? g.cur : g.z;
      CAPTURE(slot);
      CAPTURE(si);
      CHECK(rel_err(dot(grad, dirs[slot]), (fp - fm) / (2 * h)) < 1e-4);
      ++probes;
    }
  }
  CHECK(probes >= 100);

  const auto zero = denoiser_vjp(p, Field(kShape), Field(kShape), Field(kShape), 1.0, 0.0, Field(kShape));
  CHECK(zero.prev.max_abs() == 0.0);
  CHECK(zero.cur.max_abs() == 0.0);
  CHECK(zero.z.max_abs() == 0.0);
}

TEST_CASE("denoise_step_vjp matches central differences") {
  const DenoiserParams p = small_params(6);
  Rng rng(9);
  for (int trial = 0; trial < 10; ++trial) {
    const Field prev = random_field(kShape, rng), cur = random_field(kShape, rng), z = random_field(kShape, rng, 2.0);
    const Field cot = random_field(kShape, rng), dir = random_field(kShape, rng);
    const double si = 2.0, sn = trial % 2 ? 0.5 : 0.0;
    const auto g = denoise_step_vjp(p, prev, cur, z, si, sn, cot);
    const double h = 1e-5;
    const double fp = dot(cot, denoise_step(p, prev, cur, z + h * dir, si, sn));
    const double fm = dot(cot, denoise_step(p, prev, cur, z - h * dir, si, sn));
    CHECK(rel_err(dot(g.z, dir), (fp - fm) / (2 * h)) < 1e-4);
    const double cp = dot(cot, denoise_step(p, prev, cur + h * dir, z, si, sn));
    const double cm = dot(cot, denoise_step(p, prev, cur - h * dir, z, si, sn));
    CHECK(rel_err(dot(g.cur, dir), (cp - cm) / (2 * h)) < 1e-4);
  }
}

TEST_CASE("param_grad matches central differences") {
  const DenoiserParams p = small_params(7, 4);
  Rng rng(10);
  const Field prev = random_field(kShape, rng), cur = random_field(kShape, rng), z = random_field(kShape, rng);
  const Field cot = random_field(kShape, rng);
  const auto flat_grad = param_grad(p, prev, cur, z, 1.5, 0.3, cot).flatten();
  const auto base = p.flatten();
  std::uniform_int_distribution<std::size_t> pick(0, base.size() - 1);
  for (int k = 0; k < 40; ++k) {
    const std::size_t i = pick(rng);
    const double h = 1e-5;
    DenoiserParams q = p;
    auto f = base;
    f[i] += h;
    q.unflatten(f);
    const double fp = dot(cot, denoiser_forward(q, prev, cur, z, 1.5, 0.3));
    f[i] -= 2 * h;
    q.unflatten(f);
    const double fm = dot(cot, denoiser_forward(q, prev, cur, z, 1.5, 0.3));
    const double fd = (fp - fm) / (2 * h);
    CHECK(std::abs(flat_grad[i] - fd) <= 1e-4 * std::max(std::abs(fd), 1e-3));
  }
}

TEST_CASE("flatten round trip and validation") {
  DenoiserParams p = small_params(8);
  DenoiserParams q = DenoiserParams::zeros(p.n_var, p.hidden);
  q.unflatten(p.flatten());
  CHECK(q.flatten() == p.flatten());
  CHECK_THROWS_AS(q.unflatten({1.0, 2.0}), ShapeMismatch);
  q.w2(0, 0) = NAN;
  CHECK_THROWS_AS(q.validate(), NumericalBlowup);
}

TEST_CASE("training") {
  const auto spec = test::small_spec(4, 6);
  Rng rng(11);
  std::vector<Field> data;
  Field x = random_field(spec->shape(), rng);
  for (int t = 0; t < 40; ++t) {
    Field nx = 0.9 * x + 0.3 * random_field(spec->shape(), rng);
    data.push_back(x);
    x = nx;
  }
  const DenoiserParams init = DenoiserParams::random(spec->n_var(), 8, 3);

  TrainConfig frozen;
  frozen.learning_rate = 0.0;
  frozen.iterations = 1;
  CHECK(train(init, data, frozen).params.flatten() == init.flatten());

  TrainConfig tc;
  tc.iterations = 300;
  tc.seed = 4;
  const TrainResult a = train(init, data, tc);
  const TrainResult b = train(init, data, tc);
  CHECK(a.params.flatten() == b.params.flatten());
  CHECK(a.loss_curve.size() == 300);

  // Fixed validation batch.
  Rng vr(99);
  double before = 0.0, after = 0.0;
  for (std::size_t t = 1; t + 1 < data.size(); ++t) {
    const double s = sample_sigma(init.schedule, 0.0, 1.0, vr);
    const Field n = sample_noise(spec->shape(), s, vr);
    const TrainingTriple ex{&data[t - 1], &data[t], &data[t + 1]};
    before += denoising_loss(init, ex, n, s);
    after += denoising_loss(a.params, ex, n, s);
  }
  CHECK(after < before);

  CHECK_THROWS_AS(train(init, std::vector<Field>(data.begin(), data.begin() + 3), tc), InsufficientData);
}
