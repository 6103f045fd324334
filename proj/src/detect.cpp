#include "advobs/detect.hpp"

#include <cmath>
#include <limits>
#include <vector>

#include "advobs/errors.hpp"

namespace advobs {

namespace {

constexpr int kMaxIterations = 200000;
constexpr double kEps = 1e-16;

// log of x^a e^-x / Gamma(a)
double log_prefactor(double a, double x) { return a * std::log(x) - x - std::lgamma(a); }

double gamma_p_series(double a, double x) {
  double ap = a, term = 1.0 / a, sum = term;
  for (int n = 0; n < kMaxIterations; ++n) {
    ap += 1.0;
    term *= x / ap;
    sum += term;
    if (std::abs(term) < std::abs(sum) * kEps) break;
  }
  return sum * std::exp(log_prefactor(a, x));
}

double gamma_q_continued_fraction(double a, double x) {
  constexpr double tiny = std::numeric_limits<double>::min() / kEps;
  double b = x + 1.0 - a;
  double c = 1.0 / tiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i < kMaxIterations; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::abs(delta - 1.0) < kEps) break;
  }
  return std::exp(log_prefactor(a, x)) * h;
}

void check_gamma_args(double a, double x) {
  if (!(a > 0.0) || !(x >= 0.0) || std::isnan(x)) throw std::domain_error("incomplete gamma needs a > 0, x >= 0");
}

}  // namespace

double regularized_gamma_p(double a, double x) {
  check_gamma_args(a, x);
  if (x == 0.0) return 0.0;
  if (std::isinf(x)) return 1.0;
  return x < a + 1.0 ? gamma_p_series(a, x) : 1.0 - gamma_q_continued_fraction(a, x);
}

double regularized_gamma_q(double a, double x) {
  check_gamma_args(a, x);
  if (x == 0.0) return 1.0;
  if (std::isinf(x)) return 0.0;
  return x < a + 1.0 ? 1.0 - gamma_p_series(a, x) : gamma_q_continued_fraction(a, x);
}

double chi_square_cdf(double x, double dof) { return regularized_gamma_p(0.5 * dof, 0.5 * std::max(x, 0.0)); }

double chi_square_sf(double x, double dof) { return regularized_gamma_q(0.5 * dof, 0.5 * std::max(x, 0.0)); }

double chi_square_upper_quantile(double upper_tail, double dof) {
  if (!(upper_tail > 0.0 && upper_tail < 1.0)) throw std::domain_error("upper tail probability must lie in (0, 1)");
  if (!(dof > 0.0)) throw std::domain_error("dof must be positive");

  // Wilson-Hilferty start, then Newton on sf(c) - p, bracketed.
  const double z = [&] {
    // rough normal quantile, only a starting point
    const double t = std::sqrt(-2.0 * std::log(upper_tail < 0.5 ? upper_tail : 1.0 - upper_tail));
    const double g = t - (2.30753 + 0.27061 * t) / (1.0 + 0.99229 * t + 0.04481 * t * t);
    return upper_tail < 0.5 ? g : -g;
  }();
  const double k = 2.0 / (9.0 * dof);
  double c = dof * std::pow(std::max(1.0 - k + z * std::sqrt(k), 1e-3), 3.0);

  double lo = 0.0, hi = std::max(2.0 * c, dof + 50.0 * std::sqrt(2.0 * dof) + 50.0);
  while (chi_square_sf(hi, dof) > upper_tail) hi *= 2.0;
  if (!(c > lo && c < hi)) c = 0.5 * (lo + hi);

  const double a = 0.5 * dof;
  for (int it = 0; it < 200; ++it) {
    const double f = chi_square_sf(c, dof) - upper_tail;
    if (f > 0.0) lo = c; else hi = c;
    // d sf / dc = -pdf(c)
    const double pdf = std::exp((a - 1.0) * std::log(0.5 * c) - 0.5 * c - std::lgamma(a)) * 0.5;
    double next = pdf > 0.0 ? c + f / pdf : 0.5 * (lo + hi);
    if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
    if (std::abs(next - c) <= 1e-15 * std::max(1.0, c)) return next;
    c = next;
  }
  return c;
}

ChiSquareResult chi_square_test(std::span<const double> residuals, double sigma_b2, double alpha) {
  const std::size_t m = residuals.size();
  if (m < 2) throw DegenerateSample("variance test needs at least two samples");
  if (!(sigma_b2 > 0.0)) throw DegenerateSample("background variance must be positive");
  double mean = 0.0;
  for (double r : residuals) mean += r;
  mean /= double(m);
  double ss = 0.0;
  for (double r : residuals) ss += (r - mean) * (r - mean);
  // (m - 1) s^2 with s^2 the unbiased variance is just the centred sum of squares.
  ChiSquareResult out;
  out.statistic = ss / sigma_b2;
  out.p_value = chi_square_sf(out.statistic, double(m - 1));
  out.reject = out.p_value < alpha;
  return out;
}

double analytic_power(std::int64_t m, double sigma_b2, double epsilon, double alpha) {
  if (m < 2) throw DegenerateSample("power needs m >= 2");
  if (!(sigma_b2 > 0.0)) throw DegenerateSample("background variance must be positive");
  if (epsilon == 0.0) return alpha;
  const double dof = double(m - 1);
  const double critical = chi_square_upper_quantile(alpha, dof);
  const double ratio = (sigma_b2 + epsilon * epsilon) / sigma_b2;
  return chi_square_sf(critical / ratio, dof);
}

double analytic_miss_probability(std::int64_t m, double sigma_b2, double epsilon, double alpha) {
  if (m < 2) throw DegenerateSample("power needs m >= 2");
  if (!(sigma_b2 > 0.0)) throw DegenerateSample("background variance must be positive");
  if (epsilon == 0.0) return 1.0 - alpha;
  const double dof = double(m - 1);
  const double critical = chi_square_upper_quantile(alpha, dof);
  const double ratio = (sigma_b2 + epsilon * epsilon) / sigma_b2;
  return chi_square_cdf(critical / ratio, dof);
}

double monte_carlo_power(std::int64_t m, double sigma_b2, double epsilon, double alpha, int trials, Rng& rng) {
  if (m < 2) throw DegenerateSample("power needs m >= 2");
  if (trials < 1) throw ConfigError("monte_carlo_power needs at least one trial");
  std::normal_distribution<double> normal(0.0, std::sqrt(sigma_b2 + epsilon * epsilon));
  std::vector<double> sample(static_cast<std::size_t>(m));
  int rejected = 0;
  for (int t = 0; t < trials; ++t) {
    for (auto& x : sample) x = normal(rng);
    if (chi_square_test(sample, sigma_b2, alpha).reject) ++rejected;
  }
  return double(rejected) / double(trials);
}

double effective_epsilon(const Field& delta_t, const Field& delta_tm1) {
  require_same_shape(delta_t.shape(), delta_tm1.shape(), "effective_epsilon");
  const Shape s = delta_t.shape();
  double acc = 0.0;
  for (const Field* f : {&delta_t, &delta_tm1}) {
    for (int v = 0; v < s.n_var; ++v) {
      double mean = 0.0;
      for (std::size_t c = 0; c < s.cells(); ++c) mean += (*f)[c * s.n_var + v];
      mean /= double(s.cells());
      double var = 0.0;
      for (std::size_t c = 0; c < s.cells(); ++c) {
        const double d = (*f)[c * s.n_var + v] - mean;
        var += d * d;
      }
      acc += var / double(s.cells());
    }
  }
  return std::sqrt(acc / double(2 * s.n_var));
}

DetectionReport detectability_of_attack(const Field& delta_t, const Field& delta_tm1, double alpha, Rng* rng,
                                        int mc_trials) {
  DetectionReport r;
  r.m = std::int64_t(2 * delta_t.size());
  r.alpha = alpha;
  r.sigma_b2 = 1.0;
  r.epsilon = effective_epsilon(delta_t, delta_tm1);
  r.analytic_power = analytic_power(r.m, r.sigma_b2, r.epsilon, alpha);
  if (rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> sample;
    sample.reserve(std::size_t(r.m));
    for (const Field* f : {&delta_t, &delta_tm1})
      for (double d : f->data()) sample.push_back(normal(*rng) + d);
    const auto test = chi_square_test(sample, r.sigma_b2, alpha);
    r.statistic = test.statistic;
    r.p_value = test.p_value;
    r.reject = test.reject;
    if (mc_trials > 0) {
      r.monte_carlo_power = monte_carlo_power(r.m, r.sigma_b2, r.epsilon, alpha, mc_trials, *rng);
      r.monte_carlo_trials = mc_trials;
    }
  }
  return r;
}

}  // namespace advobs
