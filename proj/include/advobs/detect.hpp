#pragma once

#include <cstdint>
#include <optional>
#include <span>

#include "advobs/grid.hpp"
#include "advobs/random.hpp"

namespace advobs {

// Regularized lower / upper incomplete gamma functions P(a, x), Q(a, x).
// Series expansion for x < a + 1, modified-Lentz continued fraction
// otherwise; relative accuracy around 1e-14 away from the far tails.
double regularized_gamma_p(double a, double x);
double regularized_gamma_q(double a, double x);

// Chi-square with `dof` degrees of freedom.
double chi_square_cdf(double x, double dof);
double chi_square_sf(double x, double dof);
// c with sf(c) = upper_tail. Newton iterations safeguarded by bisection.
double chi_square_upper_quantile(double upper_tail, double dof);

struct ChiSquareResult {
  double statistic = 0.0;
  double p_value = 1.0;
  bool reject = false;
};

// One-sided upper-tail variance test against a known variance:
// T = (m - 1) s^2 / sigma_b2 ~ chi2(m - 1). Throws DegenerateSample (m < 2).
ChiSquareResult chi_square_test(std::span<const double> residuals, double sigma_b2, double alpha);

// P(chi2_{m-1} > c / r), c the (1 - alpha) quantile and
// r = (sigma_b2 + epsilon^2) / sigma_b2. Returns alpha exactly at epsilon = 0.
double analytic_power(std::int64_t m, double sigma_b2, double epsilon, double alpha);

// 1 - analytic_power, computed from the lower tail so it stays accurate when
// the power rounds to 1.
double analytic_miss_probability(std::int64_t m, double sigma_b2, double epsilon, double alpha);

// Rejection rate of chi_square_test over `trials` samples of m draws from
// N(0, sigma_b2 + epsilon^2).
double monte_carlo_power(std::int64_t m, double sigma_b2, double epsilon, double alpha, int trials, Rng& rng);

struct DetectionReport {
  std::int64_t m = 0;
  double alpha = 0.05;
  double sigma_b2 = 1.0;
  double epsilon = 0.0;
  double statistic = 0.0;
  double p_value = 1.0;
  bool reject = false;
  double analytic_power = 0.0;
  std::optional<double> monte_carlo_power;
  int monte_carlo_trials = 0;
};

// Root mean square over (field, variable) of the population std of a
// perturbation expressed in background-error units.
double effective_epsilon(const Field& delta_t, const Field& delta_tm1);

// Detectability of a perturbation given in background-error units
// (sigma_b2 = 1): m = 2 * cells * variables and analytic power at the
// effective epsilon. With `rng`, the test statistic comes from one simulated
// contaminated sample (N(0, 1) background plus the perturbation values), and
// `mc_trials` > 0 adds a Monte-Carlo power estimate.
DetectionReport detectability_of_attack(const Field& delta_t, const Field& delta_tm1, double alpha,
                                        Rng* rng = nullptr, int mc_trials = 0);

}  // namespace advobs
