#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "advobs/grid.hpp"
#include "advobs/inference.hpp"
#include "advobs/model.hpp"

namespace advobs {

// Scalar quantity a functional reads per cell, in raw units.
struct Quantity {
  enum class Kind { Variable, WindSpeed };
  Kind kind = Kind::Variable;
  int var = 0;    // Variable
  int u_var = 0;  // WindSpeed
  int v_var = 1;

  static Quantity variable(int v) { return {Kind::Variable, v, 0, 0}; }
  static Quantity wind(int u, int v) { return {Kind::WindSpeed, 0, u, v}; }
};

enum class Functional {
  NegMinWindSpeed,     // -min over the region of wind speed
  NegMaxDeviation,     // -max over the region of (q - reference)
  MinimizeMax,         // max over the region of q
  MinimizeRegionMean,  // mean over the region of q
  TargetValue,         // sign * mean over the region of q
};

// One weighted term w * V(S(X)). The attack minimizes the sum of terms.
struct LossTerm {
  Functional functional = Functional::MinimizeRegionMean;
  Quantity quantity;
  SpatialMask mask;
  // Per-cell raw reference for NegMaxDeviation (n_lat x n_lon x 1); empty means 0.
  Field reference;
  double sign = 1.0;
  double weight = 1.0;
};

struct AdversarialLoss {
  std::vector<LossTerm> terms;
  VariableStats stats;  // raw <-> normalized
  double tau = 0.05;    // soft-min / soft-max temperature, raw units

  // Throws EmptyRegion, UnknownVariable, ShapeMismatch.
  void validate(const Shape& shape) const;
};

// Soft-min/soft-max are log-mean-exp with temperature tau, so at ties they
// equal the hard value. The hard operators spread the subgradient uniformly
// over tied cells; wind speed has zero subgradient where it vanishes.
double eval_loss(const AdversarialLoss& loss, const Field& normalized, bool smooth = false);
// Gradient of eval_loss with respect to the normalized state.
Field loss_grad(const AdversarialLoss& loss, const Field& normalized, bool smooth = true);

struct Perturbation {
  Field delta_t;    // perturbation of the current state
  Field delta_tm1;  // perturbation of the previous state
};

struct ChannelMoments {
  std::vector<double> mean;
  std::vector<double> std;  // population
};
ChannelMoments channel_moments(const Field& f);

// Per channel: subtract the mean and rescale the population std to
// min(eps, std); channels with zero std become zero.
Field project(const Field& delta, double eps);
Perturbation project(const Perturbation& delta, double eps);

// X + scale[v] * delta[v] for both conditioning states; `scale` converts
// budget units (background-error std) to normalized state units.
std::pair<Field, Field> apply_perturbation(const Field& prev, const Field& cur, const Perturbation& delta,
                                           const std::vector<double>& scale);

enum class Variant { Full, NoSteps, NoApprox, NoBoth, DpAttacker, AdvDm };
// Throws UnknownVariant.
Variant parse_variant(std::string_view name);
std::string variant_name(Variant v);
const std::vector<Variant>& all_variants();

struct AttackConfig {
  double epsilon = 0.0025;
  int iterations = 50;  // N
  int lead_steps = 4;   // j
  int n_steps = 2;      // n
  double beta = 0.9;
  std::uint64_t seed = 0;
  Variant variant = Variant::Full;
  // Divide each field's gradient by its largest per-variable std before the
  // unit projection in the momentum update.
  bool normalize_gradient = true;

  // Throws ConfigError.
  void validate() const;
};

// Cosine step schedule before bias correction, i = 1..N.
double step_size(double eps, int i, int n_iterations);

struct IterationRecord {
  int iteration = 0;
  double loss = 0.0;   // smooth loss of the approximate forecast
  double alpha = 0.0;  // step actually applied
  int denoiser_calls = 0;
};

struct AttackResult {
  Perturbation delta;
  std::vector<IterationRecord> log;
};

struct AttackProblem {
  const DenoiserParams* params = nullptr;
  Field prev;  // normalized
  Field cur;
  // Normalized truth at the next step; required by AdvDm.
  Field truth_next;
  AdversarialLoss loss;
  // Per-variable background-error std in normalized units.
  std::vector<double> scale;
};

// Projected momentum descent on the adversarial loss through the approximate
// unrolled sampler, or one of the ablations / baselines.
AttackResult attack(const AttackProblem& problem, const AttackConfig& config);

enum class DeviationMode {
  MedianField,    // deviation of the ensemble-median forecast
  MemberMedian,   // median over members of per-member deviations
};

struct DeviationEval {
  int lead_steps = 4;
  int n_full = 20;
  std::vector<std::uint64_t> member_seeds;
  DeviationMode mode = DeviationMode::MedianField;
};

// Hard loss of the full-sampler forecast at the last lead step: one value for
// MedianField, one per member for MemberMedian.
std::vector<double> forecast_losses(const AttackProblem& problem, const Field& prev, const Field& cur,
                                    const DeviationEval& eval);

// Clean minus attacked hard loss at the last lead step (median over members
// for MemberMedian); positive when the attack moved the forecast in the
// intended direction.
double induced_deviation(const AttackProblem& problem, const Perturbation& delta, const DeviationEval& eval);
// Same with precomputed clean losses.
double induced_deviation(const AttackProblem& problem, const Perturbation& delta, const DeviationEval& eval,
                         const std::vector<double>& clean_losses);

// Budget at which the deviation curve first reaches `threshold`, by linear
// interpolation between observations, treating (0, 0) as observed when the
// first budget is positive; beyond the last budget, linear extrapolation.
// Throws NoCrossing, ConfigError (fewer than 2 budgets or not increasing).
double min_budget_search(const std::vector<double>& budgets, const std::vector<double>& deviations, double threshold);

}  // namespace advobs
