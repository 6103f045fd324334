#pragma once

#include <cstdint>
#include <vector>

#include "advobs/model.hpp"

namespace advobs {

struct ForecastConfig {
  int lead_steps = 4;   // j
  int n_full = 20;      // full sampler steps
  int ensemble = 5;     // E
  std::uint64_t seed = 0;

  void validate() const;
};

// Full sampler: per lead step, Z_0 ~ N(0, s_0^2) and denoise_step through the
// mid-quantile levels s_k = sigma((k + 1/2) / n_full), then to zero; the two
// most recent states condition the next step. Returns j states.
std::vector<Field> forecast_full(const DenoiserParams& params, const Field& prev, const Field& cur, int lead_steps,
                                 int n_full, Rng& rng);

// Seed of ensemble member k: derive_seed(seed, {k}).
std::uint64_t member_seed(std::uint64_t seed, int member);

// Elementwise median across members at each lead step (mean of the two
// central values for even counts). members[k][lead].
std::vector<Field> ensemble_median(const std::vector<std::vector<Field>>& members);

// Runs E members with member_seed() streams and returns the per-lead median.
std::vector<Field> forecast_ensemble(const DenoiserParams& params, const Field& prev, const Field& cur,
                                     const ForecastConfig& config);
// Same, with explicit member seeds.
std::vector<Field> forecast_ensemble(const DenoiserParams& params, const Field& prev, const Field& cur, int lead_steps,
                                     int n_full, const std::vector<std::uint64_t>& seeds);
// Individual member forecasts, members[k][lead].
std::vector<std::vector<Field>> forecast_members(const DenoiserParams& params, const Field& prev, const Field& cur,
                                                 int lead_steps, int n_full, const std::vector<std::uint64_t>& seeds);

enum class SigmaSampling {
  Uniform,      // sigma_i ~ Sigma(i/n, (i+1)/n)
  MidQuantile,  // sigma_i = sigma((i + 1/2)/n), no random draw
};

struct DenoiserCall {
  int lead = 0;  // 0-based lead step
  int step = 0;  // 0-based denoising step inside the lead step
  double sigma_in = 0.0;
  double sigma_out = 0.0;
  Field z_in;  // estimate fed to the call
};

// Everything the reverse pass needs: states[0] = prev, states[1] = cur,
// states[2 + l] = prediction for lead step l.
struct UnrollTape {
  int lead_steps = 0;
  int n_steps = 0;
  std::vector<Field> states;
  std::vector<Field> initial_noise;           // per lead step
  std::vector<std::vector<double>> sigmas;    // per lead step, n levels
  std::vector<DenoiserCall> calls;            // j * n entries in execution order

  const Field& output() const { return states.back(); }
};

struct ApproxForecast {
  Field output;
  UnrollTape tape;
};

// Approximate autoregressive inference with n noise levels per lead step:
// sample sigma_0 > ... > sigma_{n-1} from consecutive quantile intervals, start
// from N(0, sigma_0^2) and chain denoise_step through them down to zero.
// Throws BadStepCount unless 1 <= n <= params.schedule.n_full and j >= 1.
ApproxForecast forecast_approx(const DenoiserParams& params, const Field& prev, const Field& cur, int lead_steps,
                               int n_steps, Rng& rng, SigmaSampling sampling = SigmaSampling::Uniform);

// Re-runs the recorded pass from the tape's inputs, noise and levels.
Field replay(const DenoiserParams& params, const UnrollTape& tape);

struct ConditioningGradients {
  Field prev;
  Field cur;
};

// Gradient of <cotangent, tape.output()> with respect to the two conditioning
// states, through every denoising and autoregressive step. Noise draws are
// constants. Throws TapeMismatch.
ConditioningGradients forecast_approx_vjp(const DenoiserParams& params, const UnrollTape& tape,
                                          const Field& cotangent);

}  // namespace advobs
