#include "advobs/inference.hpp"

#include <algorithm>

#include "advobs/errors.hpp"

namespace advobs {

void ForecastConfig::validate() const {
  if (lead_steps < 1) throw ConfigError("lead_steps must be >= 1");
  if (n_full < 1) throw ConfigError("n_full must be >= 1");
  if (ensemble < 1) throw ConfigError("ensemble size must be >= 1");
}

std::vector<Field> forecast_full(const DenoiserParams& params, const Field& prev, const Field& cur, int lead_steps,
                                 int n_full, Rng& rng) {
  if (lead_steps < 1) throw BadStepCount("lead_steps must be >= 1");
  if (n_full < 1) throw BadStepCount("n_full must be >= 1");
  const std::vector<double> levels = params.schedule.mid_quantile_levels(n_full);
  std::vector<Field> out;
  out.reserve(std::size_t(lead_steps));
  const Field* a = &prev;
  const Field* b = &cur;
  for (int l = 0; l < lead_steps; ++l) {
    Field z = sample_noise(cur.shape(), levels.front(), rng);
    for (int k = 0; k < n_full; ++k) {
      const double next = k + 1 < n_full ? levels[std::size_t(k + 1)] : 0.0;
      z = denoise_step(params, *a, *b, z, levels[std::size_t(k)], next);
    }
    out.push_back(std::move(z));
    a = b;
    b = &out.back();
    // `out` may reallocate; reserve() above keeps the pointers valid.
  }
  return out;
}

std::uint64_t member_seed(std::uint64_t seed, int member) { return derive_seed(seed, {std::uint64_t(member)}); }

std::vector<Field> ensemble_median(const std::vector<std::vector<Field>>& members) {
  if (members.empty()) throw InsufficientData("ensemble has no members");
  const std::size_t leads = members.front().size();
  for (const auto& m : members)
    if (m.size() != leads) throw ShapeMismatch("ensemble members disagree on lead count");
  std::vector<Field> out;
  std::vector<double> column(members.size());
  for (std::size_t l = 0; l < leads; ++l) {
    const Shape shape = members.front()[l].shape();
    for (const auto& m : members) require_same_shape(m[l].shape(), shape, "ensemble_median");
    Field med(shape);
    for (std::size_t i = 0; i < med.size(); ++i) {
      for (std::size_t k = 0; k < members.size(); ++k) column[k] = members[k][l][i];
      std::sort(column.begin(), column.end());
      const std::size_t n = column.size();
      med[i] = n % 2 == 1 ? column[n / 2] : 0.5 * (column[n / 2 - 1] + column[n / 2]);
    }
    out.push_back(std::move(med));
  }
  return out;
}

std::vector<std::vector<Field>> forecast_members(const DenoiserParams& params, const Field& prev, const Field& cur,
                                                 int lead_steps, int n_full, const std::vector<std::uint64_t>& seeds) {
  std::vector<std::vector<Field>> members;
  members.reserve(seeds.size());
  for (auto s : seeds) {
    Rng rng(s);
    members.push_back(forecast_full(params, prev, cur, lead_steps, n_full, rng));
  }
  return members;
}

std::vector<Field> forecast_ensemble(const DenoiserParams& params, const Field& prev, const Field& cur, int lead_steps,
                                     int n_full, const std::vector<std::uint64_t>& seeds) {
  return ensemble_median(forecast_members(params, prev, cur, lead_steps, n_full, seeds));
}

std::vector<Field> forecast_ensemble(const DenoiserParams& params, const Field& prev, const Field& cur,
                                     const ForecastConfig& config) {
  config.validate();
  std::vector<std::uint64_t> seeds;
  for (int k = 0; k < config.ensemble; ++k) seeds.push_back(member_seed(config.seed, k));
  return forecast_ensemble(params, prev, cur, config.lead_steps, config.n_full, seeds);
}

namespace {

void check_counts(const DenoiserParams& params, int lead_steps, int n_steps) {
  if (lead_steps < 1) throw BadStepCount("lead_steps must be >= 1");
  if (n_steps < 1 || n_steps > params.schedule.n_full)
    throw BadStepCount("n must lie in [1, " + std::to_string(params.schedule.n_full) + "], got " +
                       std::to_string(n_steps));
}

}  // namespace

ApproxForecast forecast_approx(const DenoiserParams& params, const Field& prev, const Field& cur, int lead_steps,
                               int n_steps, Rng& rng, SigmaSampling sampling) {
  check_counts(params, lead_steps, n_steps);
  require_same_shape(prev.shape(), cur.shape(), "forecast_approx");
  UnrollTape tape;
  tape.lead_steps = lead_steps;
  tape.n_steps = n_steps;
  tape.states.reserve(std::size_t(lead_steps) + 2);
  tape.states.push_back(prev);
  tape.states.push_back(cur);
  tape.calls.reserve(std::size_t(lead_steps * n_steps));

  for (int l = 0; l < lead_steps; ++l) {
    std::vector<double> sigmas(static_cast<std::size_t>(n_steps));
    if (sampling == SigmaSampling::Uniform) {
      for (int i = 0; i < n_steps; ++i)
        sigmas[std::size_t(i)] = sample_sigma(params.schedule, double(i) / n_steps, double(i + 1) / n_steps, rng);
    } else {
      sigmas = params.schedule.mid_quantile_levels(n_steps);
    }
    Field z = sample_noise(cur.shape(), sigmas.front(), rng);
    tape.initial_noise.push_back(z);
    const Field& a = tape.states[std::size_t(l)];
    const Field& b = tape.states[std::size_t(l) + 1];
    for (int i = 0; i < n_steps; ++i) {
      const double s_in = sigmas[std::size_t(i)];
      const double s_out = i + 1 < n_steps ? sigmas[std::size_t(i + 1)] : 0.0;
      Field next = denoise_step(params, a, b, z, s_in, s_out);
      tape.calls.push_back({l, i, s_in, s_out, std::move(z)});
      z = std::move(next);
    }
    tape.sigmas.push_back(std::move(sigmas));
    tape.states.push_back(std::move(z));
  }
  return {tape.output(), std::move(tape)};
}

Field replay(const DenoiserParams& params, const UnrollTape& tape) {
  if (tape.states.size() < 2 || tape.initial_noise.size() != std::size_t(tape.lead_steps) ||
      tape.sigmas.size() != std::size_t(tape.lead_steps))
    throw TapeMismatch("tape is incomplete");
  std::vector<Field> states{tape.states[0], tape.states[1]};
  states.reserve(std::size_t(tape.lead_steps) + 2);
  for (int l = 0; l < tape.lead_steps; ++l) {
    const auto& sigmas = tape.sigmas[std::size_t(l)];
    Field z = tape.initial_noise[std::size_t(l)];
    for (int i = 0; i < tape.n_steps; ++i) {
      const double s_out = i + 1 < tape.n_steps ? sigmas[std::size_t(i + 1)] : 0.0;
      z = denoise_step(params, states[std::size_t(l)], states[std::size_t(l) + 1], z, sigmas[std::size_t(i)], s_out);
    }
    states.push_back(std::move(z));
  }
  return states.back();
}

ConditioningGradients forecast_approx_vjp(const DenoiserParams& params, const UnrollTape& tape,
                                          const Field& cotangent) {
  const std::size_t j = std::size_t(tape.lead_steps), n = std::size_t(tape.n_steps);
  if (tape.lead_steps < 1 || tape.n_steps < 1 || tape.states.size() != j + 2 || tape.calls.size() != j * n)
    throw TapeMismatch("tape holds " + std::to_string(tape.calls.size()) + " calls and " +
                       std::to_string(tape.states.size()) + " states for j=" + std::to_string(j) +
                       ", n=" + std::to_string(n));
  if (!(cotangent.shape() == tape.output().shape())) throw TapeMismatch("cotangent shape differs from tape output");

  std::vector<Field> grad(j + 2, Field(cotangent.shape()));
  grad[j + 1] = cotangent;
  for (std::size_t l = j; l-- > 0;) {
    const Field& a = tape.states[l];
    const Field& b = tape.states[l + 1];
    Field g_z = grad[l + 2];
    for (std::size_t i = n; i-- > 0;) {
      const DenoiserCall& call = tape.calls[l * n + i];
      if (call.lead != int(l) || call.step != int(i)) throw TapeMismatch("tape calls out of order");
      StateGradients g = denoise_step_vjp(params, a, b, call.z_in, call.sigma_in, call.sigma_out, g_z);
      grad[l] += g.prev;
      grad[l + 1] += g.cur;
      g_z = std::move(g.z);
    }
  }
  return {std::move(grad[0]), std::move(grad[1])};
}

}  // namespace advobs
