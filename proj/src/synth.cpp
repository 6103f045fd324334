#include "advobs/synth.hpp"

#include <cmath>
#include <numbers>

#include "advobs/errors.hpp"

namespace advobs {

void SynthParams::validate() const {
  if (period < 20) throw ConfigError("synth period must be at least 20 steps");
  if (!(substep > 0.0) || !(step_time > 0.0)) throw ConfigError("synth substep and step_time must be positive");
  if (forcing < 0 || seasonal_amplitude < 0 || noise < 0 || init_amplitude < 0)
    throw ConfigError("synth amplitudes must be nonnegative");
  if (n_fast < 0) throw ConfigError("n_fast must be nonnegative");
  if (spinup_steps < 0) throw ConfigError("spinup_steps must be nonnegative");
}

void Trajectory::validate() const {
  for (std::size_t i = 0; i < states.size(); ++i) {
    if (!states[i].spec || !(*states[i].spec == *spec)) throw ShapeMismatch("trajectory states disagree on grid");
    if (i > 0 && states[i].time_index != states[i - 1].time_index + 1)
      throw ShapeMismatch("trajectory time indices are not consecutive");
  }
}

std::vector<Field> Trajectory::fields() const {
  std::vector<Field> out;
  out.reserve(states.size());
  for (const auto& s : states) out.push_back(s.values);
  return out;
}

double raw_from_latent(const Variable& var, double x) {
  if (var.name == "u-wind" || var.name == "v-wind") return 1.5 * (x - 2.0);
  if (var.name == "temperature") return 285.0 + 2.5 * (x - 2.0);
  if (var.name == "precipitation") {
    const double z = x - 4.0;
    return 4.0 * (z > 30.0 ? z : std::log1p(std::exp(z)));
  }
  if (var.name == "pressure") return 1010.0 - 4.0 * (x - 2.0);
  return x;
}

Simulator::Simulator(std::shared_ptr<const GridSpec> spec, SynthParams params, std::uint64_t seed)
    : spec_(std::move(spec)), p_(params), rng_(derive_seed(seed, {0x5157})) {
  p_.validate();
  const Shape s = spec_->shape();
  x_.assign(s.size(), 0.0);
  y_.assign(s.size() * std::size_t(p_.n_fast), 0.0);

  seasonal_weight_.resize(s.n_var);
  for (int v = 0; v < s.n_var; ++v)
    seasonal_weight_[v] = spec_->variables()[v].name == "temperature" ? 1.0 : 0.5;
  row_forcing_.resize(s.n_lat);
  hemisphere_.resize(s.n_lat);
  for (int r = 0; r < s.n_lat; ++r) {
    const double lat = spec_->lat_of(r) * std::numbers::pi / 180.0;
    row_forcing_[r] = p_.forcing * (0.8 + 0.4 * std::cos(lat));
    hemisphere_[r] = lat >= 0 ? 1.0 : -1.0;
  }

  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto& x : x_) x = p_.init_amplitude * normal(rng_);
  for (auto& y : y_) y = 0.1 * p_.init_amplitude * normal(rng_);

  model_time_ = -double(p_.spinup_steps);
  for (int i = 0; i < p_.spinup_steps; ++i) advance();
  t_ = 0;
  model_time_ = 0.0;
}

void Simulator::tendency(const std::vector<double>& x, const std::vector<double>& y, double t,
                         std::vector<double>& dx, std::vector<double>& dy) const {
  const int nl = spec_->n_lat(), nc = spec_->n_lon(), nv = spec_->n_var();
  const int nf = p_.n_fast;
  const double hcb = nf > 0 ? p_.fast_h * p_.fast_c / p_.fast_b : 0.0;
  const double phase = std::sin(2.0 * std::numbers::pi * t / p_.period);
  auto X = [&](int r, int c, int v) { return x[(std::size_t(r) * nc + spec_->wrap_lon(c)) * nv + v]; };

  for (int r = 0; r < nl; ++r) {
    const int rn = r + 1 < nl ? r + 1 : r - 1;
    const int rs = r > 0 ? r - 1 : r + 1;
    for (int c = 0; c < nc; ++c) {
      for (int v = 0; v < nv; ++v) {
        const std::size_t i = (std::size_t(r) * nc + c) * nv + v;
        double f = X(r, c - 1, v) * (X(r, c + 1, v) - X(r, c - 2, v)) - x[i];
        f += row_forcing_[r] + p_.seasonal_amplitude * seasonal_weight_[v] * hemisphere_[r] * phase;
        f += p_.lat_coupling * (X(rn, c, v) + X(rs, c, v) - 2.0 * x[i]);
        f += p_.var_coupling * (X(r, c, (v + 1) % nv) - x[i]);
        if (nf > 0) {
          double ysum = 0.0;
          for (int j = 0; j < nf; ++j) ysum += y[i * nf + j];
          f -= hcb * ysum;
        }
        dx[i] = f;
      }
    }
  }
  if (nf == 0) return;

  // Fast ring per (row, var): index k * nf + j over all columns k.
  const std::size_t ring = std::size_t(nc) * nf;
  const double cb = p_.fast_c * p_.fast_b;
  for (int r = 0; r < nl; ++r) {
    for (int v = 0; v < nv; ++v) {
      auto Y = [&](long q) {
        const long m = ((q % long(ring)) + long(ring)) % long(ring);
        const std::size_t c = std::size_t(m) / nf, j = std::size_t(m) % nf;
        return y[((std::size_t(r) * nc + c) * nv + v) * nf + j];
      };
      for (long q = 0; q < long(ring); ++q) {
        const std::size_t c = std::size_t(q) / nf, j = std::size_t(q) % nf;
        const std::size_t xi = (std::size_t(r) * nc + c) * nv + v;
        const std::size_t yi = xi * nf + j;
        dy[yi] = cb * Y(q + 1) * (Y(q - 1) - Y(q + 2)) - p_.fast_c * y[yi] + hcb * x[xi];
      }
    }
  }
}

void Simulator::substep(double t) {
  const double h = p_.substep;
  const std::size_t nx = x_.size(), ny = y_.size();
  std::vector<double> k1x(nx), k2x(nx), k3x(nx), k4x(nx), tx(nx);
  std::vector<double> k1y(ny), k2y(ny), k3y(ny), k4y(ny), ty(ny);

  tendency(x_, y_, t, k1x, k1y);
  for (std::size_t i = 0; i < nx; ++i) tx[i] = x_[i] + 0.5 * h * k1x[i];
  for (std::size_t i = 0; i < ny; ++i) ty[i] = y_[i] + 0.5 * h * k1y[i];
  tendency(tx, ty, t + 0.5 * h, k2x, k2y);
  for (std::size_t i = 0; i < nx; ++i) tx[i] = x_[i] + 0.5 * h * k2x[i];
  for (std::size_t i = 0; i < ny; ++i) ty[i] = y_[i] + 0.5 * h * k2y[i];
  tendency(tx, ty, t + 0.5 * h, k3x, k3y);
  for (std::size_t i = 0; i < nx; ++i) tx[i] = x_[i] + h * k3x[i];
  for (std::size_t i = 0; i < ny; ++i) ty[i] = y_[i] + h * k3y[i];
  tendency(tx, ty, t + h, k4x, k4y);

  for (std::size_t i = 0; i < nx; ++i) x_[i] += h / 6.0 * (k1x[i] + 2 * k2x[i] + 2 * k3x[i] + k4x[i]);
  for (std::size_t i = 0; i < ny; ++i) y_[i] += h / 6.0 * (k1y[i] + 2 * k2y[i] + 2 * k3y[i] + k4y[i]);

  if (p_.noise > 0.0) {
    std::normal_distribution<double> normal(0.0, 1.0);
    const double kick = p_.noise * std::sqrt(h);
    for (auto& x : x_) x += kick * normal(rng_);
  }
}

void Simulator::advance() {
  const int n_sub = std::max(1, int(std::lround(p_.step_time / p_.substep)));
  // Seasonal phase is measured in output steps.
  const double dt_steps = 1.0 / n_sub;
  for (int s = 0; s < n_sub; ++s) substep(model_time_ + s * dt_steps);
  model_time_ += 1.0;
  ++t_;
  for (double x : x_)
    if (!std::isfinite(x) || std::abs(x) > p_.blowup_cap)
      throw NumericalBlowup("synthetic lattice exceeded magnitude cap " + std::to_string(p_.blowup_cap));
  for (double y : y_)
    if (!std::isfinite(y) || std::abs(y) > p_.blowup_cap)
      throw NumericalBlowup("fast lattice exceeded magnitude cap " + std::to_string(p_.blowup_cap));
}

Field Simulator::raw_state() const {
  const Shape s = spec_->shape();
  Field out(s);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = raw_from_latent(spec_->variables()[i % s.n_var], x_[i]);
  return out;
}

Trajectory simulate(std::shared_ptr<const GridSpec> spec, const SynthParams& params, std::uint64_t seed,
                    int n_steps) {
  if (n_steps < 2) throw InsufficientData("simulate needs n_steps >= 2");
  Simulator sim(spec, params, seed);
  Trajectory traj;
  traj.spec = spec;
  traj.seed = seed;
  traj.states.reserve(std::size_t(n_steps));
  for (int i = 0; i < n_steps; ++i) {
    if (i > 0) sim.advance();
    traj.states.push_back({spec, sim.raw_state(), sim.time_index()});
  }
  return traj;
}

namespace {

Trajectory slice(const Trajectory& traj, std::size_t begin, std::size_t end) {
  Trajectory out;
  out.spec = traj.spec;
  out.seed = traj.seed;
  out.states.assign(traj.states.begin() + long(begin), traj.states.begin() + long(end));
  return out;
}

std::size_t first_boundary(const Trajectory& traj, int period) {
  if (traj.states.empty()) return 0;
  const std::int64_t t0 = traj.states.front().time_index;
  const std::int64_t r = ((t0 % period) + period) % period;
  return r == 0 ? 0 : std::size_t(period - r);
}

}  // namespace

DatasetSplit split_dataset(const Trajectory& traj, int period, int train_years, int eval_years) {
  if (period < 1 || train_years < 1 || eval_years < 1) throw ConfigError("split needs positive years and period");
  const std::size_t start = first_boundary(traj, period);
  const std::size_t need = std::size_t(train_years + eval_years) * std::size_t(period);
  if (traj.size() < start + need)
    throw InsufficientData("trajectory covers " + std::to_string(traj.size()) + " steps, split needs " +
                           std::to_string(start + need));
  const std::size_t mid = start + std::size_t(train_years) * period;
  return {slice(traj, start, mid), slice(traj, mid, mid + std::size_t(eval_years) * period)};
}

std::vector<Trajectory> split_years(const Trajectory& traj, int period) {
  std::vector<Trajectory> years;
  for (std::size_t b = first_boundary(traj, period); b + period <= traj.size(); b += period)
    years.push_back(slice(traj, b, b + period));
  return years;
}

}  // namespace advobs
