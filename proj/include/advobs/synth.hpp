#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "advobs/grid.hpp"
#include "advobs/random.hpp"

namespace advobs {

// Two-scale Lorenz-96 lattice used as a stand-in for reanalysis data.
//
// Every (variable, latitude row) pair is a periodic ring of slow variables
// X_k over the longitude columns, each carrying n_fast fast variables Y_{j,k}:
//
//   dX_k/dt = X_{k-1}(X_{k+1} - X_{k-2}) - X_k + F(row, var, t)
//             - (h c / b) sum_j Y_{j,k}
//             + lat_coupling * (X[row+1] + X[row-1] - 2 X[row])     (reflecting at the poles)
//             + var_coupling * (X[var+1] - X[var])                  (cyclic over variables)
//   dY_{j,k}/dt = c b Y_{j+1,k}(Y_{j-1,k} - Y_{j+2,k}) - c Y_{j,k} + (h c / b) X_k
//
// with F = forcing * (0.8 + 0.4 cos(lat)) + seasonal_amplitude * w_var *
// sign(lat) * sin(2 pi t / period). Integration is classical RK4 with an
// additive Euler-Maruyama noise kick on X after every substep.
struct SynthParams {
  double forcing = 8.0;
  double seasonal_amplitude = 2.0;
  double lat_coupling = 0.3;
  double var_coupling = 0.1;
  int period = 180;          // output steps per synthetic year
  double step_time = 0.05;   // model time per output step
  double substep = 0.005;    // RK4 step
  double noise = 0.05;
  double init_amplitude = 1.0;
  int spinup_steps = 200;
  int n_fast = 2;
  double fast_h = 0.5;
  double fast_c = 4.0;
  double fast_b = 4.0;
  double blowup_cap = 1.0e3;

  void validate() const;
};

struct Trajectory {
  std::shared_ptr<const GridSpec> spec;
  std::vector<WeatherState> states;
  std::uint64_t seed = 0;

  std::size_t size() const { return states.size(); }
  // Consecutive time indices, one spec. Throws ShapeMismatch otherwise.
  void validate() const;
  std::vector<Field> fields() const;
};

// Stateful integrator; simulate() is the usual entry point. Exposed so that
// callers can inspect or nudge the internal lattice (e.g. sensitivity runs).
class Simulator {
 public:
  // Draws the initial state from `seed` and integrates the spin-up.
  Simulator(std::shared_ptr<const GridSpec> spec, SynthParams params, std::uint64_t seed);

  // Advances one output step.
  void advance();
  // Current state mapped to raw units.
  Field raw_state() const;
  std::int64_t time_index() const { return t_; }

  // Slow lattice values, layout (lat, lon, var).
  std::vector<double>& slow() { return x_; }
  const std::vector<double>& slow() const { return x_; }

 private:
  void substep(double t);
  void tendency(const std::vector<double>& x, const std::vector<double>& y, double t,
                std::vector<double>& dx, std::vector<double>& dy) const;

  std::shared_ptr<const GridSpec> spec_;
  SynthParams p_;
  Rng rng_;
  std::vector<double> x_;
  std::vector<double> y_;
  std::vector<double> seasonal_weight_;
  std::vector<double> row_forcing_;
  std::vector<double> hemisphere_;
  std::int64_t t_ = 0;  // output steps since the end of spin-up
  double model_time_ = 0.0;
};

// Raw-unit value of every variable given its slow lattice value. The
// precipitation-like channel is a softplus so it stays nonnegative.
double raw_from_latent(const Variable& var, double x);

// Deterministic in (spec, params, seed, n_steps). Throws NumericalBlowup.
Trajectory simulate(std::shared_ptr<const GridSpec> spec, const SynthParams& params, std::uint64_t seed,
                    int n_steps);

struct DatasetSplit {
  Trajectory train;
  Trajectory eval;
};

// Train covers the first train_years whole periods after the first period
// boundary, eval the following eval_years periods. Throws InsufficientData.
DatasetSplit split_dataset(const Trajectory& traj, int period, int train_years, int eval_years);

// Splits a trajectory into whole years (periods), starting at the first
// period boundary. Partial years are dropped.
std::vector<Trajectory> split_years(const Trajectory& traj, int period);

}  // namespace advobs
