#pragma once

#include <functional>
#include <vector>

#include "advobs/grid.hpp"
#include "advobs/synth.hpp"

namespace advobs {

// Per-cell, per-channel, per-day-of-year mean over whole years.
struct Climatology {
  Shape shape;
  int period = 0;
  int n_years = 0;
  std::vector<Field> mean_by_day;  // period entries

  const Field& at_day(std::int64_t time_index) const;
};

// A sequence of equally shaped fields with consecutive time indices starting
// at `first_time_index`; day of year = time_index mod period.
struct Series {
  std::vector<Field> fields;
  std::int64_t first_time_index = 0;
};

Series to_series(const Trajectory& traj);
// Applies `fn` to every field (e.g. wind_speed or extract_channel).
Series map_series(const Series& s, const std::function<Field(const Field&)>& fn);

// Throws InsufficientData for fewer than two whole years.
Climatology build_climatology(const Series& years, int period);

// Percentile by linear interpolation between order statistics:
// position p * (n - 1) in the sorted sample (the numpy "linear" rule).
double percentile_linear(std::vector<double> sample, double p);

// Per cell: each year's maximum |value - climatology| for `channel`, the
// `percentile` of those maxima across years, averaged across cells.
// Throws InsufficientData for fewer than two whole years.
double extreme_threshold(const Series& years, const Climatology& clim, int channel, double percentile = 0.99);
// The per-cell values before averaging (n_lat x n_lon x 1).
Field extreme_threshold_per_cell(const Series& years, const Climatology& clim, int channel,
                                 double percentile = 0.99);

struct BackgroundError {
  std::vector<double> variance_normalized;  // per variable
  std::vector<double> variance_raw;

  std::vector<double> std_normalized() const;
};

// One-step forecaster in normalized units: (prev, cur) -> next.
using OneStepForecaster = std::function<Field(const Field& prev, const Field& cur)>;

// For each instant t (stride apart) with t - 1, t, t + 1 in the split, the
// residual forecast(X[t-1], X[t]) - X[t+1]; per variable, the variance over
// instants at every cell, averaged across cells. Throws InsufficientData and
// DegenerateVariance (zero error).
BackgroundError estimate_background_error(const OneStepForecaster& forecaster,
                                          const std::vector<Field>& normalized_eval, const VariableStats& stats,
                                          int stride = 1);

}  // namespace advobs
