#include "advobs/climatology.hpp"

#include <algorithm>
#include <cmath>

#include "advobs/errors.hpp"

namespace advobs {

const Field& Climatology::at_day(std::int64_t time_index) const {
  const std::int64_t d = ((time_index % period) + period) % period;
  return mean_by_day[std::size_t(d)];
}

Series to_series(const Trajectory& traj) {
  Series s;
  s.fields = traj.fields();
  s.first_time_index = traj.states.empty() ? 0 : traj.states.front().time_index;
  return s;
}

Series map_series(const Series& s, const std::function<Field(const Field&)>& fn) {
  Series out;
  out.first_time_index = s.first_time_index;
  out.fields.reserve(s.fields.size());
  for (const auto& f : s.fields) out.fields.push_back(fn(f));
  return out;
}

namespace {

// Offset of the first year boundary and the number of whole years.
std::pair<std::size_t, int> whole_years(const Series& s, int period) {
  if (period < 1) throw ConfigError("period must be positive");
  const std::int64_t r = ((s.first_time_index % period) + period) % period;
  const std::size_t start = r == 0 ? 0 : std::size_t(period - r);
  const int years = s.fields.size() > start ? int((s.fields.size() - start) / std::size_t(period)) : 0;
  return {start, years};
}

}  // namespace

Climatology build_climatology(const Series& s, int period) {
  const auto [start, years] = whole_years(s, period);
  if (years < 2) throw InsufficientData("climatology needs at least two whole years, got " + std::to_string(years));
  Climatology c;
  c.shape = s.fields.front().shape();
  c.period = period;
  c.n_years = years;
  c.mean_by_day.assign(std::size_t(period), Field(c.shape));
  for (int y = 0; y < years; ++y)
    for (int d = 0; d < period; ++d) c.mean_by_day[std::size_t(d)] += s.fields[start + std::size_t(y) * period + d];
  for (auto& f : c.mean_by_day) f *= 1.0 / years;
  return c;
}

double percentile_linear(std::vector<double> sample, double p) {
  if (sample.empty()) throw InsufficientData("percentile of an empty sample");
  std::sort(sample.begin(), sample.end());
  const double pos = std::clamp(p, 0.0, 1.0) * double(sample.size() - 1);
  const std::size_t lo = std::size_t(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sample.size() - 1);
  return sample[lo] + (pos - double(lo)) * (sample[hi] - sample[lo]);
}

Field extreme_threshold_per_cell(const Series& s, const Climatology& clim, int channel, double percentile) {
  const auto [start, years] = whole_years(s, clim.period);
  if (years < 2) throw InsufficientData("threshold needs at least two whole years");
  const Shape shape = s.fields.front().shape();
  require_same_shape(shape, clim.shape, "extreme_threshold");
  if (channel < 0 || channel >= shape.n_var) throw UnknownVariable("channel out of range");

  const std::size_t cells = shape.cells();
  std::vector<std::vector<double>> maxima(cells, std::vector<double>(std::size_t(years), 0.0));
  for (int y = 0; y < years; ++y) {
    for (int d = 0; d < clim.period; ++d) {
      const std::size_t t = start + std::size_t(y) * clim.period + d;
      const Field& f = s.fields[t];
      const Field& m = clim.at_day(s.first_time_index + std::int64_t(t));
      for (std::size_t c = 0; c < cells; ++c) {
        const std::size_t i = c * shape.n_var + channel;
        maxima[c][std::size_t(y)] = std::max(maxima[c][std::size_t(y)], std::abs(f[i] - m[i]));
      }
    }
  }
  Field out({shape.n_lat, shape.n_lon, 1});
  for (std::size_t c = 0; c < cells; ++c) out[c] = percentile_linear(maxima[c], percentile);
  return out;
}

double extreme_threshold(const Series& s, const Climatology& clim, int channel, double percentile) {
  const Field per_cell = extreme_threshold_per_cell(s, clim, channel, percentile);
  double sum = 0.0;
  for (double x : per_cell.data()) sum += x;
  return sum / double(per_cell.size());
}

std::vector<double> BackgroundError::std_normalized() const {
  std::vector<double> out(variance_normalized.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(variance_normalized[i]);
  return out;
}

BackgroundError estimate_background_error(const OneStepForecaster& forecaster, const std::vector<Field>& eval,
                                          const VariableStats& stats, int stride) {
  if (eval.size() < 3) throw InsufficientData("background error needs at least three eval states");
  stride = std::max(stride, 1);
  const Shape shape = eval.front().shape();
  const int nv = shape.n_var;
  stats.validate(nv);

  // Per cell and variable: running sum and sum of squares of residuals.
  std::vector<double> sum(shape.size(), 0.0), sq(shape.size(), 0.0);
  std::size_t count = 0;
  for (std::size_t t = 1; t + 1 < eval.size(); t += std::size_t(stride)) {
    const Field pred = forecaster(eval[t - 1], eval[t]);
    require_same_shape(pred.shape(), shape, "background forecast");
    for (std::size_t i = 0; i < shape.size(); ++i) {
      const double r = pred[i] - eval[t + 1][i];
      sum[i] += r;
      sq[i] += r * r;
    }
    ++count;
  }
  if (count < 2) throw InsufficientData("background error needs at least two forecast instants");

  BackgroundError be;
  be.variance_normalized.assign(std::size_t(nv), 0.0);
  be.variance_raw.assign(std::size_t(nv), 0.0);
  for (std::size_t i = 0; i < shape.size(); ++i) {
    const double mean = sum[i] / double(count);
    be.variance_normalized[i % nv] += std::max(sq[i] / double(count) - mean * mean, 0.0);
  }
  for (int v = 0; v < nv; ++v) {
    be.variance_normalized[std::size_t(v)] /= double(shape.cells());
    be.variance_raw[std::size_t(v)] = be.variance_normalized[std::size_t(v)] * stats.std[std::size_t(v)] *
                                      stats.std[std::size_t(v)];
    if (!(be.variance_normalized[std::size_t(v)] > 0.0))
      throw DegenerateVariance("background error variance is zero for variable " + std::to_string(v));
  }
  return be;
}

}  // namespace advobs
