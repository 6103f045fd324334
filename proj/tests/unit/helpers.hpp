#pragma once

#include <cmath>
#include <memory>
#include <random>

#include "advobs/grid.hpp"
#include "advobs/random.hpp"

namespace advobs::test {

inline Field random_field(Shape s, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Field f(s);
  for (auto& x : f.data()) x = n(rng);
  return f;
}

inline double dot(const Field& a, const Field& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8}); }

inline std::shared_ptr<const GridSpec> small_spec(int n_lat = 6, int n_lon = 8) {
  return std::make_shared<const GridSpec>(n_lat, n_lon, GridSpec::desk_default().variables());
}

}  // namespace advobs::test
