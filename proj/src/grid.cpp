#include "advobs/grid.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "advobs/errors.hpp"

namespace advobs {

Field::Field(Shape shape, std::vector<double> data) : shape_(shape), data_(std::move(data)) {
  if (data_.size() != shape_.size())
    throw ShapeMismatch("field data has " + std::to_string(data_.size()) + " values, shape needs " +
                        std::to_string(shape_.size()));
}

Field& Field::operator+=(const Field& other) {
  require_same_shape(shape_, other.shape_, "Field::operator+=");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Field& Field::operator-=(const Field& other) {
  require_same_shape(shape_, other.shape_, "Field::operator-=");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
  return *this;
}

Field& Field::operator*=(double s) {
  for (auto& x : data_) x *= s;
  return *this;
}

Field& Field::axpy(double a, const Field& x) {
  require_same_shape(shape_, x.shape_, "Field::axpy");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += a * x.data_[i];
  return *this;
}

bool Field::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

double Field::max_abs() const {
  double m = 0.0;
  for (double x : data_) m = std::max(m, std::abs(x));
  return m;
}

Field operator+(Field a, const Field& b) { return a += b; }
Field operator-(Field a, const Field& b) { return a -= b; }
Field operator*(double s, Field a) { return a *= s; }

void require_same_shape(const Shape& a, const Shape& b, std::string_view what) {
  if (!(a == b)) {
    auto str = [](const Shape& s) {
      return std::to_string(s.n_lat) + "x" + std::to_string(s.n_lon) + "x" + std::to_string(s.n_var);
    };
    throw ShapeMismatch(std::string(what) + ": " + str(a) + " vs " + str(b));
  }
}

GridSpec::GridSpec(int n_lat, int n_lon, std::vector<Variable> variables, double lat_min,
                   double lat_max, double lon_min)
    : n_lat_(n_lat), n_lon_(n_lon), variables_(std::move(variables)), lat_min_(lat_min),
      lat_max_(lat_max), lon_min_(lon_min) {
  if (n_lat < 4 || n_lon < 4) throw ShapeMismatch("grid needs at least 4 rows and 4 columns");
  if (variables_.empty()) throw UnknownVariable("variable list is empty");
  std::set<std::string> names;
  for (const auto& v : variables_)
    if (!names.insert(v.name).second) throw UnknownVariable("duplicate variable name '" + v.name + "'");
  if (!(lat_max > lat_min)) throw ShapeMismatch("lat_max must exceed lat_min");
}

GridSpec GridSpec::desk_default() {
  return GridSpec(16, 32,
                  {{"u-wind", "m/s"},
                   {"v-wind", "m/s"},
                   {"temperature", "K"},
                   {"precipitation", "mm"},
                   {"pressure", "hPa"}});
}

int GridSpec::var_index(std::string_view name) const {
  for (std::size_t i = 0; i < variables_.size(); ++i)
    if (variables_[i].name == name) return int(i);
  throw UnknownVariable("no variable named '" + std::string(name) + "'");
}

bool GridSpec::has_variable(std::string_view name) const {
  return std::any_of(variables_.begin(), variables_.end(),
                     [&](const Variable& v) { return v.name == name; });
}

bool operator==(const GridSpec& a, const GridSpec& b) {
  if (a.n_lat_ != b.n_lat_ || a.n_lon_ != b.n_lon_ || a.lat_min_ != b.lat_min_ ||
      a.lat_max_ != b.lat_max_ || a.lon_min_ != b.lon_min_ || a.variables_.size() != b.variables_.size())
    return false;
  for (std::size_t i = 0; i < a.variables_.size(); ++i)
    if (a.variables_[i].name != b.variables_[i].name || a.variables_[i].unit != b.variables_[i].unit)
      return false;
  return true;
}

VariableStats VariableStats::from_fields(std::span<const Field> raw) {
  if (raw.empty()) throw InsufficientData("no fields to compute statistics from");
  const int nv = raw.front().shape().n_var;
  std::vector<double> sum(nv, 0.0), sq(nv, 0.0);
  std::size_t count = 0;
  for (const auto& f : raw) {
    require_same_shape(f.shape(), raw.front().shape(), "VariableStats::from_fields");
    const auto& d = f.data();
    for (std::size_t i = 0; i < d.size(); ++i) sum[i % nv] += d[i];
    count += f.shape().cells();
  }
  VariableStats s;
  s.mean.resize(nv);
  s.std.resize(nv);
  for (int v = 0; v < nv; ++v) s.mean[v] = sum[v] / double(count);
  for (const auto& f : raw) {
    const auto& d = f.data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double c = d[i] - s.mean[i % nv];
      sq[i % nv] += c * c;
    }
  }
  for (int v = 0; v < nv; ++v) {
    s.std[v] = std::sqrt(sq[v] / double(count));
    if (!(s.std[v] > 0.0)) throw DegenerateVariance("variable " + std::to_string(v) + " is constant");
  }
  return s;
}

void VariableStats::validate(int n_var) const {
  if (int(mean.size()) != n_var || int(std.size()) != n_var)
    throw ShapeMismatch("stats describe " + std::to_string(mean.size()) + " variables, field has " +
                        std::to_string(n_var));
  for (double s : std)
    if (!(s > 0.0) || !std::isfinite(s)) throw DegenerateVariance("stats std must be positive");
}

Field normalize(const Field& raw, const VariableStats& stats) {
  const int nv = raw.shape().n_var;
  stats.validate(nv);
  Field out(raw.shape());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const int v = int(i % nv);
    out[i] = (raw[i] - stats.mean[v]) / stats.std[v];
  }
  return out;
}

Field denormalize(const Field& normalized, const VariableStats& stats) {
  const int nv = normalized.shape().n_var;
  stats.validate(nv);
  Field out(normalized.shape());
  for (std::size_t i = 0; i < normalized.size(); ++i) {
    const int v = int(i % nv);
    out[i] = stats.mean[v] + stats.std[v] * normalized[i];
  }
  return out;
}

std::size_t SpatialMask::count() const {
  return std::size_t(std::count(cells_.begin(), cells_.end(), 1));
}

std::vector<std::size_t> SpatialMask::selected() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < cells_.size(); ++i)
    if (cells_[i]) out.push_back(i);
  return out;
}

SpatialMask SpatialMask::single_cell(const GridSpec& spec, int lat, int lon) {
  if (lat < 0 || lat >= spec.n_lat()) throw EmptyRegion("row out of range");
  SpatialMask m(spec.n_lat(), spec.n_lon());
  m.set(lat, spec.wrap_lon(lon));
  return m;
}

SpatialMask SpatialMask::box(const GridSpec& spec, int lat0, int lat1, int lon0, int width) {
  SpatialMask m(spec.n_lat(), spec.n_lon());
  lat0 = std::max(lat0, 0);
  lat1 = std::min(lat1, spec.n_lat() - 1);
  for (int r = lat0; r <= lat1; ++r)
    for (int k = 0; k < std::min(width, spec.n_lon()); ++k) m.set(r, spec.wrap_lon(lon0 + k));
  if (m.count() == 0) throw EmptyRegion("box selects no cells");
  return m;
}

namespace {

// Inclusive row range [first, last] with lat_of(row) inside [lo, hi]; empty if first > last.
std::pair<int, int> row_range(const GridSpec& spec, double lo, double hi) {
  const double d = spec.dlat();
  const int n = spec.n_lat();
  auto clamp_index = [](double x, int a, int b) { return int(std::clamp(x, double(a), double(b))); };
  int first = clamp_index(std::ceil((lo - spec.lat_min()) / d - 0.5), 0, n);
  int last = clamp_index(std::floor((hi - spec.lat_min()) / d - 0.5), -1, n - 1);
  // The division can round across a boundary; settle on the exact comparison.
  while (first > 0 && spec.lat_of(first - 1) >= lo) --first;
  while (first < n && spec.lat_of(first) < lo) ++first;
  while (last + 1 < n && spec.lat_of(last + 1) <= hi) ++last;
  while (last >= 0 && spec.lat_of(last) > hi) --last;
  return {first, last};
}

}  // namespace

SpatialMask region_mask(const GridSpec& spec, DegreeInterval lat, DegreeInterval lon) {
  SpatialMask mask(spec.n_lat(), spec.n_lon());
  const auto [r0, r1] = row_range(spec, lat.lo, lat.hi);

  std::vector<int> cols;
  if (lon.lo <= lon.hi && lon.hi - lon.lo >= 360.0) {
    for (int c = 0; c < spec.n_lon(); ++c) cols.push_back(c);
  } else {
    // Arc from `start` eastward over `width` degrees, with start moved into
    // [lon_min, lon_min + 360).
    const double width = lon.lo <= lon.hi ? lon.hi - lon.lo : lon.hi - lon.lo + 360.0;
    double start = lon.lo;
    if (start < spec.lon_min() || start >= spec.lon_min() + 360.0) {
      start = std::fmod(start - spec.lon_min(), 360.0);
      if (start < 0) start += 360.0;
      start += spec.lon_min();
    }
    const double end = start + width;
    const double d = spec.dlon();
    auto at = [&](long k) { return spec.lon_min() + double(k) * d; };
    long k0 = long(std::ceil((start - spec.lon_min()) / d));
    long k1 = long(std::floor((end - spec.lon_min()) / d));
    while (at(k0 - 1) >= start) --k0;
    while (at(k0) < start) ++k0;
    while (at(k1 + 1) <= end) ++k1;
    while (k1 >= k0 && at(k1) > end) --k1;
    for (long k = k0; k <= k1 && k - k0 < spec.n_lon(); ++k) cols.push_back(spec.wrap_lon(int(k % spec.n_lon())));
  }

  for (int r = r0; r <= r1; ++r)
    for (int c : cols) mask.set(r, c);
  if (mask.count() == 0) throw EmptyRegion("interval pair selects no cell centre");
  return mask;
}

Field wind_speed(const Field& raw, int u_var, int v_var) {
  const Shape s = raw.shape();
  if (u_var < 0 || u_var >= s.n_var || v_var < 0 || v_var >= s.n_var)
    throw UnknownVariable("wind component index out of range");
  Field out({s.n_lat, s.n_lon, 1});
  for (int r = 0; r < s.n_lat; ++r)
    for (int c = 0; c < s.n_lon; ++c) out(r, c, 0) = std::hypot(raw(r, c, u_var), raw(r, c, v_var));
  return out;
}

Field wind_speed(const GridSpec& spec, const Field& raw, std::string_view u_name, std::string_view v_name) {
  require_same_shape(raw.shape(), spec.shape(), "wind_speed");
  return wind_speed(raw, spec.var_index(u_name), spec.var_index(v_name));
}

Field extract_channel(const Field& f, int var) {
  const Shape s = f.shape();
  if (var < 0 || var >= s.n_var) throw UnknownVariable("channel index out of range");
  Field out({s.n_lat, s.n_lon, 1});
  for (std::size_t i = 0; i < s.cells(); ++i) out[i] = f[i * s.n_var + var];
  return out;
}

}  // namespace advobs
