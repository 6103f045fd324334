#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace advobs {

// Extent of a gridded field: latitude rows, longitude columns, channels.
struct Shape {
  int n_lat = 0;
  int n_lon = 0;
  int n_var = 0;

  std::size_t cells() const { return std::size_t(n_lat) * std::size_t(n_lon); }
  std::size_t size() const { return cells() * std::size_t(n_var); }
  friend bool operator==(const Shape&, const Shape&) = default;
};

// Dense row-major (lat, lon, channel) array of doubles.
class Field {
 public:
  Field() = default;
  explicit Field(Shape shape, double fill = 0.0)
      : shape_(shape), data_(shape.size(), fill) {}
  Field(Shape shape, std::vector<double> data);

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }

  std::size_t index(int lat, int lon, int var) const {
    return (std::size_t(lat) * std::size_t(shape_.n_lon) + std::size_t(lon)) *
               std::size_t(shape_.n_var) +
           std::size_t(var);
  }
  double& operator()(int lat, int lon, int var) { return data_[index(lat, lon, var)]; }
  double operator()(int lat, int lon, int var) const { return data_[index(lat, lon, var)]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  Field& operator+=(const Field& other);
  Field& operator-=(const Field& other);
  Field& operator*=(double s);
  // this += a * x
  Field& axpy(double a, const Field& x);

  bool all_finite() const;
  double max_abs() const;

  friend bool operator==(const Field&, const Field&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

Field operator+(Field a, const Field& b);
Field operator-(Field a, const Field& b);
Field operator*(double s, Field a);

// Throws ShapeMismatch when the shapes differ.
void require_same_shape(const Shape& a, const Shape& b, std::string_view what);

struct Variable {
  std::string name;
  std::string unit;
};

// Regular latitude/longitude grid with a named variable registry.
//
// Latitude rows are cell-centred: lat_of(r) = lat_min + (r + 1/2) * dlat.
// Longitude is periodic with nodes at lon_of(c) = lon_min + c * dlon, so the
// cell centre of column 0 sits on lon_min (the usual global-grid layout).
class GridSpec {
 public:
  GridSpec(int n_lat, int n_lon, std::vector<Variable> variables,
           double lat_min = -90.0, double lat_max = 90.0, double lon_min = -180.0);

  // 16 x 32 grid with u-wind, v-wind, temperature, precipitation, pressure.
  static GridSpec desk_default();

  int n_lat() const { return n_lat_; }
  int n_lon() const { return n_lon_; }
  int n_var() const { return int(variables_.size()); }
  Shape shape() const { return {n_lat_, n_lon_, n_var()}; }
  const std::vector<Variable>& variables() const { return variables_; }

  double lat_min() const { return lat_min_; }
  double lat_max() const { return lat_max_; }
  double lon_min() const { return lon_min_; }
  double dlat() const { return (lat_max_ - lat_min_) / n_lat_; }
  double dlon() const { return 360.0 / n_lon_; }

  double lat_of(int row) const { return lat_min_ + (row + 0.5) * dlat(); }
  double lon_of(int col) const { return lon_min_ + col * dlon(); }
  int wrap_lon(int col) const { return ((col % n_lon_) + n_lon_) % n_lon_; }

  // Throws UnknownVariable.
  int var_index(std::string_view name) const;
  bool has_variable(std::string_view name) const;

  friend bool operator==(const GridSpec& a, const GridSpec& b);

 private:
  int n_lat_;
  int n_lon_;
  std::vector<Variable> variables_;
  double lat_min_;
  double lat_max_;
  double lon_min_;
};

struct WeatherState {
  std::shared_ptr<const GridSpec> spec;
  Field values;
  std::int64_t time_index = 0;
};

// Per-variable mean / std of the raw data; maps raw <-> normalized units.
struct VariableStats {
  std::vector<double> mean;
  std::vector<double> std;

  // Population statistics over every cell of every state. Throws
  // DegenerateVariance when a variable is constant.
  static VariableStats from_fields(std::span<const Field> raw);
  void validate(int n_var) const;
};

Field normalize(const Field& raw, const VariableStats& stats);
Field denormalize(const Field& normalized, const VariableStats& stats);

// Closed degree interval. For longitude, lo > hi denotes an interval that
// wraps through the date line.
struct DegreeInterval {
  double lo;
  double hi;
};

class SpatialMask {
 public:
  SpatialMask() = default;
  SpatialMask(int n_lat, int n_lon) : n_lat_(n_lat), n_lon_(n_lon), cells_(std::size_t(n_lat) * n_lon, 0) {}

  int n_lat() const { return n_lat_; }
  int n_lon() const { return n_lon_; }
  bool operator()(int lat, int lon) const { return cells_[std::size_t(lat) * n_lon_ + lon] != 0; }
  void set(int lat, int lon, bool on = true) { cells_[std::size_t(lat) * n_lon_ + lon] = on ? 1 : 0; }
  std::size_t count() const;
  // Flat cell indices (lat * n_lon + lon) of selected cells, ascending.
  std::vector<std::size_t> selected() const;

  static SpatialMask single_cell(const GridSpec& spec, int lat, int lon);
  // Rectangle of rows [lat0, lat1] and columns lon0..lon0+width-1 (wrapping).
  static SpatialMask box(const GridSpec& spec, int lat0, int lat1, int lon0, int width);

  friend bool operator==(const SpatialMask&, const SpatialMask&) = default;

 private:
  int n_lat_ = 0;
  int n_lon_ = 0;
  std::vector<unsigned char> cells_;
};

// Cells whose centre lies in both closed intervals. Throws EmptyRegion.
SpatialMask region_mask(const GridSpec& spec, DegreeInterval lat, DegreeInterval lon);

// sqrt(u^2 + v^2) per cell; the input is in raw units. Result has one channel.
Field wind_speed(const Field& raw, int u_var, int v_var);
Field wind_speed(const GridSpec& spec, const Field& raw,
                 std::string_view u_name = "u-wind", std::string_view v_name = "v-wind");

// Copies channel `var` into a one-channel field.
Field extract_channel(const Field& f, int var);

}  // namespace advobs
