#include "advobs/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "advobs/errors.hpp"

namespace advobs::io {

void write_atomic(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), std::streamsize(bytes.size()));
    if (!out) throw IoError("short write to " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + ": " + ec.message());
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_json(const fs::path& path, const json& j) { write_atomic(path, j.dump(2) + "\n"); }

json read_json(const fs::path& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

json to_json(const GridSpec& spec) {
  json vars = json::array();
  for (const auto& v : spec.variables()) vars.push_back({{"name", v.name}, {"unit", v.unit}});
  return {{"n_lat", spec.n_lat()},     {"n_lon", spec.n_lon()},     {"lat_min", spec.lat_min()},
          {"lat_max", spec.lat_max()}, {"lon_min", spec.lon_min()}, {"variables", vars}};
}

GridSpec grid_from_json(const json& j) {
  try {
    std::vector<Variable> vars;
    for (const auto& v : j.at("variables")) vars.push_back({v.at("name"), v.value("unit", "")});
    return GridSpec(j.at("n_lat"), j.at("n_lon"), std::move(vars), j.value("lat_min", -90.0),
                    j.value("lat_max", 90.0), j.value("lon_min", -180.0));
  } catch (const json::exception& e) {
    throw IoError(std::string("bad grid description: ") + e.what());
  }
}

json to_json(const VariableStats& stats) { return {{"mean", stats.mean}, {"std", stats.std}}; }

VariableStats stats_from_json(const json& j) {
  try {
    return {j.at("mean").get<std::vector<double>>(), j.at("std").get<std::vector<double>>()};
  } catch (const json::exception& e) {
    throw IoError(std::string("bad stats: ") + e.what());
  }
}

json to_json(const Shape& s) { return {{"n_lat", s.n_lat}, {"n_lon", s.n_lon}, {"n_var", s.n_var}}; }

Shape shape_from_json(const json& j) { return {j.at("n_lat"), j.at("n_lon"), j.at("n_var")}; }

namespace {

fs::path with_ext(fs::path stem, const char* ext) {
  stem += ext;
  return stem;
}

std::string encode(const std::vector<double>& values) {
  std::string out(values.size() * 8, '\0');
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto bits = std::bit_cast<std::uint64_t>(values[i]);
    for (int b = 0; b < 8; ++b) out[i * 8 + std::size_t(b)] = char((bits >> (8 * b)) & 0xFF);
  }
  return out;
}

std::vector<double> decode(const std::string& bytes) {
  if (bytes.size() % 8 != 0) throw IoError("array file length is not a multiple of 8");
  std::vector<double> out(bytes.size() / 8);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= std::uint64_t(static_cast<unsigned char>(bytes[i * 8 + std::size_t(b)])) << (8 * b);
    out[i] = std::bit_cast<double>(bits);
  }
  return out;
}

}  // namespace

void save_fields(const fs::path& stem, const std::vector<Field>& fields, json meta) {
  if (fields.empty()) throw InsufficientData("nothing to save at " + stem.string());
  const Shape shape = fields.front().shape();
  std::vector<double> flat;
  flat.reserve(shape.size() * fields.size());
  for (const auto& f : fields) {
    require_same_shape(f.shape(), shape, "save_fields");
    flat.insert(flat.end(), f.data().begin(), f.data().end());
  }
  meta["shape"] = to_json(shape);
  meta["n_fields"] = fields.size();
  meta["dtype"] = "float64-le";
  write_atomic(with_ext(stem, ".bin"), encode(flat));
  write_json(with_ext(stem, ".json"), meta);
}

std::vector<Field> load_fields(const fs::path& stem, json* meta) {
  const json side = read_json(with_ext(stem, ".json"));
  const Shape shape = shape_from_json(side.at("shape"));
  const std::size_t n = side.at("n_fields");
  const auto flat = decode(read_file(with_ext(stem, ".bin")));
  if (flat.size() != n * shape.size()) throw IoError("array size does not match sidecar for " + stem.string());
  std::vector<Field> out;
  out.reserve(n);
  for (std::size_t k = 0; k < n; ++k)
    out.emplace_back(shape, std::vector<double>(flat.begin() + std::ptrdiff_t(k * shape.size()),
                                                flat.begin() + std::ptrdiff_t((k + 1) * shape.size())));
  if (meta) *meta = side;
  return out;
}

void save_trajectory(const fs::path& dir, const Trajectory& traj, int period, const VariableStats* stats) {
  traj.validate();
  const auto years = split_years(traj, period);
  if (years.empty()) throw InsufficientData("trajectory holds no whole year");
  json files = json::array();
  for (std::size_t y = 0; y < years.size(); ++y) {
    char name[32];
    std::snprintf(name, sizeof name, "year_%03zu", y);
    json meta = {{"grid", to_json(*traj.spec)}, {"time_index", years[y].states.front().time_index}};
    if (stats) meta["stats"] = to_json(*stats);
    save_fields(dir / name, years[y].fields(), meta);
    files.push_back(name);
  }
  json manifest = {{"grid", to_json(*traj.spec)},
                   {"seed", traj.seed},
                   {"period", period},
                   {"n_years", years.size()},
                   {"first_time_index", years.front().states.front().time_index},
                   {"files", files}};
  if (stats) manifest["stats"] = to_json(*stats);
  write_json(dir / "manifest.json", manifest);
}

Trajectory load_trajectory(const fs::path& dir) {
  const json manifest = read_json(dir / "manifest.json");
  Trajectory traj;
  traj.spec = std::make_shared<const GridSpec>(grid_from_json(manifest.at("grid")));
  traj.seed = manifest.at("seed");
  for (const auto& name : manifest.at("files")) {
    json meta;
    auto fields = load_fields(dir / name.get<std::string>(), &meta);
    std::int64_t t = meta.at("time_index");
    for (auto& f : fields) {
      require_same_shape(f.shape(), traj.spec->shape(), "trajectory file");
      traj.states.push_back({traj.spec, std::move(f), t++});
    }
  }
  traj.validate();
  return traj;
}

void save_params(const fs::path& stem, const DenoiserParams& params, std::uint64_t train_seed) {
  params.validate();
  auto shape_of = [](const auto& m) { return json::array({m.rows(), m.cols()}); };
  json header = {
      {"n_var", params.n_var},
      {"hidden", params.hidden},
      {"n_features", params.n_features()},
      {"sigma_data", params.sigma_data},
      {"schedule",
       {{"sigma_min", params.schedule.sigma_min},
        {"sigma_max", params.schedule.sigma_max},
        {"n_full", params.schedule.n_full}}},
      {"layers",
       {{"w1", shape_of(params.w1)},
        {"b1", params.b1.size()},
        {"w2", shape_of(params.w2)},
        {"b2", params.b2.size()},
        {"w3", shape_of(params.w3)},
        {"b3", params.b3.size()}}},
      {"n_parameters", params.n_parameters()},
      {"train_seed", train_seed},
      {"dtype", "float64-le"},
  };
  write_atomic(with_ext(stem, ".bin"), encode(params.flatten()));
  write_json(with_ext(stem, ".json"), header);
}

DenoiserParams load_params(const fs::path& stem) {
  const json h = read_json(with_ext(stem, ".json"));
  NoiseSchedule schedule;
  schedule.sigma_min = h.at("schedule").at("sigma_min");
  schedule.sigma_max = h.at("schedule").at("sigma_max");
  schedule.n_full = h.at("schedule").at("n_full");
  DenoiserParams p = DenoiserParams::zeros(h.at("n_var"), h.at("hidden"), schedule, h.at("sigma_data"));
  const auto flat = decode(read_file(with_ext(stem, ".bin")));
  if (flat.size() != p.n_parameters()) throw IoError("parameter file size does not match header");
  p.unflatten(flat);
  p.validate();
  return p;
}

void save_climatology(const fs::path& stem, const Climatology& clim) {
  save_fields(stem, clim.mean_by_day, {{"period", clim.period}, {"n_years", clim.n_years}});
}

Climatology load_climatology(const fs::path& stem) {
  json meta;
  Climatology c;
  c.mean_by_day = load_fields(stem, &meta);
  c.period = meta.at("period");
  c.n_years = meta.at("n_years");
  c.shape = c.mean_by_day.front().shape();
  if (c.mean_by_day.size() != std::size_t(c.period)) throw IoError("climatology day count does not match period");
  return c;
}

std::string format_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", x);
  return buf;
}

}  // namespace advobs::io
