#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "advobs/climatology.hpp"
#include "advobs/grid.hpp"
#include "advobs/model.hpp"
#include "advobs/synth.hpp"

namespace advobs::io {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

// Writes to a sibling temporary file and renames it into place.
void write_atomic(const fs::path& path, const std::string& bytes);
std::string read_file(const fs::path& path);

void write_json(const fs::path& path, const json& j);
json read_json(const fs::path& path);

json to_json(const GridSpec& spec);
GridSpec grid_from_json(const json& j);
json to_json(const VariableStats& stats);
VariableStats stats_from_json(const json& j);
json to_json(const Shape& shape);
Shape shape_from_json(const json& j);

// Array file `<stem>.bin` (little-endian float64, row-major lat, lon, var,
// fields back to back) and sidecar `<stem>.json` holding the shape, the
// field count and `meta`.
void save_fields(const fs::path& stem, const std::vector<Field>& fields, json meta = json::object());
std::vector<Field> load_fields(const fs::path& stem, json* meta = nullptr);

// One array + sidecar per whole year plus manifest.json. Sidecars record the
// grid, the first time index and the stats when given.
void save_trajectory(const fs::path& dir, const Trajectory& traj, int period, const VariableStats* stats = nullptr);
Trajectory load_trajectory(const fs::path& dir);

// `<stem>.bin` with the flat parameters and `<stem>.json` with the layer
// shapes, hidden width, variable count, schedule and training seed.
void save_params(const fs::path& stem, const DenoiserParams& params, std::uint64_t train_seed);
DenoiserParams load_params(const fs::path& stem);

void save_climatology(const fs::path& stem, const Climatology& clim);
Climatology load_climatology(const fs::path& stem);

std::string format_double(double x);

}  // namespace advobs::io
