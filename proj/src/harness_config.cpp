#include <algorithm>
#include <cmath>
#include <set>

#include "advobs/errors.hpp"
#include "advobs/harness.hpp"

namespace advobs::harness {

namespace {

// Reads optional keys of one JSON object, checking types, and rejects keys
// nobody asked for.
class Section {
 public:
  Section(const json& root, std::string name) : name_(std::move(name)) {
    if (root.contains(name_)) {
      node_ = &root.at(name_);
      if (!node_->is_object()) throw ConfigError("field '" + name_ + "': expected an object");
    }
  }
  explicit Section(const json& root) : node_(&root) {
    if (!root.is_object()) throw ConfigError("config must be a JSON object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!node_ || !node_->contains(key)) return;
    const json& v = node_->at(key);
    const std::string field = path(key);
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError("field '" + field + "': expected true or false");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError("field '" + field + "': expected an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0)
          throw ConfigError("field '" + field + "': expected a non-negative integer");
      }
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError("field '" + field + "': expected a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError("field '" + field + "': expected a string");
    } else if constexpr (std::is_same_v<T, std::vector<std::string>>) {
      if (!v.is_array() || !std::all_of(v.begin(), v.end(), [](const json& e) { return e.is_string(); }))
        throw ConfigError("field '" + field + "': expected an array of strings");
    } else if constexpr (std::is_same_v<T, std::vector<double>>) {
      if (!v.is_array() || !std::all_of(v.begin(), v.end(), [](const json& e) { return e.is_number(); }))
        throw ConfigError("field '" + field + "': expected an array of numbers");
    }
    out = v.get<T>();
  }

  void get_optional(const char* key, std::optional<double>& out) {
    seen_.insert(key);
    if (!node_ || !node_->contains(key)) return;
    const json& v = node_->at(key);
    if (v.is_null()) {
      out.reset();
      return;
    }
    if (!v.is_number()) throw ConfigError("field '" + path(key) + "': expected a number or null");
    out = v.get<double>();
  }

  void skip(const char* key) { seen_.insert(key); }

  void finish() const {
    if (!node_) return;
    for (const auto& [k, v] : node_->items())
      if (!seen_.count(k)) throw ConfigError("field '" + path(k) + "': unknown key");
  }

 private:
  std::string path(const std::string& key) const { return name_.empty() ? key : name_ + "." + key; }

  std::string name_;
  const json* node_ = nullptr;
  std::set<std::string> seen_;
};

std::vector<double> log_budgets(double cap, double lo, int count) {
  std::vector<double> out;
  for (int k = 0; k < count; ++k) out.push_back(lo * std::pow(cap / lo, double(k) / (count - 1)));
  out.back() = cap;
  return out;
}

}  // namespace

ExperimentConfig::ExperimentConfig() : budgets(log_budgets(0.0025, 0.0002, 5)) {}

const std::vector<std::string>& known_scenarios() {
  static const std::vector<std::string> s{"fabricate-wind", "fabricate-temp", "fabricate-precip", "conceal-region",
                                          "reroute-target"};
  return s;
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  ExperimentConfig c;
  Section top(j);
  top.get("seed", c.seed);
  top.get("threads", c.threads);

  Section paths(j, "paths");
  paths.get("data", c.data_dir);
  paths.get("model", c.model_dir);
  paths.get("out", c.out_dir);
  paths.finish();
  top.skip("paths");

  Section grid(j, "grid");
  grid.get("n_lat", c.n_lat);
  grid.get("n_lon", c.n_lon);
  grid.finish();
  top.skip("grid");

  Section synth(j, "synth");
  auto& s = c.synth;
  synth.get("forcing", s.forcing);
  synth.get("seasonal_amplitude", s.seasonal_amplitude);
  synth.get("lat_coupling", s.lat_coupling);
  synth.get("var_coupling", s.var_coupling);
  synth.get("period", s.period);
  synth.get("step_time", s.step_time);
  synth.get("substep", s.substep);
  synth.get("noise", s.noise);
  synth.get("init_amplitude", s.init_amplitude);
  synth.get("spinup_steps", s.spinup_steps);
  synth.get("n_fast", s.n_fast);
  synth.get("fast_h", s.fast_h);
  synth.get("fast_c", s.fast_c);
  synth.get("fast_b", s.fast_b);
  synth.get("blowup_cap", s.blowup_cap);
  synth.finish();
  top.skip("synth");

  Section split(j, "split");
  split.get("train_years", c.train_years);
  split.get("eval_years", c.eval_years);
  split.finish();
  top.skip("split");

  Section train(j, "train");
  train.get("hidden", c.hidden);
  train.get("learning_rate", c.train.learning_rate);
  train.get("momentum", c.train.momentum);
  train.get("batch_size", c.train.batch_size);
  train.get("iterations", c.train.iterations);
  train.get("sigma_data", c.train.sigma_data);
  train.get("seed", c.train.seed);
  train.get("clip_norm", c.train.clip_norm);
  train.get("sigma_out_fraction", c.train.sigma_out_fraction);
  train.finish();
  top.skip("train");

  Section cal(j, "calibration");
  cal.get("background_stride", c.background_stride);
  cal.get("skill_stride", c.skill_stride);
  cal.get("percentile", c.percentile);
  cal.finish();
  top.skip("calibration");

  Section fc(j, "forecast");
  fc.get("ensemble", c.ensemble);
  fc.get("n_full", c.n_full);
  fc.get("deviation_mode", c.deviation_mode);
  fc.finish();
  top.skip("forecast");

  Section atk(j, "attack");
  atk.get("lead_steps", c.lead_steps);
  atk.get("approx_steps", c.approx_steps);
  atk.get("iterations", c.iterations);
  atk.get("beta", c.beta);
  atk.get("tau", c.tau);
  atk.get("normalize_gradient", c.normalize_gradient);
  atk.finish();
  top.skip("attack");

  Section ex(j, "experiment");
  ex.get("scenarios", c.scenarios);
  ex.get("budget_cap", c.budget_cap);
  c.budgets = log_budgets(c.budget_cap, 0.0002 * c.budget_cap / 0.0025, 5);
  ex.get("budgets", c.budgets);
  ex.get("trials", c.trials);
  ex.get("variants", c.variants);
  ex.get("sweep_variants", c.sweep_variants);
  ex.get("detect_variants", c.detect_variants);
  ex.get("region_rows", c.region_rows);
  ex.get("region_cols", c.region_cols);
  ex.finish();
  top.skip("experiment");

  Section con(j, "conceal");
  con.get("rows", c.conceal_rows);
  con.get("cols", c.conceal_cols);
  con.get_optional("trigger", c.conceal_trigger);
  con.get("reroute_shift", c.reroute_shift);
  con.finish();
  top.skip("conceal");

  Section det(j, "detect");
  det.get("alpha", c.alpha);
  det.get("mc_trials", c.mc_trials);
  det.finish();
  top.skip("detect");

  top.finish();
  c.validate();
  return c;
}

json ExperimentConfig::to_json() const {
  const auto& s = synth;
  return {
      {"seed", seed},
      {"threads", threads},
      {"paths", {{"data", data_dir}, {"model", model_dir}, {"out", out_dir}}},
      {"grid", {{"n_lat", n_lat}, {"n_lon", n_lon}}},
      {"synth",
       {{"forcing", s.forcing},
        {"seasonal_amplitude", s.seasonal_amplitude},
        {"lat_coupling", s.lat_coupling},
        {"var_coupling", s.var_coupling},
        {"period", s.period},
        {"step_time", s.step_time},
        {"substep", s.substep},
        {"noise", s.noise},
        {"init_amplitude", s.init_amplitude},
        {"spinup_steps", s.spinup_steps},
        {"n_fast", s.n_fast},
        {"fast_h", s.fast_h},
        {"fast_c", s.fast_c},
        {"fast_b", s.fast_b},
        {"blowup_cap", s.blowup_cap}}},
      {"split", {{"train_years", train_years}, {"eval_years", eval_years}}},
      {"train",
       {{"hidden", hidden},
        {"learning_rate", train.learning_rate},
        {"momentum", train.momentum},
        {"batch_size", train.batch_size},
        {"iterations", train.iterations},
        {"sigma_data", train.sigma_data},
        {"seed", train.seed},
        {"clip_norm", train.clip_norm},
        {"sigma_out_fraction", train.sigma_out_fraction}}},
      {"calibration",
       {{"background_stride", background_stride}, {"skill_stride", skill_stride}, {"percentile", percentile}}},
      {"forecast", {{"ensemble", ensemble}, {"n_full", n_full}, {"deviation_mode", deviation_mode}}},
      {"attack",
       {{"lead_steps", lead_steps},
        {"approx_steps", approx_steps},
        {"iterations", iterations},
        {"beta", beta},
        {"tau", tau},
        {"normalize_gradient", normalize_gradient}}},
      {"experiment",
       {{"scenarios", scenarios},
        {"budget_cap", budget_cap},
        {"budgets", budgets},
        {"trials", trials},
        {"variants", variants},
        {"sweep_variants", sweep_variants},
        {"detect_variants", detect_variants},
        {"region_rows", region_rows},
        {"region_cols", region_cols}}},
      {"conceal",
       {{"rows", conceal_rows},
        {"cols", conceal_cols},
        {"trigger", conceal_trigger ? json(*conceal_trigger) : json(nullptr)},
        {"reroute_shift", reroute_shift}}},
      {"detect", {{"alpha", alpha}, {"mc_trials", mc_trials}}},
  };
}

void ExperimentConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& msg) { throw ConfigError("field '" + field + "': " + msg); };
  if (n_lat < 4) fail("grid.n_lat", "must be >= 4");
  if (n_lon < 4) fail("grid.n_lon", "must be >= 4");
  try {
    synth.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("section 'synth': ") + e.what());
  }
  if (train_years < 2) fail("split.train_years", "must be >= 2 (climatology needs two whole years)");
  if (eval_years < 1) fail("split.eval_years", "must be >= 1");
  if (hidden < 1) fail("train.hidden", "must be >= 1");
  try {
    train.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("section 'train': ") + e.what());
  }
  if (background_stride < 1) fail("calibration.background_stride", "must be >= 1");
  if (skill_stride < 1) fail("calibration.skill_stride", "must be >= 1");
  if (!(percentile > 0.0 && percentile <= 1.0)) fail("calibration.percentile", "must lie in (0, 1]");
  if (ensemble < 1) fail("forecast.ensemble", "must be >= 1");
  if (n_full < 1) fail("forecast.n_full", "must be >= 1");
  if (deviation_mode != "median-field" && deviation_mode != "member-median")
    fail("forecast.deviation_mode", "must be 'median-field' or 'member-median'");
  if (lead_steps < 1) fail("attack.lead_steps", "must be >= 1");
  if (approx_steps < 1 || approx_steps > n_full) fail("attack.approx_steps", "must lie in [1, forecast.n_full]");
  if (iterations < 1) fail("attack.iterations", "must be >= 1");
  if (!(beta >= 0.0 && beta < 1.0)) fail("attack.beta", "must lie in [0, 1)");
  if (!(tau > 0.0)) fail("attack.tau", "must be > 0");
  if (scenarios.empty()) fail("experiment.scenarios", "must not be empty");
  for (const auto& s : scenarios)
    if (std::find(known_scenarios().begin(), known_scenarios().end(), s) == known_scenarios().end())
      fail("experiment.scenarios", "unknown scenario '" + s + "'");
  if (budgets.empty()) fail("experiment.budgets", "must not be empty");
  for (std::size_t k = 0; k < budgets.size(); ++k) {
    if (!(budgets[k] > 0.0)) fail("experiment.budgets", "entries must be > 0");
    if (k > 0 && !(budgets[k] > budgets[k - 1])) fail("experiment.budgets", "must be strictly increasing");
  }
  if (!(budget_cap > 0.0)) fail("experiment.budget_cap", "must be > 0");
  if (trials < 1) fail("experiment.trials", "must be >= 1");
  for (const auto* list : {&variants, &sweep_variants, &detect_variants})
    for (const auto& v : *list) {
      try {
        parse_variant(v);
      } catch (const UnknownVariant&) {
        fail("experiment.variants", "unknown variant '" + v + "'");
      }
    }
  if (region_rows < 1 || region_rows > n_lat - 4) fail("experiment.region_rows", "must lie in [1, n_lat - 4]");
  if (region_cols < 1 || region_cols > n_lon) fail("experiment.region_cols", "must lie in [1, n_lon]");
  if (conceal_rows < 1 || conceal_rows > n_lat - 2) fail("conceal.rows", "must lie in [1, n_lat - 2]");
  if (conceal_cols < 1 || conceal_cols > n_lon) fail("conceal.cols", "must lie in [1, n_lon]");
  if (!(alpha > 0.0 && alpha < 1.0)) fail("detect.alpha", "must lie in (0, 1)");
  if (mc_trials < 0) fail("detect.mc_trials", "must be >= 0");
  if (threads < 1) fail("threads", "must be >= 1");
}

ExperimentConfig load_config(const fs::path& path) {
  json j;
  try {
    j = json::parse(io::read_file(path));
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  } catch (const IoError& e) {
    throw ConfigError(e.what());
  }
  return ExperimentConfig::from_json(j);
}

}  // namespace advobs::harness
