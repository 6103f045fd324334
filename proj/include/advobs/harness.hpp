#pragma once

#include <cstdint>
#include <filesystem>
#include <array>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "advobs/attack.hpp"
#include "advobs/climatology.hpp"
#include "advobs/detect.hpp"
#include "advobs/io.hpp"
#include "advobs/model.hpp"
#include "advobs/synth.hpp"

namespace advobs::harness {

using io::json;
namespace fs = std::filesystem;

// Resolved experiment configuration. Every field has a default; from_json
// reads a partial document and rejects unknown keys.
struct ExperimentConfig {
  std::uint64_t seed = 1;

  // Directories; relative paths resolve against the working directory.
  std::string data_dir = "data";
  std::string model_dir = "model";
  std::string out_dir = "out";

  int n_lat = 16;
  int n_lon = 32;
  SynthParams synth;
  int train_years = 8;
  int eval_years = 2;

  TrainConfig train;
  int hidden = 64;
  int background_stride = 4;
  int skill_stride = 9;
  double percentile = 0.99;

  int lead_steps = 4;     // j
  int approx_steps = 2;   // n
  int iterations = 50;    // N
  double beta = 0.9;
  double tau = 0.05;
  bool normalize_gradient = true;
  int ensemble = 5;       // E
  int n_full = 20;
  std::string deviation_mode = "median-field";

  std::vector<std::string> scenarios{"fabricate-wind", "fabricate-temp", "fabricate-precip", "conceal-region",
                                     "reroute-target"};
  std::vector<double> budgets;  // defaults to 5 log-spaced points up to budget_cap
  double budget_cap = 0.0025;
  int trials = 20;
  // Ablation variants (run at budget_cap), sweep variants and detect
  // variants (run at every budget).
  std::vector<std::string> variants{"full", "no-steps", "no-approx", "no-both"};
  std::vector<std::string> sweep_variants{"full"};
  std::vector<std::string> detect_variants{"full", "no-both"};
  int region_rows = 2;
  int region_cols = 2;

  int conceal_rows = 3;
  int conceal_cols = 3;
  std::optional<double> conceal_trigger;  // raw wind speed; default from data
  int reroute_shift = 3;                  // columns between regions A and B

  double alpha = 0.05;
  int mc_trials = 0;
  int threads = 1;

  ExperimentConfig();
  static ExperimentConfig from_json(const json& j);
  json to_json() const;
  // Throws ConfigError naming the offending field.
  void validate() const;
};

ExperimentConfig load_config(const fs::path& path);

const std::vector<std::string>& known_scenarios();

// Everything the attack commands read from disk, loaded once.
struct Workspace {
  ExperimentConfig config;
  std::shared_ptr<const GridSpec> spec;
  std::vector<Field> eval_raw;
  std::vector<Field> eval;  // normalized
  std::int64_t eval_first_time = 0;
  DenoiserParams params;
  VariableStats stats;
  Climatology climatology;        // raw units, all channels
  Climatology wind_climatology;   // raw wind speed
  json thresholds;                // scenario -> raw threshold
  std::vector<double> background_std;  // normalized units, per variable
  std::string fingerprint;        // hash of model + calibration + attack settings
};

Workspace load_workspace(const ExperimentConfig& config);

// One attack run and its evaluation.
struct TrialRecord {
  std::string scenario;
  int trial = 0;
  std::string variant;
  double budget = 0.0;
  std::int64_t time_index = 0;
  int region_row = 0;
  int region_col = 0;
  std::uint64_t attack_seed = 0;
  std::vector<std::uint64_t> member_seeds;
  bool qualifying = true;  // concealment trigger met
  double clean_loss = 0.0;
  double attacked_loss = 0.0;
  double deviation = 0.0;  // raw units
  std::vector<double> iteration_loss;
  std::vector<double> mean_t, std_t, mean_tm1, std_tm1;
  double effective_epsilon = 0.0;
  double power = 0.0;
  double wall_seconds = 0.0;
  // Lowest-pressure cell per lead step (reroute-target only).
  std::vector<std::array<int, 2>> clean_track, attacked_track;

  json to_json() const;
  static TrialRecord from_json(const json& j);
  std::string key() const;
};

// Per-trial setup shared by every variant and budget of one trial.
struct TrialSetup {
  std::string scenario;
  int trial = 0;
  std::size_t instant = 0;  // index into the eval split
  AttackProblem problem;
  DeviationEval eval;
  std::uint64_t attack_seed = 0;
  int region_row = 0;
  int region_col = 0;
  bool qualifying = true;
  std::vector<double> clean_losses;
  std::vector<Field> clean_forecast;  // ensemble median per lead
};

TrialSetup make_trial(const Workspace& ws, const std::string& scenario, int trial);
TrialRecord run_trial(const Workspace& ws, const TrialSetup& setup, const std::string& variant, double budget);

// Memoizes trial records in <out>/trials.jsonl, keyed by the workspace
// fingerprint and the (scenario, trial, variant, budget) tuple.
class TrialStore {
 public:
  TrialStore(const Workspace& ws, fs::path out_dir);
  // Runs (or reuses) the requested records, in request order.
  struct Request {
    std::string scenario;
    int trial;
    std::string variant;
    double budget;
  };
  std::vector<TrialRecord> run(const std::vector<Request>& requests, int threads,
                               const std::function<void(const TrialRecord&)>& on_record = {});

 private:
  const Workspace& ws_;
  fs::path path_;
  std::map<std::string, TrialRecord> cache_;
};

struct CurvePoint {
  std::string scenario;
  std::string variant;
  double budget = 0.0;
  int n = 0;
  double mean = 0.0;
  double p05 = 0.0;
  double p95 = 0.0;
  double stderr_ = 0.0;
};

std::vector<CurvePoint> aggregate_curves(const std::vector<TrialRecord>& records);

struct AblationRow {
  std::string scenario;
  std::string variant;
  double budget = 0.0;
  double mean_deviation = 0.0;
  double relative_percent = 0.0;  // mean deviation / full attack mean, in %
};
std::vector<AblationRow> aggregate_ablation(const std::vector<TrialRecord>& records, double budget);

struct DetectRow {
  std::string scenario;
  std::string variant;
  double threshold = 0.0;
  double min_budget = 0.0;
  bool crossed = true;
  std::int64_t m = 0;
  double alpha = 0.05;
  double power = 0.0;
  double miss_probability = 1.0;  // 1 - power, evaluated without cancellation
};
std::vector<DetectRow> aggregate_detect(const std::vector<TrialRecord>& records, const json& thresholds,
                                        std::int64_t m, double alpha);

// CSV bodies (fixed column order, header row).
std::string sweep_csv(const std::vector<CurvePoint>& rows);
std::string ablation_csv(const std::vector<AblationRow>& rows);
std::string detect_csv(const std::vector<DetectRow>& rows);
std::string conceal_csv(const std::vector<TrialRecord>& records);
std::string reroute_csv(const std::vector<TrialRecord>& records);

// Recomputes every aggregate from `records` and compares with the CSV bodies
// written next to them. Returns a list of mismatches (empty when consistent).
std::vector<std::string> audit(const fs::path& out_dir);

// Subcommands. Each returns the directory it wrote.
using Log = std::function<void(const std::string&)>;
fs::path cmd_simulate(const ExperimentConfig& config, const fs::path& out, const Log& log = {});
fs::path cmd_train(const ExperimentConfig& config, const fs::path& out, const Log& log = {});
fs::path cmd_attack(const ExperimentConfig& config, const fs::path& out, const Log& log = {});
fs::path cmd_sweep(const ExperimentConfig& config, const fs::path& out, const Log& log = {});
fs::path cmd_ablate(const ExperimentConfig& config, const fs::path& out, const Log& log = {});
fs::path cmd_detect(const ExperimentConfig& config, const fs::path& out, const Log& log = {});
fs::path cmd_report(const ExperimentConfig& config, const fs::path& out, const Log& log = {});

}  // namespace advobs::harness
