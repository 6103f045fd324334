#include "advobs/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include "advobs/errors.hpp"
#include "advobs/inference.hpp"

namespace advobs::harness {

namespace {

using Clock = std::chrono::steady_clock;

void say(const Log& log, const std::string& msg) {
  if (log) log(msg);
}

std::uint64_t scenario_id(const std::string& name) {
  const auto& k = known_scenarios();
  const auto it = std::find(k.begin(), k.end(), name);
  if (it == k.end()) throw ConfigError("unknown scenario '" + name + "'");
  return std::uint64_t(it - k.begin());
}

bool is_fabricate(const std::string& s) { return s.rfind("fabricate-", 0) == 0; }

std::size_t variant_rank(const std::string& v) {
  const auto& all = all_variants();
  return std::size_t(std::find(all.begin(), all.end(), parse_variant(v)) - all.begin());
}

std::uint64_t fnv1a(std::uint64_t h, const std::string& bytes) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

std::string hex(std::uint64_t x) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(x));
  return buf;
}

std::string fmt(double x) { return io::format_double(x); }

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::shared_ptr<const GridSpec> make_spec(const ExperimentConfig& c) {
  const GridSpec d = GridSpec::desk_default();
  return std::make_shared<const GridSpec>(c.n_lat, c.n_lon, d.variables());
}

std::vector<Field> normalized(const std::vector<Field>& raw, const VariableStats& stats) {
  std::vector<Field> out;
  out.reserve(raw.size());
  for (const auto& f : raw) out.push_back(normalize(f, stats));
  return out;
}

std::vector<std::uint64_t> background_seeds(const ExperimentConfig& c) {
  std::vector<std::uint64_t> s;
  for (int k = 0; k < c.ensemble; ++k) s.push_back(derive_seed(c.seed, {0xBE, std::uint64_t(k)}));
  return s;
}

// Hard loss of each member (or of the median) at the last lead step.
std::vector<double> losses_from(const AdversarialLoss& loss, const std::vector<std::vector<Field>>& members,
                                const std::vector<Field>& median, DeviationMode mode) {
  if (mode == DeviationMode::MedianField) return {eval_loss(loss, median.back(), false)};
  std::vector<double> out;
  for (const auto& m : members) out.push_back(eval_loss(loss, m.back(), false));
  return out;
}

// Lowest value of channel `var` per lead step, interior rows only.
std::vector<std::array<int, 2>> track_minimum(const std::vector<Field>& forecast, const VariableStats& stats, int var) {
  std::vector<std::array<int, 2>> out;
  for (const auto& f : forecast) {
    const Field raw = denormalize(f, stats);
    const Shape s = raw.shape();
    std::array<int, 2> best{1, 0};
    double lo = raw(1, 0, var);
    for (int r = 1; r + 1 < s.n_lat; ++r)
      for (int c = 0; c < s.n_lon; ++c)
        if (raw(r, c, var) < lo) {
          lo = raw(r, c, var);
          best = {r, c};
        }
    out.push_back(best);
  }
  return out;
}

DeviationMode deviation_mode(const ExperimentConfig& c) {
  return c.deviation_mode == "member-median" ? DeviationMode::MemberMedian : DeviationMode::MedianField;
}

std::int64_t sample_size(const GridSpec& spec) { return std::int64_t(2 * spec.shape().size()); }

}  // namespace

// ---------------------------------------------------------------- records

json TrialRecord::to_json() const {
  json tc = json::array(), ta = json::array();
  for (const auto& p : clean_track) tc.push_back({p[0], p[1]});
  for (const auto& p : attacked_track) ta.push_back({p[0], p[1]});
  return {{"scenario", scenario},
          {"trial", trial},
          {"variant", variant},
          {"budget", budget},
          {"time_index", time_index},
          {"region_row", region_row},
          {"region_col", region_col},
          {"attack_seed", attack_seed},
          {"member_seeds", member_seeds},
          {"qualifying", qualifying},
          {"clean_loss", clean_loss},
          {"attacked_loss", attacked_loss},
          {"deviation", deviation},
          {"iteration_loss", iteration_loss},
          {"mean_t", mean_t},
          {"std_t", std_t},
          {"mean_tm1", mean_tm1},
          {"std_tm1", std_tm1},
          {"effective_epsilon", effective_epsilon},
          {"power", power},
          {"wall_seconds", wall_seconds},
          {"clean_track", tc},
          {"attacked_track", ta}};
}

TrialRecord TrialRecord::from_json(const json& j) {
  TrialRecord r;
  r.scenario = j.at("scenario");
  r.trial = j.at("trial");
  r.variant = j.at("variant");
  r.budget = j.at("budget");
  r.time_index = j.at("time_index");
  r.region_row = j.at("region_row");
  r.region_col = j.at("region_col");
  r.attack_seed = j.at("attack_seed");
  r.member_seeds = j.at("member_seeds").get<std::vector<std::uint64_t>>();
  r.qualifying = j.at("qualifying");
  r.clean_loss = j.at("clean_loss");
  r.attacked_loss = j.at("attacked_loss");
  r.deviation = j.at("deviation");
  r.iteration_loss = j.at("iteration_loss").get<std::vector<double>>();
  r.mean_t = j.at("mean_t").get<std::vector<double>>();
  r.std_t = j.at("std_t").get<std::vector<double>>();
  r.mean_tm1 = j.at("mean_tm1").get<std::vector<double>>();
  r.std_tm1 = j.at("std_tm1").get<std::vector<double>>();
  r.effective_epsilon = j.at("effective_epsilon");
  r.power = j.at("power");
  r.wall_seconds = j.at("wall_seconds");
  for (const auto& p : j.at("clean_track")) r.clean_track.push_back({p.at(0).get<int>(), p.at(1).get<int>()});
  for (const auto& p : j.at("attacked_track")) r.attacked_track.push_back({p.at(0).get<int>(), p.at(1).get<int>()});
  return r;
}

std::string TrialRecord::key() const {
  char b[40];
  std::snprintf(b, sizeof b, "%.17g", budget);
  return scenario + "|" + std::to_string(trial) + "|" + variant + "|" + b;
}

// ---------------------------------------------------------------- workspace

Workspace load_workspace(const ExperimentConfig& config) {
  Workspace ws;
  ws.config = config;
  const fs::path model_dir = config.model_dir;
  const json cal = io::read_json(model_dir / "calibration.json");
  ws.stats = io::stats_from_json(cal.at("stats"));
  ws.thresholds = cal.at("thresholds");
  ws.background_std = cal.at("background").at("std_normalized").get<std::vector<double>>();
  if (!ws.config.conceal_trigger) ws.config.conceal_trigger = cal.at("conceal_trigger").get<double>();

  const Trajectory traj = io::load_trajectory(config.data_dir);
  ws.spec = traj.spec;
  if (ws.spec->n_lat() != config.n_lat || ws.spec->n_lon() != config.n_lon)
    throw ConfigError("field 'grid': dataset grid differs from the configured grid");
  const auto split = split_dataset(traj, config.synth.period, config.train_years, config.eval_years);
  ws.eval_raw = split.eval.fields();
  ws.eval = normalized(ws.eval_raw, ws.stats);
  ws.eval_first_time = split.eval.states.front().time_index;

  ws.params = io::load_params(model_dir / "model");
  ws.climatology = io::load_climatology(model_dir / "climatology");
  ws.wind_climatology = io::load_climatology(model_dir / "wind_climatology");

  const json attack_settings = {{"seed", config.seed},
                                {"split", {config.train_years, config.eval_years}},
                                {"attack", config.to_json().at("attack")},
                                {"forecast", config.to_json().at("forecast")},
                                {"region", {config.region_rows, config.region_cols}},
                                {"conceal", config.to_json().at("conceal")},
                                {"alpha", config.alpha}};
  std::uint64_t h = 0xCBF29CE484222325ull;
  h = fnv1a(h, io::read_file(model_dir / "model.bin"));
  h = fnv1a(h, cal.dump());
  h = fnv1a(h, attack_settings.dump());
  ws.fingerprint = hex(h);
  return ws;
}

// ---------------------------------------------------------------- trials

TrialSetup make_trial(const Workspace& ws, const std::string& scenario, int trial) {
  const auto& c = ws.config;
  const GridSpec& spec = *ws.spec;
  const std::uint64_t sid = scenario_id(scenario);
  Rng rng(derive_seed(c.seed, {sid, std::uint64_t(trial), 0x7121}));

  if (ws.eval.size() < std::size_t(c.lead_steps) + 3) throw InsufficientData("eval split is shorter than the lead time");
  std::uniform_int_distribution<std::size_t> pick_t(1, ws.eval.size() - 1 - std::size_t(c.lead_steps));
  TrialSetup s;
  s.scenario = scenario;
  s.trial = trial;
  s.instant = pick_t(rng);
  s.attack_seed = derive_seed(c.seed, {sid, std::uint64_t(trial), 0xA7});
  s.eval.lead_steps = c.lead_steps;
  s.eval.n_full = c.n_full;
  s.eval.mode = deviation_mode(c);
  for (int k = 0; k < c.ensemble; ++k)
    s.eval.member_seeds.push_back(derive_seed(c.seed, {sid, std::uint64_t(trial), 0xE5, std::uint64_t(k)}));

  AttackProblem& p = s.problem;
  p.params = &ws.params;
  p.prev = ws.eval[s.instant - 1];
  p.cur = ws.eval[s.instant];
  p.truth_next = ws.eval[s.instant + 1];
  p.scale = ws.background_std;
  p.loss.stats = ws.stats;
  p.loss.tau = c.tau;

  const auto members = forecast_members(ws.params, p.prev, p.cur, c.lead_steps, c.n_full, s.eval.member_seeds);
  s.clean_forecast = ensemble_median(members);

  const int u = spec.var_index("u-wind"), v = spec.var_index("v-wind");
  const std::int64_t target_time = ws.eval_first_time + std::int64_t(s.instant) + c.lead_steps;

  if (is_fabricate(scenario)) {
    std::uniform_int_distribution<int> pick_row(2, spec.n_lat() - 2 - c.region_rows);
    std::uniform_int_distribution<int> pick_col(0, spec.n_lon() - 1);
    s.region_row = pick_row(rng);
    s.region_col = pick_col(rng);
    LossTerm term;
    term.mask = SpatialMask::box(spec, s.region_row, s.region_row + c.region_rows - 1, s.region_col, c.region_cols);
    if (scenario == "fabricate-wind") {
      term.functional = Functional::NegMinWindSpeed;
      term.quantity = Quantity::wind(u, v);
    } else {
      const int var = spec.var_index(scenario == "fabricate-temp" ? "temperature" : "precipitation");
      term.functional = Functional::NegMaxDeviation;
      term.quantity = Quantity::variable(var);
      term.reference = extract_channel(ws.climatology.at_day(target_time), var);
    }
    p.loss.terms = {term};
  } else {
    const Field raw = denormalize(s.clean_forecast.back(), ws.stats);
    int best_r = 1, best_c = 0;
    if (scenario == "conceal-region") {
      const Field speed = wind_speed(raw, u, v);
      double hi = -1.0;
      for (int r = 1; r + 1 < spec.n_lat(); ++r)
        for (int col = 0; col < spec.n_lon(); ++col)
          if (speed(r, col, 0) > hi) {
            hi = speed(r, col, 0);
            best_r = r;
            best_c = col;
          }
      s.region_row = std::clamp(best_r - c.conceal_rows / 2, 0, spec.n_lat() - c.conceal_rows);
      s.region_col = spec.wrap_lon(best_c - c.conceal_cols / 2);
      LossTerm term;
      term.functional = Functional::MinimizeMax;
      term.quantity = Quantity::wind(u, v);
      term.mask = SpatialMask::box(spec, s.region_row, s.region_row + c.conceal_rows - 1, s.region_col,
                                   c.conceal_cols);
      p.loss.terms = {term};
    } else {
      const auto track = track_minimum({s.clean_forecast.back()}, ws.stats, spec.var_index("pressure"));
      best_r = track.front()[0];
      best_c = track.front()[1];
      s.region_row = std::clamp(best_r - c.conceal_rows / 2, 0, spec.n_lat() - c.conceal_rows);
      s.region_col = spec.wrap_lon(best_c - c.conceal_cols / 2);
      LossTerm a, b;
      a.functional = Functional::MinimizeMax;
      a.quantity = Quantity::wind(u, v);
      a.mask = SpatialMask::box(spec, s.region_row, s.region_row + c.conceal_rows - 1, s.region_col, c.conceal_cols);
      b.functional = Functional::NegMaxDeviation;
      b.quantity = Quantity::wind(u, v);
      b.mask = SpatialMask::box(spec, s.region_row, s.region_row + c.conceal_rows - 1,
                                spec.wrap_lon(s.region_col + c.reroute_shift), c.conceal_cols);
      p.loss.terms = {a, b};
    }
  }
  p.loss.validate(spec.shape());
  s.clean_losses = losses_from(p.loss, members, s.clean_forecast, s.eval.mode);
  if (scenario == "conceal-region") s.qualifying = median_of(s.clean_losses) > *c.conceal_trigger;
  return s;
}

TrialRecord run_trial(const Workspace& ws, const TrialSetup& setup, const std::string& variant, double budget) {
  const auto start = Clock::now();
  const auto& c = ws.config;
  TrialRecord rec;
  rec.scenario = setup.scenario;
  rec.trial = setup.trial;
  rec.variant = variant;
  rec.budget = budget;
  rec.time_index = ws.eval_first_time + std::int64_t(setup.instant);
  rec.region_row = setup.region_row;
  rec.region_col = setup.region_col;
  rec.attack_seed = setup.attack_seed;
  rec.member_seeds = setup.eval.member_seeds;
  rec.qualifying = setup.qualifying;
  rec.clean_loss = median_of(setup.clean_losses);
  rec.attacked_loss = rec.clean_loss;
  const Shape shape = ws.spec->shape();
  const std::vector<double> zeros(std::size_t(shape.n_var), 0.0);
  rec.mean_t = rec.std_t = rec.mean_tm1 = rec.std_tm1 = zeros;
  if (!setup.qualifying) return rec;

  Perturbation delta{Field(shape), Field(shape)};
  if (budget > 0.0) {
    AttackConfig ac;
    ac.epsilon = budget;
    ac.iterations = c.iterations;
    ac.lead_steps = c.lead_steps;
    ac.n_steps = c.approx_steps;
    ac.beta = c.beta;
    ac.seed = setup.attack_seed;
    ac.variant = parse_variant(variant);
    ac.normalize_gradient = c.normalize_gradient;
    AttackResult res = attack(setup.problem, ac);
    for (const auto& it : res.log) rec.iteration_loss.push_back(it.loss);
    delta = std::move(res.delta);
  }

  const auto [prev, cur] = apply_perturbation(setup.problem.prev, setup.problem.cur, delta, setup.problem.scale);
  const auto members = forecast_members(ws.params, prev, cur, c.lead_steps, c.n_full, setup.eval.member_seeds);
  const auto median = ensemble_median(members);
  const auto attacked = losses_from(setup.problem.loss, members, median, setup.eval.mode);
  std::vector<double> diff(attacked.size());
  for (std::size_t k = 0; k < diff.size(); ++k) diff[k] = setup.clean_losses[k] - attacked[k];
  rec.deviation = median_of(diff);
  rec.attacked_loss = median_of(attacked);

  const auto mt = channel_moments(delta.delta_t), mtm1 = channel_moments(delta.delta_tm1);
  rec.mean_t = mt.mean;
  rec.std_t = mt.std;
  rec.mean_tm1 = mtm1.mean;
  rec.std_tm1 = mtm1.std;
  rec.effective_epsilon = effective_epsilon(delta.delta_t, delta.delta_tm1);
  rec.power = analytic_power(sample_size(*ws.spec), 1.0, rec.effective_epsilon, c.alpha);

  if (setup.scenario == "reroute-target") {
    const int pv = ws.spec->var_index("pressure");
    rec.clean_track = track_minimum(setup.clean_forecast, ws.stats, pv);
    rec.attacked_track = track_minimum(median, ws.stats, pv);
  }
  rec.wall_seconds = std::chrono::duration<double>(Clock::now() - start).count();
  return rec;
}

TrialStore::TrialStore(const Workspace& ws, fs::path out_dir) : ws_(ws), path_(std::move(out_dir) / "trials.jsonl") {
  std::ifstream in(path_);
  std::string line;
  while (std::getline(in, line)) {
    try {
      const json j = json::parse(line);
      if (j.at("fingerprint") != ws_.fingerprint) continue;
      TrialRecord r = TrialRecord::from_json(j.at("record"));
      cache_[r.key()] = std::move(r);
    } catch (const std::exception&) {
      // truncated or foreign line: ignore, it will be recomputed
    }
  }
}

std::vector<TrialRecord> TrialStore::run(const std::vector<Request>& requests, int threads,
                                         const std::function<void(const TrialRecord&)>& on_record) {
  auto key_of = [](const Request& r) {
    TrialRecord t;
    t.scenario = r.scenario;
    t.trial = r.trial;
    t.variant = r.variant;
    t.budget = r.budget;
    return t.key();
  };

  // Missing requests grouped by (scenario, trial) so the clean forecast is shared.
  std::vector<std::pair<std::string, int>> group_keys;
  std::map<std::pair<std::string, int>, std::vector<Request>> groups;
  std::set<std::string> queued;
  for (const auto& r : requests) {
    const std::string k = key_of(r);
    if (cache_.count(k) || queued.count(k)) continue;
    queued.insert(k);
    const auto g = std::make_pair(r.scenario, r.trial);
    if (!groups.count(g)) group_keys.push_back(g);
    groups[g].push_back(r);
  }

  if (!group_keys.empty()) {
    fs::create_directories(path_.parent_path());
    std::ofstream out(path_, std::ios::app);
    if (!out) throw IoError("cannot append to " + path_.string());
    std::mutex mu;
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    auto worker = [&] {
      for (;;) {
        const std::size_t g = next++;
        if (g >= group_keys.size()) return;
        try {
          const auto& [scenario, trial] = group_keys[g];
          const TrialSetup setup = make_trial(ws_, scenario, trial);
          for (const auto& r : groups[group_keys[g]]) {
            TrialRecord rec = run_trial(ws_, setup, r.variant, r.budget);
            std::lock_guard lock(mu);
            out << json{{"fingerprint", ws_.fingerprint}, {"record", rec.to_json()}}.dump() << "\n";
            out.flush();
            if (on_record) on_record(rec);
            cache_[rec.key()] = std::move(rec);
          }
        } catch (...) {
          std::lock_guard lock(mu);
          if (!failure) failure = std::current_exception();
          next = group_keys.size();
          return;
        }
      }
    };
    const int n = std::max(1, std::min<int>(threads, int(group_keys.size())));
    if (n == 1) {
      worker();
    } else {
      std::vector<std::thread> pool;
      for (int t = 0; t < n; ++t) pool.emplace_back(worker);
      for (auto& t : pool) t.join();
    }
    if (failure) std::rethrow_exception(failure);
  }

  std::vector<TrialRecord> out;
  out.reserve(requests.size());
  for (const auto& r : requests) out.push_back(cache_.at(key_of(r)));
  return out;
}

// ---------------------------------------------------------------- aggregates

namespace {

struct GroupKey {
  std::size_t scenario;
  std::size_t variant;
  double budget;
  auto operator<=>(const GroupKey&) const = default;
};

double mean_of(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / double(v.size()); }

}  // namespace

std::vector<CurvePoint> aggregate_curves(const std::vector<TrialRecord>& records) {
  std::map<GroupKey, std::vector<double>> groups;
  for (const auto& r : records) {
    if (!r.qualifying) continue;
    groups[{scenario_id(r.scenario), variant_rank(r.variant), r.budget}].push_back(r.deviation);
  }
  std::vector<CurvePoint> out;
  for (const auto& [k, devs] : groups) {
    CurvePoint p;
    p.scenario = known_scenarios()[k.scenario];
    p.variant = variant_name(all_variants()[k.variant]);
    p.budget = k.budget;
    p.n = int(devs.size());
    p.mean = mean_of(devs);
    p.p05 = percentile_linear(devs, 0.05);
    p.p95 = percentile_linear(devs, 0.95);
    if (devs.size() > 1) {
      double ss = 0.0;
      for (double d : devs) ss += (d - p.mean) * (d - p.mean);
      p.stderr_ = std::sqrt(ss / double(devs.size() - 1) / double(devs.size()));
    }
    out.push_back(p);
  }
  return out;
}

std::vector<AblationRow> aggregate_ablation(const std::vector<TrialRecord>& records, double budget) {
  std::vector<TrialRecord> at;
  for (const auto& r : records)
    if (r.budget == budget) at.push_back(r);
  const auto curves = aggregate_curves(at);
  std::vector<AblationRow> out;
  for (const auto& p : curves) {
    AblationRow row;
    row.scenario = p.scenario;
    row.variant = p.variant;
    row.budget = p.budget;
    row.mean_deviation = p.mean;
    row.relative_percent = std::nan("");
    for (const auto& q : curves)
      if (q.scenario == p.scenario && q.variant == "full" && q.mean != 0.0) row.relative_percent = 100.0 * p.mean / q.mean;
    out.push_back(row);
  }
  return out;
}

std::vector<DetectRow> aggregate_detect(const std::vector<TrialRecord>& records, const json& thresholds,
                                        std::int64_t m, double alpha) {
  const auto curves = aggregate_curves(records);
  std::vector<DetectRow> out;
  for (std::size_t i = 0; i < curves.size();) {
    std::size_t j = i;
    std::vector<double> budgets, means;
    while (j < curves.size() && curves[j].scenario == curves[i].scenario && curves[j].variant == curves[i].variant) {
      budgets.push_back(curves[j].budget);
      means.push_back(curves[j].mean);
      ++j;
    }
    DetectRow row;
    row.scenario = curves[i].scenario;
    row.variant = curves[i].variant;
    row.threshold = thresholds.at(row.scenario).get<double>();
    row.m = m;
    row.alpha = alpha;
    try {
      row.min_budget = min_budget_search(budgets, means, row.threshold);
      row.power = analytic_power(m, 1.0, row.min_budget, alpha);
      row.miss_probability = analytic_miss_probability(m, 1.0, row.min_budget, alpha);
    } catch (const NoCrossing&) {
      row.crossed = false;
      row.min_budget = row.power = row.miss_probability = std::nan("");
    } catch (const ConfigError&) {
      row.crossed = false;
      row.min_budget = row.power = row.miss_probability = std::nan("");
    }
    out.push_back(row);
    i = j;
  }
  return out;
}

std::string sweep_csv(const std::vector<CurvePoint>& rows) {
  std::ostringstream s;
  s << "scenario,variant,budget,n_trials,mean_deviation,p05,p95,stderr\n";
  for (const auto& r : rows)
    s << r.scenario << ',' << r.variant << ',' << fmt(r.budget) << ',' << r.n << ',' << fmt(r.mean) << ','
      << fmt(r.p05) << ',' << fmt(r.p95) << ',' << fmt(r.stderr_) << '\n';
  return s.str();
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream s;
  s << "scenario,variant,budget,mean_deviation,relative_percent\n";
  for (const auto& r : rows)
    s << r.scenario << ',' << r.variant << ',' << fmt(r.budget) << ',' << fmt(r.mean_deviation) << ','
      << fmt(r.relative_percent) << '\n';
  return s.str();
}

std::string detect_csv(const std::vector<DetectRow>& rows) {
  std::ostringstream s;
  s << "scenario,variant,threshold,min_budget,crossed,m,alpha,power,miss_probability\n";
  for (const auto& r : rows)
    s << r.scenario << ',' << r.variant << ',' << fmt(r.threshold) << ',' << fmt(r.min_budget) << ','
      << (r.crossed ? 1 : 0) << ',' << r.m << ',' << fmt(r.alpha) << ',' << fmt(r.power) << ','
      << fmt(r.miss_probability) << '\n';
  return s.str();
}

std::string conceal_csv(const std::vector<TrialRecord>& records) {
  std::ostringstream s;
  s << "trial,variant,budget,time_index,region_row,region_col,qualifying,pre_max,post_max,reduction\n";
  for (const auto& r : records) {
    if (r.scenario != "conceal-region") continue;
    s << r.trial << ',' << r.variant << ',' << fmt(r.budget) << ',' << r.time_index << ',' << r.region_row << ','
      << r.region_col << ',' << (r.qualifying ? 1 : 0) << ',' << fmt(r.clean_loss) << ',' << fmt(r.attacked_loss)
      << ',' << fmt(r.deviation) << '\n';
  }
  return s.str();
}

std::string reroute_csv(const std::vector<TrialRecord>& records) {
  std::ostringstream s;
  s << "trial,variant,budget,lead,clean_row,clean_col,attacked_row,attacked_col\n";
  for (const auto& r : records) {
    if (r.scenario != "reroute-target") continue;
    for (std::size_t l = 0; l < r.clean_track.size() && l < r.attacked_track.size(); ++l)
      s << r.trial << ',' << r.variant << ',' << fmt(r.budget) << ',' << l + 1 << ',' << r.clean_track[l][0] << ','
        << r.clean_track[l][1] << ',' << r.attacked_track[l][0] << ',' << r.attacked_track[l][1] << '\n';
  }
  return s.str();
}

// ---------------------------------------------------------------- requests

namespace {

using Request = TrialStore::Request;

void add_requests(std::vector<Request>& out, const ExperimentConfig& c, bool (*want)(const std::string&),
                  const std::vector<std::string>& variants, const std::vector<double>& budgets) {
  for (const auto& s : c.scenarios) {
    if (!want(s)) continue;
    for (int t = 0; t < c.trials; ++t)
      for (const auto& v : variants)
        for (double b : budgets) out.push_back({s, t, v, b});
  }
}

bool fabricate(const std::string& s) { return is_fabricate(s); }
bool conceal_like(const std::string& s) { return s == "conceal-region" || s == "reroute-target"; }

std::vector<Request> sweep_requests(const ExperimentConfig& c) {
  std::vector<Request> r;
  add_requests(r, c, fabricate, c.sweep_variants, c.budgets);
  return r;
}

std::vector<Request> ablation_requests(const ExperimentConfig& c) {
  std::vector<Request> r;
  add_requests(r, c, fabricate, c.variants, {c.budget_cap});
  return r;
}

std::vector<Request> detect_requests(const ExperimentConfig& c) {
  std::vector<Request> r;
  add_requests(r, c, fabricate, c.detect_variants, c.budgets);
  return r;
}

std::vector<Request> conceal_requests(const ExperimentConfig& c) {
  std::vector<Request> r;
  add_requests(r, c, conceal_like, {"full"}, {c.budget_cap});
  return r;
}

std::vector<Request> all_requests(const ExperimentConfig& c) {
  // Trial-major order so one trial's clean forecast serves every variant.
  std::vector<Request> parts;
  for (auto* f : {sweep_requests, detect_requests, ablation_requests, conceal_requests}) {
    auto p = f(c);
    parts.insert(parts.end(), p.begin(), p.end());
  }
  std::stable_sort(parts.begin(), parts.end(), [](const Request& a, const Request& b) {
    return std::tie(a.scenario, a.trial) < std::tie(b.scenario, b.trial);
  });
  std::vector<Request> out;
  std::set<std::string> seen;
  for (const auto& r : parts) {
    char b[40];
    std::snprintf(b, sizeof b, "%.17g", r.budget);
    if (seen.insert(r.scenario + "|" + std::to_string(r.trial) + "|" + r.variant + "|" + b).second) out.push_back(r);
  }
  return out;
}

std::vector<TrialRecord> subset(const std::vector<TrialRecord>& all, const std::vector<Request>& wanted) {
  std::map<std::string, const TrialRecord*> by_key;
  for (const auto& r : all) by_key[r.key()] = &r;
  std::vector<TrialRecord> out;
  for (const auto& w : wanted) {
    TrialRecord t;
    t.scenario = w.scenario;
    t.trial = w.trial;
    t.variant = w.variant;
    t.budget = w.budget;
    const auto it = by_key.find(t.key());
    if (it == by_key.end()) throw InsufficientData("missing trial record " + t.key());
    out.push_back(*it->second);
  }
  return out;
}

void write_text(const fs::path& path, const std::string& body) { io::write_atomic(path, body); }

std::string records_jsonl(const std::vector<TrialRecord>& records) {
  std::string s;
  for (const auto& r : records) s += r.to_json().dump() + "\n";
  return s;
}

std::vector<TrialRecord> read_records(const fs::path& path) {
  std::vector<TrialRecord> out;
  std::istringstream in(io::read_file(path));
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(TrialRecord::from_json(json::parse(line)));
  return out;
}

std::vector<TrialRecord> run_requests(const ExperimentConfig& config, const fs::path& out,
                                      const std::vector<Request>& requests, const Log& log, Workspace* ws_out = nullptr) {
  Workspace ws = load_workspace(config);
  TrialStore store(ws, out);
  std::size_t done = 0;
  const std::size_t total = requests.size();
  auto records = store.run(requests, config.threads, [&](const TrialRecord& r) {
    ++done;
    char buf[200];
    std::snprintf(buf, sizeof buf, "[%zu new] %s trial %d %s eps=%g deviation=%.5g (%.1fs)", done, r.scenario.c_str(),
                  r.trial, r.variant.c_str(), r.budget, r.deviation, r.wall_seconds);
    say(log, buf);
  });
  say(log, std::to_string(total) + " trial records ready");
  if (ws_out) *ws_out = std::move(ws);
  return records;
}

// All CSV bodies derivable from records; shared by report and audit.
std::map<std::string, std::string> render_tables(const ExperimentConfig& c, const std::vector<TrialRecord>& records,
                                                 const json& thresholds, std::int64_t m) {
  std::map<std::string, std::string> t;
  t["sweep.csv"] = sweep_csv(aggregate_curves(subset(records, sweep_requests(c))));
  t["ablation.csv"] = ablation_csv(aggregate_ablation(subset(records, ablation_requests(c)), c.budget_cap));
  t["detect.csv"] = detect_csv(aggregate_detect(subset(records, detect_requests(c)), thresholds, m, c.alpha));
  const auto conceal = subset(records, conceal_requests(c));
  t["conceal.csv"] = conceal_csv(conceal);
  t["reroute.csv"] = reroute_csv(conceal);
  return t;
}

}  // namespace

// ---------------------------------------------------------------- commands

fs::path cmd_simulate(const ExperimentConfig& config, const fs::path& out, const Log& log) {
  config.validate();
  const auto spec = make_spec(config);
  const int years = config.train_years + config.eval_years;
  say(log, "simulating " + std::to_string(years) + " years of " + std::to_string(config.synth.period) + " steps");
  const Trajectory traj = simulate(spec, config.synth, config.seed, years * config.synth.period);
  io::save_trajectory(out, traj, config.synth.period);
  json manifest = io::read_json(out / "manifest.json");
  manifest["synth"] = config.to_json().at("synth");
  manifest["split"] = config.to_json().at("split");
  io::write_json(out / "manifest.json", manifest);
  say(log, "wrote " + out.string());
  return out;
}

fs::path cmd_train(const ExperimentConfig& config, const fs::path& out, const Log& log) {
  config.validate();
  const Trajectory traj = io::load_trajectory(config.data_dir);
  const auto split = split_dataset(traj, config.synth.period, config.train_years, config.eval_years);
  const auto train_raw = split.train.fields();
  const VariableStats stats = VariableStats::from_fields(train_raw);
  const auto train_norm = normalized(train_raw, stats);
  const auto eval_raw = split.eval.fields();
  const auto eval_norm = normalized(eval_raw, stats);
  const GridSpec& spec = *traj.spec;

  NoiseSchedule schedule;
  schedule.n_full = config.n_full;
  TrainConfig tc = config.train;
  const auto init = DenoiserParams::random(spec.n_var(), config.hidden, derive_seed(config.seed, {0x1417}), schedule,
                                           tc.sigma_data);
  say(log, "training " + std::to_string(tc.iterations) + " iterations");
  const TrainResult result = train(init, train_norm, tc, [&](int it, double loss) {
    if (it % 250 == 0) say(log, "iteration " + std::to_string(it) + " loss " + fmt(loss));
  });
  io::save_params(out / "model", result.params, tc.seed);
  {
    std::ostringstream s;
    s << "iteration,loss\n";
    for (std::size_t i = 0; i < result.loss_curve.size(); ++i) s << i << ',' << fmt(result.loss_curve[i]) << '\n';
    write_text(out / "loss_curve.csv", s.str());
  }

  say(log, "building climatology and thresholds");
  const Series series = to_series(split.train);
  const Climatology clim = build_climatology(series, config.synth.period);
  const Series wind = map_series(series, [&](const Field& f) { return wind_speed(spec, f); });
  const Climatology wind_clim = build_climatology(wind, config.synth.period);
  io::save_climatology(out / "climatology", clim);
  io::save_climatology(out / "wind_climatology", wind_clim);
  json thresholds = {
      {"fabricate-wind", extreme_threshold(wind, wind_clim, 0, config.percentile)},
      {"fabricate-temp", extreme_threshold(series, clim, spec.var_index("temperature"), config.percentile)},
      {"fabricate-precip", extreme_threshold(series, clim, spec.var_index("precipitation"), config.percentile)},
  };
  std::vector<double> speeds;
  for (const auto& f : wind.fields) speeds.insert(speeds.end(), f.data().begin(), f.data().end());
  const double trigger = percentile_linear(std::move(speeds), 0.9);

  say(log, "estimating background error");
  const auto seeds = background_seeds(config);
  const auto forecaster = [&](const Field& prev, const Field& cur) {
    return forecast_ensemble(result.params, prev, cur, 1, config.n_full, seeds).front();
  };
  const BackgroundError be = estimate_background_error(forecaster, eval_norm, stats, config.background_stride);

  json cal = {{"stats", io::to_json(stats)},
              {"thresholds", thresholds},
              {"background",
               {{"variance_normalized", be.variance_normalized},
                {"variance_raw", be.variance_raw},
                {"std_normalized", be.std_normalized()}}},
              {"conceal_trigger", trigger},
              {"period", config.synth.period},
              {"percentile", config.percentile},
              {"final_loss", result.loss_curve.empty() ? 0.0 : result.loss_curve.back()}};
  io::write_json(out / "calibration.json", cal);

  say(log, "scoring forecast skill");
  const int j_max = config.lead_steps;
  std::vector<int> leads{1};
  if (j_max > 1) leads.push_back(j_max);
  const int nv = spec.n_var();
  std::map<int, std::vector<double>> se_model, se_clim;
  for (int l : leads) se_model[l].assign(std::size_t(nv), 0.0), se_clim[l].assign(std::size_t(nv), 0.0);
  std::size_t count = 0;
  const std::int64_t t0 = split.eval.states.front().time_index;
  for (std::size_t t = 1; t + std::size_t(j_max) < eval_norm.size(); t += std::size_t(config.skill_stride)) {
    std::vector<std::uint64_t> member;
    for (int k = 0; k < config.ensemble; ++k) member.push_back(derive_seed(config.seed, {0x5C, t, std::uint64_t(k)}));
    const auto fc = forecast_ensemble(result.params, eval_norm[t - 1], eval_norm[t], j_max, config.n_full, member);
    for (int l : leads) {
      const Field pred = denormalize(fc[std::size_t(l - 1)], stats);
      const Field& truth = eval_raw[t + std::size_t(l)];
      const Field& cm = clim.at_day(t0 + std::int64_t(t) + l);
      for (std::size_t i = 0; i < truth.size(); ++i) {
        se_model[l][i % std::size_t(nv)] += (pred[i] - truth[i]) * (pred[i] - truth[i]);
        se_clim[l][i % std::size_t(nv)] += (cm[i] - truth[i]) * (cm[i] - truth[i]);
      }
    }
    ++count;
  }
  std::ostringstream s;
  s << "lead,variable,model_rmse,climatology_rmse\n";
  const double n = double(count) * double(spec.shape().cells());
  for (int l : leads)
    for (int v = 0; v < nv; ++v)
      s << l << ',' << spec.variables()[std::size_t(v)].name << ',' << fmt(std::sqrt(se_model[l][std::size_t(v)] / n))
        << ',' << fmt(std::sqrt(se_clim[l][std::size_t(v)] / n)) << '\n';
  write_text(out / "skill.csv", s.str());
  say(log, "wrote " + out.string());
  return out;
}

fs::path cmd_attack(const ExperimentConfig& config, const fs::path& out, const Log& log) {
  config.validate();
  const auto records = run_requests(config, out, all_requests(config), log);
  write_text(out / "attack_records.jsonl", records_jsonl(records));
  const auto conceal = subset(records, conceal_requests(config));
  if (!conceal.empty()) {
    write_text(out / "conceal.csv", conceal_csv(conceal));
    write_text(out / "reroute.csv", reroute_csv(conceal));
  }
  for (const auto& r : conceal)
    if (!r.qualifying)
      say(log, NoEventFound(r.scenario + " trial " + std::to_string(r.trial) + ": regional maximum below trigger").what());
  return out;
}

fs::path cmd_sweep(const ExperimentConfig& config, const fs::path& out, const Log& log) {
  config.validate();
  const auto records = run_requests(config, out, sweep_requests(config), log);
  write_text(out / "sweep.csv", sweep_csv(aggregate_curves(records)));
  return out;
}

fs::path cmd_ablate(const ExperimentConfig& config, const fs::path& out, const Log& log) {
  config.validate();
  const auto records = run_requests(config, out, ablation_requests(config), log);
  write_text(out / "ablation.csv", ablation_csv(aggregate_ablation(records, config.budget_cap)));
  return out;
}

fs::path cmd_detect(const ExperimentConfig& config, const fs::path& out, const Log& log) {
  config.validate();
  Workspace ws;
  const auto records = run_requests(config, out, detect_requests(config), log, &ws);
  const std::int64_t m = sample_size(*ws.spec);
  const auto rows = aggregate_detect(records, ws.thresholds, m, config.alpha);
  write_text(out / "detect.csv", detect_csv(rows));
  json reports = json::array();
  for (const auto& r : rows) {
    json j = {{"scenario", r.scenario},  {"variant", r.variant},     {"m", r.m},
              {"alpha", r.alpha},        {"sigma_b2", 1.0},          {"epsilon", r.crossed ? json(r.min_budget) : json()},
              {"analytic_power", r.crossed ? json(r.power) : json()}};
    if (r.crossed && config.mc_trials > 0) {
      Rng rng(derive_seed(config.seed, {0xDE7, scenario_id(r.scenario), variant_rank(r.variant)}));
      j["monte_carlo_power"] = monte_carlo_power(m, 1.0, r.min_budget, config.alpha, config.mc_trials, rng);
      j["monte_carlo_trials"] = config.mc_trials;
    }
    reports.push_back(j);
  }
  io::write_json(out / "detect.json", reports);
  return out;
}

fs::path cmd_report(const ExperimentConfig& config, const fs::path& out, const Log& log) {
  config.validate();
  Workspace ws;
  const auto records = run_requests(config, out, all_requests(config), log, &ws);
  const fs::path dir = out / "report";
  const std::int64_t m = sample_size(*ws.spec);
  const auto tables = render_tables(ws.config, records, ws.thresholds, m);
  for (const auto& [name, body] : tables) write_text(dir / name, body);
  write_text(dir / "records.jsonl", records_jsonl(records));
  const fs::path skill = fs::path(config.model_dir) / "skill.csv";
  if (fs::exists(skill)) write_text(dir / "skill.csv", io::read_file(skill));

  double wall = 0.0;
  for (const auto& r : records) wall += r.wall_seconds;
  json report = {{"config", ws.config.to_json()},
                 {"fingerprint", ws.fingerprint},
                 {"seeds",
                  {{"experiment", config.seed},
                   {"train", config.train.seed},
                   {"trials", json::array()}}},
                 {"thresholds", ws.thresholds},
                 {"background_std_normalized", ws.background_std},
                 {"sample_size", m},
                 {"n_records", records.size()},
                 {"runtime", {{"attack_wall_seconds", wall}}},
                 {"tables", json::array()}};
  for (const auto& r : records)
    if (r.variant == "full" && r.budget == config.budget_cap)
      report["seeds"]["trials"].push_back(
          {{"scenario", r.scenario}, {"trial", r.trial}, {"attack", r.attack_seed}, {"members", r.member_seeds}});
  for (const auto& [name, body] : tables) report["tables"].push_back(name);
  io::write_json(dir / "report.json", report);

  const auto problems = audit(dir);
  report["audit"] = problems;
  io::write_json(dir / "report.json", report);
  for (const auto& p : problems) say(log, "audit: " + p);
  say(log, "wrote " + dir.string());
  return dir;
}

std::vector<std::string> audit(const fs::path& dir) {
  const json report = io::read_json(dir / "report.json");
  const ExperimentConfig config = ExperimentConfig::from_json(report.at("config"));
  const auto records = read_records(dir / "records.jsonl");
  const auto tables = render_tables(config, records, report.at("thresholds"), report.at("sample_size").get<std::int64_t>());
  std::vector<std::string> problems;
  for (const auto& [name, body] : tables) {
    if (!fs::exists(dir / name)) {
      problems.push_back(name + " is missing");
      continue;
    }
    if (io::read_file(dir / name) != body) problems.push_back(name + " differs from recomputation");
  }
  return problems;
}

}  // namespace advobs::harness
