#include "advobs/attack.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "advobs/errors.hpp"

namespace advobs {

void AdversarialLoss::validate(const Shape& shape) const {
  if (terms.empty()) throw ConfigError("adversarial loss has no terms");
  stats.validate(shape.n_var);
  if (!(tau > 0.0)) throw ConfigError("tau must be positive");
  auto check_var = [&](int v) {
    if (v < 0 || v >= shape.n_var) throw UnknownVariable("variable index " + std::to_string(v) + " out of range");
  };
  for (const auto& t : terms) {
    if (t.mask.n_lat() != shape.n_lat || t.mask.n_lon() != shape.n_lon)
      throw ShapeMismatch("loss mask does not match the state grid");
    if (t.mask.count() == 0) throw EmptyRegion("loss mask selects no cells");
    if (t.quantity.kind == Quantity::Kind::Variable) {
      check_var(t.quantity.var);
    } else {
      check_var(t.quantity.u_var);
      check_var(t.quantity.v_var);
    }
    if (t.reference.size() != 0 && !(t.reference.shape() == Shape{shape.n_lat, shape.n_lon, 1}))
      throw ShapeMismatch("loss reference must be n_lat x n_lon x 1");
  }
}

namespace {

// Value and d value / d q of a reduction over the region.
struct Reduction {
  double value = 0.0;
  std::vector<double> weights;
};

// Soft-min of q (log-mean-exp with temperature tau) or hard min with the
// subgradient shared uniformly across ties.
Reduction reduce_min(const std::vector<double>& q, double tau, bool smooth) {
  Reduction r;
  r.weights.assign(q.size(), 0.0);
  const double m = *std::min_element(q.begin(), q.end());
  if (smooth) {
    double s = 0.0;
    for (std::size_t k = 0; k < q.size(); ++k) {
      r.weights[k] = std::exp(-(q[k] - m) / tau);
      s += r.weights[k];
    }
    for (auto& w : r.weights) w /= s;
    r.value = m - tau * std::log(s / double(q.size()));
  } else {
    std::size_t ties = 0;
    for (std::size_t k = 0; k < q.size(); ++k)
      if (q[k] == m) ++ties;
    for (std::size_t k = 0; k < q.size(); ++k)
      if (q[k] == m) r.weights[k] = 1.0 / double(ties);
    r.value = m;
  }
  return r;
}

Reduction reduce_max(std::vector<double> q, double tau, bool smooth) {
  for (auto& x : q) x = -x;
  Reduction r = reduce_min(q, tau, smooth);
  r.value = -r.value;
  return r;
}

Reduction reduce_mean(const std::vector<double>& q) {
  Reduction r;
  r.weights.assign(q.size(), 1.0 / double(q.size()));
  for (double x : q) r.value += x;
  r.value /= double(q.size());
  return r;
}

// Loss value; when `grad_raw` is non-null, accumulates d loss / d raw.
double evaluate(const AdversarialLoss& loss, const Field& raw, bool smooth, Field* grad_raw) {
  const Shape shape = raw.shape();
  const int nv = shape.n_var;
  double total = 0.0;
  std::vector<double> q;
  for (const auto& term : loss.terms) {
    const auto cells = term.mask.selected();
    q.resize(cells.size());
    for (std::size_t k = 0; k < cells.size(); ++k) {
      const std::size_t base = cells[k] * std::size_t(nv);
      if (term.quantity.kind == Quantity::Kind::Variable) {
        q[k] = raw[base + std::size_t(term.quantity.var)];
      } else {
        q[k] = std::hypot(raw[base + std::size_t(term.quantity.u_var)], raw[base + std::size_t(term.quantity.v_var)]);
      }
    }

    Reduction red;
    double outer = 1.0;
    switch (term.functional) {
      case Functional::NegMinWindSpeed:
        red = reduce_min(q, loss.tau, smooth);
        outer = -1.0;
        break;
      case Functional::NegMaxDeviation:
        if (term.reference.size() != 0)
          for (std::size_t k = 0; k < cells.size(); ++k) q[k] -= term.reference[cells[k]];
        red = reduce_max(q, loss.tau, smooth);
        outer = -1.0;
        break;
      case Functional::MinimizeMax:
        red = reduce_max(q, loss.tau, smooth);
        break;
      case Functional::MinimizeRegionMean:
        red = reduce_mean(q);
        break;
      case Functional::TargetValue:
        red = reduce_mean(q);
        outer = term.sign;
        break;
    }
    total += term.weight * outer * red.value;

    if (!grad_raw) continue;
    const double scale = term.weight * outer;
    for (std::size_t k = 0; k < cells.size(); ++k) {
      const double w = scale * red.weights[k];
      if (w == 0.0) continue;
      const std::size_t base = cells[k] * std::size_t(nv);
      if (term.quantity.kind == Quantity::Kind::Variable) {
        (*grad_raw)[base + std::size_t(term.quantity.var)] += w;
      } else {
        const double u = raw[base + std::size_t(term.quantity.u_var)];
        const double v = raw[base + std::size_t(term.quantity.v_var)];
        const double speed = std::hypot(u, v);
        if (speed > 0.0) {
          (*grad_raw)[base + std::size_t(term.quantity.u_var)] += w * u / speed;
          (*grad_raw)[base + std::size_t(term.quantity.v_var)] += w * v / speed;
        }
      }
    }
  }
  return total;
}

}  // namespace

double eval_loss(const AdversarialLoss& loss, const Field& normalized, bool smooth) {
  loss.validate(normalized.shape());
  return evaluate(loss, denormalize(normalized, loss.stats), smooth, nullptr);
}

Field loss_grad(const AdversarialLoss& loss, const Field& normalized, bool smooth) {
  loss.validate(normalized.shape());
  Field g(normalized.shape());
  evaluate(loss, denormalize(normalized, loss.stats), smooth, &g);
  const int nv = normalized.shape().n_var;
  for (std::size_t i = 0; i < g.size(); ++i) g[i] *= loss.stats.std[i % std::size_t(nv)];
  return g;
}

ChannelMoments channel_moments(const Field& f) {
  const Shape s = f.shape();
  const std::size_t nv = std::size_t(s.n_var), cells = s.cells();
  ChannelMoments m;
  m.mean.assign(nv, 0.0);
  m.std.assign(nv, 0.0);
  for (std::size_t i = 0; i < f.size(); ++i) m.mean[i % nv] += f[i];
  for (auto& x : m.mean) x /= double(cells);
  for (std::size_t i = 0; i < f.size(); ++i) {
    const double d = f[i] - m.mean[i % nv];
    m.std[i % nv] += d * d;
  }
  for (auto& x : m.std) x = std::sqrt(x / double(cells));
  return m;
}

Field project(const Field& delta, double eps) {
  const ChannelMoments m = channel_moments(delta);
  const std::size_t nv = std::size_t(delta.shape().n_var);
  std::vector<double> factor(nv, 0.0);
  for (std::size_t v = 0; v < nv; ++v)
    if (m.std[v] > 0.0) factor[v] = std::min(eps, m.std[v]) / m.std[v];
  Field out(delta.shape());
  for (std::size_t i = 0; i < delta.size(); ++i) {
    const std::size_t v = i % nv;
    out[i] = factor[v] == 0.0 ? 0.0 : (delta[i] - m.mean[v]) * factor[v];
  }
  return out;
}

Perturbation project(const Perturbation& delta, double eps) {
  return {project(delta.delta_t, eps), project(delta.delta_tm1, eps)};
}

std::pair<Field, Field> apply_perturbation(const Field& prev, const Field& cur, const Perturbation& delta,
                                           const std::vector<double>& scale) {
  require_same_shape(prev.shape(), delta.delta_tm1.shape(), "perturbation of the previous state");
  require_same_shape(cur.shape(), delta.delta_t.shape(), "perturbation of the current state");
  const std::size_t nv = std::size_t(cur.shape().n_var);
  if (scale.size() != nv) throw ShapeMismatch("perturbation scale needs one entry per variable");
  Field p = prev, c = cur;
  for (std::size_t i = 0; i < c.size(); ++i) {
    p[i] += scale[i % nv] * delta.delta_tm1[i];
    c[i] += scale[i % nv] * delta.delta_t[i];
  }
  return {std::move(p), std::move(c)};
}

Variant parse_variant(std::string_view name) {
  for (Variant v : all_variants())
    if (variant_name(v) == name) return v;
  throw UnknownVariant("unknown attack variant '" + std::string(name) + "'");
}

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::Full: return "full";
    case Variant::NoSteps: return "no-steps";
    case Variant::NoApprox: return "no-approx";
    case Variant::NoBoth: return "no-both";
    case Variant::DpAttacker: return "dp-attacker";
    case Variant::AdvDm: return "advdm";
  }
  throw UnknownVariant("unknown attack variant");
}

const std::vector<Variant>& all_variants() {
  static const std::vector<Variant> v{Variant::Full,   Variant::NoSteps,    Variant::NoApprox,
                                      Variant::NoBoth, Variant::DpAttacker, Variant::AdvDm};
  return v;
}

void AttackConfig::validate() const {
  if (!(epsilon > 0.0)) throw ConfigError("attack.epsilon must be > 0");
  if (iterations < 1) throw ConfigError("attack.iterations must be >= 1");
  if (lead_steps < 1) throw ConfigError("attack.lead_steps must be >= 1");
  if (n_steps < 1) throw ConfigError("attack.n_steps must be >= 1");
  if (!(beta >= 0.0 && beta < 1.0)) throw ConfigError("attack.beta must lie in [0, 1)");
}

double step_size(double eps, int i, int n_iterations) {
  const double base = eps / n_iterations;
  return base + 0.5 * (2.0 * eps - base) * (1.0 + std::cos((i - 1) * std::numbers::pi / n_iterations));
}

namespace {

struct Plan {
  int n_steps;
  double beta;
  bool cosine;    // cosine schedule with bias correction, else alpha = eps
  bool sign;      // use the sign of the gradient
  bool denoising; // ascend the denoising loss instead of the target functional
  int lead_steps;
};

Plan plan_for(const AttackConfig& c) {
  switch (c.variant) {
    case Variant::Full: return {c.n_steps, c.beta, true, false, false, c.lead_steps};
    case Variant::NoSteps: return {c.n_steps, 0.0, false, false, false, c.lead_steps};
    case Variant::NoApprox: return {1, c.beta, true, false, false, c.lead_steps};
    case Variant::NoBoth: return {1, 0.0, false, false, false, c.lead_steps};
    case Variant::DpAttacker: return {1, 0.0, false, true, false, c.lead_steps};
    case Variant::AdvDm: return {1, 0.0, false, false, true, 1};
  }
  throw UnknownVariant("unknown attack variant");
}

Field scaled(const Field& g, const std::vector<double>& scale) {
  Field out = g;
  const std::size_t nv = scale.size();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= scale[i % nv];
  return out;
}

Field unit_scaled(Field g) {
  const ChannelMoments m = channel_moments(g);
  const double top = *std::max_element(m.std.begin(), m.std.end());
  if (top > 0.0) g *= 1.0 / top;
  return g;
}

Field signum(Field g) {
  for (auto& x : g.data()) x = double((x > 0.0) - (x < 0.0));
  return g;
}

// Union of the loss masks, used by the denoising-loss baseline.
std::vector<unsigned char> loss_region(const AdversarialLoss& loss, const Shape& shape) {
  std::vector<unsigned char> on(shape.cells(), 0);
  for (const auto& t : loss.terms)
    for (auto c : t.mask.selected()) on[c] = 1;
  return on;
}

}  // namespace

AttackResult attack(const AttackProblem& problem, const AttackConfig& config) {
  config.validate();
  if (!problem.params) throw ConfigError("attack needs model parameters");
  const DenoiserParams& params = *problem.params;
  const Shape shape = problem.cur.shape();
  require_same_shape(problem.prev.shape(), shape, "attack conditioning states");
  problem.loss.validate(shape);
  if (problem.scale.size() != std::size_t(shape.n_var)) throw ShapeMismatch("attack scale needs one entry per variable");

  const Plan plan = plan_for(config);
  if (plan.denoising) require_same_shape(problem.truth_next.shape(), shape, "denoising-loss baseline truth");
  std::vector<unsigned char> region;
  if (plan.denoising) region = loss_region(problem.loss, shape);

  AttackResult result;
  result.delta = {Field(shape), Field(shape)};
  Field m_t(shape), m_tm1(shape);
  result.log.reserve(std::size_t(config.iterations));

  for (int i = 1; i <= config.iterations; ++i) {
    Rng rng(derive_seed(config.seed, {0xA77ACull, std::uint64_t(i)}));
    const auto [prev, cur] = apply_perturbation(problem.prev, problem.cur, result.delta, problem.scale);
    IterationRecord rec;
    rec.iteration = i;

    Field g_cur, g_prev;
    if (plan.denoising) {
      const double sigma = sample_sigma(params.schedule, 0.0, 1.0, rng);
      Field z = problem.truth_next + sample_noise(shape, sigma, rng);
      const Field d = denoiser_forward(params, prev, cur, z, sigma, 0.0);
      const double lambda = loss_weight(sigma, params.sigma_data);
      Field cot(shape);
      const std::size_t nv = std::size_t(shape.n_var);
      double value = 0.0;
      for (std::size_t k = 0; k < cot.size(); ++k) {
        if (!region[k / nv]) continue;
        const double r = d[k] - problem.truth_next[k];
        value += lambda * r * r;
        // Negated: descending this ascends the denoising loss.
        cot[k] = -2.0 * lambda * r;
      }
      rec.loss = value;
      rec.denoiser_calls = 1;
      StateGradients g = denoiser_vjp(params, prev, cur, z, sigma, 0.0, cot);
      g_cur = std::move(g.cur);
      g_prev = std::move(g.prev);
    } else {
      ApproxForecast fc = forecast_approx(params, prev, cur, plan.lead_steps, plan.n_steps, rng);
      rec.loss = eval_loss(problem.loss, fc.output, true);
      rec.denoiser_calls = int(fc.tape.calls.size());
      const Field cot = loss_grad(problem.loss, fc.output, true);
      ConditioningGradients g = forecast_approx_vjp(params, fc.tape, cot);
      g_cur = std::move(g.cur);
      g_prev = std::move(g.prev);
    }
    g_cur = scaled(g_cur, problem.scale);
    g_prev = scaled(g_prev, problem.scale);
    if (plan.sign) {
      g_cur = signum(std::move(g_cur));
      g_prev = signum(std::move(g_prev));
    } else if (config.normalize_gradient) {
      g_cur = unit_scaled(std::move(g_cur));
      g_prev = unit_scaled(std::move(g_prev));
    }

    m_t *= plan.beta;
    m_t.axpy(1.0 - plan.beta, project(g_cur, 1.0));
    m_tm1 *= plan.beta;
    m_tm1.axpy(1.0 - plan.beta, project(g_prev, 1.0));

    double alpha = config.epsilon;
    if (plan.cosine) {
      alpha = step_size(config.epsilon, i, config.iterations);
      if (plan.beta > 0.0) alpha /= 1.0 - std::pow(plan.beta, i);
    }
    rec.alpha = alpha;

    result.delta.delta_t.axpy(-alpha, m_t);
    result.delta.delta_tm1.axpy(-alpha, m_tm1);
    result.delta = project(result.delta, config.epsilon);
    if (!result.delta.delta_t.all_finite() || !result.delta.delta_tm1.all_finite())
      throw NumericalBlowup("attack produced a non-finite perturbation at iteration " + std::to_string(i));
    result.log.push_back(rec);
  }
  return result;
}

namespace {

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

std::vector<double> forecast_losses(const AttackProblem& problem, const Field& prev, const Field& cur,
                                    const DeviationEval& eval) {
  if (!problem.params) throw ConfigError("deviation needs model parameters");
  if (eval.member_seeds.empty()) throw ConfigError("deviation needs at least one ensemble member");
  const auto members = forecast_members(*problem.params, prev, cur, eval.lead_steps, eval.n_full, eval.member_seeds);
  if (eval.mode == DeviationMode::MedianField) {
    const auto med = ensemble_median(members);
    return {eval_loss(problem.loss, med.back(), false)};
  }
  std::vector<double> out;
  for (const auto& m : members) out.push_back(eval_loss(problem.loss, m.back(), false));
  return out;
}

double induced_deviation(const AttackProblem& problem, const Perturbation& delta, const DeviationEval& eval,
                         const std::vector<double>& clean_losses) {
  const auto [prev, cur] = apply_perturbation(problem.prev, problem.cur, delta, problem.scale);
  const auto attacked = forecast_losses(problem, prev, cur, eval);
  if (attacked.size() != clean_losses.size()) throw ShapeMismatch("clean and attacked loss counts differ");
  std::vector<double> diff(attacked.size());
  for (std::size_t k = 0; k < diff.size(); ++k) diff[k] = clean_losses[k] - attacked[k];
  return median_of(diff);
}

double induced_deviation(const AttackProblem& problem, const Perturbation& delta, const DeviationEval& eval) {
  return induced_deviation(problem, delta, eval, forecast_losses(problem, problem.prev, problem.cur, eval));
}

double min_budget_search(const std::vector<double>& budgets, const std::vector<double>& deviations,
                         double threshold) {
  if (budgets.size() < 2) throw ConfigError("budget search needs at least two budgets");
  if (budgets.size() != deviations.size()) throw ConfigError("budget search needs one deviation per budget");
  for (std::size_t k = 1; k < budgets.size(); ++k)
    if (!(budgets[k] > budgets[k - 1])) throw ConfigError("budgets must be strictly increasing");
  if (budgets.front() < 0.0) throw ConfigError("budgets must be non-negative");

  std::vector<double> b, d;
  if (budgets.front() > 0.0) {
    b.push_back(0.0);
    d.push_back(0.0);
  }
  b.insert(b.end(), budgets.begin(), budgets.end());
  d.insert(d.end(), deviations.begin(), deviations.end());

  if (d.front() >= threshold) return b.front();
  for (std::size_t k = 1; k < b.size(); ++k) {
    if (d[k] >= threshold) {
      const double t = (threshold - d[k - 1]) / (d[k] - d[k - 1]);
      return b[k - 1] + t * (b[k] - b[k - 1]);
    }
  }
  const std::size_t last = b.size() - 1;
  const double slope = (d[last] - d[last - 1]) / (b[last] - b[last - 1]);
  if (slope > 0.0) return b[last] + (threshold - d[last]) / slope;
  if (d[last] > 0.0 && b[last] > 0.0) return threshold * b[last] / d[last];
  throw NoCrossing("deviations never reach the threshold " + std::to_string(threshold));
}

}  // namespace advobs
