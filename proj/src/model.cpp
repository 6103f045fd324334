#include "advobs/model.hpp"

#include <cmath>
#include <numbers>

#include "advobs/errors.hpp"

namespace advobs {

double NoiseSchedule::sigma(double u) const { return sigma_max * std::pow(sigma_min / sigma_max, u); }

double NoiseSchedule::position(double s) const { return std::log(s / sigma_max) / std::log(sigma_min / sigma_max); }

std::vector<double> NoiseSchedule::mid_quantile_levels(int n) const {
  std::vector<double> out(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) out[std::size_t(k)] = sigma((k + 0.5) / n);
  return out;
}

void NoiseSchedule::validate() const {
  if (!(sigma_min > 0.0) || !(sigma_min < sigma_max)) throw ConfigError("schedule needs 0 < sigma_min < sigma_max");
  if (n_full < 1) throw ConfigError("schedule needs n_full >= 1");
}

double sample_sigma(const NoiseSchedule& schedule, double a, double b, Rng& rng) {
  if (!(a >= 0.0 && a < b && b <= 1.0))
    throw BadInterval("need 0 <= a < b <= 1, got [" + std::to_string(a) + ", " + std::to_string(b) + ")");
  std::uniform_real_distribution<double> uniform(a, b);
  return schedule.sigma(uniform(rng));
}

Field sample_noise(const Shape& shape, double sigma, Rng& rng) {
  Field out(shape);
  std::normal_distribution<double> normal(0.0, sigma);
  for (auto& x : out.data()) x = normal(rng);
  return out;
}

Preconditioning precondition(double sigma, double sigma_data) {
  const double s2 = sigma * sigma, d2 = sigma_data * sigma_data;
  const double root = std::sqrt(s2 + d2);
  return {d2 / (s2 + d2), sigma * sigma_data / root, 1.0 / root};
}

double loss_weight(double sigma, double sigma_data) {
  return (sigma * sigma + sigma_data * sigma_data) / ((sigma * sigma_data) * (sigma * sigma_data));
}

std::size_t DenoiserParams::n_parameters() const {
  return std::size_t(w1.size() + b1.size() + w2.size() + b2.size() + w3.size() + b3.size());
}

DenoiserParams DenoiserParams::zeros(int n_var, int hidden, NoiseSchedule schedule, double sigma_data) {
  DenoiserParams p;
  p.n_var = n_var;
  p.hidden = hidden;
  p.sigma_data = sigma_data;
  p.schedule = schedule;
  p.w1 = Eigen::MatrixXd::Zero(hidden, p.n_features());
  p.b1 = Eigen::VectorXd::Zero(hidden);
  p.w2 = Eigen::MatrixXd::Zero(hidden, hidden);
  p.b2 = Eigen::VectorXd::Zero(hidden);
  p.w3 = Eigen::MatrixXd::Zero(n_var, hidden);
  p.b3 = Eigen::VectorXd::Zero(n_var);
  return p;
}

DenoiserParams DenoiserParams::random(int n_var, int hidden, std::uint64_t seed, NoiseSchedule schedule,
                                      double sigma_data) {
  DenoiserParams p = zeros(n_var, hidden, schedule, sigma_data);
  Rng rng(derive_seed(seed, {0x1417}));
  auto glorot = [&](Eigen::MatrixXd& w) {
    const double limit = std::sqrt(6.0 / double(w.rows() + w.cols()));
    std::uniform_real_distribution<double> u(-limit, limit);
    for (Eigen::Index c = 0; c < w.cols(); ++c)
      for (Eigen::Index r = 0; r < w.rows(); ++r) w(r, c) = u(rng);
  };
  glorot(p.w1);
  glorot(p.w2);
  glorot(p.w3);
  return p;
}

std::vector<double> DenoiserParams::flatten() const {
  std::vector<double> out;
  out.reserve(n_parameters());
  auto put_matrix = [&](const Eigen::MatrixXd& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) out.push_back(m(r, c));
  };
  auto put_vector = [&](const Eigen::VectorXd& v) { out.insert(out.end(), v.data(), v.data() + v.size()); };
  put_matrix(w1);
  put_vector(b1);
  put_matrix(w2);
  put_vector(b2);
  put_matrix(w3);
  put_vector(b3);
  return out;
}

void DenoiserParams::unflatten(const std::vector<double>& flat) {
  if (flat.size() != n_parameters())
    throw ShapeMismatch("parameter vector has " + std::to_string(flat.size()) + " entries, expected " +
                        std::to_string(n_parameters()));
  std::size_t k = 0;
  auto get_matrix = [&](Eigen::MatrixXd& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = flat[k++];
  };
  auto get_vector = [&](Eigen::VectorXd& v) {
    for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = flat[k++];
  };
  get_matrix(w1);
  get_vector(b1);
  get_matrix(w2);
  get_vector(b2);
  get_matrix(w3);
  get_vector(b3);
}

bool DenoiserParams::all_finite() const {
  return w1.allFinite() && w2.allFinite() && w3.allFinite() && b1.allFinite() && b2.allFinite() &&
         b3.allFinite();
}

void DenoiserParams::validate() const {
  if (n_var < 1 || hidden < 1) throw ShapeMismatch("denoiser needs n_var >= 1 and hidden >= 1");
  if (w1.rows() != hidden || w1.cols() != n_features() || b1.size() != hidden || w2.rows() != hidden ||
      w2.cols() != hidden || b2.size() != hidden || w3.rows() != n_var || w3.cols() != hidden ||
      b3.size() != n_var)
    throw ShapeMismatch("denoiser layer shapes inconsistent with n_var / hidden");
  if (!all_finite()) throw NumericalBlowup("denoiser parameters are not finite");
}

std::array<double, DenoiserParams::kEmbedding> noise_embedding(const NoiseSchedule& schedule, double sigma_in,
                                                               double sigma_out) {
  const double u = schedule.position(sigma_in);
  return {std::log(sigma_in) / 4.0, std::log(sigma_out + 1e-3) / 4.0, std::sin(std::numbers::pi * u),
          std::cos(std::numbers::pi * u)};
}

namespace {

// A field viewed as an n_var x cells column-major matrix.
using FieldMatrix = Eigen::Map<const Eigen::MatrixXd>;

// Activations of one forward pass. Columns index cells (lat * n_lon + lon).
struct ForwardCache {
  Preconditioning pc{};
  Eigen::MatrixXd features;  // n_features x cells
  Eigen::MatrixXd h1, h2;    // hidden x cells, post-tanh
  Eigen::MatrixXd out;       // n_var x cells
};

void check_inputs(const DenoiserParams& params, const Field& prev, const Field& cur, const Field& z) {
  require_same_shape(prev.shape(), cur.shape(), "denoiser prev/cur");
  require_same_shape(prev.shape(), z.shape(), "denoiser prev/z");
  if (prev.shape().n_var != params.n_var)
    throw ShapeMismatch("denoiser trained for " + std::to_string(params.n_var) + " variables, state has " +
                        std::to_string(prev.shape().n_var));
}

// Stencil neighbour offsets in feature order: nb = (dr + 1) * 3 + (dc + 1).
constexpr int kNeighbours = 9;

void build_features(const DenoiserParams& params, const Field& prev, const Field& cur, const Field& z,
                    double c_in, double sigma_in, double sigma_out, Eigen::MatrixXd& feat) {
  const Shape s = prev.shape();
  const int nv = s.n_var;
  const int cells = int(s.cells());
  feat.setZero(params.n_features(), cells);
  const std::array<const Field*, 3> inputs{&prev, &cur, &z};
  const std::array<double, 3> scale{1.0, 1.0, c_in};
  const auto emb = noise_embedding(params.schedule, sigma_in, sigma_out);
  const int emb_row = 27 * nv;

  for (int r = 0; r < s.n_lat; ++r) {
    for (int c = 0; c < s.n_lon; ++c) {
      const int cell = r * s.n_lon + c;
      double* col = feat.col(cell).data();
      for (int nb = 0; nb < kNeighbours; ++nb) {
        const int rr = r + nb / 3 - 1;
        if (rr < 0 || rr >= s.n_lat) continue;
        int cc = c + nb % 3 - 1;
        cc = cc < 0 ? cc + s.n_lon : (cc >= s.n_lon ? cc - s.n_lon : cc);
        const std::size_t src = (std::size_t(rr) * s.n_lon + cc) * nv;
        for (int f = 0; f < 3; ++f) {
          const double* in = inputs[f]->data().data() + src;
          double* dst = col + (f * kNeighbours + nb) * nv;
          for (int v = 0; v < nv; ++v) dst[v] = scale[f] * in[v];
        }
      }
      for (int e = 0; e < DenoiserParams::kEmbedding; ++e) col[emb_row + e] = emb[std::size_t(e)];
    }
  }
}

void forward_pass(const DenoiserParams& params, const Field& prev, const Field& cur, const Field& z,
                  double sigma_in, double sigma_out, ForwardCache& cache) {
  cache.pc = precondition(sigma_in, params.sigma_data);
  build_features(params, prev, cur, z, cache.pc.c_in, sigma_in, sigma_out, cache.features);
  cache.h1.noalias() = params.w1 * cache.features;
  cache.h1.colwise() += params.b1;
  cache.h1 = cache.h1.array().tanh();
  cache.h2.noalias() = params.w2 * cache.h1;
  cache.h2.colwise() += params.b2;
  cache.h2 = cache.h2.array().tanh();
  cache.out.noalias() = params.w3 * cache.h2;
  cache.out.colwise() += params.b3;
}

Field assemble_output(const ForwardCache& cache, const Field& z) {
  Field d(z.shape());
  const auto& out = cache.out;  // column-major n_var x cells matches the field layout
  const double* o = out.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = cache.pc.c_skip * z[i] + cache.pc.c_out * o[i];
  return d;
}

// Backpropagates `cotangent` (d loss / d D) to the pre-activation layers.
struct BackwardSignals {
  Eigen::MatrixXd d_out, d_a2, d_a1;
};

void backward_signals(const DenoiserParams& params, const ForwardCache& cache, const Field& cotangent,
                      BackwardSignals& sig) {
  const int cells = int(cache.out.cols());
  sig.d_out = cache.pc.c_out * FieldMatrix(cotangent.data().data(), params.n_var, cells);
  sig.d_a2.noalias() = params.w3.transpose() * sig.d_out;
  sig.d_a2.array() *= 1.0 - cache.h2.array().square();
  sig.d_a1.noalias() = params.w2.transpose() * sig.d_a2;
  sig.d_a1.array() *= 1.0 - cache.h1.array().square();
}

void scatter_features(const Eigen::MatrixXd& d_feat, double c_in, StateGradients& g) {
  const Shape s = g.prev.shape();
  const int nv = s.n_var;
  std::array<Field*, 3> outs{&g.prev, &g.cur, &g.z};
  const std::array<double, 3> scale{1.0, 1.0, c_in};
  for (int r = 0; r < s.n_lat; ++r) {
    for (int c = 0; c < s.n_lon; ++c) {
      const double* col = d_feat.col(r * s.n_lon + c).data();
      for (int nb = 0; nb < kNeighbours; ++nb) {
        const int rr = r + nb / 3 - 1;
        if (rr < 0 || rr >= s.n_lat) continue;
        int cc = c + nb % 3 - 1;
        cc = cc < 0 ? cc + s.n_lon : (cc >= s.n_lon ? cc - s.n_lon : cc);
        const std::size_t dst = (std::size_t(rr) * s.n_lon + cc) * nv;
        for (int f = 0; f < 3; ++f) {
          double* o = outs[f]->data().data() + dst;
          const double* src = col + (f * kNeighbours + nb) * nv;
          for (int v = 0; v < nv; ++v) o[v] += scale[f] * src[v];
        }
      }
    }
  }
}

void check_cotangent(const Field& z, const Field& cotangent) {
  require_same_shape(z.shape(), cotangent.shape(), "denoiser cotangent");
}

void accumulate_param_grad(const DenoiserParams& params, const ForwardCache& cache, const BackwardSignals& sig,
                           double scale, DenoiserParams& grad) {
  grad.w3.noalias() += scale * sig.d_out * cache.h2.transpose();
  grad.b3.noalias() += scale * sig.d_out.rowwise().sum();
  grad.w2.noalias() += scale * sig.d_a2 * cache.h1.transpose();
  grad.b2.noalias() += scale * sig.d_a2.rowwise().sum();
  grad.w1.noalias() += scale * sig.d_a1 * cache.features.transpose();
  grad.b1.noalias() += scale * sig.d_a1.rowwise().sum();
  (void)params;
}

void check_step_order(double sigma_i, double sigma_next) {
  if (!(sigma_i > 0.0)) throw BadNoiseOrder("sigma_i must be positive");
  if (!(sigma_next >= 0.0 && sigma_next < sigma_i))
    throw BadNoiseOrder("need 0 <= sigma_next < sigma_i, got " + std::to_string(sigma_next) +
                        " >= " + std::to_string(sigma_i));
}

}  // namespace

Field denoiser_forward(const DenoiserParams& params, const Field& prev, const Field& cur, const Field& z,
                       double sigma_in, double sigma_out) {
  check_inputs(params, prev, cur, z);
  ForwardCache cache;
  forward_pass(params, prev, cur, z, sigma_in, sigma_out, cache);
  return assemble_output(cache, z);
}

Field denoise_step(const DenoiserParams& params, const Field& prev, const Field& cur, const Field& z,
                   double sigma_i, double sigma_next) {
  check_step_order(sigma_i, sigma_next);
  Field d = denoiser_forward(params, prev, cur, z, sigma_i, sigma_next);
  if (sigma_next == 0.0) return d;
  const double ratio = sigma_next / sigma_i;
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = d[i] + ratio * (z[i] - d[i]);
  return d;
}

StateGradients denoiser_vjp(const DenoiserParams& params, const Field& prev, const Field& cur, const Field& z,
                            double sigma_in, double sigma_out, const Field& cotangent) {
  check_inputs(params, prev, cur, z);
  check_cotangent(z, cotangent);
  ForwardCache cache;
  forward_pass(params, prev, cur, z, sigma_in, sigma_out, cache);
  BackwardSignals sig;
  backward_signals(params, cache, cotangent, sig);
  const Eigen::MatrixXd d_feat = params.w1.transpose() * sig.d_a1;

  StateGradients g{Field(z.shape()), Field(z.shape()), Field(z.shape())};
  scatter_features(d_feat, cache.pc.c_in, g);
  g.z.axpy(cache.pc.c_skip, cotangent);
  return g;
}

StateGradients denoise_step_vjp(const DenoiserParams& params, const Field& prev, const Field& cur,
                                const Field& z, double sigma_i, double sigma_next, const Field& cotangent) {
  check_step_order(sigma_i, sigma_next);
  const double ratio = sigma_next / sigma_i;
  // Z' = (1 - r) D + r Z
  Field d_bar = cotangent;
  d_bar *= 1.0 - ratio;
  StateGradients g = denoiser_vjp(params, prev, cur, z, sigma_i, sigma_next, d_bar);
  if (ratio != 0.0) g.z.axpy(ratio, cotangent);
  return g;
}

DenoiserParams param_grad(const DenoiserParams& params, const Field& prev, const Field& cur, const Field& z,
                          double sigma_in, double sigma_out, const Field& cotangent) {
  check_inputs(params, prev, cur, z);
  check_cotangent(z, cotangent);
  ForwardCache cache;
  forward_pass(params, prev, cur, z, sigma_in, sigma_out, cache);
  BackwardSignals sig;
  backward_signals(params, cache, cotangent, sig);
  DenoiserParams grad = DenoiserParams::zeros(params.n_var, params.hidden, params.schedule, params.sigma_data);
  accumulate_param_grad(params, cache, sig, 1.0, grad);
  return grad;
}

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0)) throw ConfigError("learning_rate must be nonnegative");
  if (iterations < 1) throw ConfigError("iterations must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (!(sigma_data > 0.0)) throw ConfigError("sigma_data must be positive");
}

double denoising_loss(const DenoiserParams& params, const TrainingTriple& ex, const Field& noise, double sigma,
                      double sigma_out) {
  Field z = *ex.next;
  z += noise;
  const Field d = denoiser_forward(params, *ex.prev, *ex.cur, z, sigma, sigma_out);
  double sq = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) sq += (d[i] - (*ex.next)[i]) * (d[i] - (*ex.next)[i]);
  return loss_weight(sigma, params.sigma_data) * sq / double(d.size());
}

TrainResult train(const DenoiserParams& init, const std::vector<Field>& data, const TrainConfig& config,
                  const std::function<void(int, double)>& on_iteration) {
  config.validate();
  init.validate();
  if (data.size() < 3 || data.size() - 2 < std::size_t(config.batch_size))
    throw InsufficientData("training split has " + std::to_string(data.size() >= 2 ? data.size() - 2 : 0) +
                           " triples, batch needs " + std::to_string(config.batch_size));
  for (const auto& f : data) require_same_shape(f.shape(), data.front().shape(), "train split");

  TrainResult result{init, {}};
  DenoiserParams& p = result.params;
  p.sigma_data = config.sigma_data;
  DenoiserParams velocity = DenoiserParams::zeros(p.n_var, p.hidden, p.schedule, p.sigma_data);
  DenoiserParams grad = velocity;

  Rng rng(derive_seed(config.seed, {0x7241}));
  std::uniform_int_distribution<std::size_t> pick(1, data.size() - 2);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const Shape shape = data.front().shape();
  ForwardCache cache;
  BackwardSignals sig;
  result.loss_curve.reserve(std::size_t(config.iterations));

  for (int it = 0; it < config.iterations; ++it) {
    grad.w1.setZero();
    grad.w2.setZero();
    grad.w3.setZero();
    grad.b1.setZero();
    grad.b2.setZero();
    grad.b3.setZero();
    double batch_loss = 0.0;

    for (int b = 0; b < config.batch_size; ++b) {
      const std::size_t t = pick(rng);
      const Field& prev = data[t - 1];
      const Field& cur = data[t];
      const Field& next = data[t + 1];
      const double u_in = unit(rng);
      const double sigma = p.schedule.sigma(u_in);
      double sigma_out = 0.0;
      if (unit(rng) < config.sigma_out_fraction) sigma_out = p.schedule.sigma(u_in + (1.0 - u_in) * unit(rng));
      Field z = sample_noise(shape, sigma, rng);
      z += next;

      forward_pass(p, prev, cur, z, sigma, sigma_out, cache);
      const Field d = assemble_output(cache, z);
      const double w = loss_weight(sigma, p.sigma_data);
      const double n = double(d.size());
      Field cot(shape);
      double sq = 0.0;
      for (std::size_t i = 0; i < d.size(); ++i) {
        const double r = d[i] - next[i];
        sq += r * r;
        cot[i] = 2.0 * w * r / n;
      }
      batch_loss += w * sq / n;
      backward_signals(p, cache, cot, sig);
      accumulate_param_grad(p, cache, sig, 1.0 / config.batch_size, grad);
    }
    batch_loss /= config.batch_size;
    if (!std::isfinite(batch_loss))
      throw NumericalBlowup("training loss diverged at iteration " + std::to_string(it));

    if (config.clip_norm > 0.0) {
      const double norm = std::sqrt(grad.w1.squaredNorm() + grad.w2.squaredNorm() + grad.w3.squaredNorm() +
                                    grad.b1.squaredNorm() + grad.b2.squaredNorm() + grad.b3.squaredNorm());
      if (norm > config.clip_norm) {
        const double s = config.clip_norm / norm;
        grad.w1 *= s;
        grad.w2 *= s;
        grad.w3 *= s;
        grad.b1 *= s;
        grad.b2 *= s;
        grad.b3 *= s;
      }
    }

    auto update = [&](auto& param, auto& vel, const auto& g) {
      vel = config.momentum * vel + g;
      param -= config.learning_rate * vel;
    };
    update(p.w1, velocity.w1, grad.w1);
    update(p.b1, velocity.b1, grad.b1);
    update(p.w2, velocity.w2, grad.w2);
    update(p.b2, velocity.b2, grad.b2);
    update(p.w3, velocity.w3, grad.w3);
    update(p.b3, velocity.b3, grad.b3);
    if (!p.all_finite()) throw NumericalBlowup("parameters diverged at iteration " + std::to_string(it));

    result.loss_curve.push_back(batch_loss);
    if (on_iteration) on_iteration(it, batch_loss);
  }
  return result;
}

}  // namespace advobs
