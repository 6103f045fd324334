#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <vector>

#include <Eigen/Dense>

#include "advobs/grid.hpp"
#include "advobs/random.hpp"
#include "advobs/synth.hpp"

namespace advobs {

// Geometric noise levels: sigma(u) = sigma_max * (sigma_min / sigma_max)^u.
struct NoiseSchedule {
  double sigma_min = 0.02;
  double sigma_max = 80.0;
  int n_full = 20;

  double sigma(double u) const;
  // Inverse of sigma(u); not clamped.
  double position(double sigma) const;
  // Deterministic mid-quantile levels sigma((k + 1/2) / n), k = 0..n-1.
  std::vector<double> mid_quantile_levels(int n) const;
  void validate() const;
};

// sigma(u) with u ~ U[a, b). Throws BadInterval unless 0 <= a < b <= 1.
double sample_sigma(const NoiseSchedule& schedule, double a, double b, Rng& rng);

// I.i.d. N(0, sigma^2) per cell and channel.
Field sample_noise(const Shape& shape, double sigma, Rng& rng);

struct Preconditioning {
  double c_skip;
  double c_out;
  double c_in;
};

// c_skip = sd^2 / (s^2 + sd^2), c_out = s sd / sqrt(s^2 + sd^2),
// c_in = 1 / sqrt(s^2 + sd^2).
Preconditioning precondition(double sigma, double sigma_data);

// Weight making the single-step denoising loss unit-scaled across sigma.
double loss_weight(double sigma, double sigma_data);

// Local-stencil denoiser. Per cell, the network sees the 3x3 neighbourhood
// (periodic in longitude, zero-padded past the poles) of the previous state,
// the current state and the c_in-scaled noisy estimate, plus a noise
// embedding; two tanh hidden layers; a linear output with one channel per
// variable.
struct DenoiserParams {
  static constexpr int kEmbedding = 4;

  int n_var = 0;
  int hidden = 0;
  double sigma_data = 1.0;
  NoiseSchedule schedule;
  Eigen::MatrixXd w1, w2, w3;
  Eigen::VectorXd b1, b2, b3;

  int n_features() const { return 27 * n_var + kEmbedding; }
  std::size_t n_parameters() const;

  static DenoiserParams zeros(int n_var, int hidden, NoiseSchedule schedule = {}, double sigma_data = 1.0);
  // Glorot-uniform weights, zero biases.
  static DenoiserParams random(int n_var, int hidden, std::uint64_t seed, NoiseSchedule schedule = {},
                               double sigma_data = 1.0);

  // Flat view in serialization order: w1, b1, w2, b2, w3, b3 (row-major).
  std::vector<double> flatten() const;
  void unflatten(const std::vector<double>& flat);
  bool all_finite() const;
  void validate() const;
};

// (ln s_in / 4, ln(s_out + 1e-3) / 4, sin(pi u_in), cos(pi u_in)), u_in the
// schedule position of s_in.
std::array<double, DenoiserParams::kEmbedding> noise_embedding(const NoiseSchedule& schedule, double sigma_in,
                                                               double sigma_out);

// Clean-state estimate D = c_skip Z + c_out net(prev, cur, c_in Z, emb).
// Throws ShapeMismatch.
Field denoiser_forward(const DenoiserParams& params, const Field& prev, const Field& cur, const Field& z,
                       double sigma_in, double sigma_out = 0.0);

// Z_next = D + (sigma_next / sigma_i)(Z_i - D); exactly D when sigma_next == 0.
// Throws BadNoiseOrder unless 0 <= sigma_next < sigma_i.
Field denoise_step(const DenoiserParams& params, const Field& prev, const Field& cur, const Field& z,
                   double sigma_i, double sigma_next);

struct StateGradients {
  Field prev;
  Field cur;
  Field z;
};

// Gradient of <cotangent, denoiser_forward(...)> with respect to each state.
StateGradients denoiser_vjp(const DenoiserParams& params, const Field& prev, const Field& cur, const Field& z,
                            double sigma_in, double sigma_out, const Field& cotangent);

// Same for denoise_step.
StateGradients denoise_step_vjp(const DenoiserParams& params, const Field& prev, const Field& cur,
                                const Field& z, double sigma_i, double sigma_next, const Field& cotangent);

// Gradient of <cotangent, denoiser_forward(...)> with respect to the
// parameters, laid out like `params` (schedule and sizes copied).
DenoiserParams param_grad(const DenoiserParams& params, const Field& prev, const Field& cur, const Field& z,
                          double sigma_in, double sigma_out, const Field& cotangent);

struct TrainConfig {
  double learning_rate = 0.02;
  double momentum = 0.9;
  int batch_size = 8;
  int iterations = 3000;
  double sigma_data = 1.0;
  std::uint64_t seed = 7;
  // Gradient-norm clip; non-positive disables it.
  double clip_norm = 5.0;
  // Fraction of examples trained with a nonzero output level sigma_out.
  double sigma_out_fraction = 0.5;

  void validate() const;
};

struct TrainResult {
  DenoiserParams params;
  std::vector<double> loss_curve;
};

// One training example: the two conditioning states and the target state,
// all in normalized units.
struct TrainingTriple {
  const Field* prev;
  const Field* cur;
  const Field* next;
};

// Weighted single-step denoising loss lambda(s) ||D(prev, cur, next + n, s) - next||^2
// averaged over cells and channels; also used as the validation metric.
double denoising_loss(const DenoiserParams& params, const TrainingTriple& ex, const Field& noise, double sigma,
                      double sigma_out = 0.0);

// SGD with momentum on the single-step denoising objective. Deterministic in
// config.seed. Throws InsufficientData or NumericalBlowup.
TrainResult train(const DenoiserParams& init, const std::vector<Field>& normalized_train,
                  const TrainConfig& config,
                  const std::function<void(int, double)>& on_iteration = {});

}  // namespace advobs
