#pragma once

// Denoising diffusion over latent tensors: linear noise schedule, the
// epsilon-prediction objective, the reverse posterior, and DDIM / ancestral
// samplers. Timesteps are 1-based; index 0 of every schedule array holds the
// t = 0 convention (alpha_bar_0 = 1).

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ldmi/autograd.hpp"
#include "ldmi/params.hpp"
#include "ldmi/rng.hpp"

namespace ldmi {

struct NoiseSchedule {
  std::size_t T = 0;
  std::vector<double> beta;           // [T + 1], beta[0] = 0
  std::vector<double> alpha;          // [T + 1], alpha[0] = 1
  std::vector<double> alpha_bar;      // [T + 1], alpha_bar[0] = 1
  std::vector<double> posterior_var;  // [T + 1], beta_tilde; [0] and [1] are 0
  double sigma1_sq = 0.0;             // terminal-step variance
};

/// kind must be "linear".
NoiseSchedule make_schedule(std::size_t T, const std::string& kind = "linear", double beta_start = 1e-4,
                            double beta_end = 2e-2);

/// sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps, elementwise.
std::vector<double> forward_diffuse(std::span<const double> z0, std::size_t t, std::span<const double> eps,
                                    const NoiseSchedule& sched);

/// (z_t - sqrt(1 - alpha_bar_t) eps_hat) / sqrt(alpha_bar_t).
std::vector<double> estimate_z0(std::span<const double> z_t, std::size_t t, std::span<const double> eps_hat,
                                const NoiseSchedule& sched);

struct PosteriorCoefficients {
  double c_z0;  // multiplies zhat0
  double c_zt;  // multiplies z_t
  double var;   // beta_tilde_t
};

PosteriorCoefficients posterior_coefficients(std::size_t t, const NoiseSchedule& sched);

struct PosteriorParams {
  std::vector<double> mean;
  double var;
};

/// Mean and variance of q(z_{t-1} | z_t, z0 = zhat0); requires 2 <= t <= T.
PosteriorParams ddpm_posterior_params(std::span<const double> z_t, std::span<const double> zhat0, std::size_t t,
                                      const NoiseSchedule& sched);

/// eps_theta(z_t, t): z_t is [B, ...], t holds one timestep per batch row.
using EpsModel = std::function<ag::Tensor(const ag::Tensor& z_t, const std::vector<std::size_t>& t)>;

/// Draws t ~ U{1..T} and eps ~ N(0, I) per batch row of z0 [B, ...] and
/// returns the mean over all elements of (eps - eps_theta(z_t, t))^2.
ag::Tensor ddpm_loss(const ag::Tensor& z0, const EpsModel& model, const NoiseSchedule& sched, Rng& rng);

/// Ascending DDIM ladder tau_i = 1 + floor(i * T / S), i = 0..S-1.
std::vector<std::size_t> ddim_timesteps(std::size_t T, std::size_t num_steps);

/// DDIM from the given initial noise z_T ([B, ...]); eta scales the
/// per-step noise, drawn from `rng` only when eta > 0. The last step
/// returns zhat0 (sigma_1 = 0).
ag::Tensor ddim_sample_from(const EpsModel& model, const NoiseSchedule& sched, std::size_t num_steps, double eta,
                            const ag::Tensor& initial_noise, Rng& rng);

/// DDIM with initial noise drawn from Rng(seed).
ag::Tensor ddim_sample(const EpsModel& model, const NoiseSchedule& sched, std::size_t num_steps, double eta,
                       std::uint64_t seed, const ag::Shape& shape);

/// Ancestral DDPM sampling through every t = T..1.
ag::Tensor ddpm_sample(const EpsModel& model, const NoiseSchedule& sched, std::uint64_t seed, const ag::Shape& shape);

/// Exact eps_theta for data distributed N(mu, s^2 I):
///   eps*(z_t) = sqrt(1 - a) (z_t - sqrt(a) mu) / (a s^2 + 1 - a),  a = alpha_bar_t.
EpsModel gaussian_oracle(const NoiseSchedule& sched, std::vector<double> mu, double s);

// Denoiser network.

struct DenoiserConfig {
  std::size_t latent_channels = 2;
  std::size_t base_channels = 32;
  std::vector<std::size_t> ch_mult{1, 2};
  std::size_t num_blocks = 2;
  std::size_t time_dim = 32;
};

void validate(const DenoiserConfig& config);

ShapeSpec denoiser_param_shapes(const DenoiserConfig& config);

struct DenoiserParams {
  DenoiserConfig config;
  ParamSet tensors;  // every name starts with "eps."
};

/// Output convolution starts at zero, so the untrained model predicts 0.
DenoiserParams init_denoiser(const DenoiserConfig& config, std::uint64_t seed);

/// Sinusoidal embedding [t.size(), dim] of integer timesteps.
ag::Tensor timestep_embedding(const std::vector<std::size_t>& t, std::size_t dim);

/// eps_theta over latents [B, C, H, W].
ag::Tensor denoiser_forward(const DenoiserParams& params, const ag::Tensor& z_t, const std::vector<std::size_t>& t);

EpsModel as_eps_model(const DenoiserParams& params);

}  // namespace ldmi
