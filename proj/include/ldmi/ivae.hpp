#pragma once

// I-VAE: convolutional Gaussian encoder q(z | Y) paired with the
// hyper-transformer decoder, trained on a beta-weighted ELBO.

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "ldmi/autograd.hpp"
#include "ldmi/hyperdecoder.hpp"
#include "ldmi/inr.hpp"
#include "ldmi/params.hpp"
#include "ldmi/tensorio.hpp"

namespace ldmi {

inline constexpr double kLogvarMin = -30.0;
inline constexpr double kLogvarMax = 20.0;

/// conv_in -> per level: num_blocks residual blocks, stride-2 downsample
/// between levels -> SiLU -> 1x1 head emitting mean and log-variance.
struct EncoderConfig {
  std::size_t res_h = 16;
  std::size_t res_w = 16;
  std::size_t in_channels = 1;
  std::size_t latent_channels = 2;
  std::size_t base_channels = 16;
  std::vector<std::size_t> ch_mult{1, 2, 2};
  std::size_t num_blocks = 1;

  std::size_t latent_h() const;
  std::size_t latent_w() const;
};

void validate(const EncoderConfig& config);

ShapeSpec encoder_param_shapes(const EncoderConfig& config);

struct EncoderParams {
  EncoderConfig config;
  ParamSet tensors;  // every name starts with "enc."
};

EncoderParams init_encoder(const EncoderConfig& config, std::uint64_t seed);

/// Mean and log-variance, each [latent_channels, latent_h, latent_w].
struct GaussianPosterior {
  ag::Tensor mean;
  ag::Tensor logvar;
};

/// Signal features (points x channels, row-major pixels) as [C, H, W].
ag::Tensor signal_to_chw(const Signal& signal);

/// Batched encoder over images [B, C, H, W]; the log-variance is clamped to
/// [kLogvarMin, kLogvarMax]. Outputs are [B, d_z, h, w].
GaussianPosterior encode_images(const ag::Tensor& images, const EncoderParams& params);

/// Single-signal encoding; throws kResolutionMismatch when the signal does
/// not match the encoder's input resolution.
GaussianPosterior encode(const Signal& signal, const EncoderParams& params);

/// Item b of a batched posterior.
GaussianPosterior posterior_item(const GaussianPosterior& batch, std::size_t b);

/// z = mean + exp(logvar / 2) * noise.
ag::Tensor sample_posterior(const GaussianPosterior& post, const ag::Tensor& noise);

/// KL(q || N(0, I)) = 0.5 * sum(mu^2 + sigma^2 - 1 - ln sigma^2).
ag::Tensor kl_standard_normal(const GaussianPosterior& post);

/// Optional extra loss on (prediction, target); an empty hook adds nothing.
using ExtraLossHook = std::function<ag::Tensor(const ag::Tensor& pred, const ag::Tensor& target)>;

/// Differentiable ELBO pieces for one signal.
struct ElboTerms {
  ag::Tensor recon_logprob;
  ag::Tensor kl;
  ag::Tensor total;  // recon_logprob - beta * kl - extra
};

struct ElboReport {
  double recon_logprob = 0.0;
  double kl = 0.0;
  double beta = 0.0;
  double total = 0.0;
};

/// ELBO of `target` ([points, feat_dim]) decoded on `coords` from one
/// posterior draw z = sample_posterior(post, noise).
ElboTerms elbo_terms(const GaussianPosterior& post, const ag::Tensor& noise, const ag::Tensor& coords,
                     const ag::Tensor& target, const HdParams& hd, const HdConfig& hd_config,
                     const InrConfig& inr, double beta, const ExtraLossHook& extra = {});

ElboReport elbo(const Signal& signal, const EncoderParams& enc, const HdParams& hd, const HdConfig& hd_config,
                const InrConfig& inr, double beta, std::span<const double> noise,
                const ExtraLossHook& extra = {});

}  // namespace ldmi
