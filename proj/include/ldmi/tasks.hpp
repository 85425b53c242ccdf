#pragma once

// Inference tasks over trained checkpoints: sampling at arbitrary
// resolution, reconstruction with PSNR, and masked completion.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "ldmi/checkpoint.hpp"
#include "ldmi/tensorio.hpp"

namespace ldmi {

/// Resolution multiplier relative to the training resolution.
struct ResolutionScale {
  double factor = 1.0;

  /// Per-axis sample counts round(factor * n); throws kInvalidArgument when
  /// a count would be zero.
  std::vector<std::size_t> apply(const std::vector<std::size_t>& resolution) const;
};

/// Accepts decimals ("0.5", "2") and ratios ("1/8").
ResolutionScale parse_scale(std::string_view text);

struct PsnrReport {
  double mse = 0.0;
  double psnr_db = 0.0;  // +inf when mse == 0

  /// psnr_db with "inf" for a perfect match.
  std::string psnr_string() const;
  /// Plain-text key=value lines.
  std::string to_text() const;
};

/// MSE over every value of a and b, PSNR against peak 1.
PsnrReport compute_psnr(std::span<const double> a, std::span<const double> b);

/// Evaluates Phi on the pixel-centre grid of `resolution` ({H, W}) and
/// clamps to [0, 1].
Image render(const InrParams& phi, const InrConfig& inr, const std::vector<std::size_t>& resolution);

/// FNV-1a of every weight and bias value of Phi.
std::uint64_t inr_params_hash(const InrParams& phi);

struct SampleOptions {
  std::size_t n = 1;
  ResolutionScale scale;
  std::size_t steps = 50;
  double eta = 0.0;
};

struct SampleResult {
  std::vector<Image> images;
  std::vector<std::vector<double>> latents;
  std::vector<std::uint64_t> phi_hashes;
};

/// Latents from DDIM, decoded to INRs and rendered at `scale`. The latent
/// draw depends only on (seed, n, steps, eta), not on the scale.
SampleResult sample(const Checkpoint& ckpt, const SampleOptions& options, std::uint64_t seed);

struct ReconstructResult {
  std::vector<Image> images;  // rendered at the requested scale
  PsnrReport psnr;            // native resolution, all signals pooled
};

/// Posterior mean by default; `sample_posterior` draws z instead.
ReconstructResult reconstruct(const Checkpoint& ckpt, const std::vector<Signal>& signals, ResolutionScale scale,
                              std::uint64_t seed, bool sample_posterior = false);

struct InpaintResult {
  std::vector<Image> images;
  std::vector<double> observed_mse;    // per sample, on observed pixels
  std::vector<double> unobserved_mse;  // per sample, on missing pixels (NaN when none)
};

/// Missing pixels are set to mid-gray (0.5) before encoding; each sample
/// decodes an independent posterior draw.
InpaintResult inpaint(const Checkpoint& ckpt, const Signal& signal, const Mask& mask, std::size_t n_samples,
                      std::uint64_t seed);

}  // namespace ldmi
