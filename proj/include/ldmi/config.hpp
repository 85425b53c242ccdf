#pragma once

// Text model configuration: UTF-8 key=value lines grouped under the
// sections [encoder] [hd] [inr] [diffusion] [train]. '#' starts a comment.
// Unknown sections and keys are rejected; missing keys keep their defaults.

#include <string>
#include <string_view>
#include <vector>

#include "ldmi/diffusion.hpp"
#include "ldmi/hyperdecoder.hpp"
#include "ldmi/inr.hpp"
#include "ldmi/ivae.hpp"

namespace ldmi {

struct DiffusionConfig {
  std::size_t diffusion_steps = 1000;
  std::string noise_schedule = "linear";
  double beta_start = 1e-4;
  double beta_end = 2e-2;
  std::size_t base_channels = 32;
  std::vector<std::size_t> ch_mult{1, 2};
  std::size_t num_blocks = 2;
  std::size_t time_dim = 32;
};

struct TrainConfig {
  std::size_t batch_size = 16;
  /// Stage 1 and hyper-transforming use the first value, stage 2 the last.
  std::vector<std::size_t> iterations{3000, 3000};
  std::vector<double> lr{1e-3, 1e-3};
  double kl_weight = 1e-5;
  double grad_clip = 1.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  std::size_t stage1_iterations() const { return iterations.front(); }
  std::size_t stage2_iterations() const { return iterations.back(); }
  double stage1_lr() const { return lr.front(); }
  double stage2_lr() const { return lr.back(); }
};

struct ModelConfig {
  EncoderConfig encoder;
  HdConfig hd;
  InrConfig inr;
  DiffusionConfig diffusion;
  TrainConfig train;
};

/// Parses and validates. Syntax and range errors throw kInvalidConfig.
ModelConfig parse_config(std::string_view text);
ModelConfig load_config(const std::string& path);

/// Canonical text form; parse_config(serialize_config(c)) reproduces c.
std::string serialize_config(const ModelConfig& config);

/// Cross-section consistency: latent shape, channel counts, ranges.
void validate(const ModelConfig& config);

/// Shapes are fully determined by these sections; training settings may
/// differ between two configs that share a checkpoint.
bool same_architecture(const ModelConfig& a, const ModelConfig& b);

DenoiserConfig denoiser_config(const ModelConfig& config);
NoiseSchedule make_schedule(const DiffusionConfig& config);

}  // namespace ldmi
