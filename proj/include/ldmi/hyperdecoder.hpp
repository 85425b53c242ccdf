#pragma once

// Hyper-Transformer Decoder: latent tensor -> INR weights.
//
//   z [C, H, W] --patches--> tokens --self-attention stack--> latent tokens
//   weight queries --(self + cross-attention stack)--> output tokens
//   output tokens of layer l --head_l--> grouped weights W^o_l [d_out, G_l]
//   W_l[:, c] = R(W^o_l[:, ceil(c / k)], template_l[:, c]),  k = d_in / G_l
//
// Biases are global parameters and do not depend on z.

#include <cstdint>
#include <vector>

#include "ldmi/autograd.hpp"
#include "ldmi/inr.hpp"
#include "ldmi/params.hpp"

namespace ldmi {

enum class ReconMode { kScale, kNorm };

/// Columns whose modulated norm falls below this make norm mode fail.
inline constexpr double kDegenerateNormThreshold = 1e-12;

struct HdConfig {
  std::size_t latent_h = 4;
  std::size_t latent_w = 4;
  std::size_t latent_channels = 2;
  std::size_t patch_size = 1;
  std::size_t token_dim = 64;
  std::size_t encoder_layers = 2;
  std::size_t decoder_layers = 2;
  std::size_t heads = 2;
  std::size_t head_dim = 32;
  std::size_t feedforward_dim = 128;
  std::size_t groups = 8;
  ReconMode recon_mode = ReconMode::kScale;
};

void validate(const HdConfig& hd, const InrConfig& inr);

/// Number of latent tokens, H*W / P^2.
std::size_t token_count(const HdConfig& hd);

/// Groups used for a layer with d_in input columns: min(groups, d_in).
std::size_t layer_groups(const HdConfig& hd, std::size_t d_in);

/// Weight-query count per generated INR layer.
std::vector<std::size_t> group_counts(const HdConfig& hd, const InrConfig& inr);

ShapeSpec hd_param_shapes(const HdConfig& hd, const InrConfig& inr);

struct HdParams {
  ParamSet tensors;  // every name starts with "hd."
};

/// Fresh decoder parameters. Templates and global biases are copied from
/// `base` (an initialized INR of the configured shape).
HdParams init_hd(const HdConfig& hd, const InrConfig& inr, const InrParams& base, std::uint64_t seed);

struct TokenSequence {
  ag::Tensor tokens;  // [length, token_dim]

  std::size_t length() const { return tokens.dim(0); }
};

/// Per-head attention probabilities captured during a forward pass, one
/// entry per attention call, each laid out [heads, queries, keys].
struct AttentionTrace {
  struct Entry {
    std::size_t heads, queries, keys;
    std::vector<double> probs;
  };
  std::vector<Entry> entries;
};

/// Non-overlapping P x P patches of z [C, H, W] in row-major patch order,
/// each flattened as (dy, dx, c): result [N, P*P*C].
ag::Tensor patchify(const ag::Tensor& z, std::size_t patch_size);

/// Shared linear projection of every patch, plus learned positions when
/// `add_position` is set.
TokenSequence tokenize(const ag::Tensor& z, const HdParams& params, const HdConfig& hd,
                       bool add_position = true);

/// Pre-norm self-attention blocks; identity when encoder_layers is 0.
TokenSequence encoder_forward(const TokenSequence& tokens, const HdParams& params, const HdConfig& hd,
                              AttentionTrace* trace = nullptr);

/// The learnable weight queries of every generated layer, stacked.
ag::Tensor initial_queries(const HdParams& params, const HdConfig& hd, const InrConfig& inr);

struct DecoderOutput {
  TokenSequence tokens;              // after the final norm
  std::vector<ag::Tensor> grouped;   // W^o_l, [d_out, G_l]
};

/// Pre-norm decoder blocks (self-attention over queries, cross-attention
/// into latent tokens, feedforward), then per-layer output heads. A
/// cross_mask restricts which latent tokens may be attended.
DecoderOutput decoder_forward(const ag::Tensor& queries, const TokenSequence& latent, const HdParams& params,
                              const HdConfig& hd, const InrConfig& inr,
                              const std::vector<bool>* cross_mask = nullptr,
                              AttentionTrace* trace = nullptr);

/// Expands grouped [d_out, G] to [d_out, d_in] and combines it with the
/// template. Column c (1-based) uses group ceil(c / k).
///   scale: w_c = (1 + w^o) * template_c
///   norm : w_c = (w^o * template_c) / ||w^o * template_c||
ag::Tensor reconstruct_weights(const ag::Tensor& grouped, const ag::Tensor& templ, ReconMode mode);

/// Full pipeline Phi = g(z).
InrParams generate_inr_params(const ag::Tensor& z, const HdParams& params, const HdConfig& hd,
                              const InrConfig& inr);

struct ParamAccounting {
  std::size_t hd_params = 0;
  std::size_t inr_weights = 0;
  std::size_t weight_queries = 0;

  double ratio() const { return static_cast<double>(inr_weights) / static_cast<double>(hd_params); }
};

ParamAccounting param_accounting(const HdConfig& hd, const InrConfig& inr);

}  // namespace ldmi
