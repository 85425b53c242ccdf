#pragma once

// Checkpoint archive: named tensors plus the config text that rebuilds
// their shapes, tagged with the training stage that produced them.
// Byte layout is documented in docs/checkpoint-format.md.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "ldmi/config.hpp"
#include "ldmi/params.hpp"

namespace ldmi {

enum class Stage : std::uint32_t { kIvae = 0, kLdmi = 1, kHypertransformed = 2 };

std::string_view stage_name(Stage stage);
Stage parse_stage(std::string_view name);

struct Checkpoint {
  Stage stage = Stage::kIvae;
  std::string config_text;
  ParamSet tensors;

  ModelConfig config() const { return parse_config(config_text); }
};

/// Names a checkpoint of the given stage must contain for `config`:
///   ivae             enc.*, hd.*, inr.*
///   ldmi             + eps.*
///   hypertransformed same as ldmi
std::vector<std::string> required_tensor_names(const ModelConfig& config, Stage stage);

/// Throws kIncompleteCheckpoint naming the first missing tensor, and
/// kShapeMismatch when a present tensor has the wrong shape.
void validate_checkpoint(const Checkpoint& ckpt);

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::string_view bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// FNV-1a over the serialized (name, tensor record) pairs whose names start
/// with `prefix`, in name order. Equal hashes mean bit-identical tensors.
std::uint64_t tensor_hash(const ParamSet& tensors, std::string_view prefix = "");

/// Throws kStageMismatch unless ckpt.stage is one of `allowed`.
void require_stage(const Checkpoint& ckpt, std::initializer_list<Stage> allowed, std::string_view operation);

// Base INR snapshot stored as inr.template.W{l} / inr.bias.b{l}.
void store_base_inr(ParamSet& tensors, const InrParams& base);
InrParams load_base_inr(const ParamSet& tensors, const InrConfig& config);

HdParams hd_params_from(const ParamSet& tensors);
EncoderParams encoder_params_from(const ParamSet& tensors, const ModelConfig& config);
DenoiserParams denoiser_params_from(const ParamSet& tensors, const ModelConfig& config);

}  // namespace ldmi
