#pragma once

// Training entry points:
//   train_stage1     encoder + hyper-transformer decoder on the ELBO
//   train_stage2     denoiser on posterior samples, encoder and decoder frozen
//   hyper_transform  fresh decoder on the decoded log-likelihood, encoder and
//                    denoiser frozen
// Each is a deterministic function of (dataset, config, seed).

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "ldmi/checkpoint.hpp"
#include "ldmi/config.hpp"
#include "ldmi/tensorio.hpp"

namespace ldmi {

class Adam {
 public:
  Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  /// Updates every tensor in `params` from its accumulated gradient; a
  /// tensor without a gradient is treated as having a zero gradient.
  void step(ParamSet& params);
  std::size_t steps() const { return t_; }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  double lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::map<std::string, Moments, std::less<>> state_;
};

/// Rescales all gradients so their global L2 norm is at most max_norm;
/// returns the norm before clipping.
double clip_grad_norm(ParamSet& params, double max_norm);

/// Cycles through shuffled permutations of [0, n).
class BatchSampler {
 public:
  BatchSampler(std::size_t n, Rng& rng);
  std::vector<std::size_t> next(std::size_t batch_size);

 private:
  void reshuffle();
  std::size_t n_;
  Rng& rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

/// One optimizer step. Stage 1 loss is the negative ELBO per signal with
/// the Gaussian normalizing constant dropped; stage 2 loss is the
/// denoising MSE; hyper-transform loss is the negative log-likelihood
/// without the constant. kl and recon are zero where they do not apply.
struct TraceRow {
  std::size_t step = 0;
  double loss = 0.0;
  double kl = 0.0;
  double recon = 0.0;
};

struct TrainResult {
  Checkpoint ckpt;
  std::vector<TraceRow> trace;
};

using StepCallback = std::function<void(const TraceRow&)>;

TrainResult train_stage1(const Dataset& dataset, const ModelConfig& config, std::uint64_t seed,
                         const StepCallback& on_step = {});

/// `config` must share the checkpoint's architecture; its [train] section
/// drives optimization.
TrainResult train_stage2(const Dataset& dataset, const Checkpoint& ivae, const ModelConfig& config,
                         std::uint64_t seed, const StepCallback& on_step = {});

TrainResult hyper_transform(const Dataset& dataset, const Checkpoint& frozen, const ModelConfig& config,
                            std::uint64_t seed, const StepCallback& on_step = {});

/// CSV with header "step,loss,kl,recon" (or "step,loss" without the
/// ELBO terms).
void write_trace_csv(const std::filesystem::path& path, const std::vector<TraceRow>& trace, bool elbo_terms);

/// Mean of the first and last `window` losses.
double trace_head_mean(const std::vector<TraceRow>& trace, std::size_t window);
double trace_tail_mean(const std::vector<TraceRow>& trace, std::size_t window);

/// Selected dataset items as an image batch [rows, C, H, W].
ag::Tensor dataset_images(const Dataset& dataset, const std::vector<std::size_t>& rows);

}  // namespace ldmi
