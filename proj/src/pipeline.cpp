#include "ldmi/pipeline.hpp"

#include <cmath>
#include <fstream>
#include <numbers>

#include "ldmi/error.hpp"

namespace ldmi {
namespace {

struct Seeds {
  std::uint64_t init, train;
};

Seeds seeds_for(std::uint64_t seed) { return {Rng::derive(seed, "init"), Rng::derive(seed, "train")}; }

void check_dataset(const Dataset& dataset, const ModelConfig& config) {
  if (dataset.items.empty()) throw Error(ErrorCode::kInvalidArgument, "dataset is empty");
  const EncoderConfig& e = config.encoder;
  if (dataset.resolution != std::vector<std::size_t>{e.res_h, e.res_w} || dataset.feat_dim != e.in_channels)
    throw Error(ErrorCode::kResolutionMismatch, "dataset is " + ag::shape_str(dataset.resolution) + "x" +
                                                    std::to_string(dataset.feat_dim) + ", config expects " +
                                                    std::to_string(e.res_h) + "x" + std::to_string(e.res_w) + "x" +
                                                    std::to_string(e.in_channels));
}

void check_architecture(const Checkpoint& ckpt, const ModelConfig& config) {
  if (!same_architecture(ckpt.config(), config))
    throw Error(ErrorCode::kInvalidConfig, "config architecture differs from the checkpoint's");
}

void check_finite(double loss, std::size_t step) {
  if (!std::isfinite(loss))
    throw Error(ErrorCode::kDivergence, "loss became non-finite at step " + std::to_string(step));
}

/// Sum over points and features of ln(sigma sqrt(2 pi)): the part of the
/// negative log-likelihood no parameter can change.
double nll_constant(const Dataset& dataset, const InrConfig& inr) {
  const double per = std::log(inr.sigma * std::sqrt(2.0 * std::numbers::pi));
  return per * static_cast<double>(dataset.items.front().features.size());
}

/// Posterior parameters of every dataset item, computed once with the
/// frozen encoder.
struct FrozenPosteriors {
  ag::Shape latent;  // [C, h, w]
  std::vector<std::vector<double>> mean, logvar;
};

FrozenPosteriors encode_all(const Dataset& dataset, const EncoderParams& enc) {
  ag::NoGradGuard no_grad;
  FrozenPosteriors out;
  constexpr std::size_t kChunk = 32;
  for (std::size_t start = 0; start < dataset.items.size(); start += kChunk) {
    std::vector<std::size_t> rows;
    for (std::size_t i = start; i < std::min(dataset.items.size(), start + kChunk); ++i) rows.push_back(i);
    GaussianPosterior post = encode_images(dataset_images(dataset, rows), enc);
    for (std::size_t b = 0; b < rows.size(); ++b) {
      GaussianPosterior item = posterior_item(post, b);
      out.latent = item.mean.shape();
      out.mean.push_back(item.mean.to_vector());
      out.logvar.push_back(item.logvar.to_vector());
    }
  }
  return out;
}

std::vector<double> draw_latent(const FrozenPosteriors& post, std::size_t i, Rng& rng) {
  const auto& m = post.mean[i];
  const auto& lv = post.logvar[i];
  std::vector<double> z(m.size());
  for (std::size_t j = 0; j < z.size(); ++j) z[j] = m[j] + std::exp(0.5 * lv[j]) * rng.normal();
  return z;
}

ag::Tensor coords_tensor(const Signal& s) { return ag::Tensor::constant({s.num_points(), s.coord_dim}, s.coords); }

ag::Tensor target_tensor(const Signal& s) { return ag::Tensor::constant({s.num_points(), s.feat_dim}, s.features); }

void verify_frozen(const ParamSet& before, const ParamSet& after, std::string_view prefix) {
  if (tensor_hash(before, prefix) != tensor_hash(after, prefix))
    throw Error(ErrorCode::kStageMismatch, "frozen parameters " + std::string(prefix) + "* changed during training");
}

}  // namespace

Adam::Adam(double lr, double beta1, double beta2, double eps) : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void Adam::step(ParamSet& params) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (const auto& [name, tensor] : params) {
    ag::Tensor p = tensor;
    auto it = state_.find(name);
    if (it == state_.end())
      it = state_.emplace(name, Moments{std::vector<double>(p.numel(), 0.0), std::vector<double>(p.numel(), 0.0)})
               .first;
    Moments& s = it->second;
    std::span<const double> g = p.grad();
    std::span<double> w = p.mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g.empty() ? 0.0 : g[i];
      s.m[i] = beta1_ * s.m[i] + (1.0 - beta1_) * gi;
      s.v[i] = beta2_ * s.v[i] + (1.0 - beta2_) * gi * gi;
      w[i] -= lr_ * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + eps_);
    }
  }
}

double clip_grad_norm(ParamSet& params, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, t] : params)
    for (double g : t.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && std::isfinite(norm)) {
    const double f = max_norm / norm;
    for (const auto& [name, t] : params)
      for (double& g : t.node()->grad) g *= f;
  }
  return norm;
}

BatchSampler::BatchSampler(std::size_t n, Rng& rng) : n_(n), rng_(rng), order_(n) { reshuffle(); }

void BatchSampler::reshuffle() {
  for (std::size_t i = 0; i < n_; ++i) order_[i] = i;
  for (std::size_t i = n_; i-- > 1;) {
    const auto j = static_cast<std::size_t>(rng_.uniform_int(0, static_cast<int>(i)));
    std::swap(order_[i], order_[j]);
  }
  pos_ = 0;
}

std::vector<std::size_t> BatchSampler::next(std::size_t batch_size) {
  std::vector<std::size_t> out;
  while (out.size() < batch_size) {
    if (pos_ == n_) reshuffle();
    out.push_back(order_[pos_++]);
  }
  return out;
}

ag::Tensor dataset_images(const Dataset& dataset, const std::vector<std::size_t>& rows) {
  const std::size_t h = dataset.resolution.at(0), w = dataset.resolution.at(1), c = dataset.feat_dim;
  std::vector<double> values;
  values.reserve(rows.size() * c * h * w);
  for (std::size_t r : rows) {
    const ag::Tensor chw = signal_to_chw(dataset.items.at(r));
    values.insert(values.end(), chw.data().begin(), chw.data().end());
  }
  return ag::Tensor::constant({rows.size(), c, h, w}, std::move(values));
}

TrainResult train_stage1(const Dataset& dataset, const ModelConfig& config, std::uint64_t seed,
                         const StepCallback& on_step) {
  validate(config);
  check_dataset(dataset, config);
  const Seeds s = seeds_for(seed);
  const Rng init(s.init);
  EncoderParams enc = init_encoder(config.encoder, init.substream("enc").seed());
  InrParams base = init_inr(config.inr, init.substream("inr").seed());
  HdParams hd = init_hd(config.hd, config.inr, base, init.substream("hd").seed());

  ParamSet trainable = enc.tensors;
  trainable.merge(hd.tensors);
  const TrainConfig& tc = config.train;
  Adam adam(tc.stage1_lr(), tc.adam_beta1, tc.adam_beta2, tc.adam_eps);
  Rng rng(s.train);
  BatchSampler sampler(dataset.items.size(), rng);
  const ag::Tensor coords = coords_tensor(dataset.items.front());
  const double constant = nll_constant(dataset, config.inr);

  TrainResult result;
  for (std::size_t step = 1; step <= tc.stage1_iterations(); ++step) {
    const std::vector<std::size_t> rows = sampler.next(tc.batch_size);
    GaussianPosterior post = encode_images(dataset_images(dataset, rows), enc);
    ag::Tensor total;
    double kl = 0.0, recon = 0.0;
    for (std::size_t b = 0; b < rows.size(); ++b) {
      GaussianPosterior item = posterior_item(post, b);
      ag::Tensor noise = ag::Tensor::constant(item.mean.shape(), rng.normal_vector(item.mean.numel()));
      ElboTerms t = elbo_terms(item, noise, coords, target_tensor(dataset.items[rows[b]]), hd, config.hd, config.inr,
                               tc.kl_weight);
      total = total.defined() ? ag::add(total, t.total) : t.total;
      kl += t.kl.item();
      recon += t.recon_logprob.item();
    }
    const double inv_b = 1.0 / static_cast<double>(rows.size());
    ag::Tensor loss = ag::scale(total, -inv_b);
    TraceRow row{step, loss.item() - constant, kl * inv_b, recon * inv_b};
    check_finite(row.loss, step);
    loss.backward();
    clip_grad_norm(trainable, tc.grad_clip);
    adam.step(trainable);
    trainable.zero_grad();
    result.trace.push_back(row);
    if (on_step) on_step(row);
  }

  result.ckpt.stage = Stage::kIvae;
  result.ckpt.config_text = serialize_config(config);
  result.ckpt.tensors = trainable;
  store_base_inr(result.ckpt.tensors, base);
  validate_checkpoint(result.ckpt);
  return result;
}

TrainResult train_stage2(const Dataset& dataset, const Checkpoint& ivae, const ModelConfig& config,
                         std::uint64_t seed, const StepCallback& on_step) {
  require_stage(ivae, {Stage::kIvae}, "train-diffusion");
  validate(config);
  check_architecture(ivae, config);
  check_dataset(dataset, config);
  const ParamSet frozen = ivae.tensors.clone();
  const FrozenPosteriors posts = encode_all(dataset, encoder_params_from(frozen, config));

  const Seeds s = seeds_for(seed);
  DenoiserParams eps = init_denoiser(denoiser_config(config), Rng(s.init).substream("eps").seed());
  const NoiseSchedule sched = make_schedule(config.diffusion);
  const EpsModel model = as_eps_model(eps);
  const TrainConfig& tc = config.train;
  Adam adam(tc.stage2_lr(), tc.adam_beta1, tc.adam_beta2, tc.adam_eps);
  Rng rng(s.train);
  BatchSampler sampler(dataset.items.size(), rng);

  ag::Shape batch_shape{tc.batch_size};
  batch_shape.insert(batch_shape.end(), posts.latent.begin(), posts.latent.end());
  TrainResult result;
  for (std::size_t step = 1; step <= tc.stage2_iterations(); ++step) {
    std::vector<double> z0;
    for (std::size_t i : sampler.next(tc.batch_size)) {
      const std::vector<double> z = draw_latent(posts, i, rng);
      z0.insert(z0.end(), z.begin(), z.end());
    }
    ag::Tensor loss = ddpm_loss(ag::Tensor::constant(batch_shape, std::move(z0)), model, sched, rng);
    TraceRow row{step, loss.item(), 0.0, 0.0};
    check_finite(row.loss, step);
    loss.backward();
    clip_grad_norm(eps.tensors, tc.grad_clip);
    adam.step(eps.tensors);
    eps.tensors.zero_grad();
    result.trace.push_back(row);
    if (on_step) on_step(row);
  }

  result.ckpt.stage = Stage::kLdmi;
  result.ckpt.config_text = ivae.config_text;
  result.ckpt.tensors = frozen;
  result.ckpt.tensors.merge(eps.tensors);
  for (const char* prefix : {"enc.", "hd.", "inr."}) verify_frozen(ivae.tensors, result.ckpt.tensors, prefix);
  validate_checkpoint(result.ckpt);
  return result;
}

TrainResult hyper_transform(const Dataset& dataset, const Checkpoint& frozen_ckpt, const ModelConfig& config,
                            std::uint64_t seed, const StepCallback& on_step) {
  require_stage(frozen_ckpt, {Stage::kLdmi}, "hyper-transform");
  validate(config);
  check_architecture(frozen_ckpt, config);
  check_dataset(dataset, config);
  const ParamSet frozen = frozen_ckpt.tensors.clone();
  const FrozenPosteriors posts = encode_all(dataset, encoder_params_from(frozen, config));

  const Seeds s = seeds_for(seed);
  const InrParams base = load_base_inr(frozen, config.inr);
  HdParams hd = init_hd(config.hd, config.inr, base, Rng(s.init).substream("hd").seed());
  const TrainConfig& tc = config.train;
  Adam adam(tc.stage1_lr(), tc.adam_beta1, tc.adam_beta2, tc.adam_eps);
  Rng rng(s.train);
  BatchSampler sampler(dataset.items.size(), rng);
  const ag::Tensor coords = coords_tensor(dataset.items.front());
  const double constant = nll_constant(dataset, config.inr);

  TrainResult result;
  for (std::size_t step = 1; step <= tc.stage1_iterations(); ++step) {
    const std::vector<std::size_t> rows = sampler.next(tc.batch_size);
    ag::Tensor total;
    for (std::size_t i : rows) {
      ag::Tensor z = ag::Tensor::constant(posts.latent, draw_latent(posts, i, rng));
      InrParams phi = generate_inr_params(z, hd, config.hd, config.inr);
      ag::Tensor ll = likelihood_logprob(inr_forward(phi, coords, config.inr), target_tensor(dataset.items[i]),
                                         config.inr.sigma);
      total = total.defined() ? ag::add(total, ll) : ll;
    }
    const double inv_b = 1.0 / static_cast<double>(rows.size());
    ag::Tensor loss = ag::scale(total, -inv_b);
    TraceRow row{step, loss.item() - constant, 0.0, -loss.item()};
    check_finite(row.loss, step);
    loss.backward();
    clip_grad_norm(hd.tensors, tc.grad_clip);
    adam.step(hd.tensors);
    hd.tensors.zero_grad();
    result.trace.push_back(row);
    if (on_step) on_step(row);
  }

  result.ckpt.stage = Stage::kHypertransformed;
  result.ckpt.config_text = frozen_ckpt.config_text;
  for (const auto& [name, t] : frozen)
    if (!name.starts_with("hd.")) result.ckpt.tensors.add(name, t);
  result.ckpt.tensors.merge(hd.tensors);
  for (const char* prefix : {"enc.", "eps.", "inr."}) verify_frozen(frozen_ckpt.tensors, result.ckpt.tensors, prefix);
  validate_checkpoint(result.ckpt);
  return result;
}

void write_trace_csv(const std::filesystem::path& path, const std::vector<TraceRow>& trace, bool elbo_terms) {
  std::string out = elbo_terms ? "step,loss,kl,recon\n" : "step,loss\n";
  char buf[128];
  for (const auto& r : trace) {
    if (elbo_terms)
      std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g\n", r.step, r.loss, r.kl, r.recon);
    else
      std::snprintf(buf, sizeof buf, "%zu,%.17g\n", r.step, r.loss);
    out += buf;
  }
  write_file_bytes(path, out);
}

double trace_head_mean(const std::vector<TraceRow>& trace, std::size_t window) {
  const std::size_t n = std::min(window, trace.size());
  if (n == 0) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) sum += trace[i].loss;
  return sum / static_cast<double>(n);
}

double trace_tail_mean(const std::vector<TraceRow>& trace, std::size_t window) {
  const std::size_t n = std::min(window, trace.size());
  if (n == 0) return 0.0;
  double sum = 0.0;
  for (std::size_t i = trace.size() - n; i < trace.size(); ++i) sum += trace[i].loss;
  return sum / static_cast<double>(n);
}

}  // namespace ldmi
