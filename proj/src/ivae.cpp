#include "ldmi/ivae.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "ldmi/error.hpp"
#include "ldmi/rng.hpp"

namespace ldmi {
namespace {

std::size_t halve(std::size_t n) { return (n + 1) / 2; }

std::size_t level_channels(const EncoderConfig& c, std::size_t level) {
  return c.base_channels * c.ch_mult[level];
}

void add_conv(ShapeSpec& spec, const std::string& prefix, std::size_t out, std::size_t in, std::size_t k) {
  spec.emplace_back(prefix + ".W", ag::Shape{out, in, k, k});
  spec.emplace_back(prefix + ".b", ag::Shape{out});
}

ag::Tensor conv(const ag::Tensor& x, const ParamSet& p, const std::string& prefix, std::size_t stride = 1) {
  const ag::Tensor& w = p.at(prefix + ".W");
  return ag::conv2d(x, w, p.at(prefix + ".b"), stride, w.dim(2) / 2);
}

std::string block_name(std::size_t level, std::size_t block) {
  return "enc.down" + std::to_string(level) + ".block" + std::to_string(block);
}

}  // namespace

std::size_t EncoderConfig::latent_h() const {
  std::size_t h = res_h;
  for (std::size_t i = 1; i < ch_mult.size(); ++i) h = halve(h);
  return h;
}

std::size_t EncoderConfig::latent_w() const {
  std::size_t w = res_w;
  for (std::size_t i = 1; i < ch_mult.size(); ++i) w = halve(w);
  return w;
}

void validate(const EncoderConfig& c) {
  auto fail = [](const std::string& msg) { throw Error(ErrorCode::kInvalidConfig, msg); };
  if (c.res_h < 1 || c.res_w < 1) fail("encoder resolution must be at least 1x1");
  if (c.in_channels < 1) fail("in_channels must be >= 1");
  if (c.latent_channels < 1) fail("latent_channels must be >= 1");
  if (c.base_channels < 1) fail("encoder base_channels must be >= 1");
  if (c.ch_mult.empty()) fail("encoder ch_mult must list at least one level");
  for (auto m : c.ch_mult)
    if (m < 1) fail("encoder ch_mult entries must be >= 1");
}

ShapeSpec encoder_param_shapes(const EncoderConfig& c) {
  validate(c);
  ShapeSpec spec;
  std::size_t ch = level_channels(c, 0);
  add_conv(spec, "enc.conv_in", ch, c.in_channels, 3);
  for (std::size_t i = 0; i < c.ch_mult.size(); ++i) {
    const std::size_t out = level_channels(c, i);
    for (std::size_t j = 0; j < c.num_blocks; ++j) {
      const std::string b = block_name(i, j);
      add_conv(spec, b + ".conv1", out, ch, 3);
      add_conv(spec, b + ".conv2", out, out, 3);
      if (ch != out) add_conv(spec, b + ".skip", out, ch, 1);
      ch = out;
    }
    if (i + 1 < c.ch_mult.size()) add_conv(spec, "enc.down" + std::to_string(i) + ".down", ch, ch, 3);
  }
  add_conv(spec, "enc.head", 2 * c.latent_channels, ch, 1);
  return spec;
}

EncoderParams init_encoder(const EncoderConfig& config, std::uint64_t seed) {
  Rng rng(seed);
  EncoderParams params{config, {}};
  for (const auto& [name, shape] : encoder_param_shapes(config))
    params.tensors.add(name, init_tensor(shape, shape.size() == 1 ? Init::kZeros : Init::kFanIn, rng));
  return params;
}

ag::Tensor signal_to_chw(const Signal& signal) {
  if (signal.resolution.size() != 2)
    throw Error(ErrorCode::kResolutionMismatch, "encoder input must be a 2-D signal");
  const std::size_t h = signal.resolution[0], w = signal.resolution[1], c = signal.feat_dim;
  std::vector<double> chw(c * h * w);
  for (std::size_t p = 0; p < h * w; ++p)
    for (std::size_t ch = 0; ch < c; ++ch) chw[ch * h * w + p] = signal.features[p * c + ch];
  return ag::Tensor::constant({c, h, w}, std::move(chw));
}

GaussianPosterior encode_images(const ag::Tensor& images, const EncoderParams& params) {
  const EncoderConfig& c = params.config;
  if (images.rank() != 4 || images.dim(1) != c.in_channels || images.dim(2) != c.res_h || images.dim(3) != c.res_w)
    throw Error(ErrorCode::kResolutionMismatch,
                "encoder expects [B, " + std::to_string(c.in_channels) + ", " + std::to_string(c.res_h) + ", " +
                    std::to_string(c.res_w) + "], got " + ag::shape_str(images.shape()));
  const ParamSet& p = params.tensors;
  ag::Tensor x = conv(images, p, "enc.conv_in");
  for (std::size_t i = 0; i < c.ch_mult.size(); ++i) {
    for (std::size_t j = 0; j < c.num_blocks; ++j) {
      const std::string b = block_name(i, j);
      ag::Tensor h = conv(ag::silu(x), p, b + ".conv1");
      h = conv(ag::silu(h), p, b + ".conv2");
      x = ag::add(p.contains(b + ".skip.W") ? conv(x, p, b + ".skip") : x, h);
    }
    if (i + 1 < c.ch_mult.size()) x = conv(x, p, "enc.down" + std::to_string(i) + ".down", 2);
  }
  ag::Tensor out = conv(ag::silu(x), p, "enc.head");

  const std::size_t batch = out.dim(0), dz = c.latent_channels, hw = out.dim(2) * out.dim(3);
  std::vector<std::size_t> mean_idx, logvar_idx;
  mean_idx.reserve(batch * dz * hw);
  logvar_idx.reserve(batch * dz * hw);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t ch = 0; ch < dz; ++ch)
      for (std::size_t q = 0; q < hw; ++q) {
        mean_idx.push_back((b * 2 * dz + ch) * hw + q);
        logvar_idx.push_back((b * 2 * dz + dz + ch) * hw + q);
      }
  const ag::Shape shape{batch, dz, out.dim(2), out.dim(3)};
  return {ag::gather(out, std::move(mean_idx), shape),
          ag::clamp(ag::gather(out, std::move(logvar_idx), shape), kLogvarMin, kLogvarMax)};
}

GaussianPosterior encode(const Signal& signal, const EncoderParams& params) {
  const EncoderConfig& c = params.config;
  if (signal.resolution != std::vector<std::size_t>{c.res_h, c.res_w} || signal.feat_dim != c.in_channels)
    throw Error(ErrorCode::kResolutionMismatch,
                "signal does not match the encoder input " + std::to_string(c.res_h) + "x" +
                    std::to_string(c.res_w) + "x" + std::to_string(c.in_channels));
  ag::Tensor chw = signal_to_chw(signal);
  GaussianPosterior batch = encode_images(ag::reshape(chw, {1, chw.dim(0), chw.dim(1), chw.dim(2)}), params);
  return posterior_item(batch, 0);
}

GaussianPosterior posterior_item(const GaussianPosterior& batch, std::size_t b) {
  const ag::Shape& s = batch.mean.shape();
  const std::size_t n = s[1] * s[2] * s[3];
  auto pick = [&](const ag::Tensor& t) {
    return ag::reshape(ag::slice_rows(ag::reshape(t, {s[0], n}), b, b + 1), {s[1], s[2], s[3]});
  };
  return {pick(batch.mean), pick(batch.logvar)};
}

ag::Tensor sample_posterior(const GaussianPosterior& post, const ag::Tensor& noise) {
  if (noise.shape() != post.mean.shape())
    throw Error(ErrorCode::kShapeMismatch, "noise " + ag::shape_str(noise.shape()) + " does not match posterior " +
                                               ag::shape_str(post.mean.shape()));
  return ag::add(post.mean, ag::mul(ag::exp(ag::scale(post.logvar, 0.5)), noise));
}

ag::Tensor kl_standard_normal(const GaussianPosterior& post) {
  ag::Tensor terms = ag::sub(ag::add(ag::square(post.mean), ag::exp(post.logvar)), post.logvar);
  return ag::scale(ag::add_scalar(ag::sum(terms), -static_cast<double>(post.mean.numel())), 0.5);
}

ElboTerms elbo_terms(const GaussianPosterior& post, const ag::Tensor& noise, const ag::Tensor& coords,
                     const ag::Tensor& target, const HdParams& hd, const HdConfig& hd_config, const InrConfig& inr,
                     double beta, const ExtraLossHook& extra) {
  if (!(beta >= 0.0)) throw Error(ErrorCode::kInvalidArgument, "kl_weight must be >= 0");
  ag::Tensor z = sample_posterior(post, noise);
  InrParams phi = generate_inr_params(z, hd, hd_config, inr);
  ag::Tensor pred = inr_forward(phi, coords, inr);
  ElboTerms out;
  out.recon_logprob = likelihood_logprob(pred, target, inr.sigma);
  out.kl = kl_standard_normal(post);
  out.total = ag::sub(out.recon_logprob, ag::scale(out.kl, beta));
  if (extra) out.total = ag::sub(out.total, extra(pred, target));
  return out;
}

ElboReport elbo(const Signal& signal, const EncoderParams& enc, const HdParams& hd, const HdConfig& hd_config,
                const InrConfig& inr, double beta, std::span<const double> noise, const ExtraLossHook& extra) {
  GaussianPosterior post = encode(signal, enc);
  if (noise.size() != post.mean.numel())
    throw Error(ErrorCode::kShapeMismatch, "noise has " + std::to_string(noise.size()) + " entries, latent has " +
                                               std::to_string(post.mean.numel()));
  ag::Tensor eps = ag::Tensor::constant(post.mean.shape(), {noise.begin(), noise.end()});
  ag::Tensor coords = ag::Tensor::constant({signal.num_points(), signal.coord_dim}, signal.coords);
  ag::Tensor target = ag::Tensor::constant({signal.num_points(), signal.feat_dim}, signal.features);
  ElboTerms t = elbo_terms(post, eps, coords, target, hd, hd_config, inr, beta, extra);
  return {t.recon_logprob.item(), t.kl.item(), beta, t.total.item()};
}

}  // namespace ldmi
