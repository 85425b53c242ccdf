#include "ldmi/tasks.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <limits>

#include "ldmi/error.hpp"

namespace ldmi {
namespace {

double parse_number(std::string_view text, std::string_view whole) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size() || text.empty())
    throw Error(ErrorCode::kInvalidArgument, "invalid scale '" + std::string(whole) + "'");
  return v;
}

struct Model {
  ModelConfig config;
  EncoderParams enc;
  HdParams hd;
};

Model load_model(const Checkpoint& ckpt) {
  ModelConfig config = ckpt.config();
  return {config, encoder_params_from(ckpt.tensors, config), hd_params_from(ckpt.tensors)};
}

void check_signal(const Signal& s, const ModelConfig& c) {
  if (s.resolution != std::vector<std::size_t>{c.encoder.res_h, c.encoder.res_w} ||
      s.feat_dim != c.encoder.in_channels)
    throw Error(ErrorCode::kResolutionMismatch, "signal does not match the training resolution " +
                                                    std::to_string(c.encoder.res_h) + "x" +
                                                    std::to_string(c.encoder.res_w) + "x" +
                                                    std::to_string(c.encoder.in_channels));
}

std::vector<double> rendered_values(const InrParams& phi, const InrConfig& inr, const Signal& s) {
  ag::Tensor coords = ag::Tensor::constant({s.num_points(), s.coord_dim}, s.coords);
  std::vector<double> v = inr_forward(phi, coords, inr).to_vector();
  for (double& x : v) x = std::clamp(x, 0.0, 1.0);
  return v;
}

}  // namespace

std::vector<std::size_t> ResolutionScale::apply(const std::vector<std::size_t>& resolution) const {
  if (!(factor > 0.0) || !std::isfinite(factor))
    throw Error(ErrorCode::kInvalidArgument, "scale must be a positive number");
  std::vector<std::size_t> out;
  for (std::size_t n : resolution) {
    const double count = std::round(factor * static_cast<double>(n));
    if (count < 1.0)
      throw Error(ErrorCode::kInvalidArgument,
                  "scale " + std::to_string(factor) + " leaves no samples along an axis of " + std::to_string(n));
    out.push_back(static_cast<std::size_t>(count));
  }
  return out;
}

ResolutionScale parse_scale(std::string_view text) {
  double factor = 0.0;
  if (auto slash = text.find('/'); slash != std::string_view::npos) {
    const double num = parse_number(text.substr(0, slash), text);
    const double den = parse_number(text.substr(slash + 1), text);
    if (den == 0.0) throw Error(ErrorCode::kInvalidArgument, "invalid scale '" + std::string(text) + "'");
    factor = num / den;
  } else {
    factor = parse_number(text, text);
  }
  if (!(factor > 0.0) || !std::isfinite(factor))
    throw Error(ErrorCode::kInvalidArgument, "scale must be positive, got '" + std::string(text) + "'");
  return {factor};
}

std::string PsnrReport::psnr_string() const {
  if (std::isinf(psnr_db)) return "inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", psnr_db);
  return buf;
}

std::string PsnrReport::to_text() const {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", mse);
  return "mse=" + std::string(buf) + "\npsnr_db=" + psnr_string() + "\n";
}

PsnrReport compute_psnr(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.empty())
    throw Error(ErrorCode::kShapeMismatch, "PSNR needs two non-empty signals of equal size");
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) sum += (a[i] - b[i]) * (a[i] - b[i]);
  PsnrReport r;
  r.mse = sum / static_cast<double>(a.size());
  r.psnr_db = r.mse == 0.0 ? std::numeric_limits<double>::infinity() : -10.0 * std::log10(r.mse);
  return r;
}

Image render(const InrParams& phi, const InrConfig& inr, const std::vector<std::size_t>& resolution) {
  ag::NoGradGuard no_grad;
  const CoordinateGrid grid = make_coordinate_grid(resolution, inr.in_dim);
  std::vector<double> v = inr_forward(phi, grid.tensor(), inr).to_vector();
  for (double& x : v) x = std::clamp(x, 0.0, 1.0);
  return image_from_features(v, resolution.at(0), resolution.at(1), inr.out_dim);
}

std::uint64_t inr_params_hash(const InrParams& phi) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const ag::Tensor& t) {
    for (double v : t.data()) {
      unsigned char bytes[sizeof v];
      std::memcpy(bytes, &v, sizeof v);
      for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ULL;
      }
    }
  };
  for (std::size_t l = 0; l < phi.weights.size(); ++l) {
    mix(phi.weights[l]);
    mix(phi.biases[l]);
  }
  return h;
}

SampleResult sample(const Checkpoint& ckpt, const SampleOptions& options, std::uint64_t seed) {
  require_stage(ckpt, {Stage::kLdmi, Stage::kHypertransformed}, "sample");
  SampleResult out;
  if (options.n == 0) return out;
  const Model m = load_model(ckpt);
  const std::vector<std::size_t> res =
      options.scale.apply({m.config.encoder.res_h, m.config.encoder.res_w});
  const DenoiserParams eps = denoiser_params_from(ckpt.tensors, m.config);
  const NoiseSchedule sched = make_schedule(m.config.diffusion);
  const ag::Shape shape{options.n, m.config.hd.latent_channels, m.config.hd.latent_h, m.config.hd.latent_w};

  ag::NoGradGuard no_grad;
  Rng rng(Rng::derive(seed, "sample"));
  ag::Tensor noise = ag::Tensor::constant(shape, rng.normal_vector(ag::shape_numel(shape)));
  const ag::Tensor z = ddim_sample_from(as_eps_model(eps), sched, options.steps, options.eta, noise, rng);
  const std::size_t per = z.numel() / options.n;
  for (std::size_t i = 0; i < options.n; ++i) {
    std::vector<double> zi(z.data().begin() + i * per, z.data().begin() + (i + 1) * per);
    ag::Tensor zt = ag::Tensor::constant({shape[1], shape[2], shape[3]}, zi);
    const InrParams phi = generate_inr_params(zt, m.hd, m.config.hd, m.config.inr);
    out.images.push_back(render(phi, m.config.inr, res));
    out.latents.push_back(std::move(zi));
    out.phi_hashes.push_back(inr_params_hash(phi));
  }
  return out;
}

ReconstructResult reconstruct(const Checkpoint& ckpt, const std::vector<Signal>& signals, ResolutionScale scale,
                              std::uint64_t seed, bool sample_posterior_z) {
  const Model m = load_model(ckpt);
  for (const auto& s : signals) check_signal(s, m.config);
  const std::vector<std::size_t> res = scale.apply({m.config.encoder.res_h, m.config.encoder.res_w});
  ag::NoGradGuard no_grad;
  Rng rng(Rng::derive(seed, "sample"));
  ReconstructResult out;
  std::vector<double> pred_all, truth_all;
  for (const auto& s : signals) {
    GaussianPosterior post = encode(s, m.enc);
    ag::Tensor z = post.mean;
    if (sample_posterior_z)
      z = sample_posterior(post, ag::Tensor::constant(post.mean.shape(), rng.normal_vector(post.mean.numel())));
    const InrParams phi = generate_inr_params(z, m.hd, m.config.hd, m.config.inr);
    const std::vector<double> native = rendered_values(phi, m.config.inr, s);
    pred_all.insert(pred_all.end(), native.begin(), native.end());
    truth_all.insert(truth_all.end(), s.features.begin(), s.features.end());
    out.images.push_back(render(phi, m.config.inr, res));
  }
  if (!signals.empty()) out.psnr = compute_psnr(pred_all, truth_all);
  return out;
}

InpaintResult inpaint(const Checkpoint& ckpt, const Signal& signal, const Mask& mask, std::size_t n_samples,
                      std::uint64_t seed) {
  const Model m = load_model(ckpt);
  check_signal(signal, m.config);
  if (mask.resolution != signal.resolution)
    throw Error(ErrorCode::kResolutionMismatch, "mask resolution differs from the signal");
  if (mask.observed_count() == 0) throw Error(ErrorCode::kEmptyContext, "mask leaves no observed pixels");

  Signal masked = signal;
  const std::size_t c = signal.feat_dim;
  for (std::size_t p = 0; p < signal.num_points(); ++p)
    if (!mask.observed[p])
      for (std::size_t k = 0; k < c; ++k) masked.features[p * c + k] = 0.5;

  ag::NoGradGuard no_grad;
  const GaussianPosterior post = encode(masked, m.enc);
  Rng rng(Rng::derive(seed, "sample"));
  InpaintResult out;
  for (std::size_t i = 0; i < n_samples; ++i) {
    ag::Tensor z =
        sample_posterior(post, ag::Tensor::constant(post.mean.shape(), rng.normal_vector(post.mean.numel())));
    const InrParams phi = generate_inr_params(z, m.hd, m.config.hd, m.config.inr);
    const std::vector<double> v = rendered_values(phi, m.config.inr, signal);
    double obs = 0.0, miss = 0.0;
    std::size_t n_obs = 0, n_miss = 0;
    for (std::size_t p = 0; p < signal.num_points(); ++p)
      for (std::size_t k = 0; k < c; ++k) {
        const double d = v[p * c + k] - signal.features[p * c + k];
        if (mask.observed[p]) {
          obs += d * d;
          ++n_obs;
        } else {
          miss += d * d;
          ++n_miss;
        }
      }
    out.observed_mse.push_back(obs / static_cast<double>(n_obs));
    out.unobserved_mse.push_back(n_miss ? miss / static_cast<double>(n_miss)
                                        : std::numeric_limits<double>::quiet_NaN());
    out.images.push_back(image_from_features(v, signal.resolution[0], signal.resolution[1], c));
  }
  return out;
}

}  // namespace ldmi
