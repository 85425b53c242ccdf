#include "ldmi/diffusion.hpp"

#include <cmath>

#include "ldmi/error.hpp"

namespace ldmi {
namespace {

void check_t(std::size_t t, const NoiseSchedule& sched) {
  if (t < 1 || t > sched.T)
    throw Error(ErrorCode::kInvalidArgument,
                "timestep " + std::to_string(t) + " outside [1, " + std::to_string(sched.T) + "]");
}

void check_same(std::size_t a, std::size_t b, const char* what) {
  if (a != b)
    throw Error(ErrorCode::kShapeMismatch,
                std::string(what) + ": sizes " + std::to_string(a) + " and " + std::to_string(b) + " differ");
}

/// eps_theta with gradients off, as plain values.
std::vector<double> predict(const EpsModel& model, const std::vector<double>& z, const ag::Shape& shape,
                            std::size_t t) {
  ag::Tensor zt = ag::Tensor::constant(shape, z);
  ag::Tensor eps = model(zt, std::vector<std::size_t>(shape[0], t));
  if (eps.shape() != shape)
    throw Error(ErrorCode::kShapeMismatch, "denoiser returned " + ag::shape_str(eps.shape()) + " for input " +
                                               ag::shape_str(shape));
  return eps.to_vector();
}

std::string level_name(std::size_t i) { return "eps.down" + std::to_string(i); }

void add_conv(ShapeSpec& spec, const std::string& prefix, std::size_t out, std::size_t in, std::size_t k) {
  spec.emplace_back(prefix + ".W", ag::Shape{out, in, k, k});
  spec.emplace_back(prefix + ".b", ag::Shape{out});
}

void add_linear(ShapeSpec& spec, const std::string& prefix, std::size_t out, std::size_t in) {
  spec.emplace_back(prefix + ".W", ag::Shape{out, in});
  spec.emplace_back(prefix + ".b", ag::Shape{out});
}

void add_block(ShapeSpec& spec, const std::string& prefix, std::size_t out, std::size_t in, std::size_t time_dim) {
  add_conv(spec, prefix + ".conv1", out, in, 3);
  add_linear(spec, prefix + ".temb", out, time_dim);
  add_conv(spec, prefix + ".conv2", out, out, 3);
  if (in != out) add_conv(spec, prefix + ".skip", out, in, 1);
}

ag::Tensor conv(const ag::Tensor& x, const ParamSet& p, const std::string& prefix, std::size_t stride = 1) {
  const ag::Tensor& w = p.at(prefix + ".W");
  return ag::conv2d(x, w, p.at(prefix + ".b"), stride, w.dim(2) / 2);
}

ag::Tensor linear(const ag::Tensor& x, const ParamSet& p, const std::string& prefix) {
  return ag::add_bias(ag::matmul_nt(x, p.at(prefix + ".W")), p.at(prefix + ".b"));
}

ag::Tensor res_block(const ag::Tensor& x, const ag::Tensor& temb, const ParamSet& p, const std::string& prefix) {
  ag::Tensor h = conv(ag::silu(x), p, prefix + ".conv1");
  h = ag::add_channel_bias(h, linear(temb, p, prefix + ".temb"));
  h = conv(ag::silu(h), p, prefix + ".conv2");
  return ag::add(p.contains(prefix + ".skip.W") ? conv(x, p, prefix + ".skip") : x, h);
}

}  // namespace

NoiseSchedule make_schedule(std::size_t T, const std::string& kind, double beta_start, double beta_end) {
  if (kind != "linear") throw Error(ErrorCode::kInvalidConfig, "unknown noise_schedule '" + kind + "'");
  if (T < 1) throw Error(ErrorCode::kInvalidConfig, "diffusion_steps must be >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw Error(ErrorCode::kInvalidConfig, "noise schedule needs 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.T = T;
  s.beta.assign(T + 1, 0.0);
  s.alpha.assign(T + 1, 1.0);
  s.alpha_bar.assign(T + 1, 1.0);
  s.posterior_var.assign(T + 1, 0.0);
  for (std::size_t t = 1; t <= T; ++t) {
    const double frac = T == 1 ? 0.0 : static_cast<double>(t - 1) / static_cast<double>(T - 1);
    s.beta[t] = beta_start + (beta_end - beta_start) * frac;
    s.alpha[t] = 1.0 - s.beta[t];
    s.alpha_bar[t] = s.alpha_bar[t - 1] * s.alpha[t];
    s.posterior_var[t] = (1.0 - s.alpha_bar[t - 1]) / (1.0 - s.alpha_bar[t]) * s.beta[t];
  }
  return s;
}

std::vector<double> forward_diffuse(std::span<const double> z0, std::size_t t, std::span<const double> eps,
                                    const NoiseSchedule& sched) {
  check_t(t, sched);
  check_same(z0.size(), eps.size(), "forward_diffuse");
  const double a = std::sqrt(sched.alpha_bar[t]), b = std::sqrt(1.0 - sched.alpha_bar[t]);
  std::vector<double> out(z0.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * z0[i] + b * eps[i];
  return out;
}

std::vector<double> estimate_z0(std::span<const double> z_t, std::size_t t, std::span<const double> eps_hat,
                                const NoiseSchedule& sched) {
  check_t(t, sched);
  check_same(z_t.size(), eps_hat.size(), "estimate_z0");
  const double a = std::sqrt(sched.alpha_bar[t]), b = std::sqrt(1.0 - sched.alpha_bar[t]);
  std::vector<double> out(z_t.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (z_t[i] - b * eps_hat[i]) / a;
  return out;
}

PosteriorCoefficients posterior_coefficients(std::size_t t, const NoiseSchedule& sched) {
  check_t(t, sched);
  if (t < 2) throw Error(ErrorCode::kInvalidArgument, "posterior at t = 1 is the sampler's terminal step");
  const double ab = sched.alpha_bar[t], ab_prev = sched.alpha_bar[t - 1];
  return {std::sqrt(ab_prev) * sched.beta[t] / (1.0 - ab), std::sqrt(sched.alpha[t]) * (1.0 - ab_prev) / (1.0 - ab),
          sched.posterior_var[t]};
}

PosteriorParams ddpm_posterior_params(std::span<const double> z_t, std::span<const double> zhat0, std::size_t t,
                                      const NoiseSchedule& sched) {
  check_same(z_t.size(), zhat0.size(), "ddpm_posterior_params");
  const PosteriorCoefficients c = posterior_coefficients(t, sched);
  PosteriorParams out{std::vector<double>(z_t.size()), c.var};
  for (std::size_t i = 0; i < z_t.size(); ++i) out.mean[i] = c.c_z0 * zhat0[i] + c.c_zt * z_t[i];
  return out;
}

ag::Tensor ddpm_loss(const ag::Tensor& z0, const EpsModel& model, const NoiseSchedule& sched, Rng& rng) {
  if (z0.rank() < 1 || z0.dim(0) == 0) throw Error(ErrorCode::kShapeMismatch, "ddpm_loss needs a non-empty batch");
  const std::size_t batch = z0.dim(0), per = z0.numel() / batch;
  std::vector<std::size_t> t(batch);
  std::vector<double> eps(z0.numel()), a(z0.numel()), b(z0.numel());
  for (std::size_t i = 0; i < batch; ++i) {
    t[i] = static_cast<std::size_t>(rng.uniform_int(1, static_cast<int>(sched.T)));
    for (std::size_t j = 0; j < per; ++j) {
      eps[i * per + j] = rng.normal();
      a[i * per + j] = std::sqrt(sched.alpha_bar[t[i]]);
      b[i * per + j] = std::sqrt(1.0 - sched.alpha_bar[t[i]]);
    }
  }
  const ag::Tensor noise = ag::Tensor::constant(z0.shape(), eps);
  const ag::Tensor z_t = ag::add(ag::mul(z0, ag::Tensor::constant(z0.shape(), std::move(a))),
                                 ag::mul(noise, ag::Tensor::constant(z0.shape(), std::move(b))));
  return ag::mean(ag::square(ag::sub(noise, model(z_t, t))));
}

std::vector<std::size_t> ddim_timesteps(std::size_t T, std::size_t num_steps) {
  if (num_steps < 1 || num_steps > T)
    throw Error(ErrorCode::kInvalidArgument,
                "sampling steps must be in [1, " + std::to_string(T) + "], got " + std::to_string(num_steps));
  std::vector<std::size_t> tau(num_steps);
  for (std::size_t i = 0; i < num_steps; ++i) tau[i] = 1 + i * T / num_steps;
  return tau;
}

ag::Tensor ddim_sample_from(const EpsModel& model, const NoiseSchedule& sched, std::size_t num_steps, double eta,
                            const ag::Tensor& initial_noise, Rng& rng) {
  if (!(eta >= 0.0 && eta <= 1.0)) throw Error(ErrorCode::kInvalidArgument, "eta must be in [0, 1]");
  const std::vector<std::size_t> tau = ddim_timesteps(sched.T, num_steps);
  ag::NoGradGuard no_grad;
  const ag::Shape shape = initial_noise.shape();
  if (shape.empty() || shape[0] == 0) return ag::Tensor::zeros(shape);
  std::vector<double> z = initial_noise.to_vector();
  for (std::size_t i = tau.size(); i-- > 0;) {
    const std::size_t t = tau[i];
    const std::vector<double> eps = predict(model, z, shape, t);
    std::vector<double> zhat = estimate_z0(z, t, eps, sched);
    if (i == 0) return ag::Tensor::constant(shape, std::move(zhat));
    const double ab = sched.alpha_bar[t], ab_prev = sched.alpha_bar[tau[i - 1]];
    const double sigma = eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab)) * std::sqrt(1.0 - ab / ab_prev);
    const double dir = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));
    const double root_prev = std::sqrt(ab_prev);
    for (std::size_t j = 0; j < z.size(); ++j) {
      z[j] = root_prev * zhat[j] + dir * eps[j];
      if (sigma > 0.0) z[j] += sigma * rng.normal();
    }
  }
  return ag::Tensor::constant(shape, std::move(z));
}

ag::Tensor ddim_sample(const EpsModel& model, const NoiseSchedule& sched, std::size_t num_steps, double eta,
                       std::uint64_t seed, const ag::Shape& shape) {
  Rng rng(seed);
  ag::Tensor init = ag::Tensor::constant(shape, rng.normal_vector(ag::shape_numel(shape)));
  return ddim_sample_from(model, sched, num_steps, eta, init, rng);
}

ag::Tensor ddpm_sample(const EpsModel& model, const NoiseSchedule& sched, std::uint64_t seed, const ag::Shape& shape) {
  Rng rng(seed);
  ag::NoGradGuard no_grad;
  std::vector<double> z = rng.normal_vector(ag::shape_numel(shape));
  if (z.empty()) return ag::Tensor::zeros(shape);
  for (std::size_t t = sched.T; t >= 1; --t) {
    const std::vector<double> eps = predict(model, z, shape, t);
    std::vector<double> zhat = estimate_z0(z, t, eps, sched);
    if (t == 1) return ag::Tensor::constant(shape, std::move(zhat));
    PosteriorParams post = ddpm_posterior_params(z, zhat, t, sched);
    const double sd = std::sqrt(post.var);
    for (std::size_t j = 0; j < z.size(); ++j) z[j] = post.mean[j] + sd * rng.normal();
  }
  return ag::Tensor::constant(shape, std::move(z));
}

EpsModel gaussian_oracle(const NoiseSchedule& sched, std::vector<double> mu, double s) {
  return [&sched, mu = std::move(mu), s](const ag::Tensor& z_t, const std::vector<std::size_t>& t) {
    const std::size_t batch = z_t.dim(0), per = z_t.numel() / batch;
    if (mu.size() != per) throw Error(ErrorCode::kShapeMismatch, "oracle mean does not match the latent size");
    std::vector<double> out(z_t.numel());
    for (std::size_t i = 0; i < batch; ++i) {
      const double a = sched.alpha_bar[t[i]];
      const double denom = a * s * s + 1.0 - a;
      for (std::size_t j = 0; j < per; ++j)
        out[i * per + j] = std::sqrt(1.0 - a) * (z_t.at(i * per + j) - std::sqrt(a) * mu[j]) / denom;
    }
    return ag::Tensor::constant(z_t.shape(), std::move(out));
  };
}

void validate(const DenoiserConfig& c) {
  auto fail = [](const std::string& msg) { throw Error(ErrorCode::kInvalidConfig, msg); };
  if (c.latent_channels < 1) fail("latent_channels must be >= 1");
  if (c.base_channels < 1) fail("diffusion base_channels must be >= 1");
  if (c.ch_mult.empty()) fail("diffusion ch_mult must list at least one level");
  for (auto m : c.ch_mult)
    if (m < 1) fail("diffusion ch_mult entries must be >= 1");
  if (c.num_blocks < 1) fail("diffusion num_blocks must be >= 1");
  if (c.time_dim < 2 || c.time_dim % 2) fail("time_dim must be an even number >= 2");
}

ShapeSpec denoiser_param_shapes(const DenoiserConfig& c) {
  validate(c);
  ShapeSpec spec;
  add_linear(spec, "eps.time.l1", c.time_dim, c.time_dim);
  add_linear(spec, "eps.time.l2", c.time_dim, c.time_dim);
  std::size_t ch = c.base_channels * c.ch_mult[0];
  add_conv(spec, "eps.conv_in", ch, c.latent_channels, 3);
  std::vector<std::size_t> widths;
  for (std::size_t i = 0; i < c.ch_mult.size(); ++i) {
    const std::size_t out = c.base_channels * c.ch_mult[i];
    for (std::size_t j = 0; j < c.num_blocks; ++j) {
      add_block(spec, level_name(i) + ".block" + std::to_string(j), out, ch, c.time_dim);
      ch = out;
    }
    widths.push_back(ch);
    if (i + 1 < c.ch_mult.size()) add_conv(spec, level_name(i) + ".down", ch, ch, 3);
  }
  for (std::size_t i = c.ch_mult.size() - 1; i-- > 0;) {
    const std::string up = "eps.up" + std::to_string(i);
    add_conv(spec, up + ".conv", widths[i], ch, 3);
    ch = widths[i];
    add_block(spec, up + ".block", ch, ch, c.time_dim);
  }
  add_conv(spec, "eps.conv_out", c.latent_channels, ch, 3);
  return spec;
}

DenoiserParams init_denoiser(const DenoiserConfig& config, std::uint64_t seed) {
  Rng rng(seed);
  DenoiserParams params{config, {}};
  for (const auto& [name, shape] : denoiser_param_shapes(config)) {
    const bool zero = shape.size() == 1 || name.starts_with("eps.conv_out");
    params.tensors.add(name, init_tensor(shape, zero ? Init::kZeros : Init::kFanIn, rng));
  }
  return params;
}

ag::Tensor timestep_embedding(const std::vector<std::size_t>& t, std::size_t dim) {
  const std::size_t half = dim / 2;
  std::vector<double> out(t.size() * dim);
  for (std::size_t i = 0; i < t.size(); ++i)
    for (std::size_t j = 0; j < half; ++j) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(j) / static_cast<double>(half));
      const double arg = static_cast<double>(t[i]) * freq;
      out[i * dim + j] = std::sin(arg);
      out[i * dim + half + j] = std::cos(arg);
    }
  return ag::Tensor::constant({t.size(), dim}, std::move(out));
}

ag::Tensor denoiser_forward(const DenoiserParams& params, const ag::Tensor& z_t, const std::vector<std::size_t>& t) {
  const DenoiserConfig& c = params.config;
  if (z_t.rank() != 4 || z_t.dim(1) != c.latent_channels || t.size() != z_t.dim(0))
    throw Error(ErrorCode::kShapeMismatch, "denoiser expects [B, " + std::to_string(c.latent_channels) +
                                               ", H, W] with one timestep per row, got " +
                                               ag::shape_str(z_t.shape()));
  const ParamSet& p = params.tensors;
  ag::Tensor temb = linear(ag::silu(linear(timestep_embedding(t, c.time_dim), p, "eps.time.l1")), p, "eps.time.l2");
  temb = ag::silu(temb);

  ag::Tensor x = conv(z_t, p, "eps.conv_in");
  std::vector<ag::Tensor> skips;
  for (std::size_t i = 0; i < c.ch_mult.size(); ++i) {
    for (std::size_t j = 0; j < c.num_blocks; ++j)
      x = res_block(x, temb, p, level_name(i) + ".block" + std::to_string(j));
    skips.push_back(x);
    if (i + 1 < c.ch_mult.size()) x = conv(x, p, level_name(i) + ".down", 2);
  }
  for (std::size_t i = c.ch_mult.size() - 1; i-- > 0;) {
    const std::string up = "eps.up" + std::to_string(i);
    x = ag::upsample2x(x, skips[i].dim(2), skips[i].dim(3));
    x = ag::add(conv(x, p, up + ".conv"), skips[i]);
    x = res_block(x, temb, p, up + ".block");
  }
  return conv(ag::silu(x), p, "eps.conv_out");
}

EpsModel as_eps_model(const DenoiserParams& params) {
  return [&params](const ag::Tensor& z_t, const std::vector<std::size_t>& t) {
    return denoiser_forward(params, z_t, t);
  };
}

}  // namespace ldmi
