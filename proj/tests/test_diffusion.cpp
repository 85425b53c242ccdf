#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "ldmi/diffusion.hpp"
#include "ldmi/error.hpp"
#include "support.hpp"

using namespace ldmi;
using ldmi::testing::error_code_of;
using ldmi::testing::gradient_error;
using ldmi::testing::probe;
using ldmi::testing::random_constant;

namespace {

/// Asymptotic Kolmogorov tail probability for a two-sample statistic.
double ks_pvalue(double d, double n1, double n2) {
  const double ne = n1 * n2 / (n1 + n2);
  const double lambda = (std::sqrt(ne) + 0.12 + 0.11 / std::sqrt(ne)) * d;
  double p = 0.0;
  for (int k = 1; k <= 100; ++k) p += 2.0 * ((k % 2) ? 1.0 : -1.0) * std::exp(-2.0 * k * k * lambda * lambda);
  return std::clamp(p, 0.0, 1.0);
}

double ks_statistic(std::vector<double> a, std::vector<double> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  std::size_t i = 0, j = 0;
  double d = 0.0;
  while (i < a.size() && j < b.size()) {
    const double x = std::min(a[i], b[j]);
    while (i < a.size() && a[i] <= x) ++i;
    while (j < b.size() && b[j] <= x) ++j;
    d = std::max(d, std::abs(static_cast<double>(i) / a.size() - static_cast<double>(j) / b.size()));
  }
  return d;
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double var_of(const std::vector<double>& v) {
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size());
}

}  // namespace

TEST_CASE("linear schedule basics") {
  const NoiseSchedule one = make_schedule(1, "linear", 0.1, 0.1);
  CHECK(one.alpha_bar[1] == doctest::Approx(0.9).epsilon(1e-15));
  CHECK(one.alpha_bar[0] == 1.0);

  const NoiseSchedule s = make_schedule(1000);
  CHECK(s.T == 1000);
  CHECK(s.beta[1] == doctest::Approx(1e-4));
  CHECK(s.beta[1000] == doctest::Approx(2e-2));
  CHECK(s.beta[2] - s.beta[1] == doctest::Approx(s.beta[1000] - s.beta[999]).epsilon(1e-9));

  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const double lo = rng.uniform(1e-5, 0.05), hi = rng.uniform(lo, 0.5);
    const auto T = static_cast<std::size_t>(rng.uniform_int(1, 300));
    const NoiseSchedule f = make_schedule(T, "linear", lo, hi);
    for (std::size_t t = 1; t <= T; ++t) CHECK(f.alpha_bar[t] < f.alpha_bar[t - 1]);
  }
  CHECK(error_code_of([] { make_schedule(0); }) == ErrorCode::kInvalidConfig);
  CHECK(error_code_of([] { make_schedule(10, "linear", 0.2, 0.1); }) == ErrorCode::kInvalidConfig);
  CHECK(error_code_of([] { make_schedule(10, "cosine"); }) == ErrorCode::kInvalidConfig);
}

TEST_CASE("forward diffusion closed form and variance") {
  NoiseSchedule s;
  s.T = 1;
  s.alpha_bar = {1.0, 0.25};
  const std::vector<double> one{1.0};
  CHECK(forward_diffuse(one, 1, one, s)[0] == doctest::Approx(1.36603).epsilon(1e-5));

  const NoiseSchedule lin = make_schedule(1000);
  const std::vector<double> z0{0.3, -1.2};
  const std::vector<double> e{0.5, 0.7};
  const auto near = forward_diffuse(z0, 1, e, lin);
  CHECK(std::abs(near[0] - z0[0]) < 0.01);

  // With z0 = 0 the diffused value has variance 1 - alpha_bar_t.
  std::size_t t = 1;
  while (lin.alpha_bar[t] > 0.25) ++t;
  Rng rng(2);
  std::vector<double> draws(100000);
  const std::vector<double> zero{0.0};
  for (double& d : draws) {
    const std::vector<double> eps{rng.normal()};
    d = forward_diffuse(zero, t, eps, lin)[0];
  }
  const double expected = 1.0 - lin.alpha_bar[t];
  CHECK(std::abs(var_of(draws) - expected) < 3.0 * std::sqrt(2.0 * expected * expected / draws.size()));
}

TEST_CASE("estimate_z0 inverts forward diffusion at every t") {
  const NoiseSchedule s = make_schedule(1000);
  Rng rng(3);
  const std::vector<double> z0 = rng.normal_vector(8), eps = rng.normal_vector(8);
  for (std::size_t t = 1; t <= s.T; ++t) {
    const auto back = estimate_z0(forward_diffuse(z0, t, eps, s), t, eps, s);
    for (std::size_t j = 0; j < 8; ++j) CHECK(std::abs(back[j] - z0[j]) < 1e-10);
  }
  const std::vector<double> zt{0.4}, zero{0.0};
  CHECK(estimate_z0(zt, 500, zero, s)[0] == doctest::Approx(0.4 / std::sqrt(s.alpha_bar[500])));
}

TEST_CASE("posterior mean is consistent with noiseless diffusion and beta_tilde <= beta") {
  const NoiseSchedule s = make_schedule(1000);
  for (std::size_t t = 2; t <= s.T; ++t) {
    const PosteriorCoefficients c = posterior_coefficients(t, s);
    // z_t = sqrt(ab_t) z0 with no noise must map back to sqrt(ab_{t-1}) z0.
    CHECK(c.c_z0 + c.c_zt * std::sqrt(s.alpha_bar[t]) == doctest::Approx(std::sqrt(s.alpha_bar[t - 1])).epsilon(1e-12));
    CHECK(s.alpha_bar[t - 1] == doctest::Approx(s.alpha_bar[t] / s.alpha[t]).epsilon(1e-12));
    CHECK(c.var <= s.beta[t]);
    CHECK(c.var == doctest::Approx((1.0 - s.alpha_bar[t - 1]) / (1.0 - s.alpha_bar[t]) * s.beta[t]).epsilon(1e-12));
  }
  CHECK(error_code_of([&] { posterior_coefficients(1, s); }) == ErrorCode::kInvalidArgument);

  // Degenerate step with alpha_t = 1: ab_prev = ab and the mean returns z_t.
  NoiseSchedule d;
  d.T = 2;
  d.beta = {0.0, 0.5, 1e-300};
  d.alpha = {1.0, 0.5, 1.0};
  d.alpha_bar = {1.0, 0.5, 0.5};
  d.posterior_var = {0.0, 0.0, 0.0};
  const std::vector<double> z{0.8, -0.1};
  const PosteriorParams p = ddpm_posterior_params(z, z, 2, d);
  CHECK(p.mean[0] == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(p.mean[1] == doctest::Approx(-0.1).epsilon(1e-12));
}

TEST_CASE("ddpm_loss: exact oracle gives zero, the zero model gives one per element") {
  const NoiseSchedule s = make_schedule(1000);
  Rng data(4);
  const ag::Tensor z0 = random_constant({256, 2}, data);
  const EpsModel exact = [&](const ag::Tensor& z_t, const std::vector<std::size_t>& t) {
    std::vector<double> out(z_t.numel());
    for (std::size_t i = 0; i < t.size(); ++i)
      for (std::size_t j = 0; j < 2; ++j)
        out[i * 2 + j] = (z_t.at(i * 2 + j) - std::sqrt(s.alpha_bar[t[i]]) * z0.at(i * 2 + j)) /
                         std::sqrt(1.0 - s.alpha_bar[t[i]]);
    return ag::Tensor::constant(z_t.shape(), out);
  };
  Rng rng(5);
  CHECK(ddpm_loss(z0, exact, s, rng).item() < 1e-20);

  const EpsModel zero = [](const ag::Tensor& z_t, const std::vector<std::size_t>&) {
    return ag::Tensor::zeros(z_t.shape());
  };
  const ag::Tensor big = ag::Tensor::zeros({50000, 2});
  const double loss = ddpm_loss(big, zero, s, rng).item();
  CHECK(std::abs(loss - 1.0) < 3.0 * std::sqrt(2.0 / 100000.0));
}

TEST_CASE("training timesteps are uniform over deciles of [1, T]") {
  const NoiseSchedule s = make_schedule(1000);
  std::vector<std::size_t> counts(10, 0);
  const EpsModel record = [&](const ag::Tensor& z_t, const std::vector<std::size_t>& t) {
    for (auto v : t) ++counts[(v - 1) / 100];
    return ag::Tensor::zeros(z_t.shape());
  };
  Rng rng(6);
  const ag::Tensor z0 = ag::Tensor::zeros({1000, 1});
  for (int i = 0; i < 100; ++i) ddpm_loss(z0, record, s, rng);
  const double n = 100000.0, se = std::sqrt(0.1 * 0.9 / n);
  for (auto c : counts) CHECK(std::abs(c / n - 0.1) < 3.0 * se);
}

TEST_CASE("DDIM ladder and determinism") {
  CHECK(ddim_timesteps(1000, 50).front() == 1);
  CHECK(ddim_timesteps(1000, 50)[1] == 21);
  CHECK(ddim_timesteps(1000, 50).back() == 981);
  CHECK(ddim_timesteps(10, 10) == std::vector<std::size_t>{1, 2, 3, 4, 5, 6, 7, 8, 9, 10});
  CHECK(ddim_timesteps(7, 3) == std::vector<std::size_t>{1, 3, 5});
  CHECK(error_code_of([] { ddim_timesteps(10, 0); }) == ErrorCode::kInvalidArgument);
  CHECK(error_code_of([] { ddim_timesteps(10, 11); }) == ErrorCode::kInvalidArgument);

  const NoiseSchedule s = make_schedule(1000);
  const EpsModel oracle = gaussian_oracle(s, {0.5, -0.5}, 0.3);
  const ag::Tensor a = ddim_sample(oracle, s, 50, 0.0, 11, {4, 2});
  const ag::Tensor b = ddim_sample(oracle, s, 50, 0.0, 11, {4, 2});
  CHECK(a.to_vector() == b.to_vector());
  CHECK(a.to_vector() != ddim_sample(oracle, s, 50, 0.0, 12, {4, 2}).to_vector());
  CHECK(error_code_of([&] { ddim_sample(oracle, s, 50, 1.5, 1, {1, 2}); }) == ErrorCode::kInvalidArgument);

  // Eta = 0 is a pure function of the initial noise.
  Rng r1(1), r2(99);
  const ag::Tensor init = ag::Tensor::constant({4, 2}, Rng(11).normal_vector(8));
  CHECK(ddim_sample_from(oracle, s, 50, 0.0, init, r1).to_vector() ==
        ddim_sample_from(oracle, s, 50, 0.0, init, r2).to_vector());
  CHECK(ddim_sample_from(oracle, s, 50, 0.0, init, r1).to_vector() == a.to_vector());
}

TEST_CASE("DDIM with the analytic oracle returns standard normal samples") {
  const NoiseSchedule s = make_schedule(1000);
  const ag::Tensor z = ddim_sample(gaussian_oracle(s, {0.0}, 1.0), s, 50, 0.0, 21, {10000, 1});
  const std::vector<double> v = z.to_vector();
  CHECK(std::abs(mean_of(v)) < 0.05);
  CHECK(var_of(v) > 0.9);
  CHECK(var_of(v) < 1.1);
}

TEST_CASE("DDIM with eta 1 and every step matches ancestral sampling") {
  const NoiseSchedule s = make_schedule(1000);
  const EpsModel oracle = gaussian_oracle(s, {1.0}, 0.5);
  const std::vector<double> ddim = ddim_sample(oracle, s, 1000, 1.0, 31, {3000, 1}).to_vector();
  const std::vector<double> ddpm = ddpm_sample(oracle, s, 32, {3000, 1}).to_vector();
  const double p = ks_pvalue(ks_statistic(ddim, ddpm), 3000, 3000);
  CAPTURE(p);
  CHECK(p > 0.01);
  CHECK(mean_of(ddpm) == doctest::Approx(1.0).epsilon(0.05));
  CHECK(std::sqrt(var_of(ddpm)) == doctest::Approx(0.5).epsilon(0.05));
}

TEST_CASE("denoiser starts at zero and keeps latent shape") {
  DenoiserConfig c;
  c.latent_channels = 3;
  c.base_channels = 8;
  c.num_blocks = 1;
  c.time_dim = 8;
  const DenoiserParams p = init_denoiser(c, 1);
  Rng rng(7);
  const ag::Tensor z = random_constant({2, 3, 5, 6}, rng);
  const ag::Tensor out = denoiser_forward(p, z, {1, 700});
  CHECK(out.shape() == z.shape());
  for (double v : out.data()) CHECK(v == 0.0);
  CHECK(error_code_of([&] { denoiser_forward(p, random_constant({2, 2, 4, 4}, rng), {1, 2}); }) ==
        ErrorCode::kShapeMismatch);
}

TEST_CASE("timestep embedding is sinusoidal") {
  const ag::Tensor e = timestep_embedding({0, 10}, 4);
  REQUIRE(e.shape() == ag::Shape{2, 4});
  CHECK(e.at(0) == 0.0);
  CHECK(e.at(2) == 1.0);
  CHECK(e.at(4) == doctest::Approx(std::sin(10.0)));
  CHECK(e.at(6) == doctest::Approx(std::cos(10.0)));
}

TEST_CASE("denoiser gradients match finite differences") {
  DenoiserConfig c;
  c.latent_channels = 1;
  c.base_channels = 2;
  c.ch_mult = {1, 2};
  c.num_blocks = 1;
  c.time_dim = 4;
  DenoiserParams p = init_denoiser(c, 2);
  // Give the zero-initialized output layer a non-zero value so gradients reach every layer.
  Rng rng(8);
  {
    ag::Tensor out_w = p.tensors.at("eps.conv_out.W");
    auto w = out_w.mutable_data();
    for (double& v : w) v = 0.3 * rng.normal();
  }
  const ag::Tensor z = random_constant({2, 1, 4, 4}, rng);
  auto loss = [&] { return probe(denoiser_forward(p, z, {3, 400})); };
  for (const auto& [name, tensor] : p.tensors) {
    CAPTURE(name);
    CHECK(gradient_error(loss, tensor) < 1e-5);
  }
}
