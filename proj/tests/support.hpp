#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <optional>
#include <vector>

#include "ldmi/autograd.hpp"
#include "ldmi/error.hpp"
#include "ldmi/rng.hpp"

namespace ldmi::testing {

/// Relative error between analytic and central-difference gradients of
/// `loss` with respect to every entry of `param`, measured as
/// ||g_a - g_n|| / max(||g_a||, ||g_n||).
inline double gradient_error(const std::function<ag::Tensor()>& loss, ag::Tensor param, double h = 1e-5) {
  {
    param.zero_grad();
    ag::Tensor l = loss();
    l.backward();
  }
  std::vector<double> analytic(param.numel(), 0.0);
  if (!param.grad().empty()) std::copy(param.grad().begin(), param.grad().end(), analytic.begin());
  param.zero_grad();

  std::vector<double> numeric(param.numel());
  {
    ag::NoGradGuard no_grad;
    auto data = param.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + h;
      const double up = loss().item();
      data[i] = saved - h;
      const double down = loss().item();
      data[i] = saved;
      numeric[i] = (up - down) / (2.0 * h);
    }
  }
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  const double scale = std::max(std::sqrt(na), std::sqrt(nn));
  return scale == 0.0 ? 0.0 : std::sqrt(diff) / scale;
}

inline ag::Tensor random_param(ag::Shape shape, Rng& rng, double scale = 1.0) {
  std::vector<double> v = rng.normal_vector(ag::shape_numel(shape));
  for (double& x : v) x *= scale;
  return ag::Tensor::parameter(std::move(shape), std::move(v));
}

inline ag::Tensor random_constant(ag::Shape shape, Rng& rng, double scale = 1.0) {
  std::vector<double> v = rng.normal_vector(ag::shape_numel(shape));
  for (double& x : v) x *= scale;
  return ag::Tensor::constant(std::move(shape), std::move(v));
}

/// Weighted sum with fixed random weights, so every output entry reaches
/// the loss with a distinct coefficient.
inline ag::Tensor probe(const ag::Tensor& out, std::uint64_t seed = 99) {
  Rng rng(seed);
  ag::Tensor w = ag::Tensor::constant(out.shape(), rng.normal_vector(out.numel()));
  return ag::sum(ag::mul(out, w));
}

/// Code of the ldmi::Error thrown by fn, or nullopt when nothing is thrown.
template <typename Fn>
std::optional<ErrorCode> error_code_of(Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return std::nullopt;
}

/// Fresh, empty scratch directory for one test.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("ldmi_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

/// A model small enough to train for a few steps inside a unit test.
inline const char* kTinyConfig = R"(
[encoder]
resolution = 8x8
in_channels = 1
latent_channels = 1
base_channels = 4
ch_mult = 1,2
num_blocks = 1

[hd]
latent_size = 4x4
patch_size = 2
token_dim = 8
encoder_layers = 1
decoder_layers = 1
heads = 2
head_dim = 4
feedforward_dim = 16
groups = 4
recon_mode = scale

[inr]
type = siren
layers = 1
hidden_dim = 8
omega = 10

[diffusion]
diffusion_steps = 50
base_channels = 4
ch_mult = 1,2
num_blocks = 1
time_dim = 8

[train]
batch_size = 4
iterations = 6,6
lr = 0.001,0.001
kl_weight = 0.00001
)";

}  // namespace ldmi::testing
