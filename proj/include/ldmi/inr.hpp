#pragma once

// Implicit neural representations: an MLP f_phi mapping coordinates to
// features, evaluated pointwise on coordinate grids.
//
// With `layers` = L hidden layers the network has L + 1 affine maps:
//   h_0 = encode(x)
//   h_l = act(W_l h_{l-1} + b_l)      l = 1..L
//   f(x) = W_{L+1} h_L + b_{L+1}
// Sine layers compute sin(omega * (W h + b)) with the same omega in every
// hidden layer.

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "ldmi/autograd.hpp"

namespace ldmi {

enum class Activation { kSine, kRelu };

struct InrConfig {
  std::size_t layers = 2;      // hidden layers
  std::size_t hidden_dim = 32;
  std::size_t in_dim = 2;      // coordinate dimension
  std::size_t out_dim = 1;     // feature dimension
  Activation activation = Activation::kSine;
  double omega = 30.0;
  /// 0 selects the identity encoding; otherwise the width of the Fourier
  /// feature encoding (a multiple of 2 * in_dim).
  std::size_t point_enc_dim = 0;
  double fourier_scale = 10.0;
  /// Fixed standard deviation of the Gaussian likelihood.
  double sigma = 1.0;
};

void validate(const InrConfig& config);

/// Width of the encoded coordinates fed to the first layer.
std::size_t encoded_dim(const InrConfig& config);

/// (d_out, d_in) of every affine map, first to last.
std::vector<std::pair<std::size_t, std::size_t>> layer_shapes(const InrConfig& config);

/// Number of weight-matrix entries (biases excluded).
std::size_t weight_count(const InrConfig& config);

struct InrParams {
  std::vector<ag::Tensor> weights;  // [d_out, d_in]
  std::vector<ag::Tensor> biases;   // [d_out]
};

/// Pixel-centre grid on [-1, 1]^d: axis i with n samples holds
/// x_j = -1 + (2j + 1) / n, combined in row-major order.
struct CoordinateGrid {
  std::vector<std::size_t> shape;
  std::size_t dim = 0;
  std::vector<double> coords;  // size() x dim

  std::size_t size() const { return dim ? coords.size() / dim : 0; }
  ag::Tensor tensor() const;
};

CoordinateGrid make_coordinate_grid(std::span<const std::size_t> shape, std::size_t in_dim);

/// Applies the configured coordinate encoding to [points, in_dim] values.
std::vector<double> encode_coordinates(std::span<const double> coords, const InrConfig& config);

/// Evaluates the INR at every row of `coords` ([points, in_dim]).
ag::Tensor inr_forward(const InrParams& params, const ag::Tensor& coords, const InrConfig& config);

/// SIREN initialization: first layer U(-1/fan_in, 1/fan_in), later layers
/// U(-sqrt(6/fan_in)/omega, +sqrt(6/fan_in)/omega), zero biases.
InrParams siren_init(const InrConfig& config, std::uint64_t seed);

/// Kaiming-uniform initialization for ReLU networks, zero biases.
InrParams mlp_init(const InrConfig& config, std::uint64_t seed);

/// Picks siren_init or mlp_init from the activation.
InrParams init_inr(const InrConfig& config, std::uint64_t seed);

/// Total Gaussian log-density sum_i [-0.5 ((y_i - yhat_i)/sigma)^2
/// - ln(sigma sqrt(2 pi))] over every point and feature dimension.
ag::Tensor likelihood_logprob(const ag::Tensor& pred, const ag::Tensor& target, double sigma);

}  // namespace ldmi
