#include "ldmi/inr.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "ldmi/error.hpp"
#include "ldmi/rng.hpp"

namespace ldmi {

void validate(const InrConfig& config) {
  auto fail = [](const std::string& msg) { throw Error(ErrorCode::kInvalidConfig, msg); };
  if (config.layers < 1) fail("layers must be >= 1");
  if (config.hidden_dim < 1) fail("hidden_dim must be >= 1");
  if (config.in_dim < 1) fail("in_dim must be >= 1");
  if (config.out_dim < 1) fail("out_dim must be >= 1");
  if (config.activation == Activation::kSine && !(config.omega > 0.0)) fail("omega must be > 0");
  if (config.point_enc_dim % (2 * config.in_dim) != 0)
    fail("point_enc_dim must be a multiple of 2 * in_dim");
  if (config.point_enc_dim > 0 && !(config.fourier_scale >= 1.0)) fail("fourier_scale must be >= 1");
  if (!(config.sigma > 0.0)) fail("sigma must be > 0");
}

std::size_t encoded_dim(const InrConfig& config) {
  return config.point_enc_dim == 0 ? config.in_dim : config.point_enc_dim;
}

std::vector<std::pair<std::size_t, std::size_t>> layer_shapes(const InrConfig& config) {
  std::vector<std::pair<std::size_t, std::size_t>> shapes;
  std::size_t in = encoded_dim(config);
  for (std::size_t l = 0; l < config.layers; ++l) {
    shapes.emplace_back(config.hidden_dim, in);
    in = config.hidden_dim;
  }
  shapes.emplace_back(config.out_dim, in);
  return shapes;
}

std::size_t weight_count(const InrConfig& config) {
  std::size_t total = 0;
  for (auto [out, in] : layer_shapes(config)) total += out * in;
  return total;
}

ag::Tensor CoordinateGrid::tensor() const {
  return ag::Tensor::constant({size(), dim}, coords);
}

CoordinateGrid make_coordinate_grid(std::span<const std::size_t> shape, std::size_t in_dim) {
  if (shape.size() != in_dim || in_dim == 0)
    throw Error(ErrorCode::kInvalidArgument, "coordinate grid rank " + std::to_string(shape.size()) +
                                                 " does not match in_dim " + std::to_string(in_dim));
  std::size_t total = 1;
  for (auto n : shape) {
    if (n == 0) throw Error(ErrorCode::kInvalidArgument, "coordinate grid axis has zero length");
    total *= n;
  }
  CoordinateGrid grid;
  grid.shape.assign(shape.begin(), shape.end());
  grid.dim = in_dim;
  grid.coords.resize(total * in_dim);
  std::vector<std::size_t> idx(in_dim, 0);
  for (std::size_t p = 0; p < total; ++p) {
    for (std::size_t a = 0; a < in_dim; ++a) {
      const double n = static_cast<double>(shape[a]);
      grid.coords[p * in_dim + a] = -1.0 + (2.0 * static_cast<double>(idx[a]) + 1.0) / n;
    }
    for (std::size_t a = in_dim; a-- > 0;) {
      if (++idx[a] < shape[a]) break;
      idx[a] = 0;
    }
  }
  return grid;
}

std::vector<double> encode_coordinates(std::span<const double> coords, const InrConfig& config) {
  if (config.point_enc_dim == 0) return {coords.begin(), coords.end()};
  const std::size_t in = config.in_dim;
  const std::size_t freqs = config.point_enc_dim / (2 * in);
  const std::size_t points = coords.size() / in;
  // Log-spaced frequencies in [1, fourier_scale] per axis; sin/cos pairs.
  std::vector<double> freq(freqs, 1.0);
  for (std::size_t j = 0; j < freqs && freqs > 1; ++j)
    freq[j] = std::exp(std::log(config.fourier_scale) * static_cast<double>(j) /
                       static_cast<double>(freqs - 1));
  std::vector<double> out(points * config.point_enc_dim);
  for (std::size_t p = 0; p < points; ++p) {
    double* row = out.data() + p * config.point_enc_dim;
    for (std::size_t a = 0; a < in; ++a) {
      for (std::size_t j = 0; j < freqs; ++j) {
        const double arg = std::numbers::pi * freq[j] * coords[p * in + a];
        row[(a * freqs + j) * 2] = std::sin(arg);
        row[(a * freqs + j) * 2 + 1] = std::cos(arg);
      }
    }
  }
  return out;
}

ag::Tensor inr_forward(const InrParams& params, const ag::Tensor& coords, const InrConfig& config) {
  const auto shapes = layer_shapes(config);
  if (params.weights.size() != shapes.size() || params.biases.size() != shapes.size())
    throw Error(ErrorCode::kShapeMismatch, "INR expects " + std::to_string(shapes.size()) +
                                               " layers, got " + std::to_string(params.weights.size()));
  for (std::size_t l = 0; l < shapes.size(); ++l) {
    const ag::Shape w{shapes[l].first, shapes[l].second};
    if (params.weights[l].shape() != w || params.biases[l].numel() != shapes[l].first)
      throw Error(ErrorCode::kShapeMismatch, "INR layer " + std::to_string(l + 1) + " expects weight " +
                                                 ag::shape_str(w) + ", got " +
                                                 ag::shape_str(params.weights[l].shape()));
  }
  if (coords.rank() != 2 || coords.dim(1) != config.in_dim)
    throw Error(ErrorCode::kShapeMismatch, "INR coordinates must be [points, " +
                                               std::to_string(config.in_dim) + "], got " +
                                               ag::shape_str(coords.shape()));

  ag::Tensor h = coords;
  if (config.point_enc_dim != 0)
    h = ag::Tensor::constant({coords.dim(0), config.point_enc_dim},
                             encode_coordinates(coords.data(), config));
  const std::size_t last = shapes.size() - 1;
  for (std::size_t l = 0; l < shapes.size(); ++l) {
    h = ag::add_bias(ag::matmul_nt(h, params.weights[l]), params.biases[l]);
    if (l == last) break;
    h = config.activation == Activation::kSine ? ag::sin(ag::scale(h, config.omega)) : ag::relu(h);
  }
  return h;
}

InrParams siren_init(const InrConfig& config, std::uint64_t seed) {
  if (config.activation != Activation::kSine)
    throw Error(ErrorCode::kInvalidArgument, "siren_init requires a sine activation");
  Rng rng(seed);
  InrParams params;
  const auto shapes = layer_shapes(config);
  for (std::size_t l = 0; l < shapes.size(); ++l) {
    const auto [out, in] = shapes[l];
    const double fan_in = static_cast<double>(in);
    const double bound = l == 0 ? 1.0 / fan_in : std::sqrt(6.0 / fan_in) / config.omega;
    params.weights.push_back(ag::Tensor::parameter({out, in}, rng.uniform_vector(out * in, -bound, bound)));
    params.biases.push_back(ag::Tensor::parameter({out}, std::vector<double>(out, 0.0)));
  }
  return params;
}

InrParams mlp_init(const InrConfig& config, std::uint64_t seed) {
  Rng rng(seed);
  InrParams params;
  for (const auto& [out, in] : layer_shapes(config)) {
    const double bound = std::sqrt(6.0 / static_cast<double>(in));
    params.weights.push_back(ag::Tensor::parameter({out, in}, rng.uniform_vector(out * in, -bound, bound)));
    params.biases.push_back(ag::Tensor::parameter({out}, std::vector<double>(out, 0.0)));
  }
  return params;
}

InrParams init_inr(const InrConfig& config, std::uint64_t seed) {
  return config.activation == Activation::kSine ? siren_init(config, seed) : mlp_init(config, seed);
}

ag::Tensor likelihood_logprob(const ag::Tensor& pred, const ag::Tensor& target, double sigma) {
  if (!(sigma > 0.0)) throw Error(ErrorCode::kInvalidArgument, "likelihood sigma must be > 0");
  if (pred.shape() != target.shape())
    throw Error(ErrorCode::kShapeMismatch, "likelihood: prediction " + ag::shape_str(pred.shape()) +
                                               " vs target " + ag::shape_str(target.shape()));
  const double log_norm = std::log(sigma * std::sqrt(2.0 * std::numbers::pi));
  ag::Tensor sq = ag::sum(ag::square(ag::sub(target, pred)));
  return ag::add_scalar(ag::scale(sq, -0.5 / (sigma * sigma)),
                        -log_norm * static_cast<double>(pred.numel()));
}

}  // namespace ldmi
