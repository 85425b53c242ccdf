#include <doctest.h>

#include <cmath>
#include <numbers>

#include "ldmi/error.hpp"
#include "ldmi/inr.hpp"
#include "support.hpp"

using namespace ldmi;
using ldmi::testing::error_code_of;
using ldmi::testing::gradient_error;

TEST_CASE("1-D coordinate grids use pixel centres") {
  const std::size_t one[] = {1}, two[] = {2}, four[] = {4};
  CHECK(make_coordinate_grid(one, 1).coords == std::vector<double>{0.0});
  CHECK(make_coordinate_grid(two, 1).coords == std::vector<double>{-0.5, 0.5});
  CHECK(make_coordinate_grid(four, 1).coords == std::vector<double>{-0.75, -0.25, 0.25, 0.75});
  const std::size_t zero[] = {0};
  CHECK(error_code_of([&] { make_coordinate_grid(zero, 1); }) == ErrorCode::kInvalidArgument);
}

TEST_CASE("2-D grids are row-major products") {
  const std::size_t shape[] = {2, 3};
  const CoordinateGrid g = make_coordinate_grid(shape, 2);
  REQUIRE(g.size() == 6);
  CHECK(g.coords[0] == -0.5);
  CHECK(g.coords[1] == -1.0 + 1.0 / 3.0);
  CHECK(g.coords[2] == -0.5);
  CHECK(g.coords[3] == 0.0);
  CHECK(g.coords[10] == 0.5);
}

TEST_CASE("an n-grid is the pairwise mean of adjacent 2n-grid points") {
  for (std::size_t n : {1u, 3u, 8u, 17u}) {
    const std::size_t a[] = {n}, b[] = {2 * n};
    const auto coarse = make_coordinate_grid(a, 1).coords;
    const auto fine = make_coordinate_grid(b, 1).coords;
    for (std::size_t j = 0; j < n; ++j) CHECK(coarse[j] == doctest::Approx((fine[2 * j] + fine[2 * j + 1]) / 2.0).epsilon(1e-15));
  }
}

TEST_CASE("zero parameters give zero output") {
  InrConfig c;
  c.layers = 3;
  c.hidden_dim = 5;
  InrParams p;
  for (auto [out, in] : layer_shapes(c)) {
    p.weights.push_back(ag::Tensor::zeros({out, in}));
    p.biases.push_back(ag::Tensor::zeros({out}));
  }
  const std::size_t shape[] = {4, 4};
  ag::Tensor y = inr_forward(p, make_coordinate_grid(shape, 2).tensor(), c);
  for (double v : y.data()) CHECK(v == 0.0);
}

TEST_CASE("single-unit SIREN closed form") {
  InrConfig c;
  c.layers = 1;
  c.hidden_dim = 1;
  c.in_dim = 1;
  c.out_dim = 1;
  c.omega = 30.0;
  InrParams p;
  p.weights = {ag::Tensor::constant({1, 1}, {1.0 / 30.0}), ag::Tensor::constant({1, 1}, {1.0})};
  p.biases = {ag::Tensor::zeros({1}), ag::Tensor::zeros({1})};
  const double x = std::numbers::pi / 60.0;
  ag::Tensor y = inr_forward(p, ag::Tensor::constant({1, 1}, {x}), c);
  CHECK(y.item() == doctest::Approx(std::sin(std::numbers::pi / 60.0)).epsilon(1e-14));
  CHECK(y.item() == doctest::Approx(0.05234).epsilon(1e-4));
}

TEST_CASE("evaluation is pointwise: union grids and permutations") {
  InrConfig c;
  c.layers = 2;
  c.hidden_dim = 16;
  const InrParams p = siren_init(c, 3);
  const std::size_t sa[] = {5, 5}, sb[] = {7, 3};
  const auto a = make_coordinate_grid(sa, 2).coords;
  const auto b = make_coordinate_grid(sb, 2).coords;
  std::vector<double> both = b;
  both.insert(both.end(), a.begin(), a.end());
  ag::Tensor ya = inr_forward(p, ag::Tensor::constant({25, 2}, a), c);
  ag::Tensor yab = inr_forward(p, ag::Tensor::constant({46, 2}, both), c);
  for (std::size_t i = 0; i < 25; ++i) CHECK(ya.at(i) == yab.at(21 + i));

  std::vector<double> reversed;
  for (std::size_t i = 25; i-- > 0;) reversed.insert(reversed.end(), {a[2 * i], a[2 * i + 1]});
  ag::Tensor yr = inr_forward(p, ag::Tensor::constant({25, 2}, reversed), c);
  for (std::size_t i = 0; i < 25; ++i) CHECK(yr.at(i) == ya.at(24 - i));
}

TEST_CASE("shape mismatches are rejected") {
  InrConfig c;
  const InrParams p = siren_init(c, 1);
  CHECK(error_code_of([&] { inr_forward(p, ag::Tensor::zeros({4, 3}), c); }) == ErrorCode::kShapeMismatch);
  InrConfig wider = c;
  wider.hidden_dim = 33;
  CHECK(error_code_of([&] { inr_forward(p, ag::Tensor::zeros({4, 2}), wider); }) == ErrorCode::kShapeMismatch);
}

TEST_CASE("SIREN initialization bounds and determinism") {
  InrConfig c;
  c.layers = 3;
  c.hidden_dim = 256;
  c.omega = 30.0;
  const InrParams p = siren_init(c, 9);
  for (double v : p.weights[0].data()) CHECK(std::abs(v) <= 1.0 / 2.0);
  const double bound = std::sqrt(6.0 / 256.0) / 30.0;
  CHECK(bound == doctest::Approx(0.005103).epsilon(1e-4));
  double max_seen = 0.0;
  for (std::size_t l = 1; l < p.weights.size(); ++l)
    for (double v : p.weights[l].data()) max_seen = std::max(max_seen, std::abs(v));
  CHECK(max_seen <= bound);
  CHECK(max_seen > 0.9 * bound);
  for (const auto& b : p.biases)
    for (double v : b.data()) CHECK(v == 0.0);
  const InrParams q = siren_init(c, 9);
  for (std::size_t l = 0; l < p.weights.size(); ++l) CHECK(p.weights[l].to_vector() == q.weights[l].to_vector());

  InrConfig relu = c;
  relu.activation = Activation::kRelu;
  CHECK(error_code_of([&] { siren_init(relu, 1); }) == ErrorCode::kInvalidArgument);
}

TEST_CASE("Gaussian likelihood closed forms") {
  const double c0 = std::log(std::sqrt(2.0 * std::numbers::pi));
  ag::Tensor y = ag::Tensor::constant({1, 1}, {0.3});
  CHECK(likelihood_logprob(y, y, 1.0).item() == doctest::Approx(-c0).epsilon(1e-14));
  CHECK(-c0 == doctest::Approx(-0.91894).epsilon(1e-5));
  ag::Tensor off = ag::Tensor::constant({1, 1}, {1.3});
  CHECK(likelihood_logprob(off, y, 1.0).item() == doctest::Approx(-1.41894).epsilon(1e-5));
  ag::Tensor y2 = ag::Tensor::constant({2, 1}, {0.3, 0.3});
  ag::Tensor off2 = ag::Tensor::constant({2, 1}, {1.3, 1.3});
  CHECK(likelihood_logprob(off2, y2, 1.0).item() == doctest::Approx(2.0 * likelihood_logprob(off, y, 1.0).item()));
  CHECK(error_code_of([&] { likelihood_logprob(y, y, 0.0); }) == ErrorCode::kInvalidArgument);
}

TEST_CASE("likelihood of a width-8 SIREN matches finite differences") {
  InrConfig c;
  c.layers = 2;
  c.hidden_dim = 8;
  c.omega = 3.0;
  const InrParams p = siren_init(c, 4);
  const std::size_t shape[] = {4, 4};
  const ag::Tensor coords = make_coordinate_grid(shape, 2).tensor();
  Rng rng(2);
  const ag::Tensor target = ag::Tensor::constant({16, 1}, rng.uniform_vector(16, 0.0, 1.0));
  auto loss = [&] { return likelihood_logprob(inr_forward(p, coords, c), target, 0.5); };
  for (std::size_t l = 0; l < p.weights.size(); ++l) {
    CHECK(gradient_error(loss, p.weights[l]) < 1e-4);
    CHECK(gradient_error(loss, p.biases[l]) < 1e-4);
  }
}

TEST_CASE("Fourier encoding feeds the first layer") {
  InrConfig c;
  c.point_enc_dim = 8;
  c.fourier_scale = 4.0;
  CHECK(encoded_dim(c) == 8);
  CHECK(layer_shapes(c).front() == std::pair<std::size_t, std::size_t>{32, 8});
  const std::vector<double> x{0.25, -0.5};
  const auto e = encode_coordinates(x, c);
  REQUIRE(e.size() == 8);
  CHECK(e[0] == doctest::Approx(std::sin(std::numbers::pi * 0.25)));
  CHECK(e[1] == doctest::Approx(std::cos(std::numbers::pi * 0.25)));
  CHECK(e[2] == doctest::Approx(std::sin(std::numbers::pi * 4.0 * 0.25)));
  CHECK(e[4] == doctest::Approx(std::sin(-std::numbers::pi * 0.5)));
  const InrParams p = siren_init(c, 1);
  CHECK(inr_forward(p, ag::Tensor::constant({1, 2}, x), c).numel() == 1);
}
