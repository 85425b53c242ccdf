#include <doctest.h>

#include <cmath>

#include "ldmi/autograd.hpp"
#include "ldmi/error.hpp"
#include "support.hpp"

using namespace ldmi;
using ldmi::testing::gradient_error;
using ldmi::testing::probe;
using ldmi::testing::random_param;

namespace {
constexpr double kTol = 1e-6;
}

TEST_CASE("elementwise ops match finite differences") {
  Rng rng(1);
  ag::Tensor a = random_param({3, 4}, rng);
  ag::Tensor b = random_param({3, 4}, rng);
  auto check = [&](auto fn) {
    CHECK(gradient_error([&] { return probe(fn(a, b)); }, a) < kTol);
    CHECK(gradient_error([&] { return probe(fn(a, b)); }, b) < kTol);
  };
  check([](auto& x, auto& y) { return ag::add(x, y); });
  check([](auto& x, auto& y) { return ag::sub(x, y); });
  check([](auto& x, auto& y) { return ag::mul(x, y); });
  check([](auto& x, auto& y) { return ag::mul(ag::sin(x), ag::exp(ag::scale(y, 0.3))); });
  check([](auto& x, auto& y) { return ag::add(ag::square(x), ag::silu(y)); });
  check([](auto& x, auto& y) { return ag::mul(ag::gelu(x), ag::add_scalar(y, 2.0)); });
}

TEST_CASE("clamp passes gradient only inside the range") {
  ag::Tensor a = ag::Tensor::parameter({3}, {-2.0, 0.5, 3.0});
  ag::Tensor out = ag::sum(ag::clamp(a, -1.0, 1.0));
  out.backward();
  CHECK(a.grad()[0] == 0.0);
  CHECK(a.grad()[1] == 1.0);
  CHECK(a.grad()[2] == 0.0);
}

TEST_CASE("matmul variants and bias broadcast") {
  Rng rng(2);
  ag::Tensor a = random_param({3, 5}, rng);
  ag::Tensor b = random_param({5, 2}, rng);
  ag::Tensor c = random_param({4, 5}, rng);
  ag::Tensor bias = random_param({4}, rng);
  CHECK(gradient_error([&] { return probe(ag::matmul(a, b)); }, a) < kTol);
  CHECK(gradient_error([&] { return probe(ag::matmul(a, b)); }, b) < kTol);
  CHECK(gradient_error([&] { return probe(ag::add_bias(ag::matmul_nt(a, c), bias)); }, c) < kTol);
  CHECK(gradient_error([&] { return probe(ag::add_bias(ag::matmul_nt(a, c), bias)); }, bias) < kTol);
  CHECK(gradient_error([&] { return probe(ag::transpose(a)); }, a) < kTol);
}

TEST_CASE("matmul rows do not depend on the other rows of the batch") {
  Rng rng(3);
  ag::Tensor w = random_param({7, 6}, rng);
  ag::Tensor x = random_param({9, 6}, rng);
  ag::Tensor full = ag::matmul_nt(x, w);
  ag::Tensor part = ag::matmul_nt(ag::slice_rows(x, 2, 5), w);
  for (std::size_t i = 0; i < part.numel(); ++i) CHECK(part.at(i) == full.at(2 * 7 + i));
}

TEST_CASE("layout ops route gradients") {
  Rng rng(4);
  ag::Tensor a = random_param({4, 3}, rng);
  ag::Tensor b = random_param({2, 3}, rng);
  CHECK(gradient_error([&] { return probe(ag::reshape(a, {3, 4})); }, a) < kTol);
  CHECK(gradient_error([&] { return probe(ag::slice_rows(a, 1, 3)); }, a) < kTol);
  CHECK(gradient_error([&] { return probe(ag::concat_rows({a, b, a})); }, a) < kTol);
  CHECK(gradient_error([&] { return probe(ag::gather(a, {0, 0, 5, 11, 5}, {5})); }, a) < kTol);
}

TEST_CASE("layer norm gradients") {
  Rng rng(5);
  ag::Tensor x = random_param({3, 6}, rng);
  ag::Tensor g = random_param({6}, rng);
  ag::Tensor b = random_param({6}, rng);
  auto f = [&] { return probe(ag::layer_norm(x, g, b)); };
  CHECK(gradient_error(f, x) < kTol);
  CHECK(gradient_error(f, g) < kTol);
  CHECK(gradient_error(f, b) < kTol);
}

TEST_CASE("attention gradients, with and without a key mask") {
  Rng rng(6);
  ag::Tensor q = random_param({3, 8}, rng);
  ag::Tensor k = random_param({5, 8}, rng);
  ag::Tensor v = random_param({5, 8}, rng);
  const std::vector<bool> mask{true, false, true, true, false};
  for (const std::vector<bool>* m : {static_cast<const std::vector<bool>*>(nullptr), &mask}) {
    auto f = [&] { return probe(ag::attention(q, k, v, 2, m)); };
    CHECK(gradient_error(f, q) < kTol);
    CHECK(gradient_error(f, k) < kTol);
    CHECK(gradient_error(f, v) < kTol);
  }
}

TEST_CASE("attention probabilities are normalized and respect the mask") {
  Rng rng(7);
  ag::Tensor q = random_param({4, 6}, rng);
  ag::Tensor k = random_param({5, 6}, rng);
  const std::vector<bool> mask{false, true, false, true, true};
  std::vector<double> probs;
  ag::attention(q, k, k, 3, &mask, &probs);
  REQUIRE(probs.size() == 3 * 4 * 5);
  for (std::size_t row = 0; row < 12; ++row) {
    double total = 0.0;
    for (std::size_t j = 0; j < 5; ++j) {
      total += probs[row * 5 + j];
      if (!mask[j]) CHECK(probs[row * 5 + j] == 0.0);
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
  }
  const std::vector<bool> none(5, false);
  CHECK_THROWS_AS(ag::attention(q, k, k, 3, &none), Error);
}

TEST_CASE("conv2d gradients for stride 1 and 2") {
  Rng rng(8);
  ag::Tensor x = random_param({2, 3, 5, 5}, rng);
  ag::Tensor w = random_param({4, 3, 3, 3}, rng, 0.3);
  ag::Tensor b = random_param({4}, rng);
  for (std::size_t stride : {1u, 2u}) {
    auto f = [&] { return probe(ag::conv2d(x, w, b, stride, 1)); };
    CHECK(gradient_error(f, x) < kTol);
    CHECK(gradient_error(f, w) < kTol);
    CHECK(gradient_error(f, b) < kTol);
  }
  ag::Tensor out = ag::conv2d(x, w, b, 2, 1);
  CHECK(out.shape() == ag::Shape{2, 4, 3, 3});
}

TEST_CASE("conv2d matches a direct loop") {
  Rng rng(9);
  ag::Tensor x = random_param({1, 2, 4, 3}, rng);
  ag::Tensor w = random_param({3, 2, 3, 3}, rng);
  ag::Tensor b = random_param({3}, rng);
  ag::Tensor out = ag::conv2d(x, w, b, 1, 1);
  for (std::size_t o = 0; o < 3; ++o)
    for (std::size_t y = 0; y < 4; ++y)
      for (std::size_t xx = 0; xx < 3; ++xx) {
        double s = b.at(o);
        for (std::size_t c = 0; c < 2; ++c)
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              const int iy = static_cast<int>(y) + dy, ix = static_cast<int>(xx) + dx;
              if (iy < 0 || iy >= 4 || ix < 0 || ix >= 3) continue;
              s += x.at((c * 4 + iy) * 3 + ix) * w.at(((o * 2 + c) * 3 + (dy + 1)) * 3 + (dx + 1));
            }
        CHECK(out.at((o * 4 + y) * 3 + xx) == doctest::Approx(s).epsilon(1e-12));
      }
}

TEST_CASE("channel bias and upsampling gradients") {
  Rng rng(10);
  ag::Tensor x = random_param({2, 3, 3, 3}, rng);
  ag::Tensor t = random_param({2, 3}, rng);
  CHECK(gradient_error([&] { return probe(ag::add_channel_bias(x, t)); }, t) < kTol);
  CHECK(gradient_error([&] { return probe(ag::add_channel_bias(x, t)); }, x) < kTol);
  CHECK(gradient_error([&] { return probe(ag::upsample2x(x, 5, 6)); }, x) < kTol);
  CHECK(ag::upsample2x(x, 5, 6).shape() == ag::Shape{2, 3, 5, 6});
}

TEST_CASE("normalize_columns yields unit columns and rejects degenerate ones") {
  Rng rng(11);
  ag::Tensor a = random_param({4, 3}, rng);
  ag::Tensor n = ag::normalize_columns(a, 1e-12);
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0.0;
    for (std::size_t r = 0; r < 4; ++r) s += n.at(r * 3 + c) * n.at(r * 3 + c);
    CHECK(std::sqrt(s) == doctest::Approx(1.0).epsilon(1e-14));
  }
  CHECK(gradient_error([&] { return probe(ag::normalize_columns(a, 1e-12)); }, a) < kTol);
  ag::Tensor z = ag::Tensor::constant({2, 2}, {1.0, 0.0, 1.0, 0.0});
  try {
    ag::normalize_columns(z, 1e-12);
    FAIL("expected degenerate-norm");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kDegenerateNorm);
  }
}

TEST_CASE("no graph is recorded under NoGradGuard") {
  ag::Tensor a = ag::Tensor::parameter({2}, {1.0, 2.0});
  ag::Tensor out;
  {
    ag::NoGradGuard guard;
    out = ag::sum(ag::square(a));
  }
  CHECK(out.node()->parents.empty());
  CHECK(ag::grad_enabled());
}
