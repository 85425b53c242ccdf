#include <doctest.h>

#include <cmath>

#include "ldmi/error.hpp"
#include "ldmi/pipeline.hpp"
#include "ldmi/tasks.hpp"
#include "support.hpp"

using namespace ldmi;
using ldmi::testing::error_code_of;
using ldmi::testing::kTinyConfig;

namespace {

struct Trained {
  Dataset data = make_synthetic_dataset("gaussians", 6, {8, 8}, 2);
  Checkpoint ivae, ldmi;

  Trained() {
    const ModelConfig c = parse_config(kTinyConfig);
    ivae = train_stage1(data, c, 1).ckpt;
    ldmi = train_stage2(data, ivae, c, 1).ckpt;
  }
};

const Trained& trained() {
  static const Trained t;
  return t;
}

}  // namespace

TEST_CASE("PSNR closed forms") {
  const std::vector<double> a{0.1, 0.5, 0.9};
  const PsnrReport same = compute_psnr(a, a);
  CHECK(same.mse == 0.0);
  CHECK(same.psnr_string() == "inf");
  CHECK(same.to_text().find("psnr_db=inf") != std::string::npos);
  const std::vector<double> zeros{0.0, 0.0}, ones{1.0, 1.0};
  const PsnrReport unit = compute_psnr(zeros, ones);
  CHECK(unit.mse == 1.0);
  CHECK(unit.psnr_db == 0.0);
  const std::vector<double> tenth{0.1, 0.1};
  CHECK(compute_psnr(zeros, tenth).psnr_db == doctest::Approx(20.0));
  CHECK(error_code_of([&] { compute_psnr(a, zeros); }) == ErrorCode::kShapeMismatch);
}

TEST_CASE("resolution scales") {
  CHECK(parse_scale("2").factor == 2.0);
  CHECK(parse_scale("0.5").factor == 0.5);
  CHECK(parse_scale("1/8").factor == 0.125);
  for (const char* bad : {"", "x", "0", "-1", "1/0", "2/"})
    CHECK(error_code_of([&] { parse_scale(bad); }) == ErrorCode::kInvalidArgument);
  CHECK(parse_scale("1/8").apply({64, 64}) == std::vector<std::size_t>{8, 8});
  CHECK(parse_scale("4").apply({16, 8}) == std::vector<std::size_t>{64, 32});
  CHECK(parse_scale("1/3").apply({16, 16}) == std::vector<std::size_t>{5, 5});
  CHECK(error_code_of([] { parse_scale("1/64").apply({16, 16}); }) == ErrorCode::kInvalidArgument);
}

TEST_CASE("sampling: empty, deterministic, and scale-independent latents") {
  const Trained& t = trained();
  SampleOptions o;
  o.n = 0;
  CHECK(sample(t.ldmi, o, 1).images.empty());
  o.n = 3;
  o.steps = 10;
  const SampleResult a = sample(t.ldmi, o, 7);
  const SampleResult b = sample(t.ldmi, o, 7);
  REQUIRE(a.images.size() == 3);
  CHECK(a.images == b.images);
  CHECK(a.images[0].width == 8);
  CHECK(a.latents[0].size() == 16);
  for (const auto& img : a.images)
    for (double v : img.pixels) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  o.scale = parse_scale("2");
  const SampleResult big = sample(t.ldmi, o, 7);
  CHECK(big.latents == a.latents);
  CHECK(big.phi_hashes == a.phi_hashes);
  CHECK(big.images[0].width == 16);
  CHECK(big.images[0].height == 16);
  CHECK(sample(t.ldmi, o, 8).latents != a.latents);
  CHECK(error_code_of([&] { sample(t.ivae, o, 1); }) == ErrorCode::kStageMismatch);
}

TEST_CASE("reconstruction reports PSNR at native resolution") {
  const Trained& t = trained();
  const ReconstructResult r = reconstruct(t.ivae, t.data.items, parse_scale("1/2"), 1);
  REQUIRE(r.images.size() == 6);
  CHECK(r.images[0].width == 4);
  CHECK(std::isfinite(r.psnr.psnr_db));
  const ReconstructResult native = reconstruct(t.ivae, t.data.items, ResolutionScale{}, 1);
  CHECK(native.psnr.mse == r.psnr.mse);
  std::vector<double> pooled_pred, pooled_truth;
  for (std::size_t i = 0; i < 6; ++i) {
    pooled_pred.insert(pooled_pred.end(), native.images[i].pixels.begin(), native.images[i].pixels.end());
    pooled_truth.insert(pooled_truth.end(), t.data.items[i].features.begin(), t.data.items[i].features.end());
  }
  CHECK(compute_psnr(pooled_pred, pooled_truth).mse == doctest::Approx(native.psnr.mse).epsilon(1e-12));
  const Signal wrong = make_synthetic_dataset("gaussians", 1, {4, 4}, 1).items[0];
  CHECK(error_code_of([&] { reconstruct(t.ivae, {wrong}, ResolutionScale{}, 1); }) ==
        ErrorCode::kResolutionMismatch);
}

TEST_CASE("inpainting") {
  const Trained& t = trained();
  const Signal& s = t.data.items[0];
  Mask full{s.resolution, std::vector<bool>(64, true)};
  const InpaintResult all = inpaint(t.ivae, s, full, 1, 3);
  const ReconstructResult rec = reconstruct(t.ivae, {s}, ResolutionScale{}, 3, true);
  REQUIRE(all.images.size() == 1);
  for (std::size_t i = 0; i < 64; ++i) CHECK(all.images[0].pixels[i] == doctest::Approx(rec.images[0].pixels[i]));
  CHECK(std::isnan(all.unobserved_mse[0]));

  Mask half{s.resolution, std::vector<bool>(64, true)};
  for (std::size_t i = 32; i < 64; ++i) half.observed[i] = false;
  const InpaintResult a = inpaint(t.ivae, s, half, 2, 4);
  const InpaintResult b = inpaint(t.ivae, s, half, 2, 5);
  CHECK(a.images.size() == 2);
  CHECK(a.observed_mse.size() == 2);
  CHECK(std::isfinite(a.unobserved_mse[0]));
  double diff = 0.0;
  for (std::size_t i = 32; i < 64; ++i) diff += std::abs(a.images[0].pixels[i] - b.images[0].pixels[i]);
  CHECK(diff > 0.0);

  Mask none{s.resolution, std::vector<bool>(64, false)};
  CHECK(error_code_of([&] { inpaint(t.ivae, s, none, 1, 1); }) == ErrorCode::kEmptyContext);
}
