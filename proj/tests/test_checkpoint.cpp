#include <doctest.h>

#include "ldmi/checkpoint.hpp"
#include "ldmi/error.hpp"
#include "ldmi/pipeline.hpp"
#include "support.hpp"

using namespace ldmi;
using ldmi::testing::error_code_of;
using ldmi::testing::kTinyConfig;
using ldmi::testing::scratch_dir;

namespace {

Checkpoint tiny_ivae() {
  ModelConfig c = parse_config(kTinyConfig);
  c.train.iterations = {1};
  const Dataset d = make_synthetic_dataset("gaussians", 4, {8, 8}, 1);
  return train_stage1(d, c, 3).ckpt;
}

ParamSet without(const ParamSet& tensors, std::string_view name) {
  ParamSet out;
  for (const auto& [n, t] : tensors)
    if (n != name) out.add(n, t);
  return out;
}

}  // namespace

TEST_CASE("checkpoint roundtrip is bit-exact and keeps the stage tag") {
  const auto dir = scratch_dir("ckpt");
  Checkpoint ck = tiny_ivae();
  save_checkpoint(dir / "a.ckpt", ck);
  const Checkpoint back = load_checkpoint(dir / "a.ckpt");
  CHECK(back.stage == Stage::kIvae);
  CHECK(back.config_text == ck.config_text);
  CHECK(tensor_hash(back.tensors) == tensor_hash(ck.tensors));
  CHECK(encode_checkpoint(back) == encode_checkpoint(ck));
  CHECK(back.tensors.size() == ck.tensors.size());

  ck.stage = Stage::kHypertransformed;
  ck.tensors.merge(init_denoiser(denoiser_config(ck.config()), 1).tensors);
  CHECK(decode_checkpoint(encode_checkpoint(ck)).stage == Stage::kHypertransformed);
}

TEST_CASE("archive layout starts with magic, version, stage and count") {
  const Checkpoint ck = tiny_ivae();
  const std::string b = encode_checkpoint(ck);
  CHECK(b.substr(0, 4) == "LDMC");
  CHECK(b[4] == 1);
  CHECK(b[8] == 0);
  CHECK(static_cast<std::size_t>(static_cast<unsigned char>(b[12])) == ck.tensors.size() % 256);
  // The config text is the trailer.
  CHECK(b.substr(b.size() - ck.config_text.size()) == ck.config_text);
}

TEST_CASE("missing or malformed tensors are rejected") {
  Checkpoint ck = tiny_ivae();
  ck.stage = Stage::kLdmi;
  ck.tensors.merge(init_denoiser(denoiser_config(ck.config()), 1).tensors);
  validate_checkpoint(ck);

  Checkpoint missing = ck;
  missing.tensors = without(ck.tensors, "hd.template.W1");
  CHECK(error_code_of([&] { validate_checkpoint(missing); }) == ErrorCode::kIncompleteCheckpoint);
  CHECK(error_code_of([&] { decode_checkpoint(encode_checkpoint(missing)); }) == ErrorCode::kIncompleteCheckpoint);

  Checkpoint no_eps = ck;
  no_eps.tensors = without(ck.tensors, "eps.conv_out.W");
  CHECK(error_code_of([&] { validate_checkpoint(no_eps); }) == ErrorCode::kIncompleteCheckpoint);
  no_eps.stage = Stage::kIvae;
  validate_checkpoint(no_eps);

  Checkpoint wrong_shape = ck;
  wrong_shape.tensors = without(ck.tensors, "hd.tok.pos");
  wrong_shape.tensors.add("hd.tok.pos", ag::Tensor::zeros({3, 3}));
  CHECK(error_code_of([&] { validate_checkpoint(wrong_shape); }) == ErrorCode::kShapeMismatch);

  std::string bytes = encode_checkpoint(ck);
  CHECK(error_code_of([&] { decode_checkpoint(bytes.substr(0, bytes.size() / 2)); }) == ErrorCode::kTruncated);
  bytes[0] = 'X';
  CHECK(error_code_of([&] { decode_checkpoint(bytes); }) == ErrorCode::kBadMagic);
}

TEST_CASE("stage names and guards") {
  CHECK(parse_stage("hypertransformed") == Stage::kHypertransformed);
  CHECK(stage_name(Stage::kLdmi) == "ldmi");
  CHECK(error_code_of([] { parse_stage("final"); }) == ErrorCode::kInvalidArgument);
  Checkpoint ck;
  CHECK(error_code_of([&] { require_stage(ck, {Stage::kLdmi}, "sample"); }) == ErrorCode::kStageMismatch);
}

TEST_CASE("tensor hashes see single-bit changes and respect prefixes") {
  const Checkpoint ck = tiny_ivae();
  ParamSet copy = ck.tensors.clone();
  const std::uint64_t enc = tensor_hash(copy, "enc.");
  const std::uint64_t hd = tensor_hash(copy, "hd.");
  ag::Tensor t = copy.at("hd.bias.b1");
  t.mutable_data()[0] = std::nextafter(t.data()[0], 1.0);
  CHECK(tensor_hash(copy, "enc.") == enc);
  CHECK(tensor_hash(copy, "hd.") != hd);
  CHECK(tensor_hash(ck.tensors, "hd.") == hd);
}
