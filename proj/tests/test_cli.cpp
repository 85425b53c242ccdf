#include <doctest.h>

#include <fstream>
#include <sstream>

#include "ldmi/cli.hpp"
#include "ldmi/tensorio.hpp"
#include "support.hpp"

using namespace ldmi;
using ldmi::testing::kTinyConfig;
using ldmi::testing::scratch_dir;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run run(std::vector<std::string> args) {
  args.insert(args.begin(), "ldmi");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli_dispatch(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("usage errors exit 2") {
  CHECK(run({}).code == 2);
  CHECK(run({"frobnicate"}).code == 2);
  CHECK(run({"sample", "--bogus"}).code == 2);
  CHECK(run({"inspect"}).code == 2);
  const Run r = run({"sample", "--n", "1"});
  CHECK(r.code == 2);
  CHECK(r.err.find("--ckpt") != std::string::npos);
}

TEST_CASE("invalid kl_weight is a config error with exit code 2") {
  const auto dir = scratch_dir("cli_kl");
  std::string text = kTinyConfig;
  text.replace(text.find("kl_weight = 0.00001"), 19, "kl_weight = -1");
  write_file_bytes(dir / "bad.conf", text);
  save_dataset(dir / "d.bin", make_synthetic_dataset("gaussians", 2, {8, 8}, 1));
  const Run r = run({"train-ivae", "--config", (dir / "bad.conf").string(), "--data", (dir / "d.bin").string(),
                     "--out", (dir / "run").string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("kl_weight must be >= 0") != std::string::npos);
  CHECK(r.err.rfind("ldmi: error[invalid-config]: ", 0) == 0);
}

TEST_CASE("end-to-end command flow on a tiny model") {
  const auto dir = scratch_dir("cli_flow");
  write_file_bytes(dir / "tiny.conf", kTinyConfig);
  const std::string data = (dir / "d.bin").string();
  REQUIRE(run({"gen-data", "--kind", "gaussians", "--n", "6", "--resolution", "8x8", "--seed", "3", "--out", data})
              .code == 0);
  CHECK(load_dataset(data).items.size() == 6);
  CHECK(run({"gen-data", "--resolution", "8by8", "--out", data}).code == 2);

  const Run ivae = run({"train-ivae", "--config", (dir / "tiny.conf").string(), "--data", data, "--out",
                        (dir / "s1").string(), "--seed", "1", "--log-every", "2"});
  REQUIRE(ivae.code == 0);
  CHECK(ivae.out.find("train-ivae step=2 loss=") != std::string::npos);
  CHECK(std::filesystem::exists(dir / "s1" / "ivae.ckpt"));
  CHECK(slurp(dir / "s1" / "trace_stage1.csv").rfind("step,loss,kl,recon\n", 0) == 0);
  CHECK(slurp(dir / "s1" / "manifest.txt").find("stage=ivae") != std::string::npos);

  const Run bad_stage = run({"sample", "--ckpt", (dir / "s1" / "ivae.ckpt").string(), "--out", (dir / "x").string()});
  CHECK(bad_stage.code == 1);
  CHECK(bad_stage.err.rfind("ldmi: error[stage-mismatch]: ", 0) == 0);

  REQUIRE(run({"train-diffusion", "--ckpt", (dir / "s1" / "ivae.ckpt").string(), "--data", data, "--out",
               (dir / "s2").string()})
              .code == 0);
  REQUIRE(run({"hyper-transform", "--ckpt", (dir / "s2" / "ldmi.ckpt").string(), "--data", data, "--out",
               (dir / "ht").string()})
              .code == 0);
  CHECK(std::filesystem::exists(dir / "ht" / "hypertransformed.ckpt"));
  CHECK(std::filesystem::exists(dir / "ht" / "trace_hyper.csv"));

  const std::string ckpt = (dir / "s2" / "ldmi.ckpt").string();
  REQUIRE(run({"sample", "--ckpt", ckpt, "--n", "2", "--scale", "2", "--steps", "5", "--out",
               (dir / "smp").string()})
              .code == 0);
  const Image img = load_ppm(dir / "smp" / "sample_001.ppm");
  CHECK(img.width == 16);
  CHECK(slurp(dir / "smp" / "manifest.txt").find("scale=2") != std::string::npos);

  const Run empty = run({"sample", "--ckpt", ckpt, "--n", "0", "--out", (dir / "none").string()});
  CHECK(empty.code == 0);
  CHECK(std::filesystem::is_directory(dir / "none"));
  CHECK(std::filesystem::is_empty(dir / "none"));

  const Run rec = run({"reconstruct", "--ckpt", ckpt, "--data", data, "--scale", "1/2", "--out",
                       (dir / "rec").string()});
  REQUIRE(rec.code == 0);
  CHECK(rec.out.find("psnr_db=") != std::string::npos);
  CHECK(load_ppm(dir / "rec" / "recon_005.ppm").width == 4);

  Mask m{{8, 8}, std::vector<bool>(64, true)};
  for (std::size_t i = 0; i < 20; ++i) m.observed[i] = false;
  save_mask(dir / "m.pgm", m);
  const Run inp = run({"inpaint", "--ckpt", ckpt, "--data", data, "--index", "2", "--mask", (dir / "m.pgm").string(),
                       "--n", "2", "--out", (dir / "inp").string()});
  REQUIRE(inp.code == 0);
  CHECK(std::filesystem::exists(dir / "inp" / "inpaint_001.ppm"));
  CHECK(slurp(dir / "inp" / "report.txt").find("sample=1 observed_mse=") != std::string::npos);
  save_mask(dir / "none.pgm", Mask{{8, 8}, std::vector<bool>(64, false)});
  const Run no_ctx = run({"inpaint", "--ckpt", ckpt, "--data", data, "--mask", (dir / "none.pgm").string(), "--out",
                          (dir / "inp2").string()});
  CHECK(no_ctx.code == 1);
  CHECK(no_ctx.err.find("error[empty-context]") != std::string::npos);

  const Run ins = run({"inspect", "--ckpt", ckpt});
  REQUIRE(ins.code == 0);
  CHECK(ins.out.rfind("stage=ldmi\n", 0) == 0);
  CHECK(ins.out.find("tensor hd.template.W1 8x2 16") != std::string::npos);
  CHECK(ins.out.find("weight_queries=") != std::string::npos);

  CHECK(run({"sample", "--ckpt", (dir / "missing.ckpt").string(), "--out", (dir / "y").string()}).code == 1);
}

TEST_CASE("inspect reports accounting for a config") {
  const Run r = run({"inspect", "--config", LDMI_SOURCE_DIR "/configs/celeba64.conf"});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("inr_weights=328448\n") != std::string::npos);
  CHECK(r.out.find("weight_queries=384\n") != std::string::npos);
}
