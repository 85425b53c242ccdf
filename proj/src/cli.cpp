#include "ldmi/cli.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <ostream>
#include <sstream>

#include "ldmi/checkpoint.hpp"
#include "ldmi/config.hpp"
#include "ldmi/error.hpp"
#include "ldmi/pipeline.hpp"
#include "ldmi/tasks.hpp"
#include "ldmi/tensorio.hpp"

namespace ldmi {
namespace {

namespace fs = std::filesystem;

struct Options {
  std::string config;
  std::string data;
  std::string out;
  std::uint64_t seed = 0;
  std::string ckpt;
  std::string scale = "1";
  std::size_t steps = 50;
  double eta = 0.0;
  std::size_t n = 1;
  std::string mask;
  std::string kind = "gaussians";
  std::string resolution = "16x16";
  std::size_t index = 0;
  bool sample_posterior = false;
  std::size_t log_every = 0;
};

/// Thrown for argument combinations CLI11 cannot express.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void require(const std::string& value, const char* flag, const char* command) {
  if (value.empty()) throw UsageError(std::string(command) + " requires " + flag);
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_manifest(const fs::path& dir, const std::vector<std::pair<std::string, std::string>>& entries) {
  std::string text;
  for (const auto& [k, v] : entries) text += k + "=" + v + "\n";
  write_file_bytes(dir / "manifest.txt", text);
}

std::string image_name(const char* stem, std::size_t i) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%03zu.ppm", stem, i);
  return buf;
}

ModelConfig config_or_checkpoint(const Options& o, const Checkpoint& ckpt) {
  return o.config.empty() ? ckpt.config() : load_config(o.config);
}

StepCallback progress(const Options& o, std::ostream& out, const char* label) {
  if (o.log_every == 0) return {};
  return [&out, label, every = o.log_every](const TraceRow& r) {
    if (r.step % every == 0) out << label << " step=" << r.step << " loss=" << format_double(r.loss) << "\n";
  };
}

std::vector<std::size_t> parse_resolution(const std::string& text) {
  const auto x = text.find('x');
  try {
    if (x == std::string::npos) throw std::invalid_argument(text);
    std::size_t used_h = 0, used_w = 0;
    const std::string hs = text.substr(0, x), ws = text.substr(x + 1);
    const unsigned long h = std::stoul(hs, &used_h), w = std::stoul(ws, &used_w);
    if (used_h != hs.size() || used_w != ws.size() || h == 0 || w == 0) throw std::invalid_argument(text);
    return {h, w};
  } catch (const std::logic_error&) {
    throw UsageError("--resolution expects HxW, got '" + text + "'");
  }
}

int run_gen_data(const Options& o, std::ostream& out) {
  require(o.out, "--out", "gen-data");
  const Dataset ds = make_synthetic_dataset(o.kind, o.n, parse_resolution(o.resolution), Rng::derive(o.seed, "data"));
  save_dataset(o.out, ds);
  out << "wrote " << ds.items.size() << " " << o.kind << " signals to " << o.out << "\n";
  return 0;
}

int run_train_ivae(const Options& o, std::ostream& out) {
  require(o.config, "--config", "train-ivae");
  require(o.data, "--data", "train-ivae");
  require(o.out, "--out", "train-ivae");
  const ModelConfig config = load_config(o.config);
  const Dataset ds = load_dataset(o.data);
  TrainResult r = train_stage1(ds, config, o.seed, progress(o, out, "train-ivae"));
  fs::create_directories(o.out);
  save_checkpoint(fs::path(o.out) / "ivae.ckpt", r.ckpt);
  write_trace_csv(fs::path(o.out) / "trace_stage1.csv", r.trace, true);
  write_manifest(o.out, {{"command", "train-ivae"}, {"seed", std::to_string(o.seed)},
                         {"iterations", std::to_string(config.train.stage1_iterations())},
                         {"stage", "ivae"}});
  out << "final_loss=" << format_double(r.trace.empty() ? 0.0 : r.trace.back().loss) << "\n";
  return 0;
}

int run_train_diffusion(const Options& o, std::ostream& out) {
  require(o.ckpt, "--ckpt", "train-diffusion");
  require(o.data, "--data", "train-diffusion");
  require(o.out, "--out", "train-diffusion");
  const Checkpoint ckpt = load_checkpoint(o.ckpt);
  const ModelConfig config = config_or_checkpoint(o, ckpt);
  TrainResult r = train_stage2(load_dataset(o.data), ckpt, config, o.seed, progress(o, out, "train-diffusion"));
  fs::create_directories(o.out);
  save_checkpoint(fs::path(o.out) / "ldmi.ckpt", r.ckpt);
  write_trace_csv(fs::path(o.out) / "trace_stage2.csv", r.trace, false);
  write_manifest(o.out, {{"command", "train-diffusion"}, {"seed", std::to_string(o.seed)},
                         {"iterations", std::to_string(config.train.stage2_iterations())},
                         {"stage", "ldmi"}});
  out << "final_loss=" << format_double(r.trace.empty() ? 0.0 : r.trace.back().loss) << "\n";
  return 0;
}

int run_hyper_transform(const Options& o, std::ostream& out) {
  require(o.ckpt, "--ckpt", "hyper-transform");
  require(o.data, "--data", "hyper-transform");
  require(o.out, "--out", "hyper-transform");
  const Checkpoint ckpt = load_checkpoint(o.ckpt);
  const ModelConfig config = config_or_checkpoint(o, ckpt);
  TrainResult r = hyper_transform(load_dataset(o.data), ckpt, config, o.seed, progress(o, out, "hyper-transform"));
  fs::create_directories(o.out);
  save_checkpoint(fs::path(o.out) / "hypertransformed.ckpt", r.ckpt);
  write_trace_csv(fs::path(o.out) / "trace_hyper.csv", r.trace, false);
  write_manifest(o.out, {{"command", "hyper-transform"}, {"seed", std::to_string(o.seed)},
                         {"iterations", std::to_string(config.train.stage1_iterations())},
                         {"stage", "hypertransformed"}});
  out << "final_loss=" << format_double(r.trace.empty() ? 0.0 : r.trace.back().loss) << "\n";
  return 0;
}

int run_sample(const Options& o, std::ostream& out) {
  require(o.ckpt, "--ckpt", "sample");
  require(o.out, "--out", "sample");
  const Checkpoint ckpt = load_checkpoint(o.ckpt);
  SampleOptions so{o.n, parse_scale(o.scale), o.steps, o.eta};
  const SampleResult r = sample(ckpt, so, o.seed);
  fs::create_directories(o.out);
  if (r.images.empty()) return 0;
  for (std::size_t i = 0; i < r.images.size(); ++i) save_ppm(fs::path(o.out) / image_name("sample", i), r.images[i]);
  write_manifest(o.out, {{"command", "sample"}, {"seed", std::to_string(o.seed)}, {"n", std::to_string(o.n)},
                         {"scale", o.scale}, {"steps", std::to_string(o.steps)}, {"eta", format_double(o.eta)}});
  out << "wrote " << r.images.size() << " samples to " << o.out << "\n";
  return 0;
}

int run_reconstruct(const Options& o, std::ostream& out) {
  require(o.ckpt, "--ckpt", "reconstruct");
  require(o.data, "--data", "reconstruct");
  require(o.out, "--out", "reconstruct");
  const Checkpoint ckpt = load_checkpoint(o.ckpt);
  const Dataset ds = load_dataset(o.data);
  const ReconstructResult r = reconstruct(ckpt, ds.items, parse_scale(o.scale), o.seed, o.sample_posterior);
  fs::create_directories(o.out);
  for (std::size_t i = 0; i < r.images.size(); ++i) save_ppm(fs::path(o.out) / image_name("recon", i), r.images[i]);
  write_file_bytes(fs::path(o.out) / "psnr.txt", r.psnr.to_text());
  write_manifest(o.out, {{"command", "reconstruct"}, {"seed", std::to_string(o.seed)}, {"scale", o.scale},
                         {"posterior", o.sample_posterior ? "sample" : "mean"}});
  out << r.psnr.to_text();
  return 0;
}

int run_inpaint(const Options& o, std::ostream& out) {
  require(o.ckpt, "--ckpt", "inpaint");
  require(o.data, "--data", "inpaint");
  require(o.mask, "--mask", "inpaint");
  require(o.out, "--out", "inpaint");
  const Checkpoint ckpt = load_checkpoint(o.ckpt);
  const Dataset ds = load_dataset(o.data);
  if (o.index >= ds.items.size())
    throw Error(ErrorCode::kInvalidArgument, "--index " + std::to_string(o.index) + " is outside the dataset");
  const InpaintResult r = inpaint(ckpt, ds.items[o.index], load_mask(o.mask), o.n, o.seed);
  fs::create_directories(o.out);
  std::string report;
  for (std::size_t i = 0; i < r.images.size(); ++i) {
    save_ppm(fs::path(o.out) / image_name("inpaint", i), r.images[i]);
    report += "sample=" + std::to_string(i) + " observed_mse=" + format_double(r.observed_mse[i]) +
              " unobserved_mse=" + format_double(r.unobserved_mse[i]) + "\n";
  }
  write_file_bytes(fs::path(o.out) / "report.txt", report);
  write_manifest(o.out, {{"command", "inpaint"}, {"seed", std::to_string(o.seed)}, {"n", std::to_string(o.n)},
                         {"index", std::to_string(o.index)}});
  out << report;
  return 0;
}

void print_accounting(const ModelConfig& config, std::ostream& out) {
  const ParamAccounting acc = param_accounting(config.hd, config.inr);
  char ratio[64];
  std::snprintf(ratio, sizeof ratio, "%.4f", acc.ratio());
  out << "hd_params=" << acc.hd_params << "\n"
      << "inr_weights=" << acc.inr_weights << "\n"
      << "weight_queries=" << acc.weight_queries << "\n"
      << "inr_to_hd_ratio=" << ratio << "\n"
      << "encoder_params=" << count_params(encoder_param_shapes(config.encoder)) << "\n"
      << "denoiser_params=" << count_params(denoiser_param_shapes(denoiser_config(config))) << "\n";
}

int run_inspect(const Options& o, std::ostream& out) {
  if (o.ckpt.empty() == o.config.empty()) throw UsageError("inspect takes exactly one of --ckpt or --config");
  if (!o.config.empty()) {
    print_accounting(load_config(o.config), out);
    return 0;
  }
  const Checkpoint ckpt = load_checkpoint(o.ckpt);
  out << "stage=" << stage_name(ckpt.stage) << "\n";
  for (const auto& [name, t] : ckpt.tensors) {
    std::string dims;
    for (auto d : t.shape()) dims += (dims.empty() ? "" : "x") + std::to_string(d);
    out << "tensor " << name << " " << dims << " " << t.numel() << "\n";
  }
  for (const char* prefix : {"enc.", "hd.", "inr.", "eps."})
    out << "count." << std::string(prefix, std::strlen(prefix) - 1) << "=" << ckpt.tensors.subset(prefix).count()
        << "\n";
  print_accounting(ckpt.config(), out);
  return 0;
}

}  // namespace

int cli_dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Latent diffusion over implicit neural representations", "ldmi"};
  app.require_subcommand(1);
  Options o;

  auto add_common = [&o](CLI::App* sub) {
    sub->add_option("--seed", o.seed, "Root seed for every random stream");
    sub->add_option("--out", o.out, "Output path or directory");
  };
  auto* gen = app.add_subcommand("gen-data", "Write a synthetic dataset");
  add_common(gen);
  gen->add_option("--kind", o.kind, "gaussians, stripes or field");
  gen->add_option("--n", o.n, "Number of signals");
  gen->add_option("--resolution", o.resolution, "HxW");

  auto* ivae = app.add_subcommand("train-ivae", "Stage 1: train encoder and decoder");
  add_common(ivae);
  ivae->add_option("--config", o.config, "Model config");
  ivae->add_option("--data", o.data, "Dataset file or image directory");
  ivae->add_option("--log-every", o.log_every, "Print the loss every N steps");

  auto* diff = app.add_subcommand("train-diffusion", "Stage 2: train the latent denoiser");
  add_common(diff);
  diff->add_option("--ckpt", o.ckpt, "Stage-1 checkpoint");
  diff->add_option("--config", o.config, "Training config (defaults to the checkpoint's)");
  diff->add_option("--data", o.data, "Dataset");
  diff->add_option("--log-every", o.log_every, "Print the loss every N steps");

  auto* ht = app.add_subcommand("hyper-transform", "Train a fresh decoder against a frozen model");
  add_common(ht);
  ht->add_option("--ckpt", o.ckpt, "Stage-2 checkpoint");
  ht->add_option("--config", o.config, "Training config (defaults to the checkpoint's)");
  ht->add_option("--data", o.data, "Dataset");
  ht->add_option("--log-every", o.log_every, "Print the loss every N steps");

  auto* smp = app.add_subcommand("sample", "Draw samples at any resolution");
  add_common(smp);
  smp->add_option("--ckpt", o.ckpt, "Checkpoint");
  smp->add_option("--n", o.n, "Number of samples");
  smp->add_option("--scale", o.scale, "Resolution factor, e.g. 2 or 1/4");
  smp->add_option("--steps", o.steps, "DDIM steps");
  smp->add_option("--eta", o.eta, "DDIM noise scale in [0, 1]");

  auto* rec = app.add_subcommand("reconstruct", "Encode and decode signals, report PSNR");
  add_common(rec);
  rec->add_option("--ckpt", o.ckpt, "Checkpoint");
  rec->add_option("--data", o.data, "Dataset");
  rec->add_option("--scale", o.scale, "Output resolution factor");
  rec->add_flag("--sample-posterior", o.sample_posterior, "Decode a posterior draw instead of the mean");

  auto* inp = app.add_subcommand("inpaint", "Complete a masked signal");
  add_common(inp);
  inp->add_option("--ckpt", o.ckpt, "Checkpoint");
  inp->add_option("--data", o.data, "Dataset");
  inp->add_option("--index", o.index, "Dataset item to complete");
  inp->add_option("--mask", o.mask, "P5 mask, white = observed");
  inp->add_option("--n", o.n, "Number of completions");

  auto* ins = app.add_subcommand("inspect", "Print checkpoint contents and parameter accounting");
  ins->add_option("--ckpt", o.ckpt, "Checkpoint");
  ins->add_option("--config", o.config, "Config (accounting only)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    err << "ldmi: error[usage]: " << msg << "\n";
    return 2;
  }

  try {
    if (gen->parsed()) return run_gen_data(o, out);
    if (ivae->parsed()) return run_train_ivae(o, out);
    if (diff->parsed()) return run_train_diffusion(o, out);
    if (ht->parsed()) return run_hyper_transform(o, out);
    if (smp->parsed()) return run_sample(o, out);
    if (rec->parsed()) return run_reconstruct(o, out);
    if (inp->parsed()) return run_inpaint(o, out);
    if (ins->parsed()) return run_inspect(o, out);
  } catch (const UsageError& e) {
    err << "ldmi: error[usage]: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    err << "ldmi: error[" << error_code_name(e.code()) << "]: " << msg << "\n";
    return e.code() == ErrorCode::kInvalidConfig ? 2 : 1;
  } catch (const std::exception& e) {
    err << "ldmi: error[runtime]: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace ldmi
