#include "ldmi/config.hpp"

#include <charconv>
#include <cmath>
#include <functional>
#include <set>
#include <sstream>

#include "ldmi/error.hpp"
#include "ldmi/tensorio.hpp"

namespace ldmi {
namespace {

[[noreturn]] void fail(const std::string& msg) { throw Error(ErrorCode::kInvalidConfig, msg); }

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

std::size_t to_size(std::string_view key, std::string_view v) {
  std::size_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty())
    fail(std::string(key) + ": expected a non-negative integer, got '" + std::string(v) + "'");
  return out;
}

double to_double(std::string_view key, std::string_view v) {
  double out = 0.0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty() || !std::isfinite(out))
    fail(std::string(key) + ": expected a number, got '" + std::string(v) + "'");
  return out;
}

std::vector<std::string_view> split(std::string_view v, char sep) {
  std::vector<std::string_view> parts;
  std::size_t start = 0;
  while (true) {
    const auto pos = v.find(sep, start);
    parts.push_back(trim(v.substr(start, pos == std::string_view::npos ? pos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return parts;
}

std::vector<std::size_t> to_size_list(std::string_view key, std::string_view v) {
  std::vector<std::size_t> out;
  for (auto part : split(v, ',')) out.push_back(to_size(key, part));
  return out;
}

std::vector<double> to_double_list(std::string_view key, std::string_view v) {
  std::vector<double> out;
  for (auto part : split(v, ',')) out.push_back(to_double(key, part));
  return out;
}

std::pair<std::size_t, std::size_t> to_dims(std::string_view key, std::string_view v) {
  auto parts = split(v, 'x');
  if (parts.size() != 2) fail(std::string(key) + ": expected HxW, got '" + std::string(v) + "'");
  return {to_size(key, parts[0]), to_size(key, parts[1])};
}

std::string fmt(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

template <typename T>
std::string fmt_list(const std::vector<T>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    if constexpr (std::is_floating_point_v<T>) out += fmt(v[i]);
    else out += std::to_string(v[i]);
  }
  return out;
}

struct Field {
  std::string section;
  std::string key;
  std::function<void(ModelConfig&, std::string_view)> set;
  std::function<std::string(const ModelConfig&)> get;
};

#define SIZE_FIELD(sec, name, member)                                                        \
  Field {                                                                                    \
    sec, name, [](ModelConfig& c, std::string_view v) { c.member = to_size(name, v); },      \
        [](const ModelConfig& c) { return std::to_string(c.member); }                        \
  }
#define DOUBLE_FIELD(sec, name, member)                                                      \
  Field {                                                                                    \
    sec, name, [](ModelConfig& c, std::string_view v) { c.member = to_double(name, v); },    \
        [](const ModelConfig& c) { return fmt(c.member); }                                   \
  }
#define SIZE_LIST_FIELD(sec, name, member)                                                   \
  Field {                                                                                    \
    sec, name, [](ModelConfig& c, std::string_view v) { c.member = to_size_list(name, v); }, \
        [](const ModelConfig& c) { return fmt_list(c.member); }                              \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      Field{"encoder", "resolution",
            [](ModelConfig& c, std::string_view v) {
              std::tie(c.encoder.res_h, c.encoder.res_w) = to_dims("resolution", v);
            },
            [](const ModelConfig& c) {
              return std::to_string(c.encoder.res_h) + "x" + std::to_string(c.encoder.res_w);
            }},
      SIZE_FIELD("encoder", "in_channels", encoder.in_channels),
      SIZE_FIELD("encoder", "latent_channels", encoder.latent_channels),
      SIZE_FIELD("encoder", "base_channels", encoder.base_channels),
      SIZE_LIST_FIELD("encoder", "ch_mult", encoder.ch_mult),
      SIZE_FIELD("encoder", "num_blocks", encoder.num_blocks),

      Field{"hd", "latent_size",
            [](ModelConfig& c, std::string_view v) { std::tie(c.hd.latent_h, c.hd.latent_w) = to_dims("latent_size", v); },
            [](const ModelConfig& c) { return std::to_string(c.hd.latent_h) + "x" + std::to_string(c.hd.latent_w); }},
      SIZE_FIELD("hd", "patch_size", hd.patch_size),
      SIZE_FIELD("hd", "token_dim", hd.token_dim),
      SIZE_FIELD("hd", "encoder_layers", hd.encoder_layers),
      SIZE_FIELD("hd", "decoder_layers", hd.decoder_layers),
      SIZE_FIELD("hd", "heads", hd.heads),
      SIZE_FIELD("hd", "head_dim", hd.head_dim),
      SIZE_FIELD("hd", "feedforward_dim", hd.feedforward_dim),
      SIZE_FIELD("hd", "groups", hd.groups),
      Field{"hd", "recon_mode",
            [](ModelConfig& c, std::string_view v) {
              if (v == "scale") c.hd.recon_mode = ReconMode::kScale;
              else if (v == "norm") c.hd.recon_mode = ReconMode::kNorm;
              else fail("recon_mode must be scale or norm, got '" + std::string(v) + "'");
            },
            [](const ModelConfig& c) { return std::string(c.hd.recon_mode == ReconMode::kScale ? "scale" : "norm"); }},

      Field{"inr", "type",
            [](ModelConfig& c, std::string_view v) {
              if (v == "siren") c.inr.activation = Activation::kSine;
              else if (v == "relu") c.inr.activation = Activation::kRelu;
              else fail("inr type must be siren or relu, got '" + std::string(v) + "'");
            },
            [](const ModelConfig& c) { return std::string(c.inr.activation == Activation::kSine ? "siren" : "relu"); }},
      SIZE_FIELD("inr", "layers", inr.layers),
      SIZE_FIELD("inr", "hidden_dim", inr.hidden_dim),
      DOUBLE_FIELD("inr", "omega", inr.omega),
      SIZE_FIELD("inr", "point_enc_dim", inr.point_enc_dim),
      DOUBLE_FIELD("inr", "fourier_scale", inr.fourier_scale),
      DOUBLE_FIELD("inr", "sigma", inr.sigma),

      SIZE_FIELD("diffusion", "diffusion_steps", diffusion.diffusion_steps),
      Field{"diffusion", "noise_schedule",
            [](ModelConfig& c, std::string_view v) { c.diffusion.noise_schedule = std::string(v); },
            [](const ModelConfig& c) { return c.diffusion.noise_schedule; }},
      DOUBLE_FIELD("diffusion", "beta_start", diffusion.beta_start),
      DOUBLE_FIELD("diffusion", "beta_end", diffusion.beta_end),
      SIZE_FIELD("diffusion", "base_channels", diffusion.base_channels),
      SIZE_LIST_FIELD("diffusion", "ch_mult", diffusion.ch_mult),
      SIZE_FIELD("diffusion", "num_blocks", diffusion.num_blocks),
      SIZE_FIELD("diffusion", "time_dim", diffusion.time_dim),

      SIZE_FIELD("train", "batch_size", train.batch_size),
      SIZE_LIST_FIELD("train", "iterations", train.iterations),
      Field{"train", "lr", [](ModelConfig& c, std::string_view v) { c.train.lr = to_double_list("lr", v); },
            [](const ModelConfig& c) { return fmt_list(c.train.lr); }},
      DOUBLE_FIELD("train", "kl_weight", train.kl_weight),
      DOUBLE_FIELD("train", "grad_clip", train.grad_clip),
      DOUBLE_FIELD("train", "adam_beta1", train.adam_beta1),
      DOUBLE_FIELD("train", "adam_beta2", train.adam_beta2),
      DOUBLE_FIELD("train", "adam_eps", train.adam_eps),
  };
  return table;
}

#undef SIZE_FIELD
#undef DOUBLE_FIELD
#undef SIZE_LIST_FIELD

const std::vector<std::string> kSections = {"encoder", "hd", "inr", "diffusion", "train"};

/// Fills the values every section derives from [encoder].
void derive(ModelConfig& c, bool latent_given) {
  c.hd.latent_channels = c.encoder.latent_channels;
  if (!latent_given) {
    c.hd.latent_h = c.encoder.latent_h();
    c.hd.latent_w = c.encoder.latent_w();
  }
  c.inr.in_dim = 2;
  c.inr.out_dim = c.encoder.in_channels;
}

}  // namespace

void validate(const ModelConfig& c) {
  validate(c.encoder);
  if (c.hd.latent_h != c.encoder.latent_h() || c.hd.latent_w != c.encoder.latent_w())
    fail("latent_size " + std::to_string(c.hd.latent_h) + "x" + std::to_string(c.hd.latent_w) +
         " does not match the encoder output " + std::to_string(c.encoder.latent_h()) + "x" +
         std::to_string(c.encoder.latent_w()));
  if (c.hd.latent_channels != c.encoder.latent_channels) fail("hd latent channels differ from the encoder");
  if (c.inr.out_dim != c.encoder.in_channels) fail("inr out_dim differs from the encoder in_channels");
  validate(c.hd, c.inr);
  validate(denoiser_config(c));
  make_schedule(c.diffusion);
  const TrainConfig& t = c.train;
  if (t.batch_size < 1) fail("batch_size must be >= 1");
  if (t.iterations.empty() || t.iterations.size() > 2) fail("iterations takes one or two values");
  if (t.lr.empty() || t.lr.size() > 2) fail("lr takes one or two values");
  for (double lr : t.lr)
    if (!(lr >= 0.0)) fail("lr must be >= 0");
  if (!(t.kl_weight >= 0.0)) fail("kl_weight must be >= 0");
  if (!(t.grad_clip > 0.0)) fail("grad_clip must be > 0");
  if (!(t.adam_beta1 >= 0.0 && t.adam_beta1 < 1.0) || !(t.adam_beta2 >= 0.0 && t.adam_beta2 < 1.0))
    fail("adam betas must be in [0, 1)");
  if (!(t.adam_eps > 0.0)) fail("adam_eps must be > 0");
}

ModelConfig parse_config(std::string_view text) {
  ModelConfig c;
  std::string section;
  std::set<std::string> seen;
  std::size_t line_no = 0;
  for (auto raw : split(text, '\n')) {
    ++line_no;
    std::string_view line = raw;
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = trim(line.substr(0, hash));
    if (line.empty()) continue;
    const std::string where = "line " + std::to_string(line_no) + ": ";
    if (line.front() == '[') {
      if (line.back() != ']') fail(where + "unterminated section header");
      section = std::string(trim(line.substr(1, line.size() - 2)));
      if (std::find(kSections.begin(), kSections.end(), section) == kSections.end())
        fail(where + "unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) fail(where + "expected key=value");
    if (section.empty()) fail(where + "key outside of any section");
    const std::string key(trim(line.substr(0, eq)));
    const std::string_view value = trim(line.substr(eq + 1));
    const auto& table = fields();
    auto it = std::find_if(table.begin(), table.end(),
                           [&](const Field& f) { return f.section == section && f.key == key; });
    if (it == table.end()) fail(where + "unknown key '" + key + "' in [" + section + "]");
    if (!seen.insert(section + "." + key).second) fail(where + "duplicate key '" + key + "' in [" + section + "]");
    it->set(c, value);
  }
  derive(c, seen.contains("hd.latent_size"));
  validate(c);
  return c;
}

ModelConfig load_config(const std::string& path) {
  std::string text;
  try {
    text = read_file_bytes(path);
  } catch (const Error& e) {
    fail("cannot read config '" + path + "': " + e.what());
  }
  return parse_config(text);
}

std::string serialize_config(const ModelConfig& config) {
  std::ostringstream out;
  for (const auto& section : kSections) {
    if (section != kSections.front()) out << '\n';
    out << '[' << section << "]\n";
    for (const auto& f : fields())
      if (f.section == section) out << f.key << " = " << f.get(config) << '\n';
  }
  return out.str();
}

bool same_architecture(const ModelConfig& a, const ModelConfig& b) {
  for (const auto& f : fields())
    if (f.section != "train" && f.get(a) != f.get(b)) return false;
  return true;
}

DenoiserConfig denoiser_config(const ModelConfig& config) {
  const DiffusionConfig& d = config.diffusion;
  return {config.encoder.latent_channels, d.base_channels, d.ch_mult, d.num_blocks, d.time_dim};
}

NoiseSchedule make_schedule(const DiffusionConfig& config) {
  return make_schedule(config.diffusion_steps, config.noise_schedule, config.beta_start, config.beta_end);
}

}  // namespace ldmi
