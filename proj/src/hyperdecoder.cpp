#include "ldmi/hyperdecoder.hpp"

#include <string>

#include "ldmi/error.hpp"
#include "ldmi/rng.hpp"

namespace ldmi {
namespace {

constexpr double kHeadInitScale = 0.1;
constexpr double kPositionInitScale = 0.02;

std::string layer_name(const std::string& stem, std::size_t l) { return stem + std::to_string(l + 1); }

ag::Tensor linear(const ag::Tensor& x, const ParamSet& p, const std::string& w, const std::string& b) {
  return ag::add_bias(ag::matmul_nt(x, p.at(w)), p.at(b));
}

ag::Tensor norm(const ag::Tensor& x, const ParamSet& p, const std::string& prefix) {
  return ag::layer_norm(x, p.at(prefix + ".g"), p.at(prefix + ".b"));
}

ag::Tensor multi_head(const ag::Tensor& xq, const ag::Tensor& xkv, const ParamSet& p, const std::string& prefix,
                      std::size_t heads, const std::vector<bool>* mask, AttentionTrace* trace) {
  ag::Tensor q = ag::matmul_nt(xq, p.at(prefix + ".wq"));
  ag::Tensor k = ag::matmul_nt(xkv, p.at(prefix + ".wk"));
  ag::Tensor v = ag::matmul_nt(xkv, p.at(prefix + ".wv"));
  std::vector<double> probs;
  ag::Tensor o = ag::attention(q, k, v, heads, mask, trace ? &probs : nullptr);
  if (trace) trace->entries.push_back({heads, xq.dim(0), xkv.dim(0), std::move(probs)});
  return linear(o, p, prefix + ".wo", prefix + ".bo");
}

ag::Tensor feedforward(const ag::Tensor& x, const ParamSet& p, const std::string& prefix) {
  return linear(ag::gelu(linear(x, p, prefix + ".w1", prefix + ".b1")), p, prefix + ".w2", prefix + ".b2");
}

void add_norm_shapes(ShapeSpec& spec, const std::string& prefix, std::size_t dim) {
  spec.emplace_back(prefix + ".g", ag::Shape{dim});
  spec.emplace_back(prefix + ".b", ag::Shape{dim});
}

void add_attention_shapes(ShapeSpec& spec, const std::string& prefix, const HdConfig& hd) {
  const std::size_t inner = hd.heads * hd.head_dim;
  spec.emplace_back(prefix + ".wq", ag::Shape{inner, hd.token_dim});
  spec.emplace_back(prefix + ".wk", ag::Shape{inner, hd.token_dim});
  spec.emplace_back(prefix + ".wv", ag::Shape{inner, hd.token_dim});
  spec.emplace_back(prefix + ".wo", ag::Shape{hd.token_dim, inner});
  spec.emplace_back(prefix + ".bo", ag::Shape{hd.token_dim});
}

void add_ff_shapes(ShapeSpec& spec, const std::string& prefix, const HdConfig& hd) {
  spec.emplace_back(prefix + ".w1", ag::Shape{hd.feedforward_dim, hd.token_dim});
  spec.emplace_back(prefix + ".b1", ag::Shape{hd.feedforward_dim});
  spec.emplace_back(prefix + ".w2", ag::Shape{hd.token_dim, hd.feedforward_dim});
  spec.emplace_back(prefix + ".b2", ag::Shape{hd.token_dim});
}

bool ends_with(const std::string& s, std::string_view suffix) { return s.ends_with(suffix); }

}  // namespace

void validate(const HdConfig& hd, const InrConfig& inr) {
  auto fail = [](const std::string& msg) { throw Error(ErrorCode::kInvalidConfig, msg); };
  validate(inr);
  if (hd.patch_size < 1) fail("patch_size must be >= 1");
  if (hd.latent_h % hd.patch_size || hd.latent_w % hd.patch_size)
    fail("latent_size " + std::to_string(hd.latent_h) + "x" + std::to_string(hd.latent_w) +
         " is not divisible by patch_size " + std::to_string(hd.patch_size));
  if (hd.latent_channels < 1) fail("latent_channels must be >= 1");
  if (hd.token_dim < 1 || hd.heads < 1 || hd.head_dim < 1 || hd.feedforward_dim < 1)
    fail("token_dim, heads, head_dim and feedforward_dim must be >= 1");
  if (hd.groups < 1) fail("groups must be >= 1");
  for (const auto& [out, in] : layer_shapes(inr)) {
    const std::size_t g = layer_groups(hd, in);
    if (in % g != 0)
      fail("INR layer input width " + std::to_string(in) + " is not divisible by " + std::to_string(g) + " groups");
  }
}

std::size_t token_count(const HdConfig& hd) {
  return (hd.latent_h / hd.patch_size) * (hd.latent_w / hd.patch_size);
}

std::size_t layer_groups(const HdConfig& hd, std::size_t d_in) { return std::min(hd.groups, d_in); }

std::vector<std::size_t> group_counts(const HdConfig& hd, const InrConfig& inr) {
  std::vector<std::size_t> out;
  for (const auto& [d_out, d_in] : layer_shapes(inr)) out.push_back(layer_groups(hd, d_in));
  return out;
}

ShapeSpec hd_param_shapes(const HdConfig& hd, const InrConfig& inr) {
  ShapeSpec spec;
  const std::size_t patch_width = hd.patch_size * hd.patch_size * hd.latent_channels;
  spec.emplace_back("hd.tok.proj.W", ag::Shape{hd.token_dim, patch_width});
  spec.emplace_back("hd.tok.proj.b", ag::Shape{hd.token_dim});
  spec.emplace_back("hd.tok.pos", ag::Shape{token_count(hd), hd.token_dim});
  for (std::size_t i = 0; i < hd.encoder_layers; ++i) {
    const std::string p = "hd.enc." + std::to_string(i);
    add_norm_shapes(spec, p + ".ln1", hd.token_dim);
    add_attention_shapes(spec, p + ".attn", hd);
    add_norm_shapes(spec, p + ".ln2", hd.token_dim);
    add_ff_shapes(spec, p + ".ff", hd);
  }
  for (std::size_t i = 0; i < hd.decoder_layers; ++i) {
    const std::string p = "hd.dec." + std::to_string(i);
    add_norm_shapes(spec, p + ".ln1", hd.token_dim);
    add_attention_shapes(spec, p + ".self", hd);
    add_norm_shapes(spec, p + ".ln2", hd.token_dim);
    add_attention_shapes(spec, p + ".cross", hd);
    add_norm_shapes(spec, p + ".ln3", hd.token_dim);
    add_ff_shapes(spec, p + ".ff", hd);
  }
  add_norm_shapes(spec, "hd.dec.norm", hd.token_dim);
  const auto shapes = layer_shapes(inr);
  for (std::size_t l = 0; l < shapes.size(); ++l) {
    const auto [d_out, d_in] = shapes[l];
    spec.emplace_back(layer_name("hd.query.W", l), ag::Shape{layer_groups(hd, d_in), hd.token_dim});
    spec.emplace_back(layer_name("hd.head.W", l), ag::Shape{d_out, hd.token_dim});
    spec.emplace_back(layer_name("hd.head.b", l), ag::Shape{d_out});
    spec.emplace_back(layer_name("hd.template.W", l), ag::Shape{d_out, d_in});
    spec.emplace_back(layer_name("hd.bias.b", l), ag::Shape{d_out});
  }
  return spec;
}

HdParams init_hd(const HdConfig& hd, const InrConfig& inr, const InrParams& base, std::uint64_t seed) {
  validate(hd, inr);
  const auto shapes = layer_shapes(inr);
  if (base.weights.size() != shapes.size())
    throw Error(ErrorCode::kShapeMismatch, "base INR layer count does not match the INR config");
  Rng rng(seed);
  HdParams params;
  for (const auto& [name, shape] : hd_param_shapes(hd, inr)) {
    ag::Tensor t;
    if (name.starts_with("hd.template.W") || name.starts_with("hd.bias.b")) {
      const std::size_t l = std::stoul(name.substr(name.find_last_not_of("0123456789") + 1)) - 1;
      const ag::Tensor& src = name.starts_with("hd.template.W") ? base.weights.at(l) : base.biases.at(l);
      if (src.shape() != shape)
        throw Error(ErrorCode::kShapeMismatch, name + ": base INR has shape " + ag::shape_str(src.shape()));
      t = ag::Tensor::parameter(shape, src.to_vector());
    } else if (name == "hd.tok.pos") {
      t = init_tensor(shape, Init::kNormal, rng, kPositionInitScale);
    } else if (name.starts_with("hd.query.W")) {
      t = init_tensor(shape, Init::kNormal, rng, 1.0);
    } else if (name.starts_with("hd.head.W")) {
      t = init_tensor(shape, Init::kFanIn, rng, kHeadInitScale);
    } else if (ends_with(name, ".g")) {
      t = init_tensor(shape, Init::kOnes, rng);
    } else if (shape.size() == 1) {
      t = init_tensor(shape, Init::kZeros, rng);
    } else {
      t = init_tensor(shape, Init::kFanIn, rng);
    }
    params.tensors.add(name, std::move(t));
  }
  return params;
}

ag::Tensor patchify(const ag::Tensor& z, std::size_t patch_size) {
  if (z.rank() != 3) throw Error(ErrorCode::kShapeMismatch, "latent must be [C, H, W], got " + ag::shape_str(z.shape()));
  const std::size_t c = z.dim(0), h = z.dim(1), w = z.dim(2), p = patch_size;
  if (p == 0 || h % p || w % p)
    throw Error(ErrorCode::kShapeMismatch, "latent " + std::to_string(h) + "x" + std::to_string(w) +
                                               " is not divisible by patch size " + std::to_string(p));
  const std::size_t ph = h / p, pw = w / p, width = p * p * c;
  std::vector<std::size_t> index(ph * pw * width);
  for (std::size_t py = 0; py < ph; ++py)
    for (std::size_t px = 0; px < pw; ++px)
      for (std::size_t dy = 0; dy < p; ++dy)
        for (std::size_t dx = 0; dx < p; ++dx)
          for (std::size_t ch = 0; ch < c; ++ch)
            index[(py * pw + px) * width + (dy * p + dx) * c + ch] = ch * h * w + (py * p + dy) * w + px * p + dx;
  return ag::gather(z, std::move(index), {ph * pw, width});
}

TokenSequence tokenize(const ag::Tensor& z, const HdParams& params, const HdConfig& hd, bool add_position) {
  if (z.rank() != 3 || z.dim(0) != hd.latent_channels)
    throw Error(ErrorCode::kShapeMismatch, "latent " + ag::shape_str(z.shape()) + " does not have " +
                                               std::to_string(hd.latent_channels) + " channels");
  const ParamSet& p = params.tensors;
  ag::Tensor tokens = linear(patchify(z, hd.patch_size), p, "hd.tok.proj.W", "hd.tok.proj.b");
  if (add_position) {
    if (z.dim(1) != hd.latent_h || z.dim(2) != hd.latent_w)
      throw Error(ErrorCode::kShapeMismatch, "latent " + ag::shape_str(z.shape()) + " does not match latent_size " +
                                                 std::to_string(hd.latent_h) + "x" + std::to_string(hd.latent_w));
    tokens = ag::add(tokens, p.at("hd.tok.pos"));
  }
  return {tokens};
}

TokenSequence encoder_forward(const TokenSequence& tokens, const HdParams& params, const HdConfig& hd,
                              AttentionTrace* trace) {
  const ParamSet& p = params.tensors;
  ag::Tensor x = tokens.tokens;
  for (std::size_t i = 0; i < hd.encoder_layers; ++i) {
    const std::string pre = "hd.enc." + std::to_string(i);
    ag::Tensor h = norm(x, p, pre + ".ln1");
    x = ag::add(x, multi_head(h, h, p, pre + ".attn", hd.heads, nullptr, trace));
    x = ag::add(x, feedforward(norm(x, p, pre + ".ln2"), p, pre + ".ff"));
  }
  return {x};
}

ag::Tensor initial_queries(const HdParams& params, const HdConfig& hd, const InrConfig& inr) {
  std::vector<ag::Tensor> parts;
  const std::size_t layers = layer_shapes(inr).size();
  (void)hd;
  for (std::size_t l = 0; l < layers; ++l) parts.push_back(params.tensors.at(layer_name("hd.query.W", l)));
  return ag::concat_rows(parts);
}

DecoderOutput decoder_forward(const ag::Tensor& queries, const TokenSequence& latent, const HdParams& params,
                              const HdConfig& hd, const InrConfig& inr, const std::vector<bool>* cross_mask,
                              AttentionTrace* trace) {
  const ParamSet& p = params.tensors;
  const auto groups = group_counts(hd, inr);
  std::size_t total = 0;
  for (auto g : groups) total += g;
  if (queries.rank() != 2 || queries.dim(0) != total || queries.dim(1) != hd.token_dim)
    throw Error(ErrorCode::kShapeMismatch, "decoder expects " + std::to_string(total) + " queries of width " +
                                               std::to_string(hd.token_dim) + ", got " +
                                               ag::shape_str(queries.shape()));
  ag::Tensor x = queries;
  for (std::size_t i = 0; i < hd.decoder_layers; ++i) {
    const std::string pre = "hd.dec." + std::to_string(i);
    ag::Tensor h = norm(x, p, pre + ".ln1");
    x = ag::add(x, multi_head(h, h, p, pre + ".self", hd.heads, nullptr, trace));
    x = ag::add(x, multi_head(norm(x, p, pre + ".ln2"), latent.tokens, p, pre + ".cross", hd.heads, cross_mask, trace));
    x = ag::add(x, feedforward(norm(x, p, pre + ".ln3"), p, pre + ".ff"));
  }
  DecoderOutput out;
  out.tokens.tokens = norm(x, p, "hd.dec.norm");
  std::size_t offset = 0;
  for (std::size_t l = 0; l < groups.size(); ++l) {
    ag::Tensor rows = ag::slice_rows(out.tokens.tokens, offset, offset + groups[l]);
    offset += groups[l];
    // [G, d_out] -> [d_out, G]: column g is the output of token g.
    out.grouped.push_back(
        ag::transpose(linear(rows, p, layer_name("hd.head.W", l), layer_name("hd.head.b", l))));
  }
  return out;
}

ag::Tensor reconstruct_weights(const ag::Tensor& grouped, const ag::Tensor& templ, ReconMode mode) {
  if (grouped.rank() != 2 || templ.rank() != 2 || grouped.dim(0) != templ.dim(0))
    throw Error(ErrorCode::kShapeMismatch, "grouped " + ag::shape_str(grouped.shape()) + " vs template " +
                                               ag::shape_str(templ.shape()));
  const std::size_t d_out = templ.dim(0), d_in = templ.dim(1), g = grouped.dim(1);
  if (g == 0 || d_in % g != 0)
    throw Error(ErrorCode::kShapeMismatch, "d_in " + std::to_string(d_in) + " is not divisible by " +
                                               std::to_string(g) + " groups");
  const std::size_t k = d_in / g;
  // Zero-based column c lands in zero-based group c / k, i.e. 1-based ceil(c/k).
  std::vector<std::size_t> index(d_out * d_in);
  for (std::size_t r = 0; r < d_out; ++r)
    for (std::size_t c = 0; c < d_in; ++c) index[r * d_in + c] = r * g + c / k;
  ag::Tensor expanded = ag::gather(grouped, std::move(index), {d_out, d_in});
  if (mode == ReconMode::kScale) return ag::mul(ag::add_scalar(expanded, 1.0), templ);
  return ag::normalize_columns(ag::mul(expanded, templ), kDegenerateNormThreshold);
}

InrParams generate_inr_params(const ag::Tensor& z, const HdParams& params, const HdConfig& hd,
                              const InrConfig& inr) {
  TokenSequence latent = encoder_forward(tokenize(z, params, hd), params, hd);
  DecoderOutput dec = decoder_forward(initial_queries(params, hd, inr), latent, params, hd, inr);
  InrParams out;
  for (std::size_t l = 0; l < dec.grouped.size(); ++l) {
    out.weights.push_back(
        reconstruct_weights(dec.grouped[l], params.tensors.at(layer_name("hd.template.W", l)), hd.recon_mode));
    out.biases.push_back(params.tensors.at(layer_name("hd.bias.b", l)));
  }
  return out;
}

ParamAccounting param_accounting(const HdConfig& hd, const InrConfig& inr) {
  validate(hd, inr);
  ParamAccounting acc;
  acc.hd_params = count_params(hd_param_shapes(hd, inr));
  acc.inr_weights = weight_count(inr);
  for (auto g : group_counts(hd, inr)) acc.weight_queries += g;
  return acc;
}

}  // namespace ldmi
