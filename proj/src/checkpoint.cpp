#include "ldmi/checkpoint.hpp"

#include <algorithm>
#include <cstring>

#include "ldmi/error.hpp"
#include "ldmi/tensorio.hpp"

namespace ldmi {
namespace {

constexpr char kMagic[4] = {'L', 'D', 'M', 'C'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  std::uint64_t uint(int width) {
    need(static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(width);
    return v;
  }

  std::string_view take(std::uint64_t n) {
    need(n);
    std::string_view s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::uint64_t n) const {
    if (n > bytes_.size() - pos_) throw Error(ErrorCode::kTruncated, "checkpoint ends early");
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

std::string encode_param(const ag::Tensor& t) {
  TensorData data;
  data.dtype = DType::kF64;
  for (auto d : t.shape()) data.dims.push_back(static_cast<std::uint32_t>(d));
  data.values = t.to_vector();
  return encode_tensor(data);
}

constexpr std::uint64_t kFnvOffset = 1469598103934665603ULL;
constexpr std::uint64_t kFnvPrime = 1099511628211ULL;

void fnv(std::uint64_t& h, std::string_view bytes) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= kFnvPrime;
  }
}

std::string layer_name(const char* stem, std::size_t l) { return stem + std::to_string(l + 1); }

}  // namespace

std::string_view stage_name(Stage stage) {
  switch (stage) {
    case Stage::kIvae: return "ivae";
    case Stage::kLdmi: return "ldmi";
    case Stage::kHypertransformed: return "hypertransformed";
  }
  return "unknown";
}

Stage parse_stage(std::string_view name) {
  for (Stage s : {Stage::kIvae, Stage::kLdmi, Stage::kHypertransformed})
    if (stage_name(s) == name) return s;
  throw Error(ErrorCode::kInvalidArgument, "unknown stage '" + std::string(name) + "'");
}

std::vector<std::string> required_tensor_names(const ModelConfig& config, Stage stage) {
  std::vector<std::string> names;
  auto take = [&](const ShapeSpec& spec) {
    for (const auto& [name, shape] : spec) names.push_back(name);
  };
  take(encoder_param_shapes(config.encoder));
  take(hd_param_shapes(config.hd, config.inr));
  for (std::size_t l = 0; l < layer_shapes(config.inr).size(); ++l) {
    names.push_back(layer_name("inr.template.W", l));
    names.push_back(layer_name("inr.bias.b", l));
  }
  if (stage != Stage::kIvae) take(denoiser_param_shapes(denoiser_config(config)));
  return names;
}

void validate_checkpoint(const Checkpoint& ckpt) {
  const ModelConfig config = ckpt.config();
  ShapeSpec expected = encoder_param_shapes(config.encoder);
  for (auto& entry : hd_param_shapes(config.hd, config.inr)) expected.push_back(entry);
  const auto shapes = layer_shapes(config.inr);
  for (std::size_t l = 0; l < shapes.size(); ++l) {
    expected.emplace_back(layer_name("inr.template.W", l), ag::Shape{shapes[l].first, shapes[l].second});
    expected.emplace_back(layer_name("inr.bias.b", l), ag::Shape{shapes[l].first});
  }
  if (ckpt.stage != Stage::kIvae)
    for (auto& entry : denoiser_param_shapes(denoiser_config(config))) expected.push_back(entry);
  for (const auto& [name, shape] : expected) {
    if (!ckpt.tensors.contains(name))
      throw Error(ErrorCode::kIncompleteCheckpoint, "checkpoint stage " + std::string(stage_name(ckpt.stage)) +
                                                        " is missing tensor " + name);
    if (ckpt.tensors.at(name).shape() != shape)
      throw Error(ErrorCode::kShapeMismatch, name + " has shape " + ag::shape_str(ckpt.tensors.at(name).shape()) +
                                                 ", config requires " + ag::shape_str(shape));
  }
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::string payload, directory;
  std::uint32_t count = 0;
  for (const auto& [name, tensor] : ckpt.tensors) {
    const std::string record = encode_param(tensor);
    put_u32(directory, static_cast<std::uint32_t>(name.size()));
    directory += name;
    put_u64(directory, payload.size());
    put_u64(directory, record.size());
    payload += record;
    ++count;
  }
  std::string out(kMagic, sizeof kMagic);
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(ckpt.stage));
  put_u32(out, count);
  out += directory;
  out += payload;
  put_u64(out, ckpt.config_text.size());
  out += ckpt.config_text;
  return out;
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  Reader r(bytes);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw Error(ErrorCode::kBadMagic, "not a checkpoint (expected magic LDMC)");
  r.take(4);
  const auto version = r.uint(4);
  if (version != kVersion)
    throw Error(ErrorCode::kMalformedHeader, "unsupported checkpoint version " + std::to_string(version));
  const auto stage = r.uint(4);
  if (stage > static_cast<std::uint32_t>(Stage::kHypertransformed))
    throw Error(ErrorCode::kMalformedHeader, "unknown checkpoint stage " + std::to_string(stage));
  const auto count = r.uint(4);

  struct Entry {
    std::string name;
    std::uint64_t offset, length;
  };
  std::vector<Entry> entries;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = r.uint(4);
    Entry e{std::string(r.take(len)), 0, 0};
    e.offset = r.uint(8);
    e.length = r.uint(8);
    entries.push_back(std::move(e));
  }
  std::uint64_t payload_size = 0;
  for (const auto& e : entries) payload_size = std::max(payload_size, e.offset + e.length);
  const std::string_view payload = r.take(payload_size);

  Checkpoint ckpt;
  ckpt.stage = static_cast<Stage>(stage);
  for (const auto& e : entries) {
    std::size_t used = 0;
    TensorData data = decode_tensor(payload.substr(e.offset, e.length), &used);
    if (used != e.length)
      throw Error(ErrorCode::kMalformedHeader, "tensor record for " + e.name + " has trailing bytes");
    ag::Shape shape(data.dims.begin(), data.dims.end());
    ckpt.tensors.add(e.name, ag::Tensor::parameter(std::move(shape), std::move(data.values)));
  }
  const auto config_len = r.uint(8);
  ckpt.config_text = std::string(r.take(config_len));
  if (r.remaining() != 0) throw Error(ErrorCode::kMalformedHeader, "trailing bytes after checkpoint config");
  validate_checkpoint(ckpt);
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  write_file_bytes(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file_bytes(path)); }

std::uint64_t tensor_hash(const ParamSet& tensors, std::string_view prefix) {
  std::uint64_t h = kFnvOffset;
  for (const auto& [name, tensor] : tensors) {
    if (!std::string_view(name).starts_with(prefix)) continue;
    fnv(h, name);
    fnv(h, std::string_view("\0", 1));
    fnv(h, encode_param(tensor));
  }
  return h;
}

void require_stage(const Checkpoint& ckpt, std::initializer_list<Stage> allowed, std::string_view operation) {
  if (std::find(allowed.begin(), allowed.end(), ckpt.stage) != allowed.end()) return;
  std::string list;
  for (Stage s : allowed) list += (list.empty() ? "" : " or ") + std::string(stage_name(s));
  throw Error(ErrorCode::kStageMismatch, std::string(operation) + " needs a checkpoint of stage " + list + ", got " +
                                             std::string(stage_name(ckpt.stage)));
}

void store_base_inr(ParamSet& tensors, const InrParams& base) {
  for (std::size_t l = 0; l < base.weights.size(); ++l) {
    tensors.add(layer_name("inr.template.W", l), base.weights[l]);
    tensors.add(layer_name("inr.bias.b", l), base.biases[l]);
  }
}

InrParams load_base_inr(const ParamSet& tensors, const InrConfig& config) {
  InrParams out;
  for (std::size_t l = 0; l < layer_shapes(config).size(); ++l) {
    out.weights.push_back(tensors.at(layer_name("inr.template.W", l)));
    out.biases.push_back(tensors.at(layer_name("inr.bias.b", l)));
  }
  return out;
}

HdParams hd_params_from(const ParamSet& tensors) { return {tensors.subset("hd.")}; }

EncoderParams encoder_params_from(const ParamSet& tensors, const ModelConfig& config) {
  return {config.encoder, tensors.subset("enc.")};
}

DenoiserParams denoiser_params_from(const ParamSet& tensors, const ModelConfig& config) {
  return {denoiser_config(config), tensors.subset("eps.")};
}

}  // namespace ldmi
