#include "ldmi/tensorio.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

#include "ldmi/error.hpp"
#include "ldmi/inr.hpp"
#include "ldmi/rng.hpp"

namespace ldmi {
namespace {

constexpr char kMagic[4] = {'L', 'D', 'M', 'I'};

template <typename T>
void put_le(std::string& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.append(bytes, sizeof(T));
}

template <typename T>
T get_le(const char* p) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, p, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

}  // namespace

std::size_t dtype_size(DType dtype) {
  switch (dtype) {
    case DType::kF32: return 4;
    case DType::kF64: return 8;
    case DType::kU8: return 1;
  }
  throw Error(ErrorCode::kUnknownDtype, "unknown dtype");
}

std::size_t TensorData::numel() const {
  std::size_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

std::string encode_tensor(const TensorData& tensor) {
  if (tensor.dims.empty() || tensor.dims.size() > kMaxTensorRank)
    throw Error(ErrorCode::kInvalidArgument,
                "tensor rank must be in [1, 8], got " + std::to_string(tensor.dims.size()));
  if (tensor.values.size() != tensor.numel())
    throw Error(ErrorCode::kShapeMismatch, "tensor has " + std::to_string(tensor.values.size()) +
                                               " values for " + std::to_string(tensor.numel()) +
                                               " elements");
  std::string out(kMagic, 4);
  out.push_back(static_cast<char>(kTensorFileVersion));
  out.push_back(static_cast<char>(tensor.dtype));
  out.push_back(static_cast<char>(tensor.dims.size()));
  for (auto d : tensor.dims) put_le<std::uint32_t>(out, d);
  out.reserve(out.size() + tensor.numel() * dtype_size(tensor.dtype));
  for (double v : tensor.values) {
    switch (tensor.dtype) {
      case DType::kF32: put_le<float>(out, static_cast<float>(v)); break;
      case DType::kF64: put_le<double>(out, v); break;
      case DType::kU8:
        if (!(v >= 0.0 && v <= 255.0) || v != std::floor(v))
          throw Error(ErrorCode::kInvalidArgument, "u8 tensor value out of range");
        out.push_back(static_cast<char>(static_cast<std::uint8_t>(v)));
        break;
    }
  }
  return out;
}

TensorData decode_tensor(std::string_view bytes, std::size_t* consumed) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw Error(ErrorCode::kBadMagic, "not a tensor file (bad magic)");
  if (bytes.size() < 7) throw Error(ErrorCode::kTruncated, "tensor header truncated");
  const auto version = static_cast<std::uint8_t>(bytes[4]);
  if (version != kTensorFileVersion)
    throw Error(ErrorCode::kMalformedHeader, "unsupported tensor file version " + std::to_string(version));
  const auto dtype_code = static_cast<std::uint8_t>(bytes[5]);
  if (dtype_code > 2) throw Error(ErrorCode::kUnknownDtype, "unknown dtype code " + std::to_string(dtype_code));
  TensorData t;
  t.dtype = static_cast<DType>(dtype_code);
  const auto rank = static_cast<std::uint8_t>(bytes[6]);
  if (rank == 0 || rank > kMaxTensorRank)
    throw Error(ErrorCode::kMalformedHeader, "tensor rank must be in [1, 8], got " + std::to_string(rank));
  std::size_t pos = 7;
  if (bytes.size() < pos + 4 * rank) throw Error(ErrorCode::kTruncated, "tensor dims truncated");
  for (std::size_t i = 0; i < rank; ++i, pos += 4) t.dims.push_back(get_le<std::uint32_t>(bytes.data() + pos));
  const std::size_t n = t.numel();
  const std::size_t width = dtype_size(t.dtype);
  if ((bytes.size() - pos) / width < n)
    throw Error(ErrorCode::kTruncated, "tensor payload truncated: need " + std::to_string(n * width) +
                                           " bytes, have " + std::to_string(bytes.size() - pos));
  t.values.resize(n);
  for (std::size_t i = 0; i < n; ++i, pos += width) {
    const char* p = bytes.data() + pos;
    switch (t.dtype) {
      case DType::kF32: t.values[i] = get_le<float>(p); break;
      case DType::kF64: t.values[i] = get_le<double>(p); break;
      case DType::kU8: t.values[i] = static_cast<std::uint8_t>(*p); break;
    }
  }
  if (consumed) *consumed = pos;
  return t;
}

std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_bytes(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::kIo, "short write to " + path.string());
}

void write_tensor(const std::filesystem::path& path, std::span<const double> values,
                  std::span<const std::uint32_t> dims, DType dtype) {
  TensorData t{dtype, {dims.begin(), dims.end()}, {values.begin(), values.end()}};
  write_file_bytes(path, encode_tensor(t));
}

TensorData read_tensor(const std::filesystem::path& path) {
  const std::string bytes = read_file_bytes(path);
  std::size_t used = 0;
  TensorData t = decode_tensor(bytes, &used);
  if (used != bytes.size())
    throw Error(ErrorCode::kMalformedHeader, path.string() + ": " + std::to_string(bytes.size() - used) +
                                                 " trailing bytes after tensor payload");
  return t;
}

// ---------------------------------------------------------------------------
// PPM

namespace {

struct PnmReader {
  std::string_view bytes;
  std::size_t pos = 0;

  void skip_space_and_comments() {
    while (pos < bytes.size()) {
      if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else {
        break;
      }
    }
  }

  std::size_t number() {
    skip_space_and_comments();
    std::size_t start = pos;
    std::size_t value = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      value = value * 10 + static_cast<std::size_t>(bytes[pos] - '0');
      if (value > (1u << 24)) throw Error(ErrorCode::kMalformedHeader, "PPM header value too large");
      ++pos;
    }
    if (pos == start) throw Error(ErrorCode::kMalformedHeader, "PPM header: expected a number");
    return value;
  }
};

}  // namespace

Image decode_ppm(std::string_view bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || !std::isdigit(static_cast<unsigned char>(bytes[1])))
    throw Error(ErrorCode::kMalformedHeader, "not a PNM file");
  std::size_t channels = 0;
  if (bytes[1] == '6') channels = 3;
  else if (bytes[1] == '5') channels = 1;
  else throw Error(ErrorCode::kUnsupportedFormat, std::string("unsupported PNM variant P") + bytes[1]);
  PnmReader r{bytes, 2};
  Image img;
  img.channels = channels;
  img.width = r.number();
  img.height = r.number();
  const std::size_t maxval = r.number();
  if (img.width == 0 || img.height == 0) throw Error(ErrorCode::kMalformedHeader, "PPM has zero size");
  if (maxval != 255) throw Error(ErrorCode::kUnsupportedMaxval, "PPM maxval " + std::to_string(maxval) + " (need 255)");
  if (r.pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[r.pos])))
    throw Error(ErrorCode::kMalformedHeader, "PPM header not terminated by whitespace");
  ++r.pos;
  const std::size_t n = img.width * img.height * channels;
  if (bytes.size() - r.pos < n) throw Error(ErrorCode::kTruncated, "PPM pixel data truncated");
  img.pixels.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    img.pixels[i] = static_cast<double>(static_cast<std::uint8_t>(bytes[r.pos + i])) / 255.0;
  return img;
}

Image load_ppm(const std::filesystem::path& path) { return decode_ppm(read_file_bytes(path)); }

std::string encode_ppm(const Image& image) {
  if (image.channels != 1 && image.channels != 3)
    throw Error(ErrorCode::kInvalidArgument, "PPM images need 1 or 3 channels");
  if (image.pixels.size() != image.width * image.height * image.channels)
    throw Error(ErrorCode::kShapeMismatch, "image pixel count does not match its size");
  std::string out = (image.channels == 3 ? "P6\n" : "P5\n") + std::to_string(image.width) + " " +
                    std::to_string(image.height) + "\n255\n";
  out.reserve(out.size() + image.pixels.size());
  for (double v : image.pixels) {
    const double c = std::isnan(v) ? 0.0 : std::clamp(v, 0.0, 1.0);
    out.push_back(static_cast<char>(static_cast<std::uint8_t>(std::floor(c * 255.0 + 0.5))));
  }
  return out;
}

void save_ppm(const std::filesystem::path& path, const Image& image) {
  write_file_bytes(path, encode_ppm(image));
}

// ---------------------------------------------------------------------------
// Signals and datasets

Signal make_signal(std::vector<std::size_t> resolution, std::size_t feat_dim,
                   std::vector<double> features) {
  const CoordinateGrid grid = make_coordinate_grid(resolution, resolution.size());
  if (features.size() != grid.size() * feat_dim)
    throw Error(ErrorCode::kShapeMismatch, "signal has " + std::to_string(features.size()) +
                                               " feature values for " + std::to_string(grid.size()) +
                                               " points of dim " + std::to_string(feat_dim));
  Signal s;
  s.resolution = std::move(resolution);
  s.coord_dim = grid.dim;
  s.feat_dim = feat_dim;
  s.coords = grid.coords;
  s.features = std::move(features);
  return s;
}

Signal signal_from_image(const Image& image) {
  return make_signal({image.height, image.width}, image.channels, image.pixels);
}

Image image_from_features(std::span<const double> features, std::size_t height, std::size_t width,
                          std::size_t channels) {
  if (features.size() != height * width * channels)
    throw Error(ErrorCode::kShapeMismatch, "feature count does not match image size");
  return Image{width, height, channels, {features.begin(), features.end()}};
}

namespace {

using Field = std::vector<double>;

Field render_gaussians(const CoordinateGrid& grid, Rng& rng) {
  const int blobs = rng.uniform_int(1, 3);
  struct Blob { double cx, cy, sigma, amp; };
  std::vector<Blob> bs;
  for (int b = 0; b < blobs; ++b)
    bs.push_back({rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6), rng.uniform(0.15, 0.4), rng.uniform(0.4, 1.0)});
  Field f(grid.size());
  for (std::size_t p = 0; p < grid.size(); ++p) {
    const double y = grid.coords[2 * p], x = grid.coords[2 * p + 1];
    double v = 0.0;
    for (const auto& b : bs) {
      const double d2 = (x - b.cx) * (x - b.cx) + (y - b.cy) * (y - b.cy);
      v += b.amp * std::exp(-d2 / (2.0 * b.sigma * b.sigma));
    }
    f[p] = std::clamp(v, 0.0, 1.0);
  }
  return f;
}

Field render_stripes(const CoordinateGrid& grid, Rng& rng) {
  const double freq = rng.uniform(1.0, 4.0);
  const double angle = rng.uniform(0.0, std::numbers::pi);
  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double c = std::cos(angle), s = std::sin(angle);
  Field f(grid.size());
  for (std::size_t p = 0; p < grid.size(); ++p) {
    const double y = grid.coords[2 * p], x = grid.coords[2 * p + 1];
    f[p] = std::clamp(0.5 + 0.5 * std::sin(std::numbers::pi * freq * (x * c + y * s) + phase), 0.0, 1.0);
  }
  return f;
}

Field render_field(const CoordinateGrid& grid, Rng& rng) {
  constexpr int kTerms = 4;
  struct Term { double amp, fx, fy, phase; };
  std::vector<Term> terms;
  double total = 0.0;
  for (int k = 0; k < kTerms; ++k) {
    Term t{rng.uniform(-1.0, 1.0), rng.uniform(0.0, 1.5), rng.uniform(0.0, 1.5),
           rng.uniform(0.0, 2.0 * std::numbers::pi)};
    total += std::abs(t.amp);
    terms.push_back(t);
  }
  Field f(grid.size());
  for (std::size_t p = 0; p < grid.size(); ++p) {
    const double y = grid.coords[2 * p], x = grid.coords[2 * p + 1];
    double v = 0.0;
    for (const auto& t : terms) v += t.amp * std::cos(std::numbers::pi * (t.fx * x + t.fy * y) + t.phase);
    f[p] = std::clamp(0.5 + 0.5 * v / total, 0.0, 1.0);
  }
  return f;
}

}  // namespace

Dataset make_synthetic_dataset(std::string_view kind, std::size_t n, std::vector<std::size_t> resolution,
                               std::uint64_t seed) {
  Field (*render)(const CoordinateGrid&, Rng&) = nullptr;
  if (kind == "gaussians") render = render_gaussians;
  else if (kind == "stripes") render = render_stripes;
  else if (kind == "field") render = render_field;
  else throw Error(ErrorCode::kUnknownKind, "unknown synthetic dataset kind '" + std::string(kind) + "'");
  if (n < 1) throw Error(ErrorCode::kInvalidArgument, "synthetic dataset needs n >= 1");
  if (resolution.size() != 2)
    throw Error(ErrorCode::kInvalidArgument, "synthetic datasets are 2-D; got rank " + std::to_string(resolution.size()));

  const CoordinateGrid grid = make_coordinate_grid(resolution, 2);
  Dataset ds;
  ds.resolution = resolution;
  ds.coord_dim = 2;
  ds.feat_dim = 1;
  const Rng root(Rng::derive(seed, kind));
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng = root.substream(i);
    ds.items.push_back(make_signal(resolution, 1, render(grid, rng)));
  }
  return ds;
}

void save_dataset(const std::filesystem::path& path, const Dataset& dataset) {
  if (dataset.resolution.size() != 2)
    throw Error(ErrorCode::kInvalidArgument, "only 2-D datasets can be saved");
  TensorData t;
  t.dtype = DType::kF32;
  t.dims = {static_cast<std::uint32_t>(dataset.items.size()), static_cast<std::uint32_t>(dataset.resolution[0]),
            static_cast<std::uint32_t>(dataset.resolution[1]), static_cast<std::uint32_t>(dataset.feat_dim)};
  for (const auto& s : dataset.items) t.values.insert(t.values.end(), s.features.begin(), s.features.end());
  write_file_bytes(path, encode_tensor(t));
}

namespace {

void check_range(const Dataset& ds, const std::string& where) {
  for (const auto& s : ds.items)
    for (double v : s.features)
      if (!(v >= 0.0 && v <= 1.0))
        throw Error(ErrorCode::kInvalidArgument, where + ": feature values must lie in [0, 1]");
}

}  // namespace

Dataset load_dataset(const std::filesystem::path& path) {
  Dataset ds;
  if (std::filesystem::is_directory(path)) {
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(path))
      if (e.is_regular_file() && e.path().extension() == ".ppm") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw Error(ErrorCode::kIo, path.string() + ": no .ppm images");
    for (const auto& f : files) {
      Signal s = signal_from_image(load_ppm(f));
      if (!ds.items.empty() && (s.resolution != ds.resolution || s.feat_dim != ds.feat_dim))
        throw Error(ErrorCode::kResolutionMismatch, f.string() + ": image size differs from the first image");
      ds.resolution = s.resolution;
      ds.coord_dim = s.coord_dim;
      ds.feat_dim = s.feat_dim;
      ds.items.push_back(std::move(s));
    }
    return ds;
  }
  const TensorData t = read_tensor(path);
  if (t.dims.size() != 4)
    throw Error(ErrorCode::kShapeMismatch, path.string() + ": dataset tensor must be [n, height, width, channels]");
  ds.resolution = {t.dims[1], t.dims[2]};
  ds.coord_dim = 2;
  ds.feat_dim = t.dims[3];
  const std::size_t per = static_cast<std::size_t>(t.dims[1]) * t.dims[2] * t.dims[3];
  for (std::size_t i = 0; i < t.dims[0]; ++i)
    ds.items.push_back(make_signal(ds.resolution, ds.feat_dim,
                                   {t.values.begin() + static_cast<std::ptrdiff_t>(i * per),
                                    t.values.begin() + static_cast<std::ptrdiff_t>((i + 1) * per)}));
  check_range(ds, path.string());
  return ds;
}

std::size_t Mask::observed_count() const {
  return static_cast<std::size_t>(std::count(observed.begin(), observed.end(), true));
}

Mask load_mask(const std::filesystem::path& path) {
  const Image img = load_ppm(path);
  if (img.channels != 1) throw Error(ErrorCode::kUnsupportedFormat, path.string() + ": masks must be P5 (greyscale)");
  Mask m;
  m.resolution = {img.height, img.width};
  m.observed.resize(img.pixels.size());
  for (std::size_t i = 0; i < img.pixels.size(); ++i) m.observed[i] = img.pixels[i] * 255.0 >= 127.5;
  return m;
}

void save_mask(const std::filesystem::path& path, const Mask& mask) {
  if (mask.resolution.size() != 2) throw Error(ErrorCode::kInvalidArgument, "masks are 2-D");
  Image img{mask.resolution[1], mask.resolution[0], 1, {}};
  for (bool b : mask.observed) img.pixels.push_back(b ? 1.0 : 0.0);
  save_ppm(path, img);
}

}  // namespace ldmi
