#pragma once

// Binary tensor files, PPM images, datasets of gridded signals and
// completion masks.
//
// TensorFile layout (all integers little-endian):
//   offset 0  : "LDMI"                magic, 4 ASCII bytes
//   offset 4  : u8 version            currently 1
//   offset 5  : u8 dtype              0 = f32, 1 = f64, 2 = u8
//   offset 6  : u8 rank               1..8
//   offset 7  : u32 dims[rank]
//   then      : row-major payload, product(dims) * sizeof(dtype) bytes

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace ldmi {

enum class DType : std::uint8_t { kF32 = 0, kF64 = 1, kU8 = 2 };

std::size_t dtype_size(DType dtype);

inline constexpr std::uint8_t kTensorFileVersion = 1;
inline constexpr std::size_t kMaxTensorRank = 8;

/// Values are held as double regardless of dtype; f32 and u8 values
/// round-trip exactly through double.
struct TensorData {
  DType dtype = DType::kF64;
  std::vector<std::uint32_t> dims;
  std::vector<double> values;

  std::size_t numel() const;
  bool operator==(const TensorData&) const = default;
};

std::string encode_tensor(const TensorData& tensor);
/// Decodes one record from the front of `bytes`; `consumed` receives its
/// length. Trailing bytes are left to the caller.
TensorData decode_tensor(std::string_view bytes, std::size_t* consumed = nullptr);

void write_tensor(const std::filesystem::path& path, std::span<const double> values,
                  std::span<const std::uint32_t> dims, DType dtype);
TensorData read_tensor(const std::filesystem::path& path);

std::string read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::string_view bytes);

/// Interleaved row-major pixels, channels in {1, 3}, values in [0, 1].
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 1;
  std::vector<double> pixels;

  bool operator==(const Image&) const = default;
};

/// Reads binary P6 (colour) or P5 (grey) with maxval 255.
Image load_ppm(const std::filesystem::path& path);
Image decode_ppm(std::string_view bytes);
/// Clamps to [0, 1] and quantizes with round-half-up.
void save_ppm(const std::filesystem::path& path, const Image& image);
std::string encode_ppm(const Image& image);

/// One datum: D coordinates and their D feature vectors, laid out on a
/// regular grid (row-major over `resolution`).
struct Signal {
  std::vector<std::size_t> resolution;
  std::size_t coord_dim = 0;
  std::size_t feat_dim = 0;
  std::vector<double> coords;    // D x coord_dim
  std::vector<double> features;  // D x feat_dim

  std::size_t num_points() const { return feat_dim ? features.size() / feat_dim : 0; }
  bool operator==(const Signal&) const = default;
};

struct Dataset {
  std::vector<std::size_t> resolution;
  std::size_t coord_dim = 0;
  std::size_t feat_dim = 0;
  std::vector<Signal> items;

  bool operator==(const Dataset&) const = default;
};

/// Builds a signal on the pixel-centre grid for `resolution`.
Signal make_signal(std::vector<std::size_t> resolution, std::size_t feat_dim,
                   std::vector<double> features);

Signal signal_from_image(const Image& image);
Image image_from_features(std::span<const double> features, std::size_t height,
                          std::size_t width, std::size_t channels);

/// kind is one of "gaussians", "stripes", "field". Resolution must be 2-D.
Dataset make_synthetic_dataset(std::string_view kind, std::size_t n,
                               std::vector<std::size_t> resolution, std::uint64_t seed);

/// Stored as an f32 TensorFile of dims [n, height, width, channels].
void save_dataset(const std::filesystem::path& path, const Dataset& dataset);
/// Accepts a TensorFile written by save_dataset or a directory of .ppm
/// images (sorted by file name, all the same size).
Dataset load_dataset(const std::filesystem::path& path);

/// Observed/missing flags on a signal's spatial grid.
struct Mask {
  std::vector<std::size_t> resolution;
  std::vector<bool> observed;

  std::size_t observed_count() const;
};

/// P5 mask: byte 0 = missing, 255 = observed (>= 128 reads as observed).
Mask load_mask(const std::filesystem::path& path);
void save_mask(const std::filesystem::path& path, const Mask& mask);

}  // namespace ldmi
