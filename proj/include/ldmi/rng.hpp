#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace ldmi {

/// Deterministic random stream. Named sub-streams are derived from the
/// construction seed, so "init" and "train" draws never interleave.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  static std::uint64_t derive(std::uint64_t seed, std::string_view name);
  static std::uint64_t derive(std::uint64_t seed, std::uint64_t index);

  Rng substream(std::string_view name) const { return Rng(derive(seed_, name)); }
  Rng substream(std::uint64_t index) const { return Rng(derive(seed_, index)); }

  std::uint64_t seed() const { return seed_; }

  double uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }
  double normal() { return normal_(engine_); }
  /// Uniform integer in [lo, hi] inclusive.
  int uniform_int(int lo, int hi) {
    return std::uniform_int_distribution<int>(lo, hi)(engine_);
  }

  std::vector<double> normal_vector(std::size_t n);
  std::vector<double> uniform_vector(std::size_t n, double lo, double hi);

  std::mt19937_64& engine() { return engine_; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace ldmi
