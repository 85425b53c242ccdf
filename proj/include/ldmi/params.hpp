#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ldmi/autograd.hpp"
#include "ldmi/rng.hpp"

namespace ldmi {

/// Ordered shape declaration of a parameter set; the single source of truth
/// for both initialization and parameter accounting.
using ShapeSpec = std::vector<std::pair<std::string, ag::Shape>>;

std::size_t count_params(const ShapeSpec& spec);

/// Named trainable tensors, ordered by name. Copies share tensors; use
/// clone() for an independent snapshot.
class ParamSet {
 public:
  void add(std::string name, ag::Tensor tensor);
  const ag::Tensor& at(std::string_view name) const;
  bool contains(std::string_view name) const;
  std::size_t size() const { return tensors_.size(); }
  std::size_t count() const;

  ParamSet clone() const;
  /// Entries whose name starts with prefix.
  ParamSet subset(std::string_view prefix) const;
  void merge(const ParamSet& other);
  void zero_grad();

  auto begin() const { return tensors_.begin(); }
  auto end() const { return tensors_.end(); }

 private:
  std::map<std::string, ag::Tensor, std::less<>> tensors_;
};

/// Initializer families for a parameter, keyed off its shape.
enum class Init {
  kZeros,
  kOnes,
  kFanIn,   // U(-1/sqrt(fan_in), 1/sqrt(fan_in)), fan_in = numel / dim(0)
  kNormal,  // N(0, scale^2)
};

ag::Tensor init_tensor(const ag::Shape& shape, Init init, Rng& rng, double scale = 1.0);

}  // namespace ldmi
