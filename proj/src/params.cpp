#include "ldmi/params.hpp"

#include <cmath>

#include "ldmi/error.hpp"

namespace ldmi {

std::size_t count_params(const ShapeSpec& spec) {
  std::size_t total = 0;
  for (const auto& [name, shape] : spec) total += ag::shape_numel(shape);
  return total;
}

void ParamSet::add(std::string name, ag::Tensor tensor) {
  if (tensors_.contains(name)) throw Error(ErrorCode::kInvalidArgument, "duplicate parameter " + name);
  tensors_.emplace(std::move(name), std::move(tensor));
}

const ag::Tensor& ParamSet::at(std::string_view name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw Error(ErrorCode::kIncompleteCheckpoint, "missing parameter " + std::string(name));
  return it->second;
}

bool ParamSet::contains(std::string_view name) const { return tensors_.find(name) != tensors_.end(); }

std::size_t ParamSet::count() const {
  std::size_t total = 0;
  for (const auto& [name, t] : tensors_) total += t.numel();
  return total;
}

ParamSet ParamSet::clone() const {
  ParamSet out;
  for (const auto& [name, t] : tensors_) out.tensors_.emplace(name, t.clone());
  return out;
}

ParamSet ParamSet::subset(std::string_view prefix) const {
  ParamSet out;
  for (const auto& [name, t] : tensors_)
    if (std::string_view(name).starts_with(prefix)) out.tensors_.emplace(name, t);
  return out;
}

void ParamSet::merge(const ParamSet& other) {
  for (const auto& [name, t] : other.tensors_) add(name, t);
}

void ParamSet::zero_grad() {
  for (auto& [name, t] : tensors_) {
    ag::Tensor copy = t;
    copy.zero_grad();
  }
}

ag::Tensor init_tensor(const ag::Shape& shape, Init init, Rng& rng, double scale) {
  const std::size_t n = ag::shape_numel(shape);
  std::vector<double> v(n, 0.0);
  switch (init) {
    case Init::kZeros: break;
    case Init::kOnes: std::fill(v.begin(), v.end(), 1.0); break;
    case Init::kFanIn: {
      const double fan_in = static_cast<double>(n / shape.at(0));
      const double bound = scale / std::sqrt(fan_in);
      v = rng.uniform_vector(n, -bound, bound);
      break;
    }
    case Init::kNormal:
      for (auto& x : v) x = scale * rng.normal();
      break;
  }
  return ag::Tensor::parameter(shape, std::move(v));
}

}  // namespace ldmi
