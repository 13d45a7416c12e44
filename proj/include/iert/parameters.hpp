#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "iert/tensor.hpp"

namespace iert {

/// Named learnable tensors with gradient buffers of matching shape.
/// Iteration order is the lexicographic order of names, which keeps every
/// traversal (optimizer, checkpoint, gradient check) deterministic.
class ParameterStore {
 public:
  explicit ParameterStore(std::uint64_t seed = 0) : seed_(seed) {}

  /// Registers a new parameter; its gradient starts at zero. Throws if the
  /// name is taken.
  Tensor& add(const std::string& name, Tensor value);
  /// Replaces or inserts, resetting the gradient.
  Tensor& set(const std::string& name, Tensor value);

  bool contains(const std::string& name) const { return values_.count(name) > 0; }
  void erase(const std::string& name);

  Tensor& value(const std::string& name);
  const Tensor& value(const std::string& name) const;
  Tensor& grad(const std::string& name);
  const Tensor& grad(const std::string& name) const;

  std::vector<std::string> names() const;
  std::size_t size() const { return values_.size(); }
  std::size_t parameter_count() const;

  void zero_grad();

  std::uint64_t seed() const { return seed_; }
  void set_seed(std::uint64_t seed) { seed_ = seed; }

  const std::map<std::string, Tensor>& values() const { return values_; }
  const std::map<std::string, Tensor>& grads() const { return grads_; }

 private:
  std::map<std::string, Tensor> values_;
  std::map<std::string, Tensor> grads_;
  std::uint64_t seed_;
};

struct AdamState {
  double learning_rate = 2e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t step = 0;
  std::map<std::string, Tensor> first_moment;
  std::map<std::string, Tensor> second_moment;
};

/// One bias-corrected Adam update over every parameter in `store`, then
/// zeroes the gradients. Moments are created lazily for new parameters.
void adam_step(ParameterStore& store, AdamState& state);

}  // namespace iert
