#include "iert/parameters.hpp"

#include <cmath>

#include "iert/error.hpp"

namespace iert {

Tensor& ParameterStore::add(const std::string& name, Tensor value) {
  require(!contains(name), ErrorKind::kContract, "parameter '" + name + "' already registered");
  return set(name, std::move(value));
}

Tensor& ParameterStore::set(const std::string& name, Tensor value) {
  grads_[name] = Tensor(value.shape());
  return values_[name] = std::move(value);
}

void ParameterStore::erase(const std::string& name) {
  values_.erase(name);
  grads_.erase(name);
}

Tensor& ParameterStore::value(const std::string& name) {
  auto it = values_.find(name);
  require(it != values_.end(), ErrorKind::kContract, "unknown parameter '" + name + "'");
  return it->second;
}

const Tensor& ParameterStore::value(const std::string& name) const {
  auto it = values_.find(name);
  require(it != values_.end(), ErrorKind::kContract, "unknown parameter '" + name + "'");
  return it->second;
}

Tensor& ParameterStore::grad(const std::string& name) {
  auto it = grads_.find(name);
  require(it != grads_.end(), ErrorKind::kContract, "no gradient buffer for '" + name + "'");
  return it->second;
}

const Tensor& ParameterStore::grad(const std::string& name) const {
  auto it = grads_.find(name);
  require(it != grads_.end(), ErrorKind::kContract, "no gradient buffer for '" + name + "'");
  return it->second;
}

std::vector<std::string> ParameterStore::names() const {
  std::vector<std::string> out;
  out.reserve(values_.size());
  for (const auto& [name, _] : values_) out.push_back(name);
  return out;
}

std::size_t ParameterStore::parameter_count() const {
  std::size_t total = 0;
  for (const auto& [_, value] : values_) total += value.size();
  return total;
}

void ParameterStore::zero_grad() {
  for (auto& [_, g] : grads_) g.fill(0.0);
}

void adam_step(ParameterStore& store, AdamState& state) {
  for (const auto& [name, value] : store.values()) {
    auto it = store.grads().find(name);
    require(it != store.grads().end() && it->second.shape() == value.shape(),
            ErrorKind::kContract, "adam_step: missing gradient for parameter '" + name + "'");
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(state.beta1, t);
  const double correction2 = 1.0 - std::pow(state.beta2, t);
  for (const std::string& name : store.names()) {
    Tensor& value = store.value(name);
    Tensor& grad = store.grad(name);
    auto [m_it, m_new] = state.first_moment.try_emplace(name, value.shape());
    auto [v_it, v_new] = state.second_moment.try_emplace(name, value.shape());
    Tensor& m = m_it->second;
    Tensor& v = v_it->second;
    require(m.shape() == value.shape() && v.shape() == value.shape(), ErrorKind::kContract,
            "adam_step: moment shape mismatch for '" + name + "'");
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double g = grad[i];
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
      const double m_hat = m[i] / correction1;
      const double v_hat = v[i] / correction2;
      value[i] -= state.learning_rate * m_hat / (std::sqrt(v_hat) + state.epsilon);
    }
    grad.fill(0.0);
  }
}

}  // namespace iert
