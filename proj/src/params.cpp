#include "dpti/params.hpp"

#include <cmath>
#include <stdexcept>

namespace dpti {

Tensor ParameterStore::add(const std::string& name, Tensor init) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  init.set_requires_grad(true);
  entries_.emplace_back(name, init);
  return init;
}

Tensor ParameterStore::get(const std::string& name) const {
  for (const auto& [n, t] : entries_) {
    if (n == name) return t;
  }
  throw std::out_of_range("no parameter named " + name);
}

bool ParameterStore::contains(const std::string& name) const {
  for (const auto& entry : entries_) {
    if (entry.first == name) return true;
  }
  return false;
}

std::vector<Tensor> ParameterStore::tensors() const {
  std::vector<Tensor> out;
  out.reserve(entries_.size());
  for (const auto& entry : entries_) out.push_back(entry.second);
  return out;
}

std::vector<Tensor> ParameterStore::with_prefix(const std::string& prefix) const {
  std::vector<Tensor> out;
  for (const auto& [n, t] : entries_) {
    if (n.starts_with(prefix)) out.push_back(t);
  }
  return out;
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& entry : entries_) n += entry.second.size();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& entry : entries_) entry.second.zero_grad();
}

namespace init {

Tensor normal(Shape shape, double stddev, Rng& rng) {
  std::vector<double> v(numel(shape));
  for (double& x : v) x = rng.normal() * stddev;
  return Tensor::from(std::move(shape), std::move(v));
}

Tensor he_normal(Shape shape, std::size_t fan_in, Rng& rng) {
  return normal(std::move(shape), std::sqrt(2.0 / static_cast<double>(fan_in)), rng);
}

Tensor lecun_normal(Shape shape, std::size_t fan_in, Rng& rng) {
  return normal(std::move(shape), std::sqrt(1.0 / static_cast<double>(fan_in)), rng);
}

}  // namespace init

}  // namespace dpti
