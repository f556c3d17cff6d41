#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "dpti/rng.hpp"
#include "dpti/tensor.hpp"

namespace dpti {

/// Ordered registry of named trainable tensors. Insertion order is the
/// canonical order for optimizer state and checkpoints.
class ParameterStore {
 public:
  Tensor add(const std::string& name, Tensor init);
  Tensor get(const std::string& name) const;
  bool contains(const std::string& name) const;

  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  std::vector<Tensor> tensors() const;
  std::vector<Tensor> with_prefix(const std::string& prefix) const;
  std::size_t scalar_count() const;
  void zero_grad();

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
};

namespace init {

/// He-normal: N(0, 2 / fan_in).
Tensor he_normal(Shape shape, std::size_t fan_in, Rng& rng);
/// N(0, 1 / fan_in).
Tensor lecun_normal(Shape shape, std::size_t fan_in, Rng& rng);
Tensor normal(Shape shape, double stddev, Rng& rng);

}  // namespace init

}  // namespace dpti
