#pragma once

// Dense row-major tensor with tape-free reverse-mode differentiation.
//
// Every operation creates a node stamped with a monotonically increasing
// sequence number. A node's inputs always carry smaller numbers than the node
// itself, so sorting the reachable nodes by descending sequence number gives
// a valid reverse topological order for backward().

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dpti/rng.hpp"

namespace dpti {

using Shape = std::vector<std::size_t>;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an operation is mathematically undefined for its input
/// (zero-norm vector, empty reduction).
class DegenerateError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Node;

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const;

  std::span<const double> data() const;
  /// Writable view; only meaningful for leaves (parameters, inputs).
  std::span<double> mutable_data();
  std::vector<double> to_vector() const;
  double item() const;
  double operator[](std::size_t flat) const { return data()[flat]; }
  double at(std::size_t i, std::size_t j) const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  /// Gradient, or an all-zero view if the tensor never received one.
  std::span<const double> grad() const;
  bool has_grad() const;
  void zero_grad();

  /// Reverse pass from this scalar; gradients accumulate into every
  /// reachable tensor that requires them.
  void backward() const;

  /// Same values, cut from the graph.
  Tensor detach() const;

  std::uint64_t sequence() const;
  const Node* node() const { return node_.get(); }

 private:
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  std::shared_ptr<Node> node_;

  friend class OpBuilder;
};

/// Disables graph recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

bool grad_enabled();

enum class Mode { kTraining, kInference };

/// Execution context of one forward pass: training/inference mode plus the
/// generator all stochastic ops (dropout) draw from.
class Graph {
 public:
  explicit Graph(Mode mode = Mode::kInference, std::uint64_t seed = 0) : mode_(mode), rng_(seed) {}
  Mode mode() const { return mode_; }
  bool training() const { return mode_ == Mode::kTraining; }
  Rng& rng() { return rng_; }

 private:
  Mode mode_;
  Rng rng_;
};

// ---------------------------------------------------------------------------
// Operations. All are differentiable with respect to every Tensor argument.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
Tensor relu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor square(const Tensor& a);

/// x[m×n] + b[m], b broadcast along columns.
Tensor add_row_bias(const Tensor& x, const Tensor& b);
/// x[m×n] * v[n], column j scaled by v[j].
Tensor scale_columns(const Tensor& x, const Tensor& v);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum(const Tensor& a, std::size_t axis);
Tensor mean(const Tensor& a, std::size_t axis);

Tensor softmax(const Tensor& a, std::size_t axis);
Tensor log_softmax(const Tensor& a, std::size_t axis);

/// x / ||x|| along an axis; throws DegenerateError on a zero-norm slice.
Tensor l2_normalize(const Tensor& a, std::size_t axis);
/// x / ||x|| over all entries.
Tensor l2_normalize(const Tensor& a);

Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end);
/// Flat gather: out[i] = a.flat[indices[i]].
Tensor gather(const Tensor& a, std::span<const std::size_t> indices);

/// Inverted dropout in training mode; identity in inference mode.
Tensor dropout(const Tensor& a, double p, Graph& graph);

struct Conv2dSpec {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

/// Cross-correlation of x[c_in×h×w] with weight[c_out×c_in×k_h×k_w] plus an
/// optional bias[c_out].
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Conv2dSpec spec);

/// Standard floor formula for one spatial axis; throws DimensionError if the
/// kernel exceeds the padded input.
std::size_t conv_output_size(std::size_t in, std::size_t kernel, std::size_t stride,
                             std::size_t padding);

// ---------------------------------------------------------------------------
// Finite-difference gradient checker.

struct GradCheckOptions {
  double epsilon = 1e-6;
  /// Entries with |analytic| and |numeric| below this are compared in
  /// absolute terms against it.
  double denominator_floor = 1e-6;
  /// 0 checks every entry; otherwise a seeded sample of this many per tensor.
  std::size_t max_entries_per_param = 0;
  std::uint64_t seed = 0;
  /// Entries whose error exceeds refine_above are re-measured with the step
  /// divided by 10, at most this many times; the smaller error is kept.
  std::size_t refinements = 0;
  double refine_above = 1e-5;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t entries_checked = 0;
  std::size_t refined_entries = 0;
  std::size_t worst_param = 0;
  std::size_t worst_entry = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

class NondeterministicError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

GradCheckResult grad_check(const std::function<Tensor()>& f, std::span<Tensor> params,
                           const GradCheckOptions& options = {});

}  // namespace dpti
