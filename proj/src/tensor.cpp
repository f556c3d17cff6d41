#include "dpti/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cstring>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace dpti {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::uint64_t seq = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
};

namespace {

std::atomic<std::uint64_t> g_sequence{0};
thread_local int g_no_grad_depth = 0;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_str(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

void require_rank(const Tensor& a, std::size_t rank, const char* op) {
  if (a.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(a.shape()));
  }
}

}  // namespace

class OpBuilder {
 public:
  using Backward = std::function<void(Node&)>;

  static Tensor leaf(Shape shape, std::vector<double> value, bool requires_grad) {
    if (numel(shape) != value.size()) {
      throw DimensionError("tensor of shape " + shape_str(shape) + " cannot hold " +
                           std::to_string(value.size()) + " values");
    }
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    node->requires_grad = requires_grad;
    node->seq = g_sequence.fetch_add(1, std::memory_order_relaxed);
    return Tensor(std::move(node));
  }

  static Tensor make(Shape shape, std::vector<double> value, std::initializer_list<Tensor> inputs,
                     Backward backward) {
    Tensor out = leaf(std::move(shape), std::move(value), false);
    if (!grad_enabled()) return out;
    bool any = false;
    for (const auto& t : inputs) any = any || t.requires_grad();
    if (!any) return out;
    Node& n = *out.node_;
    n.requires_grad = true;
    n.parents.reserve(inputs.size());
    for (const auto& t : inputs) n.parents.push_back(t.node_);
    n.backward = std::move(backward);
    return out;
  }

  static Tensor make(Shape shape, std::vector<double> value, std::span<const Tensor> inputs,
                     Backward backward) {
    Tensor out = leaf(std::move(shape), std::move(value), false);
    if (!grad_enabled()) return out;
    bool any = false;
    for (const auto& t : inputs) any = any || t.requires_grad();
    if (!any) return out;
    Node& n = *out.node_;
    n.requires_grad = true;
    n.parents.reserve(inputs.size());
    for (const auto& t : inputs) n.parents.push_back(t.node_);
    n.backward = std::move(backward);
    return out;
  }

  static Node& node(const Tensor& t) { return *t.node_; }
};

namespace {

/// Gradient buffer of parent i, allocated on first use; nullptr if the parent
/// does not take gradients.
double* grad_of(Node& out, std::size_t i) {
  Node& p = *out.parents[i];
  if (!p.requires_grad) return nullptr;
  if (p.grad.empty()) p.grad.assign(p.value.size(), 0.0);
  return p.grad.data();
}

const std::vector<double>& value_of(const Node& out, std::size_t i) {
  return out.parents[i]->value;
}

}  // namespace

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const std::size_t n = numel(shape);
  return OpBuilder::leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = numel(shape);
  return OpBuilder::leaf(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  return OpBuilder::leaf(std::move(shape), std::move(values), requires_grad);
}

Tensor Tensor::scalar(double value) { return OpBuilder::leaf({1}, {value}, false); }

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) throw DimensionError("axis out of range for " + shape_str(shape()));
  return node_->shape[axis];
}

std::size_t Tensor::size() const { return node_->value.size(); }

std::span<const double> Tensor::data() const { return node_->value; }

std::span<double> Tensor::mutable_data() { return node_->value; }

std::vector<double> Tensor::to_vector() const { return node_->value; }

double Tensor::item() const {
  if (size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

double Tensor::at(std::size_t i, std::size_t j) const {
  if (rank() != 2) throw DimensionError("at(i, j) on tensor of shape " + shape_str(shape()));
  return node_->value[i * node_->shape[1] + j];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool on) { node_->requires_grad = on; }

std::span<const double> Tensor::grad() const {
  if (node_->grad.empty()) node_->grad.assign(node_->value.size(), 0.0);
  return node_->grad;
}

bool Tensor::has_grad() const { return !node_->grad.empty(); }

void Tensor::zero_grad() { node_->grad.clear(); }

std::uint64_t Tensor::sequence() const { return node_->seq; }

Tensor Tensor::detach() const { return OpBuilder::leaf(node_->shape, node_->value, false); }

void Tensor::backward() const {
  if (size() != 1) {
    throw DimensionError("backward() requires a scalar, got " + shape_str(shape()));
  }
  if (!node_->requires_grad) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{node_.get()};
  seen.insert(node_.get());
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(), [](const Node* a, const Node* b) { return a->seq > b->seq; });

  if (node_->grad.empty()) node_->grad.assign(1, 0.0);
  node_->grad[0] += 1.0;
  for (Node* n : order) {
    if (!n->backward || n->grad.empty()) continue;
    n->backward(*n);
    // Interior gradients are consumed exactly once.
    n->grad.clear();
    n->grad.shrink_to_fit();
  }
}

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }
bool grad_enabled() { return g_no_grad_depth == 0; }

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const auto m = static_cast<Eigen::Index>(a.dim(0));
  const auto k = static_cast<Eigen::Index>(a.dim(1));
  const auto n = static_cast<Eigen::Index>(b.dim(1));
  std::vector<double> out(static_cast<std::size_t>(m * n));
  MutMap(out.data(), m, n).noalias() = ConstMap(a.data().data(), m, k) * ConstMap(b.data().data(), k, n);
  return OpBuilder::make({a.dim(0), b.dim(1)}, std::move(out), {a, b}, [m, k, n](Node& o) {
    ConstMap g(o.grad.data(), m, n);
    if (double* ga = grad_of(o, 0)) {
      MutMap(ga, m, k).noalias() += g * ConstMap(value_of(o, 1).data(), k, n).transpose();
    }
    if (double* gb = grad_of(o, 1)) {
      MutMap(gb, k, n).noalias() += ConstMap(value_of(o, 0).data(), m, k).transpose() * g;
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<double> out(r * c);
  const auto x = a.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
  return OpBuilder::make({c, r}, std::move(out), {a}, [r, c](Node& o) {
    if (double* ga = grad_of(o, 0)) {
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += o.grad[j * r + i];
    }
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  return OpBuilder::make(std::move(shape), a.to_vector(), {a}, [](Node& o) {
    if (double* ga = grad_of(o, 0)) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) ga[i] += o.grad[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Elementwise

namespace {

template <class Fwd, class Bwd>
Tensor unary(const Tensor& a, Fwd fwd, Bwd bwd) {
  const auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = fwd(x[i]);
  return OpBuilder::make(a.shape(), std::move(out), {a}, [bwd](Node& o) {
    if (double* ga = grad_of(o, 0)) {
      const auto& x = value_of(o, 0);
      for (std::size_t i = 0; i < x.size(); ++i) ga[i] += o.grad[i] * bwd(x[i], o.value[i]);
    }
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  const auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
  return OpBuilder::make(a.shape(), std::move(out), {a, b}, [](Node& o) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (double* g = grad_of(o, p)) {
        for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
      }
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  const auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[i];
  return OpBuilder::make(a.shape(), std::move(out), {a, b}, [](Node& o) {
    if (double* g = grad_of(o, 0)) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
    }
    if (double* g = grad_of(o, 1)) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] -= o.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
  return OpBuilder::make(a.shape(), std::move(out), {a, b}, [](Node& o) {
    const auto& x = value_of(o, 0);
    const auto& y = value_of(o, 1);
    if (double* g = grad_of(o, 0)) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * y[i];
    }
    if (double* g = grad_of(o, 1)) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * x[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  return unary(
      a, [factor](double x) { return x * factor; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double value) {
  return unary(
      a, [value](double x) { return x + value; }, [](double, double) { return 1.0; });
}

Tensor relu(const Tensor& a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor exp(const Tensor& a) {
  return unary(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
  return unary(
      a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

Tensor square(const Tensor& a) {
  return unary(
      a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor add_row_bias(const Tensor& x, const Tensor& b) {
  require_rank(x, 2, "add_row_bias");
  if (b.size() != x.dim(0)) {
    throw DimensionError("add_row_bias: bias " + shape_str(b.shape()) + " vs input " +
                         shape_str(x.shape()));
  }
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<double> out = x.to_vector();
  const auto bias = b.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bias[i];
  return OpBuilder::make(x.shape(), std::move(out), {x, b}, [m, n](Node& o) {
    if (double* gx = grad_of(o, 0)) {
      for (std::size_t i = 0; i < m * n; ++i) gx[i] += o.grad[i];
    }
    if (double* gb = grad_of(o, 1)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[i] += o.grad[i * n + j];
    }
  });
}

Tensor scale_columns(const Tensor& x, const Tensor& v) {
  require_rank(x, 2, "scale_columns");
  if (v.size() != x.dim(1)) {
    throw DimensionError("scale_columns: weights " + shape_str(v.shape()) + " vs input " +
                         shape_str(x.shape()));
  }
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<double> out = x.to_vector();
  const auto w = v.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] *= w[j];
  return OpBuilder::make(x.shape(), std::move(out), {x, v}, [m, n](Node& o) {
    const auto& xv = value_of(o, 0);
    const auto& wv = value_of(o, 1);
    if (double* gx = grad_of(o, 0)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += o.grad[i * n + j] * wv[j];
    }
    if (double* gw = grad_of(o, 1)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gw[j] += o.grad[i * n + j] * xv[i * n + j];
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return OpBuilder::make({1}, {s}, {a}, [](Node& o) {
    if (double* ga = grad_of(o, 0)) {
      const std::size_t n = value_of(o, 0).size();
      for (std::size_t i = 0; i < n; ++i) ga[i] += o.grad[0];
    }
  });
}

Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw DegenerateError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Tensor sum(const Tensor& a, std::size_t axis) {
  const AxisSplit s = split_at(a.shape(), axis);
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  if (out_shape.empty()) out_shape = {1};
  std::vector<double> out(s.outer * s.inner, 0.0);
  const auto x = a.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t k = 0; k < s.len; ++k)
      for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] += x[(o * s.len + k) * s.inner + i];
  return OpBuilder::make(std::move(out_shape), std::move(out), {a}, [s](Node& node) {
    if (double* ga = grad_of(node, 0)) {
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t k = 0; k < s.len; ++k)
          for (std::size_t i = 0; i < s.inner; ++i)
            ga[(o * s.len + k) * s.inner + i] += node.grad[o * s.inner + i];
    }
  });
}

Tensor mean(const Tensor& a, std::size_t axis) {
  const AxisSplit s = split_at(a.shape(), axis);
  if (s.len == 0) throw DegenerateError("mean over empty axis");
  return scale(sum(a, axis), 1.0 / static_cast<double>(s.len));
}

// ---------------------------------------------------------------------------
// Softmax family

Tensor softmax(const Tensor& a, std::size_t axis) {
  const AxisSplit s = split_at(a.shape(), axis);
  const auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < s.len; ++k) mx = std::max(mx, x[base + k * s.inner]);
      double total = 0.0;
      for (std::size_t k = 0; k < s.len; ++k) {
        const double e = std::exp(x[base + k * s.inner] - mx);
        out[base + k * s.inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < s.len; ++k) out[base + k * s.inner] /= total;
    }
  }
  return OpBuilder::make(a.shape(), std::move(out), {a}, [s](Node& node) {
    double* ga = grad_of(node, 0);
    if (!ga) return;
    const auto& y = node.value;
    const auto& g = node.grad;
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.len * s.inner + i;
        double dot = 0.0;
        for (std::size_t k = 0; k < s.len; ++k) dot += g[base + k * s.inner] * y[base + k * s.inner];
        for (std::size_t k = 0; k < s.len; ++k) {
          const std::size_t idx = base + k * s.inner;
          ga[idx] += y[idx] * (g[idx] - dot);
        }
      }
    }
  });
}

Tensor log_softmax(const Tensor& a, std::size_t axis) {
  const AxisSplit s = split_at(a.shape(), axis);
  const auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < s.len; ++k) mx = std::max(mx, x[base + k * s.inner]);
      double total = 0.0;
      for (std::size_t k = 0; k < s.len; ++k) total += std::exp(x[base + k * s.inner] - mx);
      const double lse = mx + std::log(total);
      for (std::size_t k = 0; k < s.len; ++k) out[base + k * s.inner] = x[base + k * s.inner] - lse;
    }
  }
  return OpBuilder::make(a.shape(), std::move(out), {a}, [s](Node& node) {
    double* ga = grad_of(node, 0);
    if (!ga) return;
    const auto& y = node.value;
    const auto& g = node.grad;
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.len * s.inner + i;
        double gsum = 0.0;
        for (std::size_t k = 0; k < s.len; ++k) gsum += g[base + k * s.inner];
        for (std::size_t k = 0; k < s.len; ++k) {
          const std::size_t idx = base + k * s.inner;
          ga[idx] += g[idx] - std::exp(y[idx]) * gsum;
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Normalization

Tensor l2_normalize(const Tensor& a, std::size_t axis) {
  const AxisSplit s = split_at(a.shape(), axis);
  const auto x = a.data();
  std::vector<double> out(x.size());
  std::vector<double> norms(s.outer * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      double ss = 0.0;
      for (std::size_t k = 0; k < s.len; ++k) ss += x[base + k * s.inner] * x[base + k * s.inner];
      const double nrm = std::sqrt(ss);
      if (!(nrm > 0.0)) throw DegenerateError("l2_normalize: zero-norm slice");
      norms[o * s.inner + i] = nrm;
      for (std::size_t k = 0; k < s.len; ++k) out[base + k * s.inner] = x[base + k * s.inner] / nrm;
    }
  }
  return OpBuilder::make(a.shape(), std::move(out), {a}, [s, norms = std::move(norms)](Node& node) {
    double* ga = grad_of(node, 0);
    if (!ga) return;
    const auto& y = node.value;
    const auto& g = node.grad;
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.len * s.inner + i;
        double dot = 0.0;
        for (std::size_t k = 0; k < s.len; ++k) dot += y[base + k * s.inner] * g[base + k * s.inner];
        const double inv = 1.0 / norms[o * s.inner + i];
        for (std::size_t k = 0; k < s.len; ++k) {
          const std::size_t idx = base + k * s.inner;
          ga[idx] += (g[idx] - y[idx] * dot) * inv;
        }
      }
    }
  });
}

Tensor l2_normalize(const Tensor& a) {
  return reshape(l2_normalize(reshape(a, {a.size()}), 0), a.shape());
}

// ---------------------------------------------------------------------------
// Structural

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw DimensionError("concat: axis out of range for " + shape_str(first));
  std::vector<std::size_t> lens;
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& sh = p.shape();
    bool ok = sh.size() == first.size();
    for (std::size_t d = 0; ok && d < sh.size(); ++d) ok = d == axis || sh[d] == first[d];
    if (!ok) {
      throw DimensionError("concat: incompatible shapes " + shape_str(first) + " and " + shape_str(sh));
    }
    lens.push_back(sh[axis]);
    total += sh[axis];
  }
  Shape out_shape = first;
  out_shape[axis] = total;
  const AxisSplit s = split_at(out_shape, axis);
  std::vector<double> out(numel(out_shape));
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto x = parts[p].data();
    const std::size_t chunk = lens[p] * s.inner;
    for (std::size_t o = 0; o < s.outer; ++o) {
      std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(o * chunk), chunk,
                  out.begin() + static_cast<std::ptrdiff_t>(o * s.len * s.inner + offset * s.inner));
    }
    offset += lens[p];
  }
  return OpBuilder::make(std::move(out_shape), std::move(out), parts, [s, lens](Node& node) {
    std::size_t offset = 0;
    for (std::size_t p = 0; p < lens.size(); ++p) {
      const std::size_t chunk = lens[p] * s.inner;
      if (double* g = grad_of(node, p)) {
        for (std::size_t o = 0; o < s.outer; ++o) {
          const double* src = node.grad.data() + o * s.len * s.inner + offset * s.inner;
          for (std::size_t i = 0; i < chunk; ++i) g[o * chunk + i] += src[i];
        }
      }
      offset += lens[p];
    }
  });
}

Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis) {
  return concat(std::span<const Tensor>(parts.begin(), parts.size()), axis);
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  const AxisSplit s = split_at(a.shape(), axis);
  if (begin >= end || end > s.len) {
    throw DimensionError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") invalid for axis of length " + std::to_string(s.len));
  }
  Shape out_shape = a.shape();
  out_shape[axis] = end - begin;
  const std::size_t width = (end - begin) * s.inner;
  std::vector<double> out(s.outer * width);
  const auto x = a.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(x.begin() + static_cast<std::ptrdiff_t>((o * s.len + begin) * s.inner), width,
                out.begin() + static_cast<std::ptrdiff_t>(o * width));
  }
  return OpBuilder::make(std::move(out_shape), std::move(out), {a}, [s, begin, width](Node& node) {
    if (double* ga = grad_of(node, 0)) {
      for (std::size_t o = 0; o < s.outer; ++o) {
        double* dst = ga + (o * s.len + begin) * s.inner;
        for (std::size_t i = 0; i < width; ++i) dst[i] += node.grad[o * width + i];
      }
    }
  });
}

Tensor gather(const Tensor& a, std::span<const std::size_t> indices) {
  std::vector<double> out(indices.size());
  const auto x = a.data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= x.size()) {
      throw DimensionError("gather: index " + std::to_string(indices[i]) + " out of range for " +
                           shape_str(a.shape()));
    }
    out[i] = x[indices[i]];
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return OpBuilder::make({indices.size()}, std::move(out), {a}, [idx = std::move(idx)](Node& node) {
    if (double* ga = grad_of(node, 0)) {
      for (std::size_t i = 0; i < idx.size(); ++i) ga[idx[i]] += node.grad[i];
    }
  });
}

Tensor dropout(const Tensor& a, double p, Graph& graph) {
  if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout probability must be in [0, 1)");
  if (!graph.training() || p == 0.0) return a;
  const double keep_scale = 1.0 / (1.0 - p);
  std::vector<double> mask(a.size());
  for (double& m : mask) m = graph.rng().uniform() < p ? 0.0 : keep_scale;
  std::vector<double> out(a.size());
  const auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * mask[i];
  return OpBuilder::make(a.shape(), std::move(out), {a}, [mask = std::move(mask)](Node& node) {
    if (double* ga = grad_of(node, 0)) {
      for (std::size_t i = 0; i < mask.size(); ++i) ga[i] += node.grad[i] * mask[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Convolution (im2col + GEMM)

std::size_t conv_output_size(std::size_t in, std::size_t kernel, std::size_t stride,
                             std::size_t padding) {
  if (kernel == 0 || stride == 0) throw DimensionError("conv: kernel and stride must be >= 1");
  if (kernel > in + 2 * padding) {
    throw DimensionError("conv: kernel " + std::to_string(kernel) + " larger than padded input " +
                         std::to_string(in + 2 * padding));
  }
  return (in + 2 * padding - kernel) / stride + 1;
}

namespace {

struct ConvGeometry {
  std::size_t cin, h, w, cout, kh, kw, stride, pad, oh, ow;
  std::size_t patch() const { return cin * kh * kw; }
  std::size_t pixels() const { return oh * ow; }
};

void im2col(const double* x, const ConvGeometry& g, double* cols) {
  const std::size_t np = g.pixels();
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        double* row = cols + ((c * g.kh + ky) * g.kw + kx) * np;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                    static_cast<std::ptrdiff_t>(g.pad);
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.h) &&
                                ix < static_cast<std::ptrdiff_t>(g.w);
            row[oy * g.ow + ox] =
                inside ? x[(c * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)]
                       : 0.0;
          }
        }
      }
    }
  }
}

void col2im(const double* cols, const ConvGeometry& g, double* x) {
  const std::size_t np = g.pixels();
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const double* row = cols + ((c * g.kh + ky) * g.kw + kx) * np;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                    static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
            x[(c * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)] +=
                row[oy * g.ow + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Conv2dSpec spec) {
  require_rank(x, 3, "conv2d input");
  require_rank(weight, 4, "conv2d weight");
  if (weight.dim(1) != x.dim(0)) {
    throw DimensionError("conv2d: weight " + shape_str(weight.shape()) + " does not match input " +
                         shape_str(x.shape()));
  }
  ConvGeometry g{};
  g.cin = x.dim(0);
  g.h = x.dim(1);
  g.w = x.dim(2);
  g.cout = weight.dim(0);
  g.kh = weight.dim(2);
  g.kw = weight.dim(3);
  g.stride = spec.stride;
  g.pad = spec.padding;
  g.oh = conv_output_size(g.h, g.kh, g.stride, g.pad);
  g.ow = conv_output_size(g.w, g.kw, g.stride, g.pad);
  const bool has_bias = bias.defined();
  if (has_bias && bias.size() != g.cout) {
    throw DimensionError("conv2d: bias " + shape_str(bias.shape()) + " does not match " +
                         std::to_string(g.cout) + " output channels");
  }

  const auto P = static_cast<Eigen::Index>(g.patch());
  const auto NP = static_cast<Eigen::Index>(g.pixels());
  const auto CO = static_cast<Eigen::Index>(g.cout);
  const bool pointwise = g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0;

  std::vector<double> cols;
  const double* col_ptr = x.data().data();
  if (!pointwise) {
    cols.resize(g.patch() * g.pixels());
    im2col(x.data().data(), g, cols.data());
    col_ptr = cols.data();
  }

  std::vector<double> out(g.cout * g.pixels());
  MutMap(out.data(), CO, NP).noalias() = ConstMap(weight.data().data(), CO, P) * ConstMap(col_ptr, P, NP);
  if (has_bias) {
    const auto b = bias.data();
    for (std::size_t c = 0; c < g.cout; ++c)
      for (std::size_t i = 0; i < g.pixels(); ++i) out[c * g.pixels() + i] += b[c];
  }

  auto backward = [g, pointwise, has_bias, P, NP, CO, cols = std::move(cols)](Node& node) {
    ConstMap dy(node.grad.data(), CO, NP);
    const double* colp = pointwise ? value_of(node, 0).data() : cols.data();
    if (double* gw = grad_of(node, 1)) {
      MutMap(gw, CO, P).noalias() += dy * ConstMap(colp, P, NP).transpose();
    }
    if (has_bias) {
      if (double* gb = grad_of(node, 2)) {
        for (std::size_t c = 0; c < g.cout; ++c)
          for (std::size_t i = 0; i < g.pixels(); ++i) gb[c] += node.grad[c * g.pixels() + i];
      }
    }
    if (double* gx = grad_of(node, 0)) {
      if (pointwise) {
        MutMap(gx, P, NP).noalias() += ConstMap(value_of(node, 1).data(), CO, P).transpose() * dy;
      } else {
        std::vector<double> dcols(g.patch() * g.pixels());
        MutMap(dcols.data(), P, NP).noalias() = ConstMap(value_of(node, 1).data(), CO, P).transpose() * dy;
        col2im(dcols.data(), g, gx);
      }
    }
  };
  Shape out_shape{g.cout, g.oh, g.ow};
  if (has_bias) return OpBuilder::make(std::move(out_shape), std::move(out), {x, weight, bias}, std::move(backward));
  return OpBuilder::make(std::move(out_shape), std::move(out), {x, weight}, std::move(backward));
}

// ---------------------------------------------------------------------------
// Gradient checking

GradCheckResult grad_check(const std::function<Tensor()>& f, std::span<Tensor> params,
                           const GradCheckOptions& options) {
  auto evaluate = [&] {
    NoGradGuard guard;
    return f().item();
  };
  const double base = evaluate();
  const double again = evaluate();
  if (std::memcmp(&base, &again, sizeof(double)) != 0) {
    throw NondeterministicError("grad_check: function is not deterministic (" + std::to_string(base) +
                                " vs " + std::to_string(again) + ")");
  }

  for (auto& p : params) p.zero_grad();
  f().backward();
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) {
    const auto g = p.grad();
    analytic.emplace_back(g.begin(), g.end());
  }

  GradCheckResult result;
  Rng rng(options.seed);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = params[pi];
    std::vector<std::size_t> entries(p.size());
    std::iota(entries.begin(), entries.end(), std::size_t{0});
    if (options.max_entries_per_param != 0 && entries.size() > options.max_entries_per_param) {
      rng.shuffle(std::span<std::size_t>(entries));
      entries.resize(options.max_entries_per_param);
      std::sort(entries.begin(), entries.end());
    }
    auto values = p.mutable_data();
    for (std::size_t idx : entries) {
      const double a = analytic[pi][idx];
      auto relative_error = [&](double eps, double* numeric_out) {
        const double original = values[idx];
        values[idx] = original + eps;
        const double plus = evaluate();
        values[idx] = original - eps;
        const double minus = evaluate();
        values[idx] = original;
        const double numeric = (plus - minus) / (2.0 * eps);
        *numeric_out = numeric;
        const double denom = std::max({std::abs(a), std::abs(numeric), options.denominator_floor});
        return std::abs(a - numeric) / denom;
      };
      double numeric = 0.0;
      double err = relative_error(options.epsilon, &numeric);
      double eps = options.epsilon;
      for (std::size_t r = 0; r < options.refinements && err > options.refine_above; ++r) {
        // A non-differentiable point inside [x - eps, x + eps] spoils the
        // stencil; a narrower one excludes it unless it sits exactly at x.
        // Narrower steps cost precision, so the better of the two is kept.
        eps /= 10.0;
        double refined_numeric = 0.0;
        const double refined = relative_error(eps, &refined_numeric);
        ++result.refined_entries;
        if (refined < err) {
          err = refined;
          numeric = refined_numeric;
        }
      }
      ++result.entries_checked;
      if (err > result.max_relative_error || !std::isfinite(err)) {
        result.max_relative_error = std::isfinite(err) ? err : std::numeric_limits<double>::infinity();
        result.worst_param = pi;
        result.worst_entry = idx;
        result.worst_analytic = a;
        result.worst_numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace dpti
