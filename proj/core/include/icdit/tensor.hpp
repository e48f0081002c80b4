#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace icdit {

class Rng;

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct TensorNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  bool is_leaf = true;

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

using NodePtr = std::shared_ptr<TensorNode>;

}  // namespace detail

/// Dense row-major f64 array with an optional gradient buffer.
///
/// A Tensor is a handle: copies refer to the same storage, the way a
/// recorded computation refers to its inputs. Use clone() for an
/// independent copy. Operations never modify their inputs.
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false);
  static Tensor eye(std::size_t n);

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return node_->data.size(); }
  /// Leading dimension of a rank-2 tensor.
  std::size_t rows() const;
  /// Trailing dimension of a rank-2 tensor.
  std::size_t cols() const;

  std::span<const double> data() const { return node_->data; }
  /// Direct write access. Only meaningful on leaves (optimizer updates,
  /// finite-difference probes); mutating a recorded intermediate
  /// invalidates its backward pass.
  std::span<double> mutable_data() { return node_->data; }
  double operator[](std::size_t i) const { return node_->data[i]; }
  double at(std::size_t r, std::size_t c) const;
  double item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool value) { node_->requires_grad = value; }
  bool is_leaf() const { return node_->is_leaf; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.clear(); }

  Tensor clone() const;
  Tensor detach() const { return clone(); }
  /// Same data viewed under a new shape with equal element count; a
  /// non-recorded copy.
  Tensor reshaped(Shape shape) const;

  bool same_storage(const Tensor& other) const { return node_ == other.node_; }
  const detail::NodePtr& node() const { return node_; }

 private:
  explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}
  friend Tensor make_result(Shape shape, std::vector<double> data);

  detail::NodePtr node_;
};

/// Creates a non-leaf result tensor (used by operation implementations).
Tensor make_result(Shape shape, std::vector<double> data);

bool all_finite(std::span<const double> values);

// -- reverse-mode tape -------------------------------------------------------

/// Per-thread record of differentiable operations.
///
/// Operations append an entry when recording is enabled and any input
/// requires a gradient. backward() walks the entries in reverse order.
/// Leaf gradients accumulate across calls until zero_grad()/reset.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  static Tape& current();

  bool recording() const { return enabled_; }
  /// True when an op with these inputs should be recorded.
  bool should_record(std::initializer_list<const Tensor*> inputs) const;
  bool should_record(std::span<const Tensor> inputs) const;

  void record(detail::NodePtr output, BackwardFn fn);
  void backward(const Tensor& loss);
  void reset();
  std::size_t size() const { return entries_.size(); }

 private:
  friend class NoGradGuard;

  struct Entry {
    detail::NodePtr output;
    BackwardFn fn;
  };
  std::vector<Entry> entries_;
  bool enabled_ = true;
};

/// Disables recording on the current thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Accumulates d(loss)/d(leaf) into every leaf that requires a gradient.
/// Throws ContractError when loss is not a scalar or was not recorded.
void backward(const Tensor& loss);

}  // namespace icdit
