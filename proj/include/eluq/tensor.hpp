#pragma once

// Dense float64 tensors with define-by-run reverse-mode differentiation.
//
// A Tensor is a cheap handle to a graph node. Every primitive applied to
// operands that require gradients appends a node holding the output values,
// handles to its inputs and a closure that pushes the output gradient back
// into them. The graph lives exactly as long as the handles that reach it, so
// rebuilding per minibatch needs no explicit cleanup.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace eluq {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until the first accumulation
  bool requires_grad = false;
  const char* op = "leaf";
  std::uint64_t revision = 0;  // bumped by every mutable data() access
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;  // reads this->grad, accumulates into inputs

  void accumulate(std::size_t i, double g) {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    grad[i] += g;
  }
  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const { return shape().at(axis); }
  std::size_t size() const;

  std::span<const double> values() const;
  /// Mutable access to the value buffer. Used for parameter updates and
  /// finite-difference perturbations; never mutate a tensor that is an input
  /// of a graph still awaiting backward().
  /// Mutable view; bumps the node revision so derived caches notice writes.
  /// Writes through a span kept across other computations are not tracked.
  std::span<double> data();
  std::uint64_t revision() const;
  double item() const;
  double at(std::size_t row, std::size_t col) const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  /// Reverse sweep from a scalar root. Gradients accumulate additively into
  /// every reachable leaf that requires them.
  void backward() const;

  /// Copy of the values as a new leaf without history.
  Tensor detach() const;
  const char* op() const;

  // Graph construction hooks for the primitive implementations.
  static Tensor from_node(std::shared_ptr<detail::Node> node);
  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// ---- primitives -----------------------------------------------------------

/// 2-d matrix product [m,k] x [k,n] -> [m,n].
Tensor matmul(const Tensor& a, const Tensor& b);

// Elementwise binary ops with numpy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double offset);

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);   // strictly positive input
Tensor sqrt(const Tensor& a);  // strictly positive input
Tensor square(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor selu(const Tensor& a);
/// Smooth max(x, 0) with sharpness k: log(1 + exp(k x)) / k.
Tensor softplus(const Tensor& a, double sharpness = 1.0);
/// Hard clamp; gradient passes only where the input lies inside [lo, hi].
Tensor clamp(const Tensor& a, double lo, double hi);

/// Sum of all elements -> scalar (shape {}).
Tensor sum(const Tensor& a);
/// Sum over one axis; the axis is removed from the shape.
Tensor sum(const Tensor& a, std::size_t axis);
Tensor mean(const Tensor& a);
Tensor mean(const Tensor& a, std::size_t axis);

Tensor reshape(const Tensor& a, Shape shape);
Tensor broadcast_to(const Tensor& a, const Shape& shape);
Tensor transpose(const Tensor& a);

/// mu + sigma * eps with eps recorded in the node as a constant.
Tensor reparameterize(const Tensor& mu, const Tensor& sigma, std::vector<double> eps);

struct BatchNormStats {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  explicit BatchNormStats(std::size_t features = 0)
      : running_mean(features, 0.0), running_var(features, 1.0) {}
};

/// Batch normalization over the rows of an [m,n] input. Training mode
/// normalizes with the batch statistics and updates the running ones; eval
/// mode is the affine map defined by the frozen running statistics.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  BatchNormStats& stats, bool training);
/// Eval-mode batch normalization; never touches the statistics.
Tensor batch_norm_eval(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                       const BatchNormStats& stats);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator*(const Tensor& a, double c) { return scale(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return scale(a, c); }
inline Tensor operator+(const Tensor& a, double c) { return add_scalar(a, c); }
inline Tensor operator-(const Tensor& a, double c) { return add_scalar(a, -c); }

namespace selu_constants {
inline constexpr double kScale = 1.0507009873554804934193349852946;
inline constexpr double kAlpha = 1.6732632423543772848170429916717;
}  // namespace selu_constants

namespace testing_hooks {
/// Multiplies the SELU backward scale; 1.0 is correct. Mutation testing only.
void set_selu_backward_scale_factor(double factor);
}  // namespace testing_hooks

}  // namespace eluq
