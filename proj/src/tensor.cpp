#include "eluq/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>
#include <utility>

#include <cblas.h>

#include "eluq/errors.hpp"

namespace eluq {

using detail::Node;

namespace {

thread_local bool g_grad_enabled = true;
std::atomic<double> g_selu_backward_factor{1.0};

// C[rows, cols] = op(A) op(B) + beta C with op(A) [rows, inner], op(B) [inner, cols].
// The product is issued as tiles of at most 64x64x128: OpenBLAS runs its
// small-matrix kernels on such calls, which are several times faster here
// than the packed path at the layer sizes this network uses.
void gemm(bool trans_a, bool trans_b, std::size_t rows, std::size_t cols, std::size_t inner, const double* A,
          const double* B, double beta, double* C) {
  if (rows == 0 || cols == 0) return;
  if (inner == 0) {
    if (beta == 0.0) std::fill(C, C + rows * cols, 0.0);
    return;
  }
  std::vector<double> b_transposed;
  if (trans_b) {
    // Transposed-B calls stay on the slow path at every tiling; copying B is
    // cheap next to the product.
    b_transposed.resize(inner * cols);
    for (std::size_t j = 0; j < cols; ++j) {
      for (std::size_t p = 0; p < inner; ++p) b_transposed[p * cols + j] = B[j * inner + p];
    }
    B = b_transposed.data();
    trans_b = false;
  }
  constexpr std::size_t kTileRows = 64, kTileCols = 64, kTileInner = 128;
  const std::size_t lda = trans_a ? rows : inner;
  const std::size_t ldb = trans_b ? inner : cols;
  for (std::size_t i0 = 0; i0 < rows; i0 += kTileRows) {
    const std::size_t mi = std::min(kTileRows, rows - i0);
    for (std::size_t j0 = 0; j0 < cols; j0 += kTileCols) {
      const std::size_t nj = std::min(kTileCols, cols - j0);
      for (std::size_t p0 = 0; p0 < inner; p0 += kTileInner) {
        const std::size_t kp = std::min(kTileInner, inner - p0);
        const double* a = trans_a ? A + p0 * lda + i0 : A + i0 * lda + p0;
        const double* b = trans_b ? B + j0 * ldb + p0 : B + p0 * ldb + j0;
        cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans,
                    static_cast<blasint>(mi), static_cast<blasint>(nj), static_cast<blasint>(kp), 1.0, a,
                    static_cast<blasint>(lda), b, static_cast<blasint>(ldb), p0 == 0 ? beta : 1.0, C + i0 * cols + j0,
                    static_cast<blasint>(cols));
      }
    }
  }
}

std::shared_ptr<Node> make_node(const char* op, Shape shape, std::vector<double> value,
                                std::initializer_list<const Tensor*> inputs) {
  auto node = std::make_shared<Node>();
  node->op = op;
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (g_grad_enabled) {
    for (const Tensor* t : inputs) {
      if (t->requires_grad()) {
        node->requires_grad = true;
        break;
      }
    }
  }
  if (node->requires_grad) {
    for (const Tensor* t : inputs) node->inputs.push_back(t->node());
  }
  return node;
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor operand");
}

// Strides of `in` when indexed by positions of `out` (0 along broadcast axes).
std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  const std::size_t r = out.size();
  std::vector<std::size_t> strides(r, 0);
  std::size_t stride = 1;
  for (std::size_t k = 0; k < in.size(); ++k) {
    const std::size_t din = in[in.size() - 1 - k];
    const std::size_t d = r - 1 - k;
    strides[d] = (din == 1 && out[d] != 1) ? 0 : stride;
    stride *= din;
  }
  return strides;
}

Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t k = 0; k < r; ++k) {
    const std::size_t da = k < a.size() ? a[a.size() - 1 - k] : 1;
    const std::size_t db = k < b.size() ? b[b.size() - 1 - k] : 1;
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(std::string(op) + ": incompatible shapes " + shape_string(a) + " and " +
                       shape_string(b));
    }
    out[r - 1 - k] = da == 1 ? db : da;
  }
  return out;
}

// Visits every output position with the matching input offsets; the last axis
// is the inner loop.
template <class F>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, F&& f) {
  const std::size_t r = out.size();
  if (r == 0) {
    f(std::size_t{0}, std::size_t{0}, std::size_t{0});
    return;
  }
  const std::size_t inner = out[r - 1];
  const std::size_t total = numel(out);
  if (inner == 0 || total == 0) return;
  const std::size_t outer = total / inner;
  const std::size_t step_a = sa[r - 1];
  const std::size_t step_b = sb[r - 1];
  std::vector<std::size_t> idx(r, 0);
  std::size_t base_a = 0, base_b = 0, o = 0;
  for (std::size_t k = 0; k < outer; ++k) {
    std::size_t ia = base_a, ib = base_b;
    for (std::size_t j = 0; j < inner; ++j) {
      f(o++, ia, ib);
      ia += step_a;
      ib += step_b;
    }
    for (std::size_t d = r - 1; d-- > 0;) {
      ++idx[d];
      base_a += sa[d];
      base_b += sb[d];
      if (idx[d] < out[d]) break;
      base_a -= sa[d] * out[d];
      base_b -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

template <class Fwd, class GradA, class GradB>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, GradA grad_a,
                 GradB grad_b) {
  require_defined(a, name);
  require_defined(b, name);
  const Shape& sa_shape = a.shape();
  const Shape& sb_shape = b.shape();
  const auto av = a.values();
  const auto bv = b.values();

  if (sa_shape == sb_shape) {
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[i], i);
    auto node = make_node(name, sa_shape, std::move(out), {&a, &b});
    if (node->requires_grad) {
      node->backward = [grad_a, grad_b](Node& self) {
        Node& na = *self.inputs[0];
        Node& nb = *self.inputs[1];
        const auto& g = self.grad;
        if (na.requires_grad) {
          auto& ga = na.grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i)
            ga[i] += g[i] * grad_a(na.value[i], nb.value[i], self.value[i]);
        }
        if (nb.requires_grad) {
          auto& gb = nb.grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i)
            gb[i] += g[i] * grad_b(na.value[i], nb.value[i], self.value[i]);
        }
      };
    }
    return Tensor::from_node(std::move(node));
  }

  Shape out_shape = broadcast_shape(name, sa_shape, sb_shape);
  auto stride_a = broadcast_strides(sa_shape, out_shape);
  auto stride_b = broadcast_strides(sb_shape, out_shape);
  std::vector<double> out(numel(out_shape));
  for_each_broadcast(out_shape, stride_a, stride_b,
                     [&](std::size_t o, std::size_t ia, std::size_t ib) {
                       out[o] = fwd(av[ia], bv[ib], o);
                     });
  auto node = make_node(name, out_shape, std::move(out), {&a, &b});
  if (node->requires_grad) {
    node->backward = [grad_a, grad_b, stride_a = std::move(stride_a),
                      stride_b = std::move(stride_b)](Node& self) {
      Node& na = *self.inputs[0];
      Node& nb = *self.inputs[1];
      const auto& g = self.grad;
      if (na.requires_grad) {
        auto& ga = na.grad_buffer();
        for_each_broadcast(self.shape, stride_a, stride_b,
                           [&](std::size_t o, std::size_t ia, std::size_t ib) {
                             ga[ia] += g[o] * grad_a(na.value[ia], nb.value[ib], self.value[o]);
                           });
      }
      if (nb.requires_grad) {
        auto& gb = nb.grad_buffer();
        for_each_broadcast(self.shape, stride_a, stride_b,
                           [&](std::size_t o, std::size_t ia, std::size_t ib) {
                             gb[ib] += g[o] * grad_b(na.value[ia], nb.value[ib], self.value[o]);
                           });
      }
    };
  }
  return Tensor::from_node(std::move(node));
}

// grad(x, y) is dy/dx evaluated at input x and output y.
template <class Fwd, class Grad>
Tensor unary_op(const char* name, const Tensor& a, Fwd fwd, Grad grad) {
  require_defined(a, name);
  const auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], i);
  auto node = make_node(name, a.shape(), std::move(out), {&a});
  if (node->requires_grad) {
    node->backward = [grad](Node& self) {
      Node& in = *self.inputs[0];
      auto& gi = in.grad_buffer();
      const auto& g = self.grad;
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i] * grad(in.value[i], self.value[i]);
    };
  }
  return Tensor::from_node(std::move(node));
}

[[noreturn]] void domain_failure(const char* op, const char* what, double value, std::size_t index) {
  std::ostringstream msg;
  msg << op << ": " << what << " (value " << value << " at element " << index << ")";
  throw DomainError(msg.str());
}

}  // namespace

// ---- shape helpers --------------------------------------------------------

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// ---- Tensor ---------------------------------------------------------------

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
  if (numel(shape) != values.size()) {
    throw ShapeError("Tensor: shape " + shape_string(shape) + " does not hold " +
                     std::to_string(values.size()) + " values");
  }
  node_ = std::make_shared<Node>();
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({}, {value}, requires_grad); }

Tensor Tensor::from_node(std::shared_ptr<detail::Node> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

const Shape& Tensor::shape() const {
  require_defined(*this, "shape");
  return node_->shape;
}

std::size_t Tensor::size() const { return defined() ? node_->value.size() : 0; }

std::span<const double> Tensor::values() const {
  require_defined(*this, "values");
  return node_->value;
}

std::span<double> Tensor::data() {
  require_defined(*this, "data");
  ++node_->revision;
  return node_->value;
}

std::uint64_t Tensor::revision() const {
  require_defined(*this, "revision");
  return node_->revision;
}

double Tensor::item() const {
  require_defined(*this, "item");
  if (node_->value.size() != 1) {
    throw ContractError("item: tensor of shape " + shape_string(node_->shape) + " is not a scalar");
  }
  return node_->value[0];
}

double Tensor::at(std::size_t row, std::size_t col) const {
  const Shape& s = shape();
  if (s.size() != 2 || row >= s[0] || col >= s[1]) throw ContractError("at: index out of range");
  return node_->value[row * s[1] + col];
}

bool Tensor::requires_grad() const { return defined() && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  require_defined(*this, "set_requires_grad");
  node_->requires_grad = on;
  return *this;
}

bool Tensor::has_grad() const { return defined() && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  require_defined(*this, "grad");
  return node_->grad;
}

void Tensor::zero_grad() {
  if (defined() && !node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

const char* Tensor::op() const { return defined() ? node_->op : "undefined"; }

Tensor Tensor::detach() const {
  require_defined(*this, "detach");
  return Tensor(node_->shape, node_->value, false);
}

void Tensor::backward() const {
  require_defined(*this, "backward");
  if (node_->value.size() != 1) {
    throw ContractError("backward: root must be a scalar, got shape " + shape_string(node_->shape));
  }
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order (inputs first).
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      Node* child = n->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  for (Node* n : order) {
    if (n->backward && !n->grad.empty()) std::fill(n->grad.begin(), n->grad.end(), 0.0);
  }
  node_->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

namespace testing_hooks {
void set_selu_backward_scale_factor(double factor) { g_selu_backward_factor.store(factor); }
}  // namespace testing_hooks

// ---- primitives -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) {
    throw ShapeError("matmul: incompatible shapes " + shape_string(sa) + " and " + shape_string(sb));
  }
  const std::size_t m = sa[0], k = sa[1], n = sb[1];
  std::vector<double> out(m * n, 0.0);
  gemm(false, false, m, n, k, a.values().data(), b.values().data(), 0.0, out.data());
  auto node = make_node("matmul", {m, n}, std::move(out), {&a, &b});
  if (node->requires_grad) {
    node->backward = [m, k, n](Node& self) {
      Node& na = *self.inputs[0];
      Node& nb = *self.inputs[1];
      const double* G = self.grad.data();
      // dA += G B^T, dB += A^T G
      if (na.requires_grad) gemm(false, true, m, k, n, G, nb.value.data(), 1.0, na.grad_buffer().data());
      if (nb.requires_grad) gemm(true, false, k, n, m, na.value.data(), G, 1.0, nb.grad_buffer().data());
    };
  }
  return Tensor::from_node(std::move(node));
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](double x, double y, std::size_t) { return x + y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](double x, double y, std::size_t) { return x - y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](double x, double y, std::size_t) { return x * y; },
      [](double, double y, double) { return y; }, [](double x, double, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      "div", a, b,
      [](double x, double y, std::size_t i) {
        if (y == 0.0) domain_failure("div", "division by zero", y, i);
        return x / y;
      },
      [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double out) { return -out / y; });
}

Tensor neg(const Tensor& a) {
  return unary_op(
      "neg", a, [](double x, std::size_t) { return -x; }, [](double, double) { return -1.0; });
}

Tensor scale(const Tensor& a, double factor) {
  return unary_op(
      "scale", a, [factor](double x, std::size_t) { return factor * x; },
      [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double offset) {
  return unary_op(
      "add_scalar", a, [offset](double x, std::size_t) { return x + offset; },
      [](double, double) { return 1.0; });
}

Tensor exp(const Tensor& a) {
  return unary_op(
      "exp", a,
      [](double x, std::size_t i) {
        const double y = std::exp(x);
        if (!std::isfinite(y)) domain_failure("exp", "overflow", x, i);
        return y;
      },
      [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary_op(
      "log", a,
      [](double x, std::size_t i) {
        if (!(x > 0.0)) domain_failure("log", "non-positive input", x, i);
        return std::log(x);
      },
      [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
  require_defined(a, "sqrt");
  // Domain scan kept out of the arithmetic loop so the latter vectorizes.
  const auto av = a.values();
  for (std::size_t i = 0; i < av.size(); ++i) {
    if (!(av[i] > 0.0)) domain_failure("sqrt", "non-positive input", av[i], i);
  }
  return unary_op(
      "sqrt", a, [](double x, std::size_t) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

Tensor square(const Tensor& a) {
  return unary_op(
      "square", a, [](double x, std::size_t) { return x * x; },
      [](double x, double) { return 2.0 * x; });
}

Tensor tanh(const Tensor& a) {
  return unary_op(
      "tanh", a, [](double x, std::size_t) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor selu(const Tensor& a) {
  using namespace selu_constants;
  const double factor = g_selu_backward_factor.load();
  return unary_op(
      "selu", a,
      [](double x, std::size_t) { return x > 0.0 ? kScale * x : kScale * kAlpha * std::expm1(x); },
      // Right-hand derivative at exactly 0.
      [factor](double x, double y) {
        return factor * (x >= 0.0 ? kScale : y + kScale * kAlpha);
      });
}

Tensor softplus(const Tensor& a, double sharpness) {
  if (!(sharpness > 0.0)) throw ContractError("softplus: sharpness must be positive");
  const double k = sharpness;
  return unary_op(
      "softplus", a,
      [k](double x, std::size_t) {
        const double kx = k * x;
        return (std::max(kx, 0.0) + std::log1p(std::exp(-std::abs(kx)))) / k;
      },
      [k](double x, double) {
        const double kx = k * x;
        return kx >= 0.0 ? 1.0 / (1.0 + std::exp(-kx)) : std::exp(kx) / (1.0 + std::exp(kx));
      });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  if (lo > hi) throw ContractError("clamp: lower bound above upper bound");
  return unary_op(
      "clamp", a, [lo, hi](double x, std::size_t) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Tensor sum(const Tensor& a) {
  require_defined(a, "sum");
  double acc = 0.0;
  for (double v : a.values()) acc += v;
  auto node = make_node("sum", {}, {acc}, {&a});
  if (node->requires_grad) {
    node->backward = [](Node& self) {
      Node& in = *self.inputs[0];
      auto& gi = in.grad_buffer();
      const double g = self.grad[0];
      for (double& v : gi) v += g;
    };
  }
  return Tensor::from_node(std::move(node));
}

Tensor sum(const Tensor& a, std::size_t axis) {
  require_defined(a, "sum");
  const Shape& s = a.shape();
  if (axis >= s.size()) {
    throw ShapeError("sum: axis " + std::to_string(axis) + " out of range for shape " + shape_string(s));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
  for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
  const std::size_t n = s[axis];
  Shape out_shape;
  for (std::size_t d = 0; d < s.size(); ++d)
    if (d != axis) out_shape.push_back(s[d]);
  const auto av = a.values();
  std::vector<double> out(outer * inner, 0.0);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += av[(o * n + k) * inner + i];
  auto node = make_node("sum_axis", std::move(out_shape), std::move(out), {&a});
  if (node->requires_grad) {
    node->backward = [outer, n, inner](Node& self) {
      Node& in = *self.inputs[0];
      auto& gi = in.grad_buffer();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t k = 0; k < n; ++k)
          for (std::size_t i = 0; i < inner; ++i) gi[(o * n + k) * inner + i] += self.grad[o * inner + i];
    };
  }
  return Tensor::from_node(std::move(node));
}

Tensor mean(const Tensor& a) {
  require_defined(a, "mean");
  if (a.size() == 0) throw ContractError("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Tensor mean(const Tensor& a, std::size_t axis) {
  Tensor s = sum(a, axis);
  const std::size_t n = a.shape()[axis];
  if (n == 0) throw ContractError("mean: empty axis");
  return scale(s, 1.0 / static_cast<double>(n));
}

Tensor reshape(const Tensor& a, Shape shape) {
  require_defined(a, "reshape");
  if (numel(shape) != a.size()) {
    throw ShapeError("reshape: cannot view " + shape_string(a.shape()) + " as " + shape_string(shape));
  }
  auto node = make_node("reshape", std::move(shape), std::vector<double>(a.values().begin(), a.values().end()),
                        {&a});
  if (node->requires_grad) {
    node->backward = [](Node& self) {
      Node& in = *self.inputs[0];
      auto& gi = in.grad_buffer();
      for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += self.grad[i];
    };
  }
  return Tensor::from_node(std::move(node));
}

Tensor broadcast_to(const Tensor& a, const Shape& shape) {
  require_defined(a, "broadcast_to");
  Shape out_shape = broadcast_shape("broadcast_to", a.shape(), shape);
  if (out_shape != shape) {
    throw ShapeError("broadcast_to: incompatible shapes " + shape_string(a.shape()) + " and " +
                     shape_string(shape));
  }
  auto strides = broadcast_strides(a.shape(), out_shape);
  std::vector<std::size_t> none(out_shape.size(), 0);
  const auto av = a.values();
  std::vector<double> out(numel(out_shape));
  for_each_broadcast(out_shape, strides, none,
                     [&](std::size_t o, std::size_t ia, std::size_t) { out[o] = av[ia]; });
  auto node = make_node("broadcast_to", out_shape, std::move(out), {&a});
  if (node->requires_grad) {
    node->backward = [strides, none](Node& self) {
      Node& in = *self.inputs[0];
      auto& gi = in.grad_buffer();
      for_each_broadcast(self.shape, strides, none,
                         [&](std::size_t o, std::size_t ia, std::size_t) { gi[ia] += self.grad[o]; });
    };
  }
  return Tensor::from_node(std::move(node));
}

Tensor transpose(const Tensor& a) {
  require_defined(a, "transpose");
  const Shape& s = a.shape();
  if (s.size() != 2) throw ShapeError("transpose: expected a 2-d tensor, got " + shape_string(s));
  const std::size_t m = s[0], n = s[1];
  const auto av = a.values();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  auto node = make_node("transpose", {n, m}, std::move(out), {&a});
  if (node->requires_grad) {
    node->backward = [m, n](Node& self) {
      Node& in = *self.inputs[0];
      auto& gi = in.grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gi[i * n + j] += self.grad[j * m + i];
    };
  }
  return Tensor::from_node(std::move(node));
}

Tensor reparameterize(const Tensor& mu, const Tensor& sigma, std::vector<double> eps) {
  require_defined(mu, "reparameterize");
  require_defined(sigma, "reparameterize");
  if (mu.shape() != sigma.shape() || eps.size() != mu.size()) {
    throw ShapeError("reparameterize: incompatible shapes " + shape_string(mu.shape()) + " and " +
                     shape_string(sigma.shape()));
  }
  const auto m = mu.values();
  const auto s = sigma.values();
  std::vector<double> out(m.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = m[i] + s[i] * eps[i];
  auto node = make_node("reparameterize", mu.shape(), std::move(out), {&mu, &sigma});
  if (node->requires_grad) {
    node->backward = [eps = std::move(eps)](Node& self) {
      Node& nm = *self.inputs[0];
      Node& ns = *self.inputs[1];
      if (nm.requires_grad) {
        auto& g = nm.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      }
      if (ns.requires_grad) {
        auto& g = ns.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * eps[i];
      }
    };
  }
  return Tensor::from_node(std::move(node));
}

namespace {

Tensor batch_norm_impl(const Tensor& x, const Tensor& gamma, const Tensor& beta, const BatchNormStats& stats,
                       BatchNormStats* update) {
  const bool training = update != nullptr;
  require_defined(x, "batch_norm");
  const Shape& s = x.shape();
  if (s.size() != 2 || gamma.shape() != Shape{s[1]} || beta.shape() != Shape{s[1]} ||
      stats.running_mean.size() != s[1] || stats.running_var.size() != s[1]) {
    throw ShapeError("batch_norm: incompatible shapes " + shape_string(s) + " and " +
                     shape_string(gamma.shape()));
  }
  const std::size_t m = s[0], n = s[1];
  if (m == 0) throw ContractError("batch_norm: empty batch");
  const auto xv = x.values();
  const auto gv = gamma.values();
  const auto bv = beta.values();

  std::vector<double> mu(n, 0.0), inv_std(n, 0.0);
  if (training) {
    std::vector<double> var(n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) mu[j] += xv[i * n + j];
    for (double& v : mu) v /= static_cast<double>(m);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const double d = xv[i * n + j] - mu[j];
        var[j] += d * d;
      }
    for (std::size_t j = 0; j < n; ++j) {
      const double biased = var[j] / static_cast<double>(m);
      inv_std[j] = 1.0 / std::sqrt(biased + stats.eps);
      const double unbiased = m > 1 ? var[j] / static_cast<double>(m - 1) : biased;
      update->running_mean[j] = (1.0 - stats.momentum) * stats.running_mean[j] + stats.momentum * mu[j];
      update->running_var[j] = (1.0 - stats.momentum) * stats.running_var[j] + stats.momentum * unbiased;
    }
  } else {
    for (std::size_t j = 0; j < n; ++j) {
      mu[j] = stats.running_mean[j];
      inv_std[j] = 1.0 / std::sqrt(stats.running_var[j] + stats.eps);
    }
  }

  std::vector<double> xhat(m * n), out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t k = i * n + j;
      xhat[k] = (xv[k] - mu[j]) * inv_std[j];
      out[k] = gv[j] * xhat[k] + bv[j];
    }
  auto node = make_node(training ? "batch_norm_train" : "batch_norm_eval", s, std::move(out),
                        {&x, &gamma, &beta});
  if (node->requires_grad) {
    node->backward = [m, n, training, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
      Node& nx = *self.inputs[0];
      Node& ng = *self.inputs[1];
      Node& nb = *self.inputs[2];
      const auto& g = self.grad;
      if (ng.requires_grad || nb.requires_grad) {
        std::vector<double> dg(n, 0.0), db(n, 0.0);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            dg[j] += g[i * n + j] * xhat[i * n + j];
            db[j] += g[i * n + j];
          }
        if (ng.requires_grad) {
          auto& gg = ng.grad_buffer();
          for (std::size_t j = 0; j < n; ++j) gg[j] += dg[j];
        }
        if (nb.requires_grad) {
          auto& gb = nb.grad_buffer();
          for (std::size_t j = 0; j < n; ++j) gb[j] += db[j];
        }
      }
      if (!nx.requires_grad) return;
      auto& gx = nx.grad_buffer();
      const auto& gamma_v = ng.value;
      if (!training) {
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[i * n + j] * gamma_v[j] * inv_std[j];
        return;
      }
      std::vector<double> sum_d(n, 0.0), sum_dx(n, 0.0);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const double d = g[i * n + j] * gamma_v[j];
          sum_d[j] += d;
          sum_dx[j] += d * xhat[i * n + j];
        }
      const double inv_m = 1.0 / static_cast<double>(m);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t k = i * n + j;
          const double d = g[k] * gamma_v[j];
          gx[k] += inv_std[j] * (d - inv_m * sum_d[j] - xhat[k] * inv_m * sum_dx[j]);
        }
    };
  }
  return Tensor::from_node(std::move(node));
}

}  // namespace

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormStats& stats,
                  bool training) {
  return batch_norm_impl(x, gamma, beta, stats, training ? &stats : nullptr);
}

Tensor batch_norm_eval(const Tensor& x, const Tensor& gamma, const Tensor& beta, const BatchNormStats& stats) {
  return batch_norm_impl(x, gamma, beta, stats, nullptr);
}

}  // namespace eluq
