#pragma once

// Dense float64 tensors with eager, tape-recorded reverse-mode differentiation.
//
// A Tensor is a handle onto a graph node. Copying a handle shares the node
// (and therefore its data and gradient), the same as most tensor libraries.
// Each differentiable op allocates a fresh node that keeps its inputs alive,
// so the graph of a forward pass lives exactly as long as its outputs.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace smear {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Raised for incompatible shapes; the message names the offending shapes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an API is used outside its contract (non-scalar backward, etc.).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this->grad and accumulates into inputs that require grad.
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return inputs.empty(); }
  std::vector<double>& ensure_grad();
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  /// Size of axis `axis`; negative values count from the end.
  std::size_t dim(int axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  /// Direct buffer access for optimizers and initializers. Never use this on a
  /// tensor whose graph is still awaiting backward.
  std::span<double> mutable_data();
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool has_grad() const;
  /// Gradient buffer; zeros when no gradient was accumulated yet.
  std::vector<double> grad() const;
  void zero_grad();

  /// Reverse sweep from a scalar. Leaf gradients accumulate across calls.
  void backward() const;

  /// Fresh leaf holding a copy of the data, detached from any graph.
  Tensor detach() const;
  Tensor clone_leaf(bool requires_grad) const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Number of graph nodes reachable from `root`, each counted once, in
/// topological order (inputs before outputs).
std::vector<const detail::Node*> topological_order(const Tensor& root);

// ---- elementwise (same shape, or the second operand broadcast from size-1 axes)
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
/// s - a
Tensor rsub_scalar(double s, const Tensor& a);

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor square(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor swish(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator*(double s, const Tensor& a) { return mul_scalar(a, s); }
inline Tensor operator*(const Tensor& a, double s) { return mul_scalar(a, s); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }
inline Tensor operator-(double s, const Tensor& a) { return rsub_scalar(s, a); }

// ---- linear algebra
/// (...×p×q) · (q×r) -> (...×p×r)
Tensor matmul(const Tensor& a, const Tensor& b);
/// (B×p×q) · (B×q×r) -> (B×p×r)
Tensor bmm(const Tensor& a, const Tensor& b);

// ---- reductions
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum_axis(const Tensor& a, int axis, bool keepdim = false);
Tensor mean_axis(const Tensor& a, int axis, bool keepdim = false);

// ---- normalization and activations over the last axis
Tensor softmax_last_axis(const Tensor& x);
/// Population variance with epsilon inside the square root. `scale` and
/// `shift`, when defined, have the length of the last axis.
Tensor layer_norm(const Tensor& x, double epsilon = 1e-6, const Tensor& scale = {},
                  const Tensor& shift = {});
/// -sum p log p over the last axis, with 0 log 0 = 0.
Tensor entropy_last_axis(const Tensor& p);

Tensor stop_gradient(const Tensor& x);

// ---- shape manipulation
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, int axis);
/// Transpose of a 2-D tensor.
Tensor transpose(const Tensor& a);
/// Picks entry `index` of the last axis; the result drops that axis.
Tensor select_last(const Tensor& a, std::size_t index);
/// Rows of a 2-D tensor picked by index (repeats allowed).
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows);
/// Picks one entry per row of a 2-D tensor: out[b] = a[b, cols[b]].
Tensor pick_per_row(const Tensor& a, std::span<const std::size_t> cols);

// ---- stacked-parameter primitives
/// out[b] = sum_i weights[b,i] * parts[i]; every part has the same shape S and
/// the result has shape B×S.
Tensor weighted_stack(const Tensor& weights, const std::vector<Tensor>& parts);
/// out[b] = parts[index[b]]; result has shape B×S.
Tensor select_stack(std::span<const std::size_t> index, const std::vector<Tensor>& parts);

// ---- losses (elementwise or per-row, callers reduce)
/// Huber loss elementwise between same-shaped tensors.
Tensor huber(const Tensor& prediction, const Tensor& target, double delta = 1.0);
/// Per-row cross-entropy of B×C logits against class indices -> B.
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels);
/// Cubic smooth step: 0 below -gamma/2, 1 above gamma/2, C1 in between.
Tensor smooth_step(const Tensor& x, double gamma);

// ---- finite-difference checking

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  std::vector<double> analytic;
  std::vector<double> numeric;
};

/// Compares the analytic gradient of scalar `f` at `x` with central differences.
/// The relative error of a coordinate is |analytic - numeric| / max(1, |numeric|).
/// `f` must rebuild its graph from the tensor it receives.
GradCheckResult grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                           double step = 1e-6);

/// Same check over several parameter tensors that `f` closes over. Each tensor
/// is perturbed in place and restored afterwards.
GradCheckResult grad_check_params(const std::function<Tensor()>& f, std::vector<Tensor> params,
                                  double step = 1e-6);

}  // namespace smear
