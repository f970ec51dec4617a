#include "smear/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace smear {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::vector<double>& Node::ensure_grad() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

namespace {

NodePtr new_leaf(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                     shape_str(shape));
  }
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->requires_grad = requires_grad;
  return n;
}

// Records an op result. When no input needs a gradient the result is a plain
// constant and nothing is kept alive.
Tensor make_result(Shape shape, std::vector<double> data, std::vector<NodePtr> inputs,
                   std::function<void(Node&)> fn) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  const bool needs = std::any_of(inputs.begin(), inputs.end(),
                                 [](const NodePtr& p) { return p && p->requires_grad; });
  if (needs) {
    n->requires_grad = true;
    n->inputs = std::move(inputs);
    n->backward_fn = std::move(fn);
  }
  return Tensor(std::move(n));
}

const NodePtr& require(const Tensor& t, const char* what) {
  if (!t.defined()) throw ContractError(std::string(what) + ": undefined tensor");
  return t.node();
}

std::size_t norm_axis(int axis, std::size_t rank, const char* op) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

// ---- broadcasting ------------------------------------------------------------

struct Broadcast {
  Shape out;
  std::vector<std::size_t> stride_a, stride_b;
  bool same = false;
  bool b_scalar = false;
  bool a_scalar = false;
};

std::vector<std::size_t> strides_for(const Shape& s, const Shape& out) {
  std::vector<std::size_t> st(out.size(), 0);
  std::size_t acc = 1;
  for (std::size_t i = s.size(); i-- > 0;) {
    st[i] = s[i] == 1 && out[i] != 1 ? 0 : acc;
    acc *= s[i];
  }
  return st;
}

Broadcast plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  Broadcast bc;
  if (a == b) {
    bc.out = a;
    bc.same = true;
    return bc;
  }
  if (shape_numel(b) == 1) {
    bc.out = a;
    bc.b_scalar = true;
    return bc;
  }
  if (shape_numel(a) == 1) {
    bc.out = b;
    bc.a_scalar = true;
    return bc;
  }
  if (a.size() != b.size()) {
    throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
  }
  bc.out.resize(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] == b[i] || b[i] == 1) {
      bc.out[i] = a[i];
    } else if (a[i] == 1) {
      bc.out[i] = b[i];
    } else {
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " +
                       shape_str(b));
    }
  }
  bc.stride_a = strides_for(a, bc.out);
  bc.stride_b = strides_for(b, bc.out);
  return bc;
}

// Calls fn(out_index, a_index, b_index) for every output element.
template <typename Fn>
void for_each_broadcast(const Broadcast& bc, Fn&& fn) {
  const std::size_t n = shape_numel(bc.out);
  if (bc.same) {
    for (std::size_t i = 0; i < n; ++i) fn(i, i, i);
    return;
  }
  if (bc.b_scalar) {
    for (std::size_t i = 0; i < n; ++i) fn(i, i, std::size_t{0});
    return;
  }
  if (bc.a_scalar) {
    for (std::size_t i = 0; i < n; ++i) fn(i, std::size_t{0}, i);
    return;
  }
  const std::size_t rank = bc.out.size();
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < n; ++i) {
    fn(i, ia, ib);
    for (std::size_t k = rank; k-- > 0;) {
      ++idx[k];
      ia += bc.stride_a[k];
      ib += bc.stride_b[k];
      if (idx[k] < bc.out[k]) break;
      ia -= bc.stride_a[k] * idx[k];
      ib -= bc.stride_b[k] * idx[k];
      idx[k] = 0;
    }
  }
}

// Generic binary op: value(a, b), da(a, b, out), db(a, b, out) are partials.
template <typename F, typename DA, typename DB>
Tensor binary(const Tensor& ta, const Tensor& tb, const char* op, F value, DA da, DB db) {
  const NodePtr& a = require(ta, op);
  const NodePtr& b = require(tb, op);
  auto bc = std::make_shared<Broadcast>(plan_broadcast(a->shape, b->shape, op));
  std::vector<double> out(shape_numel(bc->out));
  for_each_broadcast(*bc, [&](std::size_t i, std::size_t ia, std::size_t ib) {
    out[i] = value(a->data[ia], b->data[ib]);
  });
  Shape shape = bc->out;
  return make_result(std::move(shape), std::move(out), {a, b}, [bc, da, db](Node& self) {
    Node& na = *self.inputs[0];
    Node& nb = *self.inputs[1];
    const auto& g = self.grad;
    if (na.requires_grad) {
      auto& ga = na.ensure_grad();
      for_each_broadcast(*bc, [&](std::size_t i, std::size_t ia, std::size_t ib) {
        ga[ia] += g[i] * da(na.data[ia], nb.data[ib], self.data[i]);
      });
    }
    if (nb.requires_grad) {
      auto& gb = nb.ensure_grad();
      for_each_broadcast(*bc, [&](std::size_t i, std::size_t ia, std::size_t ib) {
        gb[ib] += g[i] * db(na.data[ia], nb.data[ib], self.data[i]);
      });
    }
  });
}

// Generic unary op with derivative d(x, y).
template <typename F, typename D>
Tensor unary(const Tensor& tx, const char* op, F value, D deriv) {
  const NodePtr& x = require(tx, op);
  std::vector<double> out(x->data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = value(x->data[i]);
  return make_result(x->shape, std::move(out), {x}, [deriv](Node& self) {
    Node& nx = *self.inputs[0];
    auto& gx = nx.ensure_grad();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * deriv(nx.data[i], self.data[i]);
  });
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Splits a shape into (outer, axis, inner) around `axis`.
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

// C += A(M×K) · B(K×N), all row-major; optional transposes via flags.
void gemm_acc(const double* A, const double* B, double* C, std::size_t M, std::size_t K,
              std::size_t N, bool transA, bool transB) {
  for (std::size_t i = 0; i < M; ++i) {
    double* crow = C + i * N;
    for (std::size_t k = 0; k < K; ++k) {
      const double aik = transA ? A[k * M + i] : A[i * K + k];
      if (aik == 0.0) continue;
      if (transB) {
        for (std::size_t j = 0; j < N; ++j) crow[j] += aik * B[j * K + k];
      } else {
        const double* brow = B + k * N;
        for (std::size_t j = 0; j < N; ++j) crow[j] += aik * brow[j];
      }
    }
  }
}

}  // namespace

// ---- Tensor ------------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(new_leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(new_leaf(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("zero-sized axis in shape " + shape_str(shape));
  }
  return Tensor(new_leaf(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(new_leaf({}, {value}, requires_grad));
}

const Shape& Tensor::shape() const { return require(*this, "shape")->shape; }

std::size_t Tensor::dim(int axis) const {
  const auto& s = shape();
  return s[norm_axis(axis, s.size(), "dim")];
}

std::size_t Tensor::numel() const { return require(*this, "numel")->data.size(); }

std::span<const double> Tensor::data() const { return require(*this, "data")->data; }

std::span<double> Tensor::mutable_data() { return require(*this, "mutable_data")->data; }

double Tensor::item() const {
  const auto& n = require(*this, "item");
  if (n->data.size() != 1) throw ContractError("item() on tensor of shape " + shape_str(n->shape));
  return n->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  const auto& n = require(*this, "at");
  if (index.size() != n->shape.size()) throw ShapeError("at(): index rank mismatch");
  std::size_t flat = 0;
  std::size_t k = 0;
  for (auto i : index) {
    if (i >= n->shape[k]) throw ShapeError("at(): index out of range for " + shape_str(n->shape));
    flat = flat * n->shape[k] + i;
    ++k;
  }
  return n->data[flat];
}

bool Tensor::requires_grad() const { return require(*this, "requires_grad")->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  auto& n = require(*this, "set_requires_grad");
  if (!n->is_leaf()) throw ContractError("set_requires_grad on a non-leaf tensor");
  n->requires_grad = flag;
}

bool Tensor::has_grad() const { return !require(*this, "has_grad")->grad.empty(); }

std::vector<double> Tensor::grad() const {
  const auto& n = require(*this, "grad");
  if (n->grad.empty()) return std::vector<double>(n->data.size(), 0.0);
  return n->grad;
}

void Tensor::zero_grad() { require(*this, "zero_grad")->grad.clear(); }

std::vector<const Node*> topological_order(const Tensor& root) {
  std::vector<const Node*> order;
  if (!root.defined()) return order;
  std::unordered_set<const Node*> seen;
  // Iterative post-order DFS.
  std::vector<std::pair<const Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      const Node* child = node->inputs[next++].get();
      if (child && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

void Tensor::backward() const {
  const auto& root = require(*this, "backward");
  if (root->data.size() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " + shape_str(root->shape));
  }
  if (!root->requires_grad) return;
  auto order = topological_order(*this);
  for (const Node* n : order) {
    if (!n->is_leaf()) const_cast<Node*>(n)->grad.clear();
  }
  root->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = const_cast<Node*>(*it);
    if (n->is_leaf() || !n->backward_fn || n->grad.empty()) continue;
    n->backward_fn(*n);
  }
  // Intermediate buffers are not part of the result.
  for (const Node* n : order) {
    if (!n->is_leaf()) const_cast<Node*>(n)->grad.clear();
  }
}

Tensor Tensor::detach() const {
  const auto& n = require(*this, "detach");
  return Tensor(new_leaf(n->shape, n->data, false));
}

Tensor Tensor::clone_leaf(bool requires_grad) const {
  const auto& n = require(*this, "clone_leaf");
  return Tensor(new_leaf(n->shape, n->data, requires_grad));
}

// ---- elementwise -------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double, double y, double) { return y; }, [](double x, double, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double, double y, double) { return 1.0 / y; },
      [](double x, double y, double) { return -x / (y * y); });
}

Tensor neg(const Tensor& a) {
  return unary(a, "neg", [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(a, "add_scalar", [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double s) {
  return unary(a, "mul_scalar", [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor rsub_scalar(double s, const Tensor& a) {
  return unary(a, "rsub_scalar", [s](double x) { return s - x; }, [](double, double) { return -1.0; });
}

Tensor exp(const Tensor& a) {
  return unary(a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor square(const Tensor& a) {
  return unary(a, "square", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(a, "sigmoid", stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Tensor swish(const Tensor& a) {
  return unary(
      a, "swish", [](double x) { return x * stable_sigmoid(x); },
      [](double x, double) {
        const double s = stable_sigmoid(x);
        return s + x * s * (1.0 - s);
      });
}

// ---- linear algebra ----------------------------------------------------------

Tensor matmul(const Tensor& ta, const Tensor& tb) {
  const NodePtr& a = require(ta, "matmul");
  const NodePtr& b = require(tb, "matmul");
  if (a->shape.size() < 2 || b->shape.size() != 2 || a->shape.back() != b->shape[0]) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a->shape) + " and " +
                     shape_str(b->shape));
  }
  const std::size_t q = b->shape[0], r = b->shape[1];
  const std::size_t M = a->data.size() / q;
  Shape out_shape = a->shape;
  out_shape.back() = r;
  std::vector<double> out(M * r, 0.0);
  gemm_acc(a->data.data(), b->data.data(), out.data(), M, q, r, false, false);
  return make_result(std::move(out_shape), std::move(out), {a, b}, [M, q, r](Node& self) {
    Node& na = *self.inputs[0];
    Node& nb = *self.inputs[1];
    if (na.requires_grad) {
      gemm_acc(self.grad.data(), nb.data.data(), na.ensure_grad().data(), M, r, q, false, true);
    }
    if (nb.requires_grad) {
      gemm_acc(na.data.data(), self.grad.data(), nb.ensure_grad().data(), q, M, r, true, false);
    }
  });
}

Tensor bmm(const Tensor& ta, const Tensor& tb) {
  const NodePtr& a = require(ta, "bmm");
  const NodePtr& b = require(tb, "bmm");
  if (a->shape.size() != 3 || b->shape.size() != 3 || a->shape[0] != b->shape[0] ||
      a->shape[2] != b->shape[1]) {
    throw ShapeError("bmm: incompatible shapes " + shape_str(a->shape) + " and " +
                     shape_str(b->shape));
  }
  const std::size_t B = a->shape[0], p = a->shape[1], q = a->shape[2], r = b->shape[2];
  std::vector<double> out(B * p * r, 0.0);
  for (std::size_t i = 0; i < B; ++i) {
    gemm_acc(a->data.data() + i * p * q, b->data.data() + i * q * r, out.data() + i * p * r, p, q,
             r, false, false);
  }
  return make_result({B, p, r}, std::move(out), {a, b}, [B, p, q, r](Node& self) {
    Node& na = *self.inputs[0];
    Node& nb = *self.inputs[1];
    for (std::size_t i = 0; i < B; ++i) {
      const double* g = self.grad.data() + i * p * r;
      if (na.requires_grad) {
        gemm_acc(g, nb.data.data() + i * q * r, na.ensure_grad().data() + i * p * q, p, r, q, false,
                 true);
      }
      if (nb.requires_grad) {
        gemm_acc(na.data.data() + i * p * q, g, nb.ensure_grad().data() + i * q * r, q, p, r, true,
                 false);
      }
    }
  });
}

// ---- reductions --------------------------------------------------------------

Tensor sum(const Tensor& ta) {
  const NodePtr& a = require(ta, "sum");
  double s = 0.0;
  for (double v : a->data) s += v;
  return make_result({}, {s}, {a}, [](Node& self) {
    Node& na = *self.inputs[0];
    auto& g = na.ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& a) { return mul_scalar(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor sum_axis(const Tensor& ta, int axis, bool keepdim) {
  const NodePtr& a = require(ta, "sum_axis");
  const std::size_t ax = norm_axis(axis, a->shape.size(), "sum_axis");
  const AxisSplit sp = split_axis(a->shape, ax);
  std::vector<double> out(sp.outer * sp.inner, 0.0);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t k = 0; k < sp.len; ++k) {
      const double* src = a->data.data() + (o * sp.len + k) * sp.inner;
      double* dst = out.data() + o * sp.inner;
      for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
    }
  }
  Shape shape = a->shape;
  if (keepdim) {
    shape[ax] = 1;
  } else {
    shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(ax));
  }
  return make_result(std::move(shape), std::move(out), {a}, [sp](Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t k = 0; k < sp.len; ++k) {
        double* dst = g.data() + (o * sp.len + k) * sp.inner;
        const double* src = self.grad.data() + o * sp.inner;
        for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
      }
    }
  });
}

Tensor mean_axis(const Tensor& a, int axis, bool keepdim) {
  const std::size_t ax = norm_axis(axis, a.rank(), "mean_axis");
  return mul_scalar(sum_axis(a, axis, keepdim), 1.0 / static_cast<double>(a.shape()[ax]));
}

// ---- last-axis ops -----------------------------------------------------------

Tensor softmax_last_axis(const Tensor& tx) {
  const NodePtr& x = require(tx, "softmax_last_axis");
  if (x->shape.empty() || x->shape.back() == 0) {
    throw ShapeError("softmax_last_axis: empty last axis in " + shape_str(x->shape));
  }
  const std::size_t n = x->shape.back();
  const std::size_t rows = x->data.size() / n;
  std::vector<double> out(x->data.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x->data.data() + r * n;
    double* y = out.data() + r * n;
    const double mx = *std::max_element(in, in + n);
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) z += (y[i] = std::exp(in[i] - mx));
    for (std::size_t i = 0; i < n; ++i) y[i] /= z;
  }
  return make_result(x->shape, std::move(out), {x}, [n, rows](Node& self) {
    auto& gx = self.inputs[0]->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.data.data() + r * n;
      const double* g = self.grad.data() + r * n;
      double dot = 0.0;
      for (std::size_t i = 0; i < n; ++i) dot += g[i] * y[i];
      for (std::size_t i = 0; i < n; ++i) gx[r * n + i] += y[i] * (g[i] - dot);
    }
  });
}

Tensor layer_norm(const Tensor& tx, double epsilon, const Tensor& scale, const Tensor& shift) {
  const NodePtr& x = require(tx, "layer_norm");
  if (x->shape.empty()) throw ShapeError("layer_norm: scalar input");
  const std::size_t n = x->shape.back();
  const std::size_t rows = x->data.size() / n;
  for (const Tensor* t : {&scale, &shift}) {
    if (t->defined() && t->numel() != n) {
      throw ShapeError("layer_norm: affine parameter " + shape_str(t->shape()) +
                       " does not match last axis of " + shape_str(x->shape));
    }
  }
  auto xhat = std::make_shared<std::vector<double>>(x->data.size());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x->data.data() + r * n;
    double mu = 0.0;
    for (std::size_t i = 0; i < n; ++i) mu += in[i];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (in[i] - mu) * (in[i] - mu);
    var /= static_cast<double>(n);
    const double rs = 1.0 / std::sqrt(var + epsilon);
    (*rstd)[r] = rs;
    for (std::size_t i = 0; i < n; ++i) (*xhat)[r * n + i] = (in[i] - mu) * rs;
  }
  std::vector<double> out(*xhat);
  const bool has_scale = scale.defined();
  const bool has_shift = shift.defined();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t i = 0; i < n; ++i) {
      double& y = out[r * n + i];
      if (has_scale) y *= scale.node()->data[i];
      if (has_shift) y += shift.node()->data[i];
    }
  }
  std::vector<NodePtr> inputs{x};
  inputs.push_back(has_scale ? scale.node() : nullptr);
  inputs.push_back(has_shift ? shift.node() : nullptr);
  return make_result(x->shape, std::move(out), std::move(inputs),
                     [n, rows, xhat, rstd](Node& self) {
                       Node& nx = *self.inputs[0];
                       Node* ns = self.inputs[1].get();
                       Node* nb = self.inputs[2].get();
                       std::vector<double> dxhat(n);
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* g = self.grad.data() + r * n;
                         const double* xh = xhat->data() + r * n;
                         if (ns && ns->requires_grad) {
                           auto& gs = ns->ensure_grad();
                           for (std::size_t i = 0; i < n; ++i) gs[i] += g[i] * xh[i];
                         }
                         if (nb && nb->requires_grad) {
                           auto& gb = nb->ensure_grad();
                           for (std::size_t i = 0; i < n; ++i) gb[i] += g[i];
                         }
                         if (!nx.requires_grad) continue;
                         double m1 = 0.0, m2 = 0.0;
                         for (std::size_t i = 0; i < n; ++i) {
                           dxhat[i] = ns ? g[i] * ns->data[i] : g[i];
                           m1 += dxhat[i];
                           m2 += dxhat[i] * xh[i];
                         }
                         m1 /= static_cast<double>(n);
                         m2 /= static_cast<double>(n);
                         auto& gx = nx.ensure_grad();
                         const double rs = (*rstd)[r];
                         for (std::size_t i = 0; i < n; ++i) {
                           gx[r * n + i] += rs * (dxhat[i] - m1 - xh[i] * m2);
                         }
                       }
                     });
}

Tensor entropy_last_axis(const Tensor& tp) {
  const NodePtr& p = require(tp, "entropy_last_axis");
  if (p->shape.empty()) throw ShapeError("entropy_last_axis: scalar input");
  const std::size_t n = p->shape.back();
  const std::size_t rows = p->data.size() / n;
  std::vector<double> out(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t i = 0; i < n; ++i) {
      const double v = p->data[r * n + i];
      if (v > 0.0) out[r] -= v * std::log(v);
    }
  }
  Shape shape(p->shape.begin(), p->shape.end() - 1);
  return make_result(std::move(shape), std::move(out), {p}, [n, rows](Node& self) {
    Node& np = *self.inputs[0];
    auto& g = np.ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t i = 0; i < n; ++i) {
        const double v = np.data[r * n + i];
        if (v > 0.0) g[r * n + i] -= self.grad[r] * (std::log(v) + 1.0);
      }
    }
  });
}

Tensor stop_gradient(const Tensor& x) { return x.detach(); }

// ---- shape manipulation ------------------------------------------------------

Tensor reshape(const Tensor& ta, Shape shape) {
  const NodePtr& a = require(ta, "reshape");
  if (shape_numel(shape) != a->data.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(a->shape) + " as " + shape_str(shape));
  }
  return make_result(std::move(shape), a->data, {a}, [](Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& ref = parts[0].shape();
  const std::size_t ax = norm_axis(axis, ref.size(), "concat");
  std::vector<NodePtr> inputs;
  std::vector<std::size_t> lens;
  Shape out_shape = ref;
  out_shape[ax] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == ref.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == ax || s[i] == ref[i];
    if (!ok) throw ShapeError("concat: " + shape_str(s) + " incompatible with " + shape_str(ref));
    inputs.push_back(p.node());
    lens.push_back(s[ax]);
    out_shape[ax] += s[ax];
  }
  const AxisSplit sp = split_axis(out_shape, ax);
  std::vector<double> out(shape_numel(out_shape));
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& src = inputs[k]->data;
    const std::size_t chunk = lens[k] * sp.inner;
    for (std::size_t o = 0; o < sp.outer; ++o) {
      std::copy_n(src.data() + o * chunk, chunk, out.data() + o * sp.len * sp.inner + offset);
    }
    offset += chunk;
  }
  return make_result(std::move(out_shape), std::move(out), std::move(inputs),
                     [sp, lens](Node& self) {
                       std::size_t off = 0;
                       for (std::size_t k = 0; k < self.inputs.size(); ++k) {
                         Node& in = *self.inputs[k];
                         const std::size_t chunk = lens[k] * sp.inner;
                         if (in.requires_grad) {
                           auto& g = in.ensure_grad();
                           for (std::size_t o = 0; o < sp.outer; ++o) {
                             const double* src = self.grad.data() + o * sp.len * sp.inner + off;
                             for (std::size_t i = 0; i < chunk; ++i) g[o * chunk + i] += src[i];
                           }
                         }
                         off += chunk;
                       }
                     });
}

Tensor transpose(const Tensor& ta) {
  const NodePtr& a = require(ta, "transpose");
  if (a->shape.size() != 2) throw ShapeError("transpose: expected 2-D, got " + shape_str(a->shape));
  const std::size_t R = a->shape[0], C = a->shape[1];
  std::vector<double> out(R * C);
  for (std::size_t i = 0; i < R; ++i)
    for (std::size_t j = 0; j < C; ++j) out[j * R + i] = a->data[i * C + j];
  return make_result({C, R}, std::move(out), {a}, [R, C](Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < R; ++i)
      for (std::size_t j = 0; j < C; ++j) g[i * C + j] += self.grad[j * R + i];
  });
}

Tensor select_last(const Tensor& ta, std::size_t index) {
  const NodePtr& a = require(ta, "select_last");
  if (a->shape.empty() || index >= a->shape.back()) {
    throw ShapeError("select_last: index " + std::to_string(index) + " out of range for " +
                     shape_str(a->shape));
  }
  const std::size_t n = a->shape.back();
  const std::size_t rows = a->data.size() / n;
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) out[r] = a->data[r * n + index];
  Shape shape(a->shape.begin(), a->shape.end() - 1);
  return make_result(std::move(shape), std::move(out), {a}, [n, rows, index](Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) g[r * n + index] += self.grad[r];
  });
}

Tensor gather_rows(const Tensor& ta, std::span<const std::size_t> rows) {
  const NodePtr& a = require(ta, "gather_rows");
  if (a->shape.size() != 2) throw ShapeError("gather_rows: expected 2-D, got " + shape_str(a->shape));
  const std::size_t R = a->shape[0], C = a->shape[1];
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  std::vector<double> out(idx.size() * C);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] >= R) throw ShapeError("gather_rows: row " + std::to_string(idx[k]) + " out of range");
    std::copy_n(a->data.data() + idx[k] * C, C, out.data() + k * C);
  }
  return make_result({idx.size(), C}, std::move(out), {a}, [idx, C](Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t k = 0; k < idx.size(); ++k)
      for (std::size_t j = 0; j < C; ++j) g[idx[k] * C + j] += self.grad[k * C + j];
  });
}

Tensor pick_per_row(const Tensor& ta, std::span<const std::size_t> cols) {
  const NodePtr& a = require(ta, "pick_per_row");
  if (a->shape.size() != 2 || a->shape[0] != cols.size()) {
    throw ShapeError("pick_per_row: shape " + shape_str(a->shape) + " vs " +
                     std::to_string(cols.size()) + " indices");
  }
  const std::size_t C = a->shape[1];
  std::vector<std::size_t> idx(cols.begin(), cols.end());
  std::vector<double> out(idx.size());
  for (std::size_t b = 0; b < idx.size(); ++b) {
    if (idx[b] >= C) throw ShapeError("pick_per_row: column out of range");
    out[b] = a->data[b * C + idx[b]];
  }
  return make_result({idx.size()}, std::move(out), {a}, [idx, C](Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t b = 0; b < idx.size(); ++b) g[b * C + idx[b]] += self.grad[b];
  });
}

// ---- stacked-parameter primitives --------------------------------------------

Tensor weighted_stack(const Tensor& tw, const std::vector<Tensor>& parts) {
  const NodePtr& w = require(tw, "weighted_stack");
  if (w->shape.size() != 2 || w->shape[1] != parts.size() || parts.empty()) {
    throw ShapeError("weighted_stack: weights " + shape_str(w->shape) + " for " +
                     std::to_string(parts.size()) + " parts");
  }
  const Shape& ps = parts[0].shape();
  for (const auto& p : parts) {
    if (p.shape() != ps) {
      throw ShapeError("weighted_stack: part " + shape_str(p.shape()) + " differs from " +
                       shape_str(ps));
    }
  }
  const std::size_t B = w->shape[0], N = parts.size(), S = shape_numel(ps);
  std::vector<NodePtr> inputs{w};
  for (const auto& p : parts) inputs.push_back(p.node());
  std::vector<double> out(B * S, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    double* dst = out.data() + b * S;
    for (std::size_t i = 0; i < N; ++i) {
      const double wi = w->data[b * N + i];
      const double* src = inputs[i + 1]->data.data();
      for (std::size_t s = 0; s < S; ++s) dst[s] += wi * src[s];
    }
  }
  Shape shape{B};
  shape.insert(shape.end(), ps.begin(), ps.end());
  return make_result(std::move(shape), std::move(out), std::move(inputs), [B, N, S](Node& self) {
    Node& nw = *self.inputs[0];
    for (std::size_t i = 0; i < N; ++i) {
      Node& part = *self.inputs[i + 1];
      const bool need_w = nw.requires_grad;
      if (!need_w && !part.requires_grad) continue;
      for (std::size_t b = 0; b < B; ++b) {
        const double* g = self.grad.data() + b * S;
        if (need_w) {
          double dot = 0.0;
          for (std::size_t s = 0; s < S; ++s) dot += g[s] * part.data[s];
          nw.ensure_grad()[b * N + i] += dot;
        }
        if (part.requires_grad) {
          const double wi = nw.data[b * N + i];
          auto& gp = part.ensure_grad();
          for (std::size_t s = 0; s < S; ++s) gp[s] += wi * g[s];
        }
      }
    }
  });
}

Tensor select_stack(std::span<const std::size_t> index, const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("select_stack: no parts");
  const Shape& ps = parts[0].shape();
  std::vector<NodePtr> inputs;
  for (const auto& p : parts) {
    if (p.shape() != ps) {
      throw ShapeError("select_stack: part " + shape_str(p.shape()) + " differs from " +
                       shape_str(ps));
    }
    inputs.push_back(p.node());
  }
  const std::size_t S = shape_numel(ps);
  std::vector<std::size_t> idx(index.begin(), index.end());
  std::vector<double> out(idx.size() * S);
  for (std::size_t b = 0; b < idx.size(); ++b) {
    if (idx[b] >= parts.size()) throw ShapeError("select_stack: index out of range");
    std::copy_n(inputs[idx[b]]->data.data(), S, out.data() + b * S);
  }
  Shape shape{idx.size()};
  shape.insert(shape.end(), ps.begin(), ps.end());
  return make_result(std::move(shape), std::move(out), std::move(inputs), [idx, S](Node& self) {
    for (std::size_t b = 0; b < idx.size(); ++b) {
      Node& part = *self.inputs[idx[b]];
      if (!part.requires_grad) continue;
      auto& gp = part.ensure_grad();
      const double* g = self.grad.data() + b * S;
      for (std::size_t s = 0; s < S; ++s) gp[s] += g[s];
    }
  });
}

// ---- losses ------------------------------------------------------------------

Tensor huber(const Tensor& prediction, const Tensor& target, double delta) {
  if (prediction.shape() != target.shape()) {
    throw ShapeError("huber: " + shape_str(prediction.shape()) + " vs " + shape_str(target.shape()));
  }
  auto value = [delta](double p, double t) {
    const double e = std::abs(p - t);
    return e <= delta ? 0.5 * e * e : delta * (e - 0.5 * delta);
  };
  auto dp = [delta](double p, double t, double) {
    const double e = p - t;
    return std::abs(e) <= delta ? e : (e > 0 ? delta : -delta);
  };
  auto dt = [dp](double p, double t, double y) { return -dp(p, t, y); };
  return binary(prediction, target, "huber", value, dp, dt);
}

Tensor cross_entropy(const Tensor& tl, std::span<const std::size_t> labels) {
  const NodePtr& l = require(tl, "cross_entropy");
  if (l->shape.size() != 2 || l->shape[0] != labels.size()) {
    throw ShapeError("cross_entropy: logits " + shape_str(l->shape) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t B = l->shape[0], C = l->shape[1];
  std::vector<std::size_t> y(labels.begin(), labels.end());
  auto probs = std::make_shared<std::vector<double>>(B * C);
  std::vector<double> out(B);
  for (std::size_t b = 0; b < B; ++b) {
    if (y[b] >= C) throw ShapeError("cross_entropy: label out of range");
    const double* row = l->data.data() + b * C;
    const double mx = *std::max_element(row, row + C);
    double z = 0.0;
    for (std::size_t c = 0; c < C; ++c) z += ((*probs)[b * C + c] = std::exp(row[c] - mx));
    for (std::size_t c = 0; c < C; ++c) (*probs)[b * C + c] /= z;
    out[b] = mx + std::log(z) - row[y[b]];
  }
  return make_result({B}, std::move(out), {l}, [probs, y, C](Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t b = 0; b < y.size(); ++b) {
      for (std::size_t c = 0; c < C; ++c) {
        g[b * C + c] += self.grad[b] * ((*probs)[b * C + c] - (c == y[b] ? 1.0 : 0.0));
      }
    }
  });
}

Tensor smooth_step(const Tensor& x, double gamma) {
  if (!(gamma > 0.0)) throw std::invalid_argument("smooth_step: gamma must be positive");
  const double half = gamma / 2.0;
  const double c3 = -2.0 / (gamma * gamma * gamma);
  const double c1 = 3.0 / (2.0 * gamma);
  return unary(
      x, "smooth_step",
      [=](double t) {
        if (t <= -half) return 0.0;
        if (t >= half) return 1.0;
        return c3 * t * t * t + c1 * t + 0.5;
      },
      [=](double t, double) {
        if (t <= -half || t >= half) return 0.0;
        return 3.0 * c3 * t * t + c1;
      });
}

// ---- gradient checking -------------------------------------------------------

namespace {

void check_finite(double v, const char* where) {
  if (!std::isfinite(v)) {
    throw std::domain_error(std::string("grad_check: non-finite function value at ") + where);
  }
}

double rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric));
}

}  // namespace

GradCheckResult grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                           double step) {
  GradCheckResult res;
  Tensor leaf = x.clone_leaf(true);
  Tensor y = f(leaf);
  check_finite(y.item(), "x");
  y.backward();
  res.analytic = leaf.grad();
  res.numeric.resize(leaf.numel());
  Tensor probe = x.clone_leaf(false);
  auto buf = probe.mutable_data();
  for (std::size_t i = 0; i < buf.size(); ++i) {
    const double orig = buf[i];
    buf[i] = orig + step;
    const double fp = f(probe).item();
    buf[i] = orig - step;
    const double fm = f(probe).item();
    buf[i] = orig;
    check_finite(fp, "x + h");
    check_finite(fm, "x - h");
    res.numeric[i] = (fp - fm) / (2.0 * step);
    const double e = rel_error(res.analytic[i], res.numeric[i]);
    if (e > res.max_rel_error) {
      res.max_rel_error = e;
      res.worst_index = i;
    }
  }
  return res;
}

GradCheckResult grad_check_params(const std::function<Tensor()>& f, std::vector<Tensor> params,
                                  double step) {
  GradCheckResult res;
  for (auto& p : params) p.zero_grad();
  Tensor y = f();
  check_finite(y.item(), "base point");
  y.backward();
  for (auto& p : params) {
    auto g = p.grad();
    res.analytic.insert(res.analytic.end(), g.begin(), g.end());
  }
  std::size_t flat = 0;
  for (auto& p : params) {
    auto buf = p.mutable_data();
    for (std::size_t i = 0; i < buf.size(); ++i, ++flat) {
      const double orig = buf[i];
      buf[i] = orig + step;
      const double fp = f().item();
      buf[i] = orig - step;
      const double fm = f().item();
      buf[i] = orig;
      check_finite(fp, "x + h");
      check_finite(fm, "x - h");
      const double num = (fp - fm) / (2.0 * step);
      res.numeric.push_back(num);
      const double e = rel_error(res.analytic[flat], num);
      if (e > res.max_rel_error) {
        res.max_rel_error = e;
        res.worst_index = flat;
      }
    }
  }
  return res;
}

}  // namespace smear
