#include "paml/tensor.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <Eigen/Core>

namespace paml {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

thread_local Tape* g_active_tape = nullptr;

NodePtr make_node(Shape shape, std::vector<double> value, const char* op) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  return n;
}

// Wraps a computed value. The node joins the active tape only if some parent
// requires grad; otherwise the result is a constant.
Tensor finish(Shape shape, std::vector<double> value, const char* op,
              std::vector<NodePtr> parents, std::function<void(Node&)> backward) {
  auto n = make_node(std::move(shape), std::move(value), op);
  Tape* tape = g_active_tape;
  const bool needs = tape != nullptr &&
                     std::any_of(parents.begin(), parents.end(),
                                 [](const NodePtr& p) { return p->requires_grad; });
  if (needs) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward = std::move(backward);
    tape->record(n);
  }
  return Tensor(std::move(n));
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw std::invalid_argument(std::string(op) + ": undefined tensor");
}

void require_rank2(const Tensor& t, const char* op) {
  require_defined(t, op);
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected rank-2 tensor, got " +
                         shape_str(t.shape()));
  }
}

Shape broadcast_shape(const Tensor& a, const Tensor& b, const char* op) {
  require_defined(a, op);
  require_defined(b, op);
  if (a.shape() == b.shape()) return a.shape();
  if (b.numel() == 1) return a.shape();
  if (a.numel() == 1) return b.shape();
  throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
}

template <class F, class DA, class DB>
Tensor binary(const Tensor& a, const Tensor& b, const char* op, F f, DA da, DB db) {
  Shape shape = broadcast_shape(a, b, op);
  const std::size_t n = shape_numel(shape);
  const bool a_scalar = a.numel() == 1 && n != 1;
  const bool b_scalar = b.numel() == 1 && n != 1;
  const auto av = a.data();
  const auto bv = b.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = f(av[a_scalar ? 0 : i], bv[b_scalar ? 0 : i]);
  return finish(std::move(shape), std::move(out), op, {a.node(), b.node()},
                [a_scalar, b_scalar, da, db](Node& self) {
                  const Node& pa = *self.parents[0];
                  const Node& pb = *self.parents[1];
                  const std::size_t count = self.value.size();
                  if (pa.requires_grad) {
                    auto ga = self.parents[0]->ensure_grad();
                    for (std::size_t i = 0; i < count; ++i) {
                      const double x = pa.value[a_scalar ? 0 : i];
                      const double y = pb.value[b_scalar ? 0 : i];
                      ga[a_scalar ? 0 : i] += self.grad[i] * da(x, y);
                    }
                  }
                  if (pb.requires_grad) {
                    auto gb = self.parents[1]->ensure_grad();
                    for (std::size_t i = 0; i < count; ++i) {
                      const double x = pa.value[a_scalar ? 0 : i];
                      const double y = pb.value[b_scalar ? 0 : i];
                      gb[b_scalar ? 0 : i] += self.grad[i] * db(x, y);
                    }
                  }
                });
}

// `d(x, y)` is the derivative of the op at input x with output y.
template <class F, class D>
Tensor unary(const Tensor& x, const char* op, F f, D d) {
  require_defined(x, op);
  const auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return finish(x.shape(), std::move(out), op, {x.node()}, [d](Node& self) {
    const Node& px = *self.parents[0];
    auto gx = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < self.value.size(); ++i) {
      gx[i] += self.grad[i] * d(px.value[i], self.value[i]);
    }
  });
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

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

std::span<double> Node::ensure_grad() {
  if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  return grad;
}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  const std::size_t n = shape_numel(shape);
  return constant(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::constant(Shape shape, std::vector<double> values) {
  for (std::size_t e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive: " + shape_str(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("tensor shape " + shape_str(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
  }
  return Tensor(make_node(std::move(shape), std::move(values), "leaf"));
}

Tensor Tensor::scalar(double value) { return constant({1}, {value}); }

Tensor Tensor::parameter(Shape shape, std::vector<double> values) {
  Tensor t = constant(std::move(shape), std::move(values));
  t.node_->requires_grad = true;
  return t;
}

const Shape& Tensor::shape() const {
  if (!node_) throw std::logic_error("shape() of undefined tensor");
  return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return node_ ? node_->value.size() : 0; }

std::size_t Tensor::rows() const { return rank() == 1 ? 1 : dim(0); }

std::size_t Tensor::cols() const { return rank() == 1 ? dim(0) : dim(rank() - 1); }

std::span<const double> Tensor::data() const {
  if (!node_) throw std::logic_error("data() of undefined tensor");
  return node_->value;
}

std::span<double> Tensor::mutable_data() {
  if (!node_) throw std::logic_error("mutable_data() of undefined tensor");
  if (!node_->parents.empty()) throw std::logic_error("mutable_data() on a non-leaf tensor");
  return node_->value;
}

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  if (rank() != 2) throw DimensionError("at(r, c) needs rank 2, got " + shape_str(shape()));
  return node_->value[r * dim(1) + c];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool on) {
  if (!is_leaf()) throw std::logic_error("set_requires_grad() on a non-leaf tensor");
  node_->requires_grad = on;
}

bool Tensor::is_leaf() const { return node_ && node_->parents.empty(); }

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!node_) throw std::logic_error("grad() of undefined tensor");
  return node_->grad;
}

std::span<double> Tensor::mutable_grad() {
  if (!node_) throw std::logic_error("mutable_grad() of undefined tensor");
  return node_->ensure_grad();
}

void Tensor::zero_grad() {
  if (node_) node_->grad.clear();
}

// ---------------------------------------------------------------------------
// Tape

void Tape::record(std::shared_ptr<Node> node) {
  if (consumed_) throw std::logic_error("recording onto a consumed tape; call reset() first");
  nodes_.push_back(std::move(node));
}

void Tape::backward(const Tensor& root) {
  if (consumed_) {
    throw std::logic_error("backward() called twice on one tape; call reset() first");
  }
  if (!root.defined()) throw std::invalid_argument("backward(): undefined root");
  if (root.numel() != 1) {
    throw DimensionError("backward() needs a scalar root, got " + shape_str(root.shape()));
  }
  const auto it = std::find(nodes_.rbegin(), nodes_.rend(), root.node());
  if (it == nodes_.rend()) throw std::logic_error("backward(): root was not recorded on this tape");

  for (auto& n : nodes_) n->grad.assign(n->value.size(), 0.0);
  root.node()->grad[0] = 1.0;
  for (auto node = it; node != nodes_.rend(); ++node) {
    if ((*node)->backward) (*node)->backward(**node);
  }
  consumed_ = true;
}

void Tape::reset() {
  nodes_.clear();
  consumed_ = false;
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

Tape* active_tape() { return g_active_tape; }

NoGradScope::NoGradScope() : previous_(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = previous_; }

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "hadamard", [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; }, [](double x, double y) { return -x / (y * y); });
}

// Ties route the gradient to the first operand.
Tensor minimum(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "minimum", [](double x, double y) { return std::min(x, y); },
      [](double x, double y) { return x <= y ? 1.0 : 0.0; },
      [](double x, double y) { return x <= y ? 0.0 : 1.0; });
}

Tensor maximum(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "maximum", [](double x, double y) { return std::max(x, y); },
      [](double x, double y) { return x >= y ? 1.0 : 0.0; },
      [](double x, double y) { return x >= y ? 0.0 : 1.0; });
}

Tensor scale(const Tensor& x, double factor) {
  return unary(
      x, "scale", [factor](double v) { return v * factor; },
      [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double offset) {
  return unary(
      x, "add_scalar", [offset](double v) { return v + offset; },
      [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor exp(const Tensor& x) {
  return unary(
      x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(
      x, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor sqrt(const Tensor& x) {
  return unary(
      x, "sqrt", [](double v) { return std::sqrt(v); },
      [](double, double y) { return 0.5 / y; });
}

Tensor square(const Tensor& x) {
  return unary(
      x, "square", [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor abs(const Tensor& x) {
  return unary(
      x, "abs", [](double v) { return std::abs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x, "sigmoid",
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor softplus(const Tensor& x) {
  return unary(
      x, "softplus",
      [](double v) { return v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); },
      [](double v, double) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      });
}

Tensor relu(const Tensor& x) {
  return unary(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor clamp_min(const Tensor& x, double lo) {
  return unary(
      x, "clamp_min", [lo](double v) { return std::max(v, lo); },
      [lo](double v, double) { return v > lo ? 1.0 : 0.0; });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  if (!(lo <= hi)) throw std::invalid_argument("clamp: lo > hi");
  return unary(
      x, "clamp", [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v, double) { return (v > lo && v < hi) ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Structural

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner extents differ: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  std::vector<double> out(m * n);
  MutMap(out.data(), m, n).noalias() =
      ConstMap(a.data().data(), m, k) * ConstMap(b.data().data(), k, n);
  return finish({m, n}, std::move(out), "matmul", {a.node(), b.node()}, [m, k, n](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    const ConstMap g(self.grad.data(), m, n);
    if (pa.requires_grad) {
      MutMap(pa.ensure_grad().data(), m, k).noalias() +=
          g * ConstMap(pb.value.data(), k, n).transpose();
    }
    if (pb.requires_grad) {
      MutMap(pb.ensure_grad().data(), k, n).noalias() +=
          ConstMap(pa.value.data(), m, k).transpose() * g;
    }
  });
}

Tensor transpose(const Tensor& x) {
  require_rank2(x, "transpose");
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<double> out(m * n);
  MutMap(out.data(), n, m) = ConstMap(x.data().data(), m, n).transpose();
  return finish({n, m}, std::move(out), "transpose", {x.node()}, [m, n](Node& self) {
    MutMap(self.parents[0]->ensure_grad().data(), m, n) +=
        ConstMap(self.grad.data(), n, m).transpose();
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  require_defined(x, "reshape");
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " cannot become " +
                         shape_str(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return finish(std::move(shape), std::move(out), "reshape", {x.node()}, [](Node& self) {
    auto g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  if (axis > 1) throw DimensionError("concat: axis must be 0 or 1 for rank-2 tensors");
  for (const Tensor& p : parts) require_rank2(p, "concat");
  const std::size_t other = axis == 0 ? 1 : 0;
  const std::size_t fixed = parts[0].dim(other);
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    if (p.dim(other) != fixed) {
      throw DimensionError("concat: mismatched extents " + shape_str(parts[0].shape()) + " vs " +
                           shape_str(p.shape()));
    }
    total += p.dim(axis);
  }
  const Shape shape = axis == 0 ? Shape{total, fixed} : Shape{fixed, total};
  std::vector<double> out(total * fixed);
  std::vector<std::size_t> offsets;
  std::vector<NodePtr> parents;
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    const std::size_t pr = p.dim(0), pc = p.dim(1);
    const auto v = p.data();
    for (std::size_t r = 0; r < pr; ++r) {
      for (std::size_t c = 0; c < pc; ++c) {
        const std::size_t orow = axis == 0 ? offset + r : r;
        const std::size_t ocol = axis == 0 ? c : offset + c;
        out[orow * shape[1] + ocol] = v[r * pc + c];
      }
    }
    offsets.push_back(offset);
    parents.push_back(p.node());
    offset += p.dim(axis);
  }
  const std::size_t out_cols = shape[1];
  return finish(shape, std::move(out), "concat", std::move(parents),
                [axis, offsets, out_cols](Node& self) {
                  for (std::size_t i = 0; i < self.parents.size(); ++i) {
                    Node& p = *self.parents[i];
                    if (!p.requires_grad) continue;
                    auto g = p.ensure_grad();
                    const std::size_t pr = p.shape[0], pc = p.shape[1];
                    for (std::size_t r = 0; r < pr; ++r) {
                      for (std::size_t c = 0; c < pc; ++c) {
                        const std::size_t orow = axis == 0 ? offsets[i] + r : r;
                        const std::size_t ocol = axis == 0 ? c : offsets[i] + c;
                        g[r * pc + c] += self.grad[orow * out_cols + ocol];
                      }
                    }
                  }
                });
}

Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis) {
  return concat(std::span<const Tensor>(parts.begin(), parts.size()), axis);
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  require_rank2(x, "slice");
  if (axis > 1) throw DimensionError("slice: axis must be 0 or 1");
  if (length == 0 || start + length > x.dim(axis)) {
    throw DimensionError("slice: range [" + std::to_string(start) + ", " +
                         std::to_string(start + length) + ") outside axis " +
                         std::to_string(axis) + " of " + shape_str(x.shape()));
  }
  const std::size_t m = x.dim(0), n = x.dim(1);
  const std::size_t rows = axis == 0 ? length : m;
  const std::size_t cols = axis == 0 ? n : length;
  const std::size_t r0 = axis == 0 ? start : 0;
  const std::size_t c0 = axis == 0 ? 0 : start;
  std::vector<double> out(rows * cols);
  const auto v = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(v.begin() + static_cast<std::ptrdiff_t>((r0 + r) * n + c0), cols,
                out.begin() + static_cast<std::ptrdiff_t>(r * cols));
  }
  return finish({rows, cols}, std::move(out), "slice", {x.node()},
                [rows, cols, r0, c0, n](Node& self) {
                  auto g = self.parents[0]->ensure_grad();
                  for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t c = 0; c < cols; ++c) {
                      g[(r0 + r) * n + c0 + c] += self.grad[r * cols + c];
                    }
                  }
                });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& x) {
  require_defined(x, "sum");
  const auto v = x.data();
  const double total = std::accumulate(v.begin(), v.end(), 0.0);
  return finish({1}, {total}, "sum", {x.node()}, [](Node& self) {
    auto g = self.parents[0]->ensure_grad();
    for (double& gi : g) gi += self.grad[0];
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor sum(const Tensor& x, std::size_t axis) {
  require_rank2(x, "sum(axis)");
  if (axis > 1) throw DimensionError("sum: axis must be 0 or 1");
  const std::size_t m = x.dim(0), n = x.dim(1);
  const auto v = x.data();
  const Shape shape = axis == 0 ? Shape{1, n} : Shape{m, 1};
  std::vector<double> out(shape_numel(shape), 0.0);
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < n; ++c) out[axis == 0 ? c : r] += v[r * n + c];
  }
  return finish(shape, std::move(out), "sum_axis", {x.node()}, [axis, m, n](Node& self) {
    auto g = self.parents[0]->ensure_grad();
    for (std::size_t r = 0; r < m; ++r) {
      for (std::size_t c = 0; c < n; ++c) g[r * n + c] += self.grad[axis == 0 ? c : r];
    }
  });
}

Tensor mean(const Tensor& x, std::size_t axis) {
  return scale(sum(x, axis), 1.0 / static_cast<double>(x.dim(axis)));
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  require_defined(x, "softmax");
  std::size_t m = 0, n = 0;
  bool along_rows = true;  // normalize each row (contiguous slices)
  if (x.rank() == 1 && axis == 0) {
    m = 1;
    n = x.dim(0);
  } else if (x.rank() == 2 && axis <= 1) {
    m = x.dim(0);
    n = x.dim(1);
    along_rows = axis == 1;
  } else {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for " +
                         shape_str(x.shape()));
  }
  const auto v = x.data();
  std::vector<double> out(v.size());
  const std::size_t slices = along_rows ? m : n;
  const std::size_t len = along_rows ? n : m;
  const std::size_t step = along_rows ? 1 : n;
  auto index = [=](std::size_t s, std::size_t i) {
    return along_rows ? s * n + i * step : s + i * step;
  };
  for (std::size_t s = 0; s < slices; ++s) {
    double mx = v[index(s, 0)];
    for (std::size_t i = 1; i < len; ++i) mx = std::max(mx, v[index(s, i)]);
    double z = 0.0;
    for (std::size_t i = 0; i < len; ++i) {
      const double e = std::exp(v[index(s, i)] - mx);
      out[index(s, i)] = e;
      z += e;
    }
    for (std::size_t i = 0; i < len; ++i) out[index(s, i)] /= z;
  }
  return finish(x.shape(), std::move(out), "softmax", {x.node()}, [=](Node& self) {
    auto g = self.parents[0]->ensure_grad();
    for (std::size_t s = 0; s < slices; ++s) {
      double dot = 0.0;
      for (std::size_t i = 0; i < len; ++i) dot += self.grad[index(s, i)] * self.value[index(s, i)];
      for (std::size_t i = 0; i < len; ++i) {
        const std::size_t j = index(s, i);
        g[j] += self.value[j] * (self.grad[j] - dot);
      }
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_defined(x, "layer_norm");
  if (!(eps > 0.0)) throw std::invalid_argument("layer_norm: eps must be positive");
  const std::size_t n = x.shape().back();
  const std::size_t m = x.numel() / n;
  if (gain.numel() != n || bias.numel() != n) {
    throw DimensionError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" +
                         shape_str(bias.shape()) + " do not match last axis of " +
                         shape_str(x.shape()));
  }
  const auto v = x.data();
  const auto gv = gain.data();
  const auto bv = bias.data();
  std::vector<double> out(v.size());
  std::vector<double> xhat(v.size());
  std::vector<double> inv_std(m);
  for (std::size_t r = 0; r < m; ++r) {
    const double* row = v.data() + r * n;
    double mu = 0.0;
    for (std::size_t c = 0; c < n; ++c) mu += row[c];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t c = 0; c < n; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[r] = inv;
    for (std::size_t c = 0; c < n; ++c) {
      const double h = (row[c] - mu) * inv;
      xhat[r * n + c] = h;
      out[r * n + c] = h * gv[c] + bv[c];
    }
  }
  return finish(x.shape(), std::move(out), "layer_norm", {x.node(), gain.node(), bias.node()},
                [m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                  Node& px = *self.parents[0];
                  Node& pg = *self.parents[1];
                  Node& pb = *self.parents[2];
                  if (pg.requires_grad) {
                    auto gg = pg.ensure_grad();
                    for (std::size_t i = 0; i < m * n; ++i) gg[i % n] += self.grad[i] * xhat[i];
                  }
                  if (pb.requires_grad) {
                    auto gb = pb.ensure_grad();
                    for (std::size_t i = 0; i < m * n; ++i) gb[i % n] += self.grad[i];
                  }
                  if (px.requires_grad) {
                    auto gx = px.ensure_grad();
                    for (std::size_t r = 0; r < m; ++r) {
                      double mean_d = 0.0, mean_dx = 0.0;
                      for (std::size_t c = 0; c < n; ++c) {
                        const double d = self.grad[r * n + c] * pg.value[c];
                        mean_d += d;
                        mean_dx += d * xhat[r * n + c];
                      }
                      mean_d /= static_cast<double>(n);
                      mean_dx /= static_cast<double>(n);
                      for (std::size_t c = 0; c < n; ++c) {
                        const double d = self.grad[r * n + c] * pg.value[c];
                        gx[r * n + c] += inv_std[r] * (d - mean_d - xhat[r * n + c] * mean_dx);
                      }
                    }
                  }
                });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank2(x, "linear");
  require_rank2(weight, "linear");
  const std::size_t m = x.dim(0), in = x.dim(1), out_dim = weight.dim(1);
  if (weight.dim(0) != in) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " vs weight " +
                         shape_str(weight.shape()));
  }
  const bool has_bias = bias.defined();
  if (has_bias && bias.numel() != out_dim) {
    throw DimensionError("linear: bias " + shape_str(bias.shape()) + " vs weight " +
                         shape_str(weight.shape()));
  }
  std::vector<double> out(m * out_dim);
  MutMap y(out.data(), m, out_dim);
  y.noalias() = ConstMap(x.data().data(), m, in) * ConstMap(weight.data().data(), in, out_dim);
  if (has_bias) {
    const auto bv = bias.data();
    for (std::size_t r = 0; r < m; ++r) {
      for (std::size_t c = 0; c < out_dim; ++c) out[r * out_dim + c] += bv[c];
    }
  }
  std::vector<NodePtr> parents{x.node(), weight.node()};
  if (has_bias) parents.push_back(bias.node());
  return finish({m, out_dim}, std::move(out), "linear", std::move(parents),
                [m, in, out_dim](Node& self) {
                  Node& px = *self.parents[0];
                  Node& pw = *self.parents[1];
                  const ConstMap g(self.grad.data(), m, out_dim);
                  if (px.requires_grad) {
                    MutMap(px.ensure_grad().data(), m, in).noalias() +=
                        g * ConstMap(pw.value.data(), in, out_dim).transpose();
                  }
                  if (pw.requires_grad) {
                    MutMap(pw.ensure_grad().data(), in, out_dim).noalias() +=
                        ConstMap(px.value.data(), m, in).transpose() * g;
                  }
                  if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
                    auto gb = self.parents[2]->ensure_grad();
                    for (std::size_t r = 0; r < m; ++r) {
                      for (std::size_t c = 0; c < out_dim; ++c) gb[c] += self.grad[r * out_dim + c];
                    }
                  }
                });
}

Tensor mul_rows(const Tensor& x, const Tensor& g) {
  require_rank2(x, "mul_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (g.numel() != m || (g.rank() == 2 && g.dim(1) != 1)) {
    throw DimensionError("mul_rows: gate " + shape_str(g.shape()) + " vs input " +
                         shape_str(x.shape()));
  }
  const auto xv = x.data();
  const auto gv = g.data();
  std::vector<double> out(m * n);
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = xv[r * n + c] * gv[r];
  }
  return finish({m, n}, std::move(out), "mul_rows", {x.node(), g.node()}, [m, n](Node& self) {
    Node& px = *self.parents[0];
    Node& pg = *self.parents[1];
    if (px.requires_grad) {
      auto gx = px.ensure_grad();
      for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t c = 0; c < n; ++c) gx[r * n + c] += self.grad[r * n + c] * pg.value[r];
      }
    }
    if (pg.requires_grad) {
      auto gg = pg.ensure_grad();
      for (std::size_t r = 0; r < m; ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < n; ++c) acc += self.grad[r * n + c] * px.value[r * n + c];
        gg[r] += acc;
      }
    }
  });
}

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids) {
  require_rank2(table, "gather_rows");
  const std::size_t v_rows = table.dim(0), d = table.dim(1);
  if (ids.empty()) throw DimensionError("gather_rows: empty index");
  for (std::size_t id : ids) {
    if (id >= v_rows) {
      throw DimensionError("gather_rows: index " + std::to_string(id) + " outside table " +
                           shape_str(table.shape()));
    }
  }
  const auto tv = table.data();
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  std::vector<std::size_t> idx(ids.begin(), ids.end());
  return finish({ids.size(), d}, std::move(out), "gather_rows", {table.node()},
                [idx = std::move(idx), d](Node& self) {
                  auto g = self.parents[0]->ensure_grad();
                  for (std::size_t i = 0; i < idx.size(); ++i) {
                    for (std::size_t c = 0; c < d; ++c) g[idx[i] * d + c] += self.grad[i * d + c];
                  }
                });
}

Tensor gather_cols(const Tensor& x, std::span<const std::size_t> index, std::size_t n) {
  require_rank2(x, "gather_cols");
  const std::size_t m = x.dim(0), r = x.dim(1);
  if (n == 0 || index.size() != m * n) {
    throw DimensionError("gather_cols: index of size " + std::to_string(index.size()) +
                         " does not match " + std::to_string(m) + "x" + std::to_string(n));
  }
  for (std::size_t j : index) {
    if (j >= r) {
      throw DimensionError("gather_cols: index " + std::to_string(j) + " outside " +
                           shape_str(x.shape()));
    }
  }
  const auto xv = x.data();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = xv[i * r + index[i * n + j]];
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return finish({m, n}, std::move(out), "gather_cols", {x.node()},
                [idx = std::move(idx), m, n, r](Node& self) {
                  auto g = self.parents[0]->ensure_grad();
                  for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t j = 0; j < n; ++j) g[i * r + idx[i * n + j]] += self.grad[i * n + j];
                  }
                });
}

Tensor scatter_cols(const Tensor& x, std::span<const std::size_t> index, std::size_t width) {
  require_rank2(x, "scatter_cols");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (index.size() != m * n) {
    throw DimensionError("scatter_cols: index of size " + std::to_string(index.size()) +
                         " does not match " + shape_str(x.shape()));
  }
  for (std::size_t j : index) {
    if (j >= width) {
      throw DimensionError("scatter_cols: index " + std::to_string(j) + " outside width " +
                           std::to_string(width));
    }
  }
  const auto xv = x.data();
  std::vector<double> out(m * width, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * width + index[i * n + j]] += xv[i * n + j];
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return finish({m, width}, std::move(out), "scatter_cols", {x.node()},
                [idx = std::move(idx), m, n, width](Node& self) {
                  auto g = self.parents[0]->ensure_grad();
                  for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[i * width + idx[i * n + j]];
                  }
                });
}

Tensor stop_gradient(const Tensor& x) {
  require_defined(x, "stop_gradient");
  std::vector<double> out(x.data().begin(), x.data().end());
  return Tensor(make_node(x.shape(), std::move(out), "stop_gradient"));
}

Tensor straight_through(const Tensor& x, const Tensor& quantized) {
  require_defined(x, "straight_through");
  require_defined(quantized, "straight_through");
  if (x.shape() != quantized.shape()) {
    throw DimensionError("straight_through: " + shape_str(x.shape()) + " vs " +
                         shape_str(quantized.shape()));
  }
  std::vector<double> out(quantized.data().begin(), quantized.data().end());
  return finish(x.shape(), std::move(out), "straight_through", {x.node()}, [](Node& self) {
    auto g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Finite differences

double finite_diff_check(const std::function<Tensor()>& f, std::span<Tensor> inputs,
                         const FiniteDiffOptions& options) {
  for (Tensor& t : inputs) {
    if (!t.is_leaf() || !t.requires_grad()) {
      throw std::invalid_argument("finite_diff_check: inputs must be leaves requiring grad");
    }
    t.zero_grad();
  }
  Tape tape;
  Tensor y;
  {
    TapeScope scope(tape);
    y = f();
  }
  if (y.numel() != 1) {
    throw DimensionError("finite_diff_check: f must be scalar, got " + shape_str(y.shape()));
  }
  if (!std::isfinite(y.item())) throw NumericError("finite_diff_check: f is not finite");
  if (y.requires_grad()) tape.backward(y);

  auto evaluate = [&f] {
    NoGradScope no_grad;
    const double v = f().item();
    if (!std::isfinite(v)) throw NumericError("finite_diff_check: f is not finite");
    return v;
  };

  double worst = 0.0;
  for (Tensor& t : inputs) {
    const std::vector<double> analytic =
        t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                     : std::vector<double>(t.numel(), 0.0);
    auto values = t.mutable_data();
    std::size_t stride = 1;
    if (options.max_coords_per_tensor > 0 && values.size() > options.max_coords_per_tensor) {
      stride = (values.size() + options.max_coords_per_tensor - 1) / options.max_coords_per_tensor;
    }
    for (std::size_t i = 0; i < values.size(); i += stride) {
      const double original = values[i];
      const double h = options.step * std::max(1.0, std::abs(original));
      values[i] = original + h;
      const double plus = evaluate();
      values[i] = original - h;
      const double minus = evaluate();
      values[i] = original;
      const double numeric = (plus - minus) / (2.0 * h);
      if (!std::isfinite(analytic[i])) throw NumericError("finite_diff_check: non-finite gradient");
      const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double step) {
  std::array<Tensor, 1> inputs{x};
  FiniteDiffOptions options;
  options.step = step;
  return finite_diff_check([&] { return f(inputs[0]); }, inputs, options);
}

}  // namespace paml
