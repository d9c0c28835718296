#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "paml/errors.hpp"

namespace paml {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this->grad and accumulates into parents that require grad.
  std::function<void(Node&)> backward;

  std::span<double> ensure_grad();
};

}  // namespace detail

/// Dense row-major array of doubles with an optional autodiff node.
///
/// Copies share the underlying node. Values of non-leaf tensors are fixed once
/// the producing op returns; leaves (parameters) may be updated in place by an
/// optimizer between tapes.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor constant(Shape shape, std::vector<double> values);
  static Tensor scalar(double value);
  /// Leaf that requires grad.
  static Tensor parameter(Shape shape, std::vector<double> values);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const;
  /// Mutable access; only valid for leaves.
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t r, std::size_t c) const;
  double operator[](std::size_t i) const { return data()[i]; }

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool is_leaf() const;

  bool has_grad() const;
  /// Gradient buffer; empty span when no gradient has been accumulated.
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Ordered record of differentiable ops for one forward pass.
///
/// Nodes are appended as ops execute, so parents always precede children.
/// A tape may be consumed by backward() once; reset() clears it for reuse.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::shared_ptr<detail::Node> node);
  /// Reverse sweep from a scalar root. Leaf gradients accumulate.
  void backward(const Tensor& root);
  void reset();

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }
  const std::vector<std::shared_ptr<detail::Node>>& nodes() const { return nodes_; }

 private:
  std::vector<std::shared_ptr<detail::Node>> nodes_;
  bool consumed_ = false;
};

/// Makes `tape` the active tape of the calling thread for its lifetime.
/// Ops executed with no active tape produce constants (no-grad mode).
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

/// Suspends recording on the calling thread for its lifetime.
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

// Elementwise. Operands share a shape, or one side has a single element.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor minimum(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double offset);
Tensor neg(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor square(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor clamp_min(const Tensor& x, double lo);
Tensor clamp(const Tensor& x, double lo, double hi);

// Structural.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);

// Reductions. Axis variants keep the reduced axis with extent 1 (rank 2).
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum(const Tensor& x, std::size_t axis);
Tensor mean(const Tensor& x, std::size_t axis);

Tensor softmax(const Tensor& x, std::size_t axis);
/// Normalizes each last-axis slice; gain and bias have the last extent.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);
/// x[m×in]·W[in×out] + b[out]; b may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);
/// Scales row r of x[m×n] by g[m×1].
Tensor mul_rows(const Tensor& x, const Tensor& g);

/// out[i] = table[ids[i]] for table [V×d].
Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids);
/// out[i,j] = x[i, index[i*n + j]] for x [m×r], index laid out [m×n].
Tensor gather_cols(const Tensor& x, std::span<const std::size_t> index, std::size_t n);
/// Inverse of gather_cols onto a zero [m×width] matrix.
Tensor scatter_cols(const Tensor& x, std::span<const std::size_t> index, std::size_t width);

/// Forward identity; contributes nothing to ancestors in backward.
Tensor stop_gradient(const Tensor& x);
/// Forward value of `quantized`, gradient passed unchanged to `x` only.
/// Equivalent to stop_gradient(quantized - x) + x without the rounding.
Tensor straight_through(const Tensor& x, const Tensor& quantized);

struct FiniteDiffOptions {
  double step = 1e-5;
  // 0 checks every coordinate; otherwise a deterministic stride sample.
  std::size_t max_coords_per_tensor = 0;
};

/// Max over checked coordinates of |analytic - central| / max(1, |analytic|).
/// `f` must build a scalar from the current values of `inputs` (all leaves).
double finite_diff_check(const std::function<Tensor()>& f, std::span<Tensor> inputs,
                         const FiniteDiffOptions& options = {});
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                         double step = 1e-5);

}  // namespace paml
