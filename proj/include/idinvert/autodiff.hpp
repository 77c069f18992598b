#pragma once

// Reverse-mode automatic differentiation over dense NCHW tensors.
//
// Every backward rule is written in terms of differentiable ops, so gradients
// can themselves be differentiated (needed for gradient penalties). All
// arithmetic is double precision and single-threaded, which makes every
// computation bit-reproducible.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace idinvert::ad {

using Shape = std::vector<int>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Thrown on any tensor shape inconsistency.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  std::size_t size() const { return data_.size(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  Tensor reshaped(Shape shape) const;

 private:
  Shape shape_;
  std::vector<double> data_;
};

struct Node;

/// Handle to a node of the computation graph.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const;
  /// Direct access for in-place parameter updates. Never use on interior nodes.
  Tensor& mutable_value();
  const Shape& shape() const { return value().shape(); }
  int dim(int i) const { return value().dim(i); }
  std::size_t size() const { return value().size(); }
  bool requires_grad() const;
  /// Value of a single-element tensor.
  double item() const;

  Node* node() const { return node_.get(); }

 private:
  std::shared_ptr<Node> node_;
};

using BackwardFn =
    std::function<std::vector<Var>(const Var& grad_out, const Var& out, const std::vector<bool>& need)>;

struct Node {
  Tensor value;
  bool requires_grad = false;
  std::vector<Var> inputs;
  BackwardFn backward;
};

/// Disables graph recording on this thread for its lifetime.
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

Var constant(Tensor value);
Var constant(Shape shape, double fill);
Var scalar(double value);
/// Leaf that participates in differentiation.
Var leaf(Tensor value);
/// Constant copy of the value, cutting the graph.
Var detach(const Var& x);

/// Gradients of `output` with respect to each of `inputs`. A non-scalar output
/// is seeded with ones. Inputs the output does not depend on get zero gradients.
/// With `create_graph` the returned gradients are themselves differentiable.
std::vector<Var> grad(const Var& output, std::span<const Var> inputs, bool create_graph = false);

// Elementwise binary ops. Operands must have equal rank; each dimension must
// match or be 1 on one side (broadcast).
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);

Var neg(const Var& x);
Var scale(const Var& x, double factor);
Var add_scalar(const Var& x, double c);
Var square(const Var& x);
Var exp(const Var& x);
Var log(const Var& x);
Var sqrt(const Var& x);
Var rsqrt(const Var& x);
Var tanh(const Var& x);
Var sigmoid(const Var& x);
Var softplus(const Var& x);
Var leaky_relu(const Var& x, double slope);

Var sum(const Var& x);
Var mean(const Var& x);
/// Sums over the dimensions where `shape` is 1 (inverse of broadcasting).
Var sum_to(const Var& x, const Shape& shape);
Var broadcast_to(const Var& x, const Shape& shape);
Var reshape(const Var& x, const Shape& shape);

/// 2-D matrix product op(a) * op(b).
Var matmul(const Var& a, const Var& b, bool transpose_a = false, bool transpose_b = false);

/// Stride-1 "same" convolution of x [N,C,H,W] with w [O,C,k,k], k odd.
Var conv2d(const Var& x, const Var& w);
/// Adjoint of conv2d with respect to its input.
Var conv2d_input_grad(const Var& grad_out, const Var& w);
/// Adjoint of conv2d with respect to its weight; `kernel` is k.
Var conv2d_weight_grad(const Var& x, const Var& grad_out, int kernel);

/// Nearest-neighbour 2x upsampling over the last two dims.
Var upsample2x(const Var& x);
/// 2x2 block sums over the last two dims (adjoint of upsample2x).
Var sumpool2x(const Var& x);
Var avgpool2x(const Var& x);

/// Columns [start, start+len) of a 2-D tensor.
Var slice_cols(const Var& x, int start, int len);
/// Places a 2-D tensor at column `start` of a zero tensor with `total` columns.
Var pad_cols(const Var& x, int start, int total);
/// Concatenation of 2-D tensors along columns.
Var concat_cols(std::span<const Var> parts);

}  // namespace idinvert::ad
