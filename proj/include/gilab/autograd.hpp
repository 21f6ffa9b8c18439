#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "gilab/tensor.hpp"

// Reverse-mode automatic differentiation over whole-tensor operations.
//
// Every backward rule is itself written in terms of graph operations, so a
// gradient computed with create_graph = true can be differentiated again.
// The attack needs this: it minimizes a distance between parameter gradients
// and must differentiate that distance with respect to the input images.
namespace gilab::ag {

class Var;

// Receives the node's own output and the upstream gradient; returns one
// gradient per input (an empty Var means "no contribution").
using BackwardFn = std::function<std::vector<Var>(const Var& out, const Var& grad)>;

struct Node {
  Tensor value;
  std::vector<Var> inputs;
  BackwardFn backward;
  bool requires_grad = false;
  const char* op = "leaf";
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Tensor& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  Node* node() const { return node_.get(); }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node> node_;
};

Var constant(Tensor value);
// Leaf that gradients can be taken with respect to.
Var leaf(Tensor value);

bool grad_enabled();

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Gradients of `output` (seeded with ones, or with `seed` when given) with
// respect to each entry of `wrt`. Entries that `output` does not depend on
// get zero gradients. With create_graph the results are differentiable.
std::vector<Var> grad(const Var& output, std::span<const Var> wrt, bool create_graph,
                      const Var& seed = {});

// Elementwise, equal shapes.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double c);
Var exp(const Var& a);
Var sqrt(const Var& a);
Var reciprocal(const Var& a);
Var abs(const Var& a);
Var relu(const Var& a);

// `s` holds a single element; broadcast multiply.
Var mul_scalar(const Var& a, const Var& s);
// Sum of all elements, shape [1].
Var sum(const Var& a);
Var dot(const Var& a, const Var& b);
// Broadcast a single-element tensor to `shape`.
Var expand(const Var& s, const Shape& shape);

Var reshape(const Var& a, const Shape& shape);

// 2-D matrix algebra.
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
// x[B,K] + bias[K]
Var add_row_bias(const Var& x, const Var& bias);
Var col_sum(const Var& x);
Var broadcast_rows(const Var& v, std::size_t rows);
// Each row replaced by its sum (self-adjoint).
Var row_sum_bcast(const Var& x);
Var log_softmax(const Var& logits);

// NCHW image operations.
// 3x3 stride-1 zero-padded correlation; w is [O,C,3,3].
Var conv2d(const Var& x, const Var& w);
// Adjoint of conv2d in x: maps dy[B,O,H,W] to dx[B,C,H,W].
Var conv2d_input_grad(const Var& dy, const Var& w);
// Adjoint of conv2d in w: maps (x, dy) to dw[O,C,3,3].
Var conv2d_weight_grad(const Var& x, const Var& dy);
// x[B,C,H,W] + bias[C]
Var add_channel_bias(const Var& x, const Var& bias);
Var channel_sum(const Var& x);
Var broadcast_channels(const Var& v, const Shape& shape);
Var avg_pool(const Var& x, std::size_t k);
Var upsample_nearest(const Var& x, std::size_t k);
// Rows of the leading dimension, and its adjoint.
Var gather(const Var& x, std::span<const std::size_t> rows);
Var scatter(const Var& x, std::span<const std::size_t> rows, std::size_t total_rows);

// Anisotropic total variation of an NCHW batch (sum of absolute differences
// between vertical and horizontal neighbours). Subgradient 0 at ties.
Var total_variation(const Var& x);

// Plain-tensor versions of the image kernels, shared with tests and
// inference paths that do not need a graph.
namespace kernels {
Tensor conv2d(const Tensor& x, const Tensor& w);
Tensor conv2d_input_grad(const Tensor& dy, const Tensor& w);
Tensor conv2d_weight_grad(const Tensor& x, const Tensor& dy);
Tensor avg_pool(const Tensor& x, std::size_t k);
Tensor upsample_nearest(const Tensor& x, std::size_t k);
double total_variation(const Tensor& x);
}  // namespace kernels

}  // namespace gilab::ag
