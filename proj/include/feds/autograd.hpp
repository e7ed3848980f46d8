#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "feds/tensor.hpp"

namespace feds {

struct Node;
using NodePtr = std::shared_ptr<Node>;

// One vertex of the reverse-mode graph. Backward functions read `grad` of the
// node they belong to and accumulate into the grads of `parents`.
struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<NodePtr> parents;
  std::function<void(Node&)> backward;

  Tensor& grad_buffer();
};

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  // Leaf mutation only (optimizer steps, weight loading).
  Tensor& mutable_value() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.data.empty(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  const Shape& shape() const { return node_->value.shape; }
  int dim(int i) const { return node_->value.dim(i); }
  std::size_t numel() const { return node_->value.numel(); }
  const NodePtr& node() const { return node_; }
  double item() const { return node_->value.data.at(0); }

  void zero_grad();
  Var detach() const { return Var(node_->value, false); }

 private:
  NodePtr node_;
};

using BackwardFn = std::function<void(Node&)>;

// Builds an op result. The graph edge is only recorded when grad mode is on
// and at least one input requires grad.
Var make_result(Tensor value, std::vector<Var> inputs, BackwardFn backward);

// Seeds d(root)/d(root) = 1 and runs reverse accumulation. Root must be scalar.
void backward(const Var& root);

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace ops {

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var add_const(const Var& a, const Tensor& c);

Var sum(const Var& a);
Var mean(const Var& a);
Var mse(const Var& a, const Var& b);
// Sum of a list of scalars weighted by coefficients.
Var weighted_sum(std::span<const Var> terms, std::span<const double> weights);

Var leaky_relu(const Var& a, double slope);
Var relu(const Var& a);
Var gelu(const Var& a);
Var softplus(const Var& a);
Var log2(const Var& a);
Var clamp_min(const Var& a, double lo);
Var clamp(const Var& a, double lo, double hi);
Var pow_scalar(const Var& a, double p);

Var reshape(const Var& a, Shape shape);
// out[i] = a[index[i]], or 0 where index[i] == kGatherZero; backward scatters additively.
inline constexpr std::size_t kGatherZero = static_cast<std::size_t>(-1);
Var gather(const Var& a, std::shared_ptr<const std::vector<std::size_t>> index, Shape out_shape);

// NCHW channel utilities.
Var concat_channels(std::span<const Var> parts);
Var slice_channels(const Var& a, int start, int count);
Var select_channels(const Var& a, std::span<const int> channels);
// Mean over batch and spatial dims of an NCHW tensor, producing [C].
Var channel_means(const Var& a);

// Convolutions. Weight layouts: conv2d [Cout, Cin, kh, kw];
// conv_transpose2d [Cin, Cout, k, k]. Bias may be undefined.
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad_h, int pad_w);
Var conv_transpose2d(const Var& x, const Var& w, const Var& b, int stride, int pad, int output_pad);

// Token ops operate on the last dimension.
Var linear(const Var& x, const Var& w, const Var& b);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps);
// a: [G, n, k]; b: [G, k, m] (or [G, m, k] when transpose_b)
Var bmm(const Var& a, const Var& b, bool transpose_b);
Var normalize_rows(const Var& a, double eps);
Var softmax_rows(const Var& a);
// a: [G, ...]; s: [P]; a[g] scaled by 1 / s[g % P].
Var divide_groups(const Var& a, const Var& s);
// a: [G, r...]; b: [P, r...]; a[g] += b[g % P].
Var add_groups(const Var& a, const Var& b);

}  // namespace ops
}  // namespace feds
