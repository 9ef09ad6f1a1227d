#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "mrigan/tensor.hpp"

namespace mrigan {

struct Node;

// Handle to a node of a dynamically built computation graph. Copies share the
// node. backward() runs reverse-mode accumulation from a scalar root; each op
// below records a closure that scatters the root-relative gradient into its
// parents. Graphs are per-invocation and independent, so building/backprop on
// distinct graphs is safe concurrently.
class Variable {
public:
  Variable() = default;
  explicit Variable(std::shared_ptr<Node> n) : n_(std::move(n)) {}

  bool defined() const { return n_ != nullptr; }
  const Tensor& value() const;
  Tensor& value();
  const Tensor& grad() const;
  bool requires_grad() const;
  bool has_grad() const;
  const std::vector<long>& shape() const { return value().shape(); }
  long numel() const { return value().numel(); }
  double scalar() const;

  // Same value, no history: gradients stop here.
  Variable detach() const;

  void zero_grad();
  void backward();

  std::shared_ptr<Node> node() const { return n_; }

private:
  std::shared_ptr<Node> n_;
};

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;

  // Lazily allocates and accumulates into a parent's gradient buffer.
  static void accumulate(Node& parent, const Tensor& g);
  Tensor& ensure_grad();
};

Variable constant(Tensor value);
Variable leaf(Tensor value); // requires_grad = true

// Extension point for ops with hand-derived backward passes. The callback
// receives the result node; node.grad holds the upstream gradient.
Variable make_op(Tensor value, std::vector<Variable> parents,
                 std::function<void(Node&)> backprop);

// ---- elementwise / scalar ----
Variable add(const Variable& a, const Variable& b);
Variable sub(const Variable& a, const Variable& b);
Variable mul(const Variable& a, const Variable& b);
Variable scale(const Variable& a, double s);
Variable add_scalar(const Variable& a, double s);
Variable gelu(const Variable& a);
Variable leaky_relu(const Variable& a, double slope);
Variable softplus(const Variable& a);
Variable sqrt_v(const Variable& a);            // requires positive input
Variable hypot_v(const Variable& a, const Variable& b); // sqrt(a^2+b^2), subgradient 0 at 0

// ---- reductions ----
Variable sum_all(const Variable& a);           // scalar
Variable mean_all(const Variable& a);          // scalar
Variable sum_sq(const Variable& a);            // scalar, sum of squares
Variable sum_abs(const Variable& a);           // scalar, l1 norm
Variable mean_hw(const Variable& a);           // H x W x C -> C

// ---- linear algebra ----
Variable matmul(const Variable& a, const Variable& b); // (M,K)x(K,N)
Variable linear(const Variable& x, const Variable& w, const Variable& b); // rows of x
// Batched matmul on rank-3 operands (B,M,K)x(B,K,N); trans flags apply per batch.
Variable bmm(const Variable& a, const Variable& b, bool trans_a = false, bool trans_b = false);

// ---- shape / indexing ----
Variable reshape(const Variable& a, std::vector<long> shape);
// out row r = in row idx[r]; rows are the leading dim of a 2-D (N,C) tensor.
Variable gather_rows(const Variable& a, std::shared_ptr<const std::vector<long>> idx,
                     long out_rows);
// out element i = in element idx[i]; collisions accumulate on backward.
Variable gather_flat(const Variable& a, std::shared_ptr<const std::vector<long>> idx,
                     std::vector<long> out_shape);
Variable concat_last(const Variable& a, const Variable& b); // concat over last dim

// ---- attention helpers ----
Variable softmax_lastdim(const Variable& a);
// scores: (nw*heads, T, T); bias: (heads, T, T) broadcast over windows.
Variable add_bias_heads(const Variable& scores, const Variable& bias, long num_heads);
// mask: (nw, T, T) additive constant, broadcast over heads.
Variable add_window_mask(const Variable& scores, const Tensor& mask, long num_heads);

// ---- norm / conv ----
Variable layer_norm(const Variable& x, const Variable& gamma, const Variable& beta,
                    double eps = 1e-5); // over last dim
enum class Pad { Zero, Reflect };
// x: (H,W,Cin), w: (kh,kw,Cin,Cout), b: (Cout) or undefined. "Same" padding of
// (k-1)/2 per side; stride 1 or 2.
Variable conv2d(const Variable& x, const Variable& w, const Variable& b,
                long stride = 1, Pad pad = Pad::Zero);
Variable upsample2x(const Variable& x); // nearest, (H,W,C) -> (2H,2W,C)

} // namespace mrigan
