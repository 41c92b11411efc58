#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "diffcast/tensor.hpp"

namespace diffcast::ag {

// Dynamic tape: every op builds a Node eagerly; backward() walks the graph in
// reverse topological order. Leaves created with requires_grad keep their
// accumulated gradient until zero_grad().
struct Node {
  Tensor value;
  Tensor grad;  // allocated on demand, same shape as value
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;  // reads this->grad, accumulates into parents

  Tensor& ensure_grad();
};

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor& value() const { return node_->value; }
  Tensor& value_mut() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  Tensor& grad_mut() { return node_->ensure_grad(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void zero_grad();

  const Shape& shape() const { return node_->value.shape(); }
  int64_t numel() const { return node_->value.numel(); }
  real item() const { return node_->value.item(); }

  std::shared_ptr<Node> node() const { return node_; }
  static Var from_node(std::shared_ptr<Node> n);

 private:
  std::shared_ptr<Node> node_;
};

// Runs reverse-mode accumulation from a scalar root (numel == 1).
void backward(const Var& root);

Var constant(Tensor value);

// ---- elementwise / reductions ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, real factor);
Var add_scalar(const Var& a, real s);
Var sum_all(const Var& a);
Var mean_all(const Var& a);
Var mse(const Var& a, const Var& b);  // mean((a-b)^2)

// ---- activations ----
Var sigmoid(const Var& a);
Var tanh_(const Var& a);
Var silu(const Var& a);

// ---- shape ops ----
Var reshape(const Var& a, Shape new_shape);
Var permute(const Var& a, std::vector<int64_t> perm);
Var concat_axis(const std::vector<Var>& parts, int64_t axis);
Var narrow(const Var& a, int64_t axis, int64_t start, int64_t len);
Var broadcast_front(const Var& a, int64_t n);  // [d...] -> [n, d...]
Var detach(const Var& a);

// ---- linear algebra ----
// a: [B, m, k], b: [B, k, n] -> [B, m, n]; transpose flags apply per batch.
Var matmul_batched(const Var& a, const Var& b, bool trans_a = false, bool trans_b = false);
Var softmax_lastdim(const Var& a);
// x: [N, d], w: [out, d], b: [out] -> [N, out]
Var linear(const Var& x, const Var& w, const Var& b);

// ---- conv / norm ----
// x: [N, Cin, H, W], w: [Cout, Cin, kh, kw], b: [Cout]
Var conv2d(const Var& x, const Var& w, const Var& b, int64_t stride, int64_t pad);
// x: [N, Cin, H, W], w: [Cin, Cout, kh, kw], b: [Cout]; out spatial = (H-1)*stride - 2*pad + k
Var conv_transpose2d(const Var& x, const Var& w, const Var& b, int64_t stride, int64_t pad);
Var group_norm(const Var& x, const Var& gamma, const Var& beta, int64_t groups, real eps = 1e-5);
// x: [N, C, H, W], v: [C] broadcast over N, H, W
Var add_channel_bias(const Var& x, const Var& v);

}  // namespace diffcast::ag
