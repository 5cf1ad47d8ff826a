#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "emea/tensor.hpp"

namespace emea {

// Define-by-run reverse-mode autodiff. Every op call appends a node to an
// implicit graph held together by shared ownership of parents; the graph is
// discarded when the last Node handle referencing it goes away.
//
// A graph is confined to one thread. Leaves created with borrow() reference a
// tensor owned elsewhere (model parameters); that tensor must outlive the
// graph and must not be mutated while the graph is alive.
struct NodeImpl {
  Tensor owned;
  const Tensor* borrowed = nullptr;
  Tensor grad;  // empty until the first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<NodeImpl>> parents;
  std::function<void(NodeImpl&)> backward_fn;

  const Tensor& value() const { return borrowed ? *borrowed : owned; }
  // Returns the gradient buffer, zero-initialising it on first use.
  Tensor& grad_buffer();
};

class Node {
 public:
  Node() = default;
  explicit Node(std::shared_ptr<NodeImpl> impl) : impl_(std::move(impl)) {}

  // Owning leaf.
  static Node leaf(Tensor value, bool requires_grad = false);
  // Non-owning leaf over an externally owned tensor.
  static Node borrow(const Tensor& value, bool requires_grad = false);

  const Tensor& value() const { return impl_->value(); }
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const { return impl_->requires_grad; }
  bool has_grad() const { return !impl_->grad.empty(); }
  // Gradient accumulated by backward(); a zero tensor if none arrived yet.
  Tensor grad() const;
  void zero_grad() { impl_->grad = Tensor(); }

  bool valid() const { return static_cast<bool>(impl_); }
  NodeImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<NodeImpl>& shared() const { return impl_; }

 private:
  std::shared_ptr<NodeImpl> impl_;
};

// Seeds d(root)/d(root) = 1 and propagates to every reachable node that
// requires grad, visiting each node once in reverse topological order.
// Gradients accumulate: calling backward twice without zero_grad() on the
// leaves sums both contributions. Throws ContractError for a non-scalar root.
void backward(const Node& root);

// --- ops --------------------------------------------------------------------

Node matmul(const Node& a, const Node& b);            // [m×k]·[k×n]
Node transpose(const Node& a);                        // [m×n] -> [n×m]
Node add(const Node& a, const Node& b);               // same shape
Node add_bias(const Node& x, const Node& bias);       // [m×n] + [n]
Node scale(const Node& x, float factor);
Node relu(const Node& x);
Node gelu(const Node& x);                             // tanh approximation
Node layer_norm(const Node& x, const Node& gain, const Node& shift, float eps = 1e-5f);
// Softmax along `axis` (-1 = last). Rank 1 and rank 2 inputs.
Node softmax(const Node& x, int axis = -1);
// -sum p ln p over every entry, 0 ln 0 = 0. Rows must sum to 1 within 1e-3.
Node entropy(const Node& p);
Node sum(const Node& x);
// Summed negative log-likelihood of integer targets under softmax(logits).
// Targets < 0 are ignored. mean=true divides by the number of used rows.
Node cross_entropy(const Node& logits, std::span<const int> targets, bool mean = false);
Node embedding(const Node& table, std::span<const int> ids);  // gather rows of [V×d]
Node gather_rows(const Node& x, std::span<const int> rows);
Node slice_cols(const Node& x, std::size_t start, std::size_t count);
Node concat_cols(const std::vector<Node>& parts);
// sum_i weights[i] * inputs[i]; weights has shape [R].
Node weighted_sum(const Node& weights, const std::vector<Node>& inputs);
// Row-wise dot product of two [m×n] nodes -> [m×1].
Node row_dot(const Node& a, const Node& b);
// Scales row r of x [m×n] by s[r] where s is [m×1].
Node scale_rows(const Node& x, const Node& s);

}  // namespace emea
