#pragma once

#include "dcd/tensor.hpp"

#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace dcd {

// Reverse-mode autodiff over dense matrices. Graphs are built per call
// (define-by-run), differentiated once via backward(), then dropped. Values
// are immutable after construction; gradients live on the nodes.
struct Node {
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  Mat value;
  Mat grad;  // lazily allocated, zeroed at the start of each backward pass
  bool needs_grad = false;
  std::function<void(Node&)> backprop;  // scatters grad into inputs
};

// Value-semantic handle to a graph node.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> n) : n_(std::move(n)) {}

  const Mat& value() const { return n_->value; }
  const Mat& grad() const;  // zeros if backward never reached this node
  bool needs_grad() const { return n_->needs_grad; }
  Index rows() const { return n_->value.rows(); }
  Index cols() const { return n_->value.cols(); }
  std::shared_ptr<Node> node() const { return n_; }
  bool valid() const { return n_ != nullptr; }

 private:
  std::shared_ptr<Node> n_;
};

Var make_leaf(Mat value);      // trainable: receives gradients
Var make_constant(Mat value);  // gradient flow stops here
Var make_scalar(Scalar v, bool trainable = false);

Scalar item(const Var& v);  // value of a 1x1 node

// Core op set. All ops validate shapes and throw std::invalid_argument
// naming the op and the offending shapes.
Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);  // elementwise
Var scale(const Var& a, Scalar s);
Var add_scalar(const Var& a, Scalar c);
Var neg(const Var& a);
Var transpose(const Var& a);
Var add_row_broadcast(const Var& x, const Var& bias);  // bias is 1 x cols
Var gelu(const Var& a);  // the model nonlinearity: exact erf-based GELU
Var softplus(const Var& a);
Var embedding_lookup(const Var& table, const TokenSequence& ids);
Var layer_norm(const Var& x, const Var& gain, const Var& bias, Scalar eps = 1e-5);
Var softmax(const Var& z);      // row-wise
Var log_softmax(const Var& z);  // row-wise
Var gather_per_row(const Var& x, const TokenSequence& cols);  // 1 x rows
Var sum(const Var& x);   // 1 x 1
Var mean(const Var& x);  // 1 x 1
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
Var col_slice(const Var& x, Index start, Index n);
Var row_slice(const Var& x, Index start, Index n);
Var reshape(const Var& x, Index rows, Index cols);  // row-major order

// Single-head causal scaled dot-product attention over a T x d sequence.
// Position t attends to positions <= t only.
Var causal_attention(const Var& q, const Var& k, const Var& v);

// Mean negative log-likelihood of `targets` under row-wise softmax(logits).
Var cross_entropy_mean(const Var& logits, const TokenSequence& targets);

// Accumulates d(root)/d(leaf) into every reachable trainable node's grad.
// Root must be 1x1. Each call re-zeroes the gradients it touches, so
// repeated calls produce identical results.
void backward(const Var& root);

// Central-difference gradient estimate, one f evaluation pair per
// coordinate. Independent of backward(); used as its oracle.
Mat finite_difference_gradient(const std::function<Scalar(const Mat&)>& f, const Mat& x,
                               Scalar step);

}  // namespace dcd
