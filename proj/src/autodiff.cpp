#include "dcd/autodiff.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <unordered_set>

namespace dcd {

namespace {

void ensure_grad(Node& n) {
  if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
}

std::shared_ptr<Node> new_node(const char* op, Mat value, const std::vector<Var>& inputs) {
  auto n = std::make_shared<Node>();
  n->op = op;
  n->value = std::move(value);
  n->inputs.reserve(inputs.size());
  for (const Var& v : inputs) {
    n->needs_grad = n->needs_grad || v.needs_grad();
    n->inputs.push_back(v.node());
  }
  return n;
}

}  // namespace

const Mat& Var::grad() const {
  ensure_grad(*n_);
  return n_->grad;
}

Var make_leaf(Mat value) {
  auto n = std::make_shared<Node>();
  n->op = "leaf";
  n->value = std::move(value);
  n->needs_grad = true;
  return Var(n);
}

Var make_constant(Mat value) {
  auto n = std::make_shared<Node>();
  n->op = "const";
  n->value = std::move(value);
  n->needs_grad = false;
  return Var(n);
}

Var make_scalar(Scalar v, bool trainable) {
  Mat m(1, 1);
  m(0, 0) = v;
  return trainable ? make_leaf(std::move(m)) : make_constant(std::move(m));
}

Scalar item(const Var& v) {
  if (v.rows() != 1 || v.cols() != 1) {
    throw std::invalid_argument("item: expected a 1x1 value, got " + shape_str(v.value()));
  }
  return v.value()(0, 0);
}

Var matmul(const Var& a, const Var& b) {
  require_inner_dims("matmul", a.value(), b.value());
  auto n = new_node("matmul", a.value() * b.value(), {a, b});
  if (n->needs_grad) {
    n->backprop = [a = a.node(), b = b.node()](Node& self) {
      if (a->needs_grad) {
        ensure_grad(*a);
        a->grad.noalias() += self.grad * b->value.transpose();
      }
      if (b->needs_grad) {
        ensure_grad(*b);
        b->grad.noalias() += a->value.transpose() * self.grad;
      }
    };
  }
  return Var(n);
}

Var add(const Var& a, const Var& b) {
  require_same_shape("add", a.value(), b.value());
  auto n = new_node("add", a.value() + b.value(), {a, b});
  if (n->needs_grad) {
    n->backprop = [a = a.node(), b = b.node()](Node& self) {
      if (a->needs_grad) { ensure_grad(*a); a->grad += self.grad; }
      if (b->needs_grad) { ensure_grad(*b); b->grad += self.grad; }
    };
  }
  return Var(n);
}

Var sub(const Var& a, const Var& b) {
  require_same_shape("sub", a.value(), b.value());
  auto n = new_node("sub", a.value() - b.value(), {a, b});
  if (n->needs_grad) {
    n->backprop = [a = a.node(), b = b.node()](Node& self) {
      if (a->needs_grad) { ensure_grad(*a); a->grad += self.grad; }
      if (b->needs_grad) { ensure_grad(*b); b->grad -= self.grad; }
    };
  }
  return Var(n);
}

Var mul(const Var& a, const Var& b) {
  require_same_shape("mul", a.value(), b.value());
  auto n = new_node("mul", a.value().cwiseProduct(b.value()), {a, b});
  if (n->needs_grad) {
    n->backprop = [a = a.node(), b = b.node()](Node& self) {
      if (a->needs_grad) { ensure_grad(*a); a->grad += self.grad.cwiseProduct(b->value); }
      if (b->needs_grad) { ensure_grad(*b); b->grad += self.grad.cwiseProduct(a->value); }
    };
  }
  return Var(n);
}

Var scale(const Var& a, Scalar s) {
  auto n = new_node("scale", a.value() * s, {a});
  if (n->needs_grad) {
    n->backprop = [a = a.node(), s](Node& self) {
      ensure_grad(*a);
      a->grad += self.grad * s;
    };
  }
  return Var(n);
}

Var add_scalar(const Var& a, Scalar c) {
  auto n = new_node("add_scalar", (a.value().array() + c).matrix(), {a});
  if (n->needs_grad) {
    n->backprop = [a = a.node()](Node& self) {
      ensure_grad(*a);
      a->grad += self.grad;
    };
  }
  return Var(n);
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var transpose(const Var& a) {
  auto n = new_node("transpose", a.value().transpose(), {a});
  if (n->needs_grad) {
    n->backprop = [a = a.node()](Node& self) {
      ensure_grad(*a);
      a->grad += self.grad.transpose();
    };
  }
  return Var(n);
}

Var add_row_broadcast(const Var& x, const Var& bias) {
  if (bias.rows() != 1 || bias.cols() != x.cols()) {
    throw std::invalid_argument("add_row_broadcast: bias " + shape_str(bias.value()) +
                                " does not broadcast over " + shape_str(x.value()));
  }
  Mat v = x.value();
  v.rowwise() += bias.value().row(0);
  auto n = new_node("add_row_broadcast", std::move(v), {x, bias});
  if (n->needs_grad) {
    n->backprop = [x = x.node(), b = bias.node()](Node& self) {
      if (x->needs_grad) { ensure_grad(*x); x->grad += self.grad; }
      if (b->needs_grad) {
        ensure_grad(*b);
        b->grad.row(0) += self.grad.colwise().sum();
      }
    };
  }
  return Var(n);
}

namespace {
constexpr Scalar kInvSqrt2 = std::numbers::sqrt2 / 2.0;
constexpr Scalar kInvSqrt2Pi = 0.3989422804014326779;  // 1/sqrt(2*pi)
}  // namespace

Var gelu(const Var& a) {
  Mat v = a.value().unaryExpr(
      [](Scalar x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); });
  auto n = new_node("gelu", std::move(v), {a});
  if (n->needs_grad) {
    n->backprop = [a = a.node()](Node& self) {
      ensure_grad(*a);
      Mat d = a->value.unaryExpr([](Scalar x) {
        return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) +
               x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
      });
      a->grad += self.grad.cwiseProduct(d);
    };
  }
  return Var(n);
}

Var softplus(const Var& a) {
  Mat v = a.value().unaryExpr([](Scalar x) {
    return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
  });
  auto n = new_node("softplus", std::move(v), {a});
  if (n->needs_grad) {
    n->backprop = [a = a.node()](Node& self) {
      ensure_grad(*a);
      Mat d = a->value.unaryExpr([](Scalar x) { return 1.0 / (1.0 + std::exp(-x)); });
      a->grad += self.grad.cwiseProduct(d);
    };
  }
  return Var(n);
}

Var embedding_lookup(const Var& table, const TokenSequence& ids) {
  const Index vocab = table.rows();
  for (int id : ids) {
    if (id < 0 || id >= vocab) {
      throw std::invalid_argument("embedding_lookup: id " + std::to_string(id) +
                                  " outside table " + shape_str(table.value()));
    }
  }
  Mat v(static_cast<Index>(ids.size()), table.cols());
  for (size_t i = 0; i < ids.size(); ++i) {
    v.row(static_cast<Index>(i)) = table.value().row(ids[i]);
  }
  auto n = new_node("embedding_lookup", std::move(v), {table});
  if (n->needs_grad) {
    n->backprop = [t = table.node(), ids](Node& self) {
      ensure_grad(*t);
      for (size_t i = 0; i < ids.size(); ++i) {
        t->grad.row(ids[i]) += self.grad.row(static_cast<Index>(i));
      }
    };
  }
  return Var(n);
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, Scalar eps) {
  const Index d = x.cols();
  if (gain.rows() != 1 || gain.cols() != d || bias.rows() != 1 || bias.cols() != d) {
    throw std::invalid_argument("layer_norm: gain " + shape_str(gain.value()) + " / bias " +
                                shape_str(bias.value()) + " do not match " +
                                shape_str(x.value()));
  }
  const Index rows = x.rows();
  Mat xhat(rows, d);
  Eigen::VectorXd inv_std(rows);
  for (Index r = 0; r < rows; ++r) {
    const auto row = x.value().row(r);
    const Scalar mu = row.mean();
    const Scalar var = (row.array() - mu).square().sum() / static_cast<Scalar>(d);
    const Scalar is = 1.0 / std::sqrt(var + eps);
    inv_std(r) = is;
    xhat.row(r) = ((row.array() - mu) * is).matrix();
  }
  Mat v = (xhat.array().rowwise() * gain.value().row(0).array()).matrix();
  v.rowwise() += bias.value().row(0);
  auto n = new_node("layer_norm", std::move(v), {x, gain, bias});
  if (n->needs_grad) {
    n->backprop = [x = x.node(), g = gain.node(), b = bias.node(), xhat = std::move(xhat),
                   inv_std = std::move(inv_std)](Node& self) {
      if (g->needs_grad) {
        ensure_grad(*g);
        g->grad.row(0) += self.grad.cwiseProduct(xhat).colwise().sum();
      }
      if (b->needs_grad) {
        ensure_grad(*b);
        b->grad.row(0) += self.grad.colwise().sum();
      }
      if (x->needs_grad) {
        ensure_grad(*x);
        for (Index r = 0; r < self.grad.rows(); ++r) {
          const auto go = self.grad.row(r).array();
          const auto gn = g->value.row(0).array();
          const auto xh = xhat.row(r).array();
          const auto dxhat = (go * gn).eval();
          const Scalar m1 = dxhat.mean();
          const Scalar m2 = (dxhat * xh).mean();
          x->grad.row(r).array() += (dxhat - m1 - xh * m2) * inv_std(r);
        }
      }
    };
  }
  return Var(n);
}

Var softmax(const Var& z) {
  Mat p(z.rows(), z.cols());
  for (Index r = 0; r < z.rows(); ++r) {
    const Scalar m = z.value().row(r).maxCoeff();
    Eigen::Array<Scalar, 1, Eigen::Dynamic> e = (z.value().row(r).array() - m).exp();
    p.row(r) = (e / e.sum()).matrix();
  }
  auto n = new_node("softmax", std::move(p), {z});
  if (n->needs_grad) {
    n->backprop = [z = z.node()](Node& self) {
      ensure_grad(*z);
      for (Index r = 0; r < self.value.rows(); ++r) {
        const Scalar dot = self.grad.row(r).dot(self.value.row(r));
        z->grad.row(r).array() +=
            (self.grad.row(r).array() - dot) * self.value.row(r).array();
      }
    };
  }
  return Var(n);
}

Var log_softmax(const Var& z) {
  Mat v(z.rows(), z.cols());
  for (Index r = 0; r < z.rows(); ++r) {
    const Scalar m = z.value().row(r).maxCoeff();
    const Scalar lse = std::log((z.value().row(r).array() - m).exp().sum()) + m;
    v.row(r) = (z.value().row(r).array() - lse).matrix();
  }
  auto n = new_node("log_softmax", std::move(v), {z});
  if (n->needs_grad) {
    n->backprop = [z = z.node()](Node& self) {
      ensure_grad(*z);
      for (Index r = 0; r < self.value.rows(); ++r) {
        const Scalar gsum = self.grad.row(r).sum();
        z->grad.row(r).array() +=
            self.grad.row(r).array() - gsum * self.value.row(r).array().exp();
      }
    };
  }
  return Var(n);
}

Var gather_per_row(const Var& x, const TokenSequence& cols) {
  if (static_cast<Index>(cols.size()) != x.rows()) {
    throw std::invalid_argument("gather_per_row: " + std::to_string(cols.size()) +
                                " indices for " + shape_str(x.value()));
  }
  Mat v(1, x.rows());
  for (size_t i = 0; i < cols.size(); ++i) {
    if (cols[i] < 0 || cols[i] >= x.cols()) {
      throw std::invalid_argument("gather_per_row: column " + std::to_string(cols[i]) +
                                  " outside " + shape_str(x.value()));
    }
    v(0, static_cast<Index>(i)) = x.value()(static_cast<Index>(i), cols[i]);
  }
  auto n = new_node("gather_per_row", std::move(v), {x});
  if (n->needs_grad) {
    n->backprop = [x = x.node(), cols](Node& self) {
      ensure_grad(*x);
      for (size_t i = 0; i < cols.size(); ++i) {
        x->grad(static_cast<Index>(i), cols[i]) += self.grad(0, static_cast<Index>(i));
      }
    };
  }
  return Var(n);
}

Var sum(const Var& x) {
  Mat v(1, 1);
  v(0, 0) = x.value().sum();
  auto n = new_node("sum", std::move(v), {x});
  if (n->needs_grad) {
    n->backprop = [x = x.node()](Node& self) {
      ensure_grad(*x);
      x->grad.array() += self.grad(0, 0);
    };
  }
  return Var(n);
}

Var mean(const Var& x) {
  Mat v(1, 1);
  v(0, 0) = x.value().mean();
  auto n = new_node("mean", std::move(v), {x});
  if (n->needs_grad) {
    n->backprop = [x = x.node()](Node& self) {
      ensure_grad(*x);
      x->grad.array() += self.grad(0, 0) / static_cast<Scalar>(x->value.size());
    };
  }
  return Var(n);
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
  Index rows = 0;
  const Index cols = parts.front().cols();
  for (const Var& p : parts) {
    if (p.cols() != cols) {
      throw std::invalid_argument("concat_rows: column mismatch " + shape_str(p.value()) +
                                  " vs " + shape_str(parts.front().value()));
    }
    rows += p.rows();
  }
  Mat v(rows, cols);
  Index at = 0;
  for (const Var& p : parts) {
    v.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  auto n = new_node("concat_rows", std::move(v), parts);
  if (n->needs_grad) {
    n->backprop = [](Node& self) {
      Index at = 0;
      for (auto& in : self.inputs) {
        if (in->needs_grad) {
          ensure_grad(*in);
          in->grad += self.grad.middleRows(at, in->value.rows());
        }
        at += in->value.rows();
      }
    };
  }
  return Var(n);
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
  Index cols = 0;
  const Index rows = parts.front().rows();
  for (const Var& p : parts) {
    if (p.rows() != rows) {
      throw std::invalid_argument("concat_cols: row mismatch " + shape_str(p.value()) +
                                  " vs " + shape_str(parts.front().value()));
    }
    cols += p.cols();
  }
  Mat v(rows, cols);
  Index at = 0;
  for (const Var& p : parts) {
    v.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  auto n = new_node("concat_cols", std::move(v), parts);
  if (n->needs_grad) {
    n->backprop = [](Node& self) {
      Index at = 0;
      for (auto& in : self.inputs) {
        if (in->needs_grad) {
          ensure_grad(*in);
          in->grad += self.grad.middleCols(at, in->value.cols());
        }
        at += in->value.cols();
      }
    };
  }
  return Var(n);
}

Var col_slice(const Var& x, Index start, Index n_cols) {
  if (start < 0 || n_cols <= 0 || start + n_cols > x.cols()) {
    throw std::invalid_argument("col_slice: [" + std::to_string(start) + ", " +
                                std::to_string(start + n_cols) + ") outside " +
                                shape_str(x.value()));
  }
  auto n = new_node("col_slice", x.value().middleCols(start, n_cols), {x});
  if (n->needs_grad) {
    n->backprop = [x = x.node(), start, n_cols](Node& self) {
      ensure_grad(*x);
      x->grad.middleCols(start, n_cols) += self.grad;
    };
  }
  return Var(n);
}

Var row_slice(const Var& x, Index start, Index n_rows) {
  if (start < 0 || n_rows <= 0 || start + n_rows > x.rows()) {
    throw std::invalid_argument("row_slice: [" + std::to_string(start) + ", " +
                                std::to_string(start + n_rows) + ") outside " +
                                shape_str(x.value()));
  }
  auto n = new_node("row_slice", x.value().middleRows(start, n_rows), {x});
  if (n->needs_grad) {
    n->backprop = [x = x.node(), start, n_rows](Node& self) {
      ensure_grad(*x);
      x->grad.middleRows(start, n_rows) += self.grad;
    };
  }
  return Var(n);
}

Var reshape(const Var& x, Index rows, Index cols) {
  if (rows * cols != x.rows() * x.cols()) {
    throw std::invalid_argument("reshape: cannot view " + shape_str(x.value()) + " as (" +
                                std::to_string(rows) + ", " + std::to_string(cols) + ")");
  }
  Mat v = Eigen::Map<const Mat>(x.value().data(), rows, cols);
  auto n = new_node("reshape", std::move(v), {x});
  if (n->needs_grad) {
    n->backprop = [x = x.node()](Node& self) {
      ensure_grad(*x);
      x->grad += Eigen::Map<const Mat>(self.grad.data(), x->value.rows(), x->value.cols());
    };
  }
  return Var(n);
}

Var causal_attention(const Var& q, const Var& k, const Var& v) {
  require_same_shape("causal_attention(q,k)", q.value(), k.value());
  require_same_shape("causal_attention(k,v)", k.value(), v.value());
  const Index t = q.rows();
  // Additive mask: a large finite penalty above the diagonal underflows to
  // exactly zero probability through softmax, so masked positions carry no
  // value and no gradient.
  Mat mask = Mat::Zero(t, t);
  for (Index r = 0; r < t; ++r) {
    for (Index c = r + 1; c < t; ++c) mask(r, c) = -1e30;
  }
  const Scalar inv_sqrt_d = 1.0 / std::sqrt(static_cast<Scalar>(q.cols()));
  Var scores = scale(matmul(q, transpose(k)), inv_sqrt_d);
  Var probs = softmax(add(scores, make_constant(std::move(mask))));
  return matmul(probs, v);
}

Var cross_entropy_mean(const Var& logits, const TokenSequence& targets) {
  return neg(mean(gather_per_row(log_softmax(logits), targets)));
}

void backward(const Var& root) {
  if (!root.valid()) throw std::invalid_argument("backward: empty root");
  if (root.rows() != 1 || root.cols() != 1) {
    throw std::invalid_argument("backward: root must be scalar (1x1), got " +
                                shape_str(root.value()));
  }
  // Deterministic post-order topological sort, iterative to keep the call
  // stack shallow on long graphs.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* in = node->inputs[next++].get();
      if (in->needs_grad && seen.insert(in).second) stack.emplace_back(in, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (Node* n : order) {
    n->grad = Mat::Zero(n->value.rows(), n->value.cols());
  }
  root.node()->grad(0, 0) = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backprop) (*it)->backprop(**it);
  }
}

Mat finite_difference_gradient(const std::function<Scalar(const Mat&)>& f, const Mat& x,
                               Scalar step) {
  if (step <= 0) throw std::invalid_argument("finite_difference_gradient: step must be > 0");
  Mat g(x.rows(), x.cols());
  Mat probe = x;
  for (Index i = 0; i < x.rows(); ++i) {
    for (Index j = 0; j < x.cols(); ++j) {
      const Scalar orig = probe(i, j);
      probe(i, j) = orig + step;
      const Scalar up = f(probe);
      probe(i, j) = orig - step;
      const Scalar down = f(probe);
      probe(i, j) = orig;
      g(i, j) = (up - down) / (2.0 * step);
    }
  }
  return g;
}

}  // namespace dcd
