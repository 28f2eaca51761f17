#include "ltscg/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <unordered_set>

namespace ltscg::ad {

namespace {

thread_local bool g_grad_enabled = true;

using NodePtr = std::shared_ptr<Node>;

Var make_leaf(Matrix value, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  return Var(std::move(node));
}

// Builds a result node; the backward closure is kept only when needed.
Var make_result(Matrix value, std::vector<NodePtr> parents, std::function<void(Node&)> fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& p : parents) needs = needs || p->requires_grad;
  }
  if (needs) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward = std::move(fn);
  }
  return Var(std::move(node));
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }
}

Eigen::Index block_count(const Matrix& a) {
  const Eigen::Index n = a.cols();
  if (n == 0 || a.rows() % n != 0) throw std::invalid_argument("block op: rows must be a multiple of cols");
  return a.rows() / n;
}

// Applies a unary elementwise map with derivative expressed through the
// input x and output y.
template <typename F, typename DF>
Var unary(const Var& a, F f, DF df) {
  Matrix out = a.value().unaryExpr(f);
  auto pa = a.node();
  return make_result(std::move(out), {pa}, [pa, df](Node& self) {
    if (!pa->requires_grad) return;
    Matrix g = self.grad;
    const Matrix& x = pa->value;
    const Matrix& y = self.value;
    for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] *= df(x.data()[i], y.data()[i]);
    pa->accumulate(g);
  });
}

}  // namespace

void Node::accumulate(const Matrix& g) {
  if (grad.size() == 0) {
    grad = g;
  } else {
    grad += g;
  }
}

void Var::zero_grad() {
  if (node_) node_->grad.resize(0, 0);
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

Var constant(Matrix value) { return make_leaf(std::move(value), false); }
Var parameter(Matrix value) { return make_leaf(std::move(value), true); }
Var zeros(Eigen::Index rows, Eigen::Index cols) { return constant(Matrix::Zero(rows, cols)); }
Var scalar_constant(double v) { return constant(Matrix::Constant(1, 1, v)); }

void backward(const Var& root) {
  if (root.rows() != 1 || root.cols() != 1) throw std::invalid_argument("backward: root must be 1x1");
  if (!root.requires_grad()) return;

  // Iterative post-order DFS; graphs over long windows are deep.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* child = node->parents[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->accumulate(Matrix::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward && node->grad.size() != 0) node->backward(*node);
  }
  // Intermediate gradients are not needed once propagated.
  for (Node* node : order) {
    if (node->backward) node->grad.resize(0, 0);
  }
}

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  auto pa = a.node(), pb = b.node();
  return make_result(a.value() + b.value(), {pa, pb}, [pa, pb](Node& self) {
    if (pa->requires_grad) pa->accumulate(self.grad);
    if (pb->requires_grad) pb->accumulate(self.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  auto pa = a.node(), pb = b.node();
  return make_result(a.value() - b.value(), {pa, pb}, [pa, pb](Node& self) {
    if (pa->requires_grad) pa->accumulate(self.grad);
    if (pb->requires_grad) pb->accumulate(-self.grad);
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  auto pa = a.node(), pb = b.node();
  return make_result(a.value().cwiseProduct(b.value()), {pa, pb}, [pa, pb](Node& self) {
    if (pa->requires_grad) pa->accumulate(self.grad.cwiseProduct(pb->value));
    if (pb->requires_grad) pb->accumulate(self.grad.cwiseProduct(pa->value));
  });
}

Var scale(const Var& a, double s) {
  auto pa = a.node();
  return make_result(a.value() * s, {pa}, [pa, s](Node& self) { pa->accumulate(self.grad * s); });
}

Var add_scalar(const Var& a, double s) {
  auto pa = a.node();
  return make_result((a.value().array() + s).matrix(), {pa}, [pa](Node& self) { pa->accumulate(self.grad); });
}

Var one_minus(const Var& a) {
  auto pa = a.node();
  return make_result((1.0 - a.value().array()).matrix(), {pa}, [pa](Node& self) { pa->accumulate(-self.grad); });
}

Var add_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw std::invalid_argument("add_row: shape mismatch");
  auto pa = a.node(), pr = row.node();
  Matrix out = a.value().rowwise() + row.value().row(0);
  return make_result(std::move(out), {pa, pr}, [pa, pr](Node& self) {
    if (pa->requires_grad) pa->accumulate(self.grad);
    if (pr->requires_grad) pr->accumulate(self.grad.colwise().sum());
  });
}

Var mul_col(const Var& a, const Var& col) {
  if (col.cols() != 1 || col.rows() != a.rows()) throw std::invalid_argument("mul_col: shape mismatch");
  auto pa = a.node(), pc = col.node();
  Matrix out = a.value().array().colwise() * col.value().col(0).array();
  return make_result(std::move(out), {pa, pc}, [pa, pc](Node& self) {
    if (pa->requires_grad) {
      Matrix g = self.grad.array().colwise() * pc->value.col(0).array();
      pa->accumulate(g);
    }
    if (pc->requires_grad) pc->accumulate(self.grad.cwiseProduct(pa->value).rowwise().sum());
  });
}

Var sigmoid(const Var& a) {
  return unary(
      a,
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var tanh(const Var& a) {
  return unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var relu(const Var& a) {
  return unary(a, [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Var elu(const Var& a) {
  return unary(
      a, [](double x) { return x > 0 ? x : std::expm1(x); },
      [](double x, double y) { return x > 0 ? 1.0 : y + 1.0; });
}

Var exp(const Var& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(const Var& a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var abs(const Var& a) {
  return unary(
      a, [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Var square(const Var& a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var pow(const Var& a, double p) {
  return unary(
      a, [p](double x) { return std::pow(x, p); }, [p](double x, double) { return p * std::pow(x, p - 1.0); });
}

Var clamp(const Var& a, double lo, double hi) {
  return unary(
      a, [lo, hi](double x) { return x < lo ? lo : (x > hi ? hi : x); },
      [lo, hi](double x, double) { return (x < lo || x > hi) ? 0.0 : 1.0; });
}

Var pinv_reciprocal(const Var& a) {
  return unary(
      a, [](double x) { return x != 0.0 ? 1.0 / x : 0.0; },
      [](double x, double) { return x != 0.0 ? -1.0 / (x * x) : 0.0; });
}

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  auto pa = a.node(), pb = b.node();
  Matrix out = a.value() * b.value();
  return make_result(std::move(out), {pa, pb}, [pa, pb](Node& self) {
    if (pa->requires_grad) pa->accumulate(self.grad * pb->value.transpose());
    if (pb->requires_grad) pb->accumulate(pa->value.transpose() * self.grad);
  });
}

Var transpose(const Var& a) {
  auto pa = a.node();
  Matrix out = a.value().transpose();
  return make_result(std::move(out), {pa}, [pa](Node& self) { pa->accumulate(self.grad.transpose()); });
}

Var sum(const Var& a) {
  auto pa = a.node();
  return make_result(Matrix::Constant(1, 1, a.value().sum()), {pa}, [pa](Node& self) {
    pa->accumulate(Matrix::Constant(pa->value.rows(), pa->value.cols(), self.grad(0, 0)));
  });
}

Var sum_cols(const Var& a) {
  auto pa = a.node();
  Matrix out = a.value().rowwise().sum();
  return make_result(std::move(out), {pa}, [pa](Node& self) {
    Matrix g = self.grad.col(0).replicate(1, pa->value.cols());
    pa->accumulate(g);
  });
}

Var sum_rows(const Var& a) {
  auto pa = a.node();
  Matrix out = a.value().colwise().sum();
  return make_result(std::move(out), {pa}, [pa](Node& self) {
    Matrix g = self.grad.row(0).replicate(pa->value.rows(), 1);
    pa->accumulate(g);
  });
}

Var row_norms(const Var& a) {
  auto pa = a.node();
  Matrix out = a.value().rowwise().norm();
  return make_result(std::move(out), {pa}, [pa](Node& self) {
    Matrix g = Matrix::Zero(pa->value.rows(), pa->value.cols());
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
      const double n = self.value(r, 0);
      if (n > 0.0) g.row(r) = pa->value.row(r) * (self.grad(r, 0) / n);
    }
    pa->accumulate(g);
  });
}

Var reshape(const Var& a, Eigen::Index rows, Eigen::Index cols) {
  if (rows * cols != a.value().size()) throw std::invalid_argument("reshape: size mismatch");
  auto pa = a.node();
  Matrix out = Eigen::Map<const Matrix>(a.value().data(), rows, cols);
  return make_result(std::move(out), {pa}, [pa](Node& self) {
    Matrix g = Eigen::Map<const Matrix>(self.grad.data(), pa->value.rows(), pa->value.cols());
    pa->accumulate(g);
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const Eigen::Index rows = parts[0].rows();
  Eigen::Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::vector<NodePtr> parents;
  std::vector<Eigen::Index> offsets;
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    parents.push_back(p.node());
    offsets.push_back(off);
    off += p.cols();
  }
  auto ps = parents;
  return make_result(std::move(out), std::move(parents), [ps, offsets](Node& self) {
    for (std::size_t k = 0; k < ps.size(); ++k) {
      if (ps[k]->requires_grad) ps[k]->accumulate(self.grad.middleCols(offsets[k], ps[k]->value.cols()));
    }
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const Eigen::Index cols = parts[0].cols();
  Eigen::Index rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  std::vector<NodePtr> parents;
  std::vector<Eigen::Index> offsets;
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    out.middleRows(off, p.rows()) = p.value();
    parents.push_back(p.node());
    offsets.push_back(off);
    off += p.rows();
  }
  auto ps = parents;
  return make_result(std::move(out), std::move(parents), [ps, offsets](Node& self) {
    for (std::size_t k = 0; k < ps.size(); ++k) {
      if (ps[k]->requires_grad) ps[k]->accumulate(self.grad.middleRows(offsets[k], ps[k]->value.rows()));
    }
  });
}

Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || start + count > a.cols()) throw std::invalid_argument("slice_cols: out of range");
  auto pa = a.node();
  Matrix out = a.value().middleCols(start, count);
  return make_result(std::move(out), {pa}, [pa, start, count](Node& self) {
    Matrix g = Matrix::Zero(pa->value.rows(), pa->value.cols());
    g.middleCols(start, count) = self.grad;
    pa->accumulate(g);
  });
}

Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || start + count > a.rows()) throw std::invalid_argument("slice_rows: out of range");
  auto pa = a.node();
  Matrix out = a.value().middleRows(start, count);
  return make_result(std::move(out), {pa}, [pa, start, count](Node& self) {
    Matrix g = Matrix::Zero(pa->value.rows(), pa->value.cols());
    g.middleRows(start, count) = self.grad;
    pa->accumulate(g);
  });
}

Var gather_rows(const Var& a, std::span<const Eigen::Index> rows) {
  auto pa = a.node();
  std::vector<Eigen::Index> idx(rows.begin(), rows.end());
  Matrix out(static_cast<Eigen::Index>(idx.size()), a.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) out.row(static_cast<Eigen::Index>(r)) = a.value().row(idx[r]);
  return make_result(std::move(out), {pa}, [pa, idx](Node& self) {
    Matrix g = Matrix::Zero(pa->value.rows(), pa->value.cols());
    for (std::size_t r = 0; r < idx.size(); ++r) g.row(idx[r]) += self.grad.row(static_cast<Eigen::Index>(r));
    pa->accumulate(g);
  });
}

Var pick_cols(const Var& a, std::span<const Eigen::Index> cols) {
  if (static_cast<Eigen::Index>(cols.size()) != a.rows()) throw std::invalid_argument("pick_cols: size mismatch");
  auto pa = a.node();
  std::vector<Eigen::Index> idx(cols.begin(), cols.end());
  Matrix out(a.rows(), 1);
  for (Eigen::Index r = 0; r < a.rows(); ++r) out(r, 0) = a.value()(r, idx[static_cast<std::size_t>(r)]);
  return make_result(std::move(out), {pa}, [pa, idx](Node& self) {
    Matrix g = Matrix::Zero(pa->value.rows(), pa->value.cols());
    for (Eigen::Index r = 0; r < g.rows(); ++r) g(r, idx[static_cast<std::size_t>(r)]) = self.grad(r, 0);
    pa->accumulate(g);
  });
}

Var mask_rows(const Var& a, const ColVector& mask) {
  if (mask.size() != a.rows()) throw std::invalid_argument("mask_rows: size mismatch");
  auto pa = a.node();
  Matrix out = a.value().array().colwise() * mask.array();
  return make_result(std::move(out), {pa}, [pa, mask](Node& self) {
    Matrix g = self.grad.array().colwise() * mask.array();
    pa->accumulate(g);
  });
}

Var block_matmul(const Var& a, const Var& y) {
  const Eigen::Index n = a.cols();
  const Eigen::Index blocks = block_count(a.value());
  if (y.rows() != a.rows()) throw std::invalid_argument("block_matmul: row mismatch");
  const Eigen::Index d = y.cols();
  Matrix out(a.rows(), d);
  for (Eigen::Index b = 0; b < blocks; ++b) {
    out.middleRows(b * n, n).noalias() = a.value().middleRows(b * n, n) * y.value().middleRows(b * n, n);
  }
  auto pa = a.node(), py = y.node();
  return make_result(std::move(out), {pa, py}, [pa, py, n, blocks](Node& self) {
    if (pa->requires_grad) {
      Matrix g(pa->value.rows(), n);
      for (Eigen::Index b = 0; b < blocks; ++b) {
        g.middleRows(b * n, n).noalias() =
            self.grad.middleRows(b * n, n) * py->value.middleRows(b * n, n).transpose();
      }
      pa->accumulate(g);
    }
    if (py->requires_grad) {
      Matrix g(py->value.rows(), py->value.cols());
      for (Eigen::Index b = 0; b < blocks; ++b) {
        g.middleRows(b * n, n).noalias() =
            pa->value.middleRows(b * n, n).transpose() * self.grad.middleRows(b * n, n);
      }
      py->accumulate(g);
    }
  });
}

Var block_transpose(const Var& a) {
  const Eigen::Index n = a.cols();
  const Eigen::Index blocks = block_count(a.value());
  auto transpose_blocks = [n, blocks](const Matrix& m) {
    Matrix out(m.rows(), n);
    for (Eigen::Index b = 0; b < blocks; ++b) out.middleRows(b * n, n) = m.middleRows(b * n, n).transpose();
    return out;
  };
  auto pa = a.node();
  return make_result(transpose_blocks(a.value()), {pa},
                     [pa, transpose_blocks](Node& self) { pa->accumulate(transpose_blocks(self.grad)); });
}

Var block_matmul_nt(const Var& q, const Var& k, Eigen::Index n) {
  check_same_shape(q, k, "block_matmul_nt");
  if (n <= 0 || q.rows() % n != 0) throw std::invalid_argument("block_matmul_nt: bad block size");
  const Eigen::Index blocks = q.rows() / n;
  Matrix out(q.rows(), n);
  for (Eigen::Index b = 0; b < blocks; ++b) {
    out.middleRows(b * n, n).noalias() = q.value().middleRows(b * n, n) * k.value().middleRows(b * n, n).transpose();
  }
  auto pq = q.node(), pk = k.node();
  return make_result(std::move(out), {pq, pk}, [pq, pk, n, blocks](Node& self) {
    if (pq->requires_grad) {
      Matrix g(pq->value.rows(), pq->value.cols());
      for (Eigen::Index b = 0; b < blocks; ++b) {
        g.middleRows(b * n, n).noalias() = self.grad.middleRows(b * n, n) * pk->value.middleRows(b * n, n);
      }
      pq->accumulate(g);
    }
    if (pk->requires_grad) {
      Matrix g(pk->value.rows(), pk->value.cols());
      for (Eigen::Index b = 0; b < blocks; ++b) {
        g.middleRows(b * n, n).noalias() =
            self.grad.middleRows(b * n, n).transpose() * pq->value.middleRows(b * n, n);
      }
      pk->accumulate(g);
    }
  });
}

Var block_scale_cols(const Var& a, const Var& d) {
  const Eigen::Index n = a.cols();
  const Eigen::Index blocks = block_count(a.value());
  if (d.rows() != a.rows() || d.cols() != 1) throw std::invalid_argument("block_scale_cols: shape mismatch");
  Matrix out = a.value();
  for (Eigen::Index b = 0; b < blocks; ++b) {
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < n; ++j) out(b * n + i, j) *= d.value()(b * n + j, 0);
    }
  }
  auto pa = a.node(), pd = d.node();
  return make_result(std::move(out), {pa, pd}, [pa, pd, n, blocks](Node& self) {
    if (pa->requires_grad) {
      Matrix g = self.grad;
      for (Eigen::Index b = 0; b < blocks; ++b) {
        for (Eigen::Index i = 0; i < n; ++i) {
          for (Eigen::Index j = 0; j < n; ++j) g(b * n + i, j) *= pd->value(b * n + j, 0);
        }
      }
      pa->accumulate(g);
    }
    if (pd->requires_grad) {
      Matrix g = Matrix::Zero(pd->value.rows(), 1);
      for (Eigen::Index b = 0; b < blocks; ++b) {
        for (Eigen::Index i = 0; i < n; ++i) {
          for (Eigen::Index j = 0; j < n; ++j) g(b * n + j, 0) += self.grad(b * n + i, j) * pa->value(b * n + i, j);
        }
      }
      pd->accumulate(g);
    }
  });
}

Var set_block_diagonal(const Var& a, double value) {
  const Eigen::Index n = a.cols();
  const Eigen::Index blocks = block_count(a.value());
  Matrix out = a.value();
  for (Eigen::Index b = 0; b < blocks; ++b) {
    for (Eigen::Index i = 0; i < n; ++i) out(b * n + i, i) = value;
  }
  auto pa = a.node();
  return make_result(std::move(out), {pa}, [pa, n, blocks](Node& self) {
    Matrix g = self.grad;
    for (Eigen::Index b = 0; b < blocks; ++b) {
      for (Eigen::Index i = 0; i < n; ++i) g(b * n + i, i) = 0.0;
    }
    pa->accumulate(g);
  });
}

Var block_mean_rows(const Var& a, Eigen::Index n) {
  if (n <= 0 || a.rows() % n != 0) throw std::invalid_argument("block_mean_rows: bad block size");
  const Eigen::Index blocks = a.rows() / n;
  Matrix out(blocks, a.cols());
  for (Eigen::Index b = 0; b < blocks; ++b) out.row(b) = a.value().middleRows(b * n, n).colwise().mean();
  auto pa = a.node();
  return make_result(std::move(out), {pa}, [pa, n, blocks](Node& self) {
    Matrix g(pa->value.rows(), pa->value.cols());
    for (Eigen::Index b = 0; b < blocks; ++b) {
      g.middleRows(b * n, n) = (self.grad.row(b) / static_cast<double>(n)).replicate(n, 1);
    }
    pa->accumulate(g);
  });
}

Var masked_softmax_rows(const Var& scores, const Matrix& mask) {
  if (mask.rows() != scores.rows() || mask.cols() != scores.cols()) {
    throw std::invalid_argument("masked_softmax_rows: mask shape mismatch");
  }
  const Matrix& s = scores.value();
  Matrix out = Matrix::Zero(s.rows(), s.cols());
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    double best = -std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < s.cols(); ++c) {
      if (mask(r, c) != 0.0) best = std::max(best, s(r, c));
    }
    if (best == -std::numeric_limits<double>::infinity()) continue;
    double total = 0.0;
    for (Eigen::Index c = 0; c < s.cols(); ++c) {
      if (mask(r, c) != 0.0) {
        out(r, c) = std::exp(s(r, c) - best);
        total += out(r, c);
      }
    }
    out.row(r) /= total;
  }
  auto ps = scores.node();
  return make_result(std::move(out), {ps}, [ps](Node& self) {
    const Matrix& y = self.value;
    Matrix g(y.rows(), y.cols());
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const double dot = self.grad.row(r).dot(y.row(r));
      g.row(r) = y.row(r).cwiseProduct((self.grad.row(r).array() - dot).matrix());
    }
    ps->accumulate(g);
  });
}

Var pair_concat(const Var& z, Eigen::Index n) {
  if (n <= 0 || z.rows() % n != 0) throw std::invalid_argument("pair_concat: bad agent count");
  const Eigen::Index blocks = z.rows() / n;
  const Eigen::Index d = z.cols();
  Matrix out(blocks * n * n, 2 * d);
  for (Eigen::Index b = 0; b < blocks; ++b) {
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < n; ++j) {
        const Eigen::Index r = (b * n + i) * n + j;
        out.row(r).head(d) = z.value().row(b * n + i);
        out.row(r).tail(d) = z.value().row(b * n + j);
      }
    }
  }
  auto pz = z.node();
  return make_result(std::move(out), {pz}, [pz, n, blocks, d](Node& self) {
    Matrix g = Matrix::Zero(pz->value.rows(), d);
    for (Eigen::Index b = 0; b < blocks; ++b) {
      for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < n; ++j) {
          const Eigen::Index r = (b * n + i) * n + j;
          g.row(b * n + i) += self.grad.row(r).head(d);
          g.row(b * n + j) += self.grad.row(r).tail(d);
        }
      }
    }
    pz->accumulate(g);
  });
}

Var rowwise_bilinear(const Var& q, const Var& w, Eigen::Index e) {
  const Eigen::Index rows = q.rows();
  const Eigen::Index n = q.cols();
  if (w.rows() != rows || w.cols() != n * e) throw std::invalid_argument("rowwise_bilinear: shape mismatch");
  Matrix out = Matrix::Zero(rows, e);
  for (Eigen::Index b = 0; b < rows; ++b) {
    for (Eigen::Index i = 0; i < n; ++i) out.row(b) += q.value()(b, i) * w.value().row(b).segment(i * e, e);
  }
  auto pq = q.node(), pw = w.node();
  return make_result(std::move(out), {pq, pw}, [pq, pw, n, e](Node& self) {
    const Eigen::Index rows = self.grad.rows();
    if (pq->requires_grad) {
      Matrix g(rows, n);
      for (Eigen::Index b = 0; b < rows; ++b) {
        for (Eigen::Index i = 0; i < n; ++i) g(b, i) = self.grad.row(b).dot(pw->value.row(b).segment(i * e, e));
      }
      pq->accumulate(g);
    }
    if (pw->requires_grad) {
      Matrix g(rows, n * e);
      for (Eigen::Index b = 0; b < rows; ++b) {
        for (Eigen::Index i = 0; i < n; ++i) g.row(b).segment(i * e, e) = pq->value(b, i) * self.grad.row(b);
      }
      pw->accumulate(g);
    }
  });
}

}  // namespace ltscg::ad
