// Minimal reverse-mode automatic differentiation over dense row-major
// double matrices.
//
// Every tensor in the library is a 2-D matrix. Higher-rank data is flattened
// row-major: a [batch, n_agents, d] array lives in a (batch * n_agents) x d
// matrix whose row b * n_agents + i holds agent i of sample b. Per-sample
// square matrices (adjacencies, attention) are stacked the same way into a
// (batch * n) x n "block" matrix.
//
// Operations record a backward closure only when at least one input requires a
// gradient and gradient recording is enabled (see NoGradGuard), so pure
// inference paths allocate nothing beyond their results.
#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace ltscg::ad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ColVector = Eigen::VectorXd;

struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void accumulate(const Matrix& g);
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Matrix& value() const { return node_->value; }
  Matrix& mutable_value() { return node_->value; }
  const Matrix& grad() const { return node_->grad; }
  Matrix& mutable_grad() { return node_->grad; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  double scalar() const { return node_->value(0, 0); }
  bool defined() const { return static_cast<bool>(node_); }

  void zero_grad();

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Scoped switch that disables tape recording on the current thread.
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

Var constant(Matrix value);
Var parameter(Matrix value);
Var zeros(Eigen::Index rows, Eigen::Index cols);
Var scalar_constant(double v);

// Runs reverse accumulation from a 1x1 root. Gradients accumulate into every
// reachable node that requires them.
void backward(const Var& root);

// ---- elementwise / shape ---------------------------------------------------
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var add_row(const Var& a, const Var& row);     // broadcast a 1 x c row
Var mul_col(const Var& a, const Var& col);     // scale row r by col(r, 0)
Var one_minus(const Var& a);

Var sigmoid(const Var& a);
Var tanh(const Var& a);
Var relu(const Var& a);
Var elu(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var abs(const Var& a);
Var square(const Var& a);
Var pow(const Var& a, double p);
Var clamp(const Var& a, double lo, double hi);
// 1/x where x != 0, else 0 (Moore-Penrose inverse of a diagonal entry).
Var pinv_reciprocal(const Var& a);

Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);

Var sum(const Var& a);        // -> 1x1
Var sum_cols(const Var& a);   // -> rows x 1 (row sums)
Var sum_rows(const Var& a);   // -> 1 x cols (column sums)
Var row_norms(const Var& a);  // -> rows x 1, Euclidean norm of each row

Var reshape(const Var& a, Eigen::Index rows, Eigen::Index cols);
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count);
Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count);
// Picks rows by index; gradient scatters back.
Var gather_rows(const Var& a, std::span<const Eigen::Index> rows);
// out(r, 0) = a(r, cols[r]).
Var pick_cols(const Var& a, std::span<const Eigen::Index> cols);
// Multiplies each row by the 0/1 mask entry (constant).
Var mask_rows(const Var& a, const ColVector& mask);

// ---- block (per-sample square matrix) operations ---------------------------
// A is (B*n) x n, Y is (B*n) x d; out block b = A_b * Y_b.
Var block_matmul(const Var& a, const Var& y);
// out block b = A_b^T.
Var block_transpose(const Var& a);
// Q, K are (B*n) x d; out block b = Q_b * K_b^T, shape (B*n) x n.
Var block_matmul_nt(const Var& q, const Var& k, Eigen::Index n);
// out(b*n+i, j) = a(b*n+i, j) * d(b*n+j, 0).
Var block_scale_cols(const Var& a, const Var& d);
// Overwrites every block diagonal with `value`; gradient on the diagonal is 0.
Var set_block_diagonal(const Var& a, double value);
// Mean of the n rows of each block: (B*n) x d -> B x d.
Var block_mean_rows(const Var& a, Eigen::Index n);
// Softmax over the entries of each row where mask(r, j) != 0; others get 0.
Var masked_softmax_rows(const Var& scores, const Matrix& mask);
// Z is (B*n) x d; out row (b*n+i)*n + j = [z_{b,i} || z_{b,j}], shape (B*n*n) x 2d.
Var pair_concat(const Var& z, Eigen::Index n);

// ---- mixer helpers ----------------------------------------------------------
// q is B x n, w is B x (n*e); out(b, k) = sum_i q(b, i) * w(b, i*e + k).
Var rowwise_bilinear(const Var& q, const Var& w, Eigen::Index e);

}  // namespace ltscg::ad
