// Dense explicit-matrix references for the graph operators.
#pragma once

#include "ltscg/decoder.hpp"
#include "ltscg/rng.hpp"

#include <algorithm>
#include <vector>

namespace ltscg::testing {

using ad::Matrix;
using ad::Var;

// Random directed 0/1 graph; rows may have zero degree.
inline Matrix random_graph(int n, Rng& rng, double p = 0.5) {
  Matrix a(n, n);
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = rng.uniform() < p ? 1.0 : 0.0;
  return a;
}

inline Matrix pinv_row_normalize(const Matrix& a) {
  Matrix out = a;
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    const double s = a.row(r).sum();
    out.row(r) = s == 0.0 ? Eigen::RowVectorXd::Zero(a.cols()) : Eigen::RowVectorXd(a.row(r) / s);
  }
  return out;
}

// sum_k (D_O^+ A)^k Y w_{k,1} + (D_I^+ A^T)^k Y w_{k,2} for one n x n graph.
inline Matrix diffusion_oracle(const decoder::DiffusionWeights& w, const Matrix& a, const Matrix& y) {
  const Matrix pf = pinv_row_normalize(a);
  const Matrix pb = pinv_row_normalize(a.transpose());
  Matrix out = Matrix::Zero(y.rows(), w.forward[0].cols());
  Matrix fk = Matrix::Identity(a.rows(), a.rows());
  Matrix bk = fk;
  for (int k = 0; k <= w.degree(); ++k) {
    const auto ku = static_cast<std::size_t>(k);
    out += fk * y * w.forward[ku].value() + bk * y * w.backward[ku].value();
    fk = pf * fk;
    bk = pb * bk;
  }
  return out;
}

// ReLU(Â H W) per layer with Â = D^-1/2 (C . A) D^-1/2 formed explicitly.
inline Matrix gcn_oracle(const Matrix& a, const Matrix& c, const Matrix& h, const std::vector<Var>& layers) {
  const Matrix w = c.cwiseProduct(a);
  const Eigen::VectorXd d = w.rowwise().sum().cwiseSqrt().cwiseInverse();
  const Matrix norm = d.asDiagonal() * w * d.asDiagonal();
  Matrix out = h;
  for (const Var& l : layers) out = (norm * out * l.value()).cwiseMax(0.0);
  return out;
}

inline double relative_error(const Matrix& a, const Matrix& b) {
  return (a - b).norm() / std::max({a.norm(), b.norm(), 1e-300});
}

}  // namespace ltscg::testing
