// Central finite-difference gradient checks for scalar-valued graphs.
#pragma once

#include "ltscg/autodiff.hpp"
#include "ltscg/rng.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace ltscg::testing {

using ad::Matrix;
using ad::Var;

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(lo, hi);
  return m;
}

// Reduces any output to a scalar with fixed random weights so every output
// entry contributes to the checked gradient.
inline Var project(const Var& out, std::uint64_t seed = 99) {
  Rng rng(seed);
  return ad::sum(ad::mul(out, ad::constant(random_matrix(out.rows(), out.cols(), rng))));
}

struct GradcheckResult {
  double max_relative_error = 0.0;      // worst over inputs
  double overall_relative_error = 0.0;  // over all inputs stacked into one vector
  std::size_t checked = 0;
};

// Relative error per input: ||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-8).
inline GradcheckResult gradcheck(const std::function<Var()>& f, std::vector<Var> inputs, double h = 1e-5) {
  for (auto& v : inputs) v.zero_grad();
  const Var out = f();
  ad::backward(out);
  std::vector<Matrix> analytic;
  for (const auto& v : inputs) {
    analytic.push_back(v.grad().size() ? v.grad() : Matrix::Zero(v.rows(), v.cols()));
  }
  GradcheckResult result;
  double diff_sq = 0.0, analytic_sq = 0.0, numeric_sq = 0.0;
  ad::NoGradGuard guard;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Var& v = inputs[k];
    Matrix numeric(v.rows(), v.cols());
    for (Eigen::Index i = 0; i < v.value().size(); ++i) {
      double& x = v.mutable_value().data()[i];
      const double saved = x;
      x = saved + h;
      const double up = f().scalar();
      x = saved - h;
      const double down = f().scalar();
      x = saved;
      numeric.data()[i] = (up - down) / (2.0 * h);
      ++result.checked;
    }
    const double scale = std::max({analytic[k].norm(), numeric.norm(), 1e-8});
    result.max_relative_error = std::max(result.max_relative_error, (analytic[k] - numeric).norm() / scale);
    diff_sq += (analytic[k] - numeric).squaredNorm();
    analytic_sq += analytic[k].squaredNorm();
    numeric_sq += numeric.squaredNorm();
  }
  result.overall_relative_error = std::sqrt(diff_sq) / std::max({std::sqrt(analytic_sq), std::sqrt(numeric_sq), 1e-8});
  return result;
}

}  // namespace ltscg::testing
