// Parameter containers, dense layers and the optimizer shared by every model.
#pragma once

#include "ltscg/autodiff.hpp"
#include "ltscg/rng.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace ltscg::nn {

using ad::Matrix;
using ad::Var;

struct NamedParameter {
  std::string name;
  Var var;
};

// Ordered registry of trainable arrays. Order is the registration order and
// is what checkpoints, optimizers and target copies rely on.
class ParameterSet {
 public:
  Var add(const std::string& name, Matrix init);

  const std::vector<NamedParameter>& entries() const { return entries_; }
  std::size_t scalar_count() const;

  void zero_grad();
  // Copies values (not nodes) from a set with identical names and shapes.
  void copy_values_from(const ParameterSet& other);
  // Appends all parameters of `other` (sharing nodes) under a prefix.
  void extend(const ParameterSet& other);

  // FNV-1a over the raw bytes of every value; used for mutation checks.
  std::uint64_t hash() const;
  bool values_equal(const ParameterSet& other) const;

 private:
  std::vector<NamedParameter> entries_;
};

Matrix uniform_init(Eigen::Index rows, Eigen::Index cols, double bound, Rng& rng);

class Linear {
 public:
  Linear() = default;
  Linear(ParameterSet& params, const std::string& name, Eigen::Index in, Eigen::Index out, Rng& rng,
         bool bias = true);

  Var forward(const Var& x) const;

  const Var& weight() const { return weight_; }
  const Var& bias() const { return bias_; }
  Eigen::Index in_features() const { return weight_.rows(); }
  Eigen::Index out_features() const { return weight_.cols(); }

 private:
  Var weight_;
  Var bias_;
};

// Stack of linear layers with ReLU between them; the last layer is linear
// unless `relu_output` is set.
class Mlp {
 public:
  Mlp() = default;
  Mlp(ParameterSet& params, const std::string& name, const std::vector<Eigen::Index>& sizes, Rng& rng,
      bool relu_output);

  Var forward(const Var& x) const;

  const std::vector<Linear>& layers() const { return layers_; }

 private:
  std::vector<Linear> layers_;
  bool relu_output_ = false;
};

// Gated recurrent unit cell in the reset-gate-after-matmul form:
//   r = sig(x Wir + bir + h Whr + bhr), z = sig(x Wiz + biz + h Whz + bhz)
//   n = tanh(x Win + bin + r * (h Whn + bhn)),  h' = (1 - z) * n + z * h
class GruCell {
 public:
  GruCell() = default;
  GruCell(ParameterSet& params, const std::string& name, Eigen::Index in, Eigen::Index hidden, Rng& rng);

  Var forward(const Var& x, const Var& h) const;

  Eigen::Index hidden_size() const { return hidden_; }
  const Var& w_ih() const { return w_ih_; }
  const Var& w_hh() const { return w_hh_; }
  const Var& b_ih() const { return b_ih_; }
  const Var& b_hh() const { return b_hh_; }

 private:
  Var w_ih_, w_hh_, b_ih_, b_hh_;
  Eigen::Index hidden_ = 0;
};

struct AdamOptions {
  double learning_rate = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double max_grad_norm = 10.0;
};

class Adam {
 public:
  Adam() = default;
  Adam(const ParameterSet& params, AdamOptions options);

  // Clips the global gradient norm, applies one update and returns the
  // pre-clip norm. Parameters without a gradient are treated as zero-gradient.
  double step(ParameterSet& params);

  std::int64_t step_count() const { return step_count_; }
  std::vector<Matrix>& first_moments() { return m_; }
  std::vector<Matrix>& second_moments() { return v_; }
  const std::vector<Matrix>& first_moments() const { return m_; }
  const std::vector<Matrix>& second_moments() const { return v_; }
  void set_step_count(std::int64_t n) { step_count_ = n; }
  const AdamOptions& options() const { return options_; }

 private:
  AdamOptions options_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  std::int64_t step_count_ = 0;
};

}  // namespace ltscg::nn
