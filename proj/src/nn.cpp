#include "ltscg/nn.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

namespace ltscg::nn {

Var ParameterSet::add(const std::string& name, Matrix init) {
  Var v = ad::parameter(std::move(init));
  entries_.push_back({name, v});
  return v;
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t total = 0;
  for (const auto& e : entries_) total += static_cast<std::size_t>(e.var.value().size());
  return total;
}

void ParameterSet::zero_grad() {
  for (auto& e : entries_) e.var.zero_grad();
}

void ParameterSet::copy_values_from(const ParameterSet& other) {
  if (other.entries_.size() != entries_.size()) throw std::invalid_argument("copy_values_from: size mismatch");
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& src = other.entries_[i];
    auto& dst = entries_[i];
    if (src.name != dst.name || src.var.rows() != dst.var.rows() || src.var.cols() != dst.var.cols()) {
      throw std::invalid_argument("copy_values_from: layout mismatch at " + dst.name);
    }
    dst.var.mutable_value() = src.var.value();
  }
}

void ParameterSet::extend(const ParameterSet& other) {
  entries_.insert(entries_.end(), other.entries_.begin(), other.entries_.end());
}

std::uint64_t ParameterSet::hash() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& e : entries_) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(e.var.value().data());
    const std::size_t count = static_cast<std::size_t>(e.var.value().size()) * sizeof(double);
    for (std::size_t i = 0; i < count; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  }
  return h;
}

bool ParameterSet::values_equal(const ParameterSet& other) const {
  if (other.entries_.size() != entries_.size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const Matrix& a = entries_[i].var.value();
    const Matrix& b = other.entries_[i].var.value();
    if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
    if (std::memcmp(a.data(), b.data(), static_cast<std::size_t>(a.size()) * sizeof(double)) != 0) return false;
  }
  return true;
}

Matrix uniform_init(Eigen::Index rows, Eigen::Index cols, double bound, Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-bound, bound);
  return m;
}

Linear::Linear(ParameterSet& params, const std::string& name, Eigen::Index in, Eigen::Index out, Rng& rng,
               bool bias) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  weight_ = params.add(name + ".weight", uniform_init(in, out, bound, rng));
  if (bias) bias_ = params.add(name + ".bias", uniform_init(1, out, bound, rng));
}

Var Linear::forward(const Var& x) const {
  Var y = ad::matmul(x, weight_);
  return bias_.defined() ? ad::add_row(y, bias_) : y;
}

Mlp::Mlp(ParameterSet& params, const std::string& name, const std::vector<Eigen::Index>& sizes, Rng& rng,
         bool relu_output)
    : relu_output_(relu_output) {
  if (sizes.size() < 2) throw std::invalid_argument("Mlp: need at least input and output sizes");
  for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
    layers_.emplace_back(params, name + "." + std::to_string(i), sizes[i], sizes[i + 1], rng);
  }
}

Var Mlp::forward(const Var& x) const {
  Var h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    h = layers_[i].forward(h);
    if (i + 1 < layers_.size() || relu_output_) h = ad::relu(h);
  }
  return h;
}

GruCell::GruCell(ParameterSet& params, const std::string& name, Eigen::Index in, Eigen::Index hidden, Rng& rng)
    : hidden_(hidden) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
  w_ih_ = params.add(name + ".w_ih", uniform_init(in, 3 * hidden, bound, rng));
  w_hh_ = params.add(name + ".w_hh", uniform_init(hidden, 3 * hidden, bound, rng));
  b_ih_ = params.add(name + ".b_ih", uniform_init(1, 3 * hidden, bound, rng));
  b_hh_ = params.add(name + ".b_hh", uniform_init(1, 3 * hidden, bound, rng));
}

Var GruCell::forward(const Var& x, const Var& h) const {
  const Var gi = ad::add_row(ad::matmul(x, w_ih_), b_ih_);
  const Var gh = ad::add_row(ad::matmul(h, w_hh_), b_hh_);
  const Eigen::Index H = hidden_;
  const Var r = ad::sigmoid(ad::add(ad::slice_cols(gi, 0, H), ad::slice_cols(gh, 0, H)));
  const Var z = ad::sigmoid(ad::add(ad::slice_cols(gi, H, H), ad::slice_cols(gh, H, H)));
  const Var n = ad::tanh(ad::add(ad::slice_cols(gi, 2 * H, H), ad::mul(r, ad::slice_cols(gh, 2 * H, H))));
  return ad::add(ad::mul(ad::one_minus(z), n), ad::mul(z, h));
}

Adam::Adam(const ParameterSet& params, AdamOptions options) : options_(options) {
  for (const auto& e : params.entries()) {
    m_.push_back(Matrix::Zero(e.var.rows(), e.var.cols()));
    v_.push_back(Matrix::Zero(e.var.rows(), e.var.cols()));
  }
}

double Adam::step(ParameterSet& params) {
  const auto& entries = params.entries();
  if (entries.size() != m_.size()) throw std::invalid_argument("Adam: parameter set changed");
  double sq = 0.0;
  for (const auto& e : entries) {
    if (e.var.grad().size() != 0) sq += e.var.grad().squaredNorm();
  }
  const double norm = std::sqrt(sq);
  const double clip = (options_.max_grad_norm > 0.0 && norm > options_.max_grad_norm)
                          ? options_.max_grad_norm / (norm + 1e-6)
                          : 1.0;
  ++step_count_;
  const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(step_count_));
  const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(step_count_));
  for (std::size_t i = 0; i < entries.size(); ++i) {
    Var var = entries[i].var;
    Matrix g = var.grad().size() != 0 ? Matrix(var.grad() * clip) : Matrix::Zero(var.rows(), var.cols());
    m_[i] = options_.beta1 * m_[i] + (1.0 - options_.beta1) * g;
    v_[i] = options_.beta2 * v_[i] + (1.0 - options_.beta2) * g.cwiseProduct(g);
    Matrix& w = var.mutable_value();
    for (Eigen::Index k = 0; k < w.size(); ++k) {
      const double mhat = m_[i].data()[k] / bc1;
      const double vhat = v_[i].data()[k] / bc2;
      w.data()[k] -= options_.learning_rate * mhat / (std::sqrt(vhat) + options_.epsilon);
    }
  }
  return norm;
}

}  // namespace ltscg::nn
