#include "ltscg/encoder.hpp"

#include "ltscg/errors.hpp"

#include <cmath>

namespace ltscg::graph {

TrajectoryBatch::TrajectoryBatch(int batch_, int n_agents_, int window_, int obs_dim_, int state_dim)
    : batch(batch_), n_agents(n_agents_), window(window_), obs_dim(obs_dim_) {
  observations = Matrix::Zero(static_cast<Eigen::Index>(batch) * n_agents * window, obs_dim);
  states = Matrix::Zero(static_cast<Eigen::Index>(batch) * window, state_dim);
  mask = Matrix::Zero(batch, window);
}

Matrix TrajectoryBatch::time_slice(int t) const {
  Matrix out(static_cast<Eigen::Index>(batch) * n_agents, obs_dim);
  for (int b = 0; b < batch; ++b) {
    for (int i = 0; i < n_agents; ++i) out.row(static_cast<Eigen::Index>(b) * n_agents + i) = observations.row(row(b, i, t));
  }
  return out;
}

Matrix TrajectoryBatch::state_slice(int t) const {
  Matrix out(batch, states.cols());
  for (int b = 0; b < batch; ++b) out.row(b) = states.row(static_cast<Eigen::Index>(b) * window + t);
  return out;
}

ad::ColVector TrajectoryBatch::agent_mask(int t) const {
  ad::ColVector m(static_cast<Eigen::Index>(batch) * n_agents);
  for (int b = 0; b < batch; ++b) {
    for (int i = 0; i < n_agents; ++i) m(static_cast<Eigen::Index>(b) * n_agents + i) = mask(b, t);
  }
  return m;
}

void TrajectoryBatch::apply_padding() {
  for (int b = 0; b < batch; ++b) {
    for (int t = 0; t < window; ++t) {
      if (mask(b, t) != 0.0) continue;
      for (int i = 0; i < n_agents; ++i) observations.row(row(b, i, t)).setZero();
      if (states.size() != 0) states.row(static_cast<Eigen::Index>(b) * window + t).setZero();
    }
  }
}

void EncoderConfig::validate() const {
  if (obs_dim <= 0) throw ConfigError("encoder: obs_dim must be positive");
  if (kernel <= 0 || channels <= 0 || embedding_dim <= 0 || pair_hidden <= 0) {
    throw ConfigError("encoder: layer sizes must be positive");
  }
  if (window < kernel) {
    throw ConfigError("encoder: window length " + std::to_string(window) + " is shorter than the convolution kernel " +
                      std::to_string(kernel));
  }
  if (!(clamp_eps > 0.0 && clamp_eps < 0.5)) throw ConfigError("encoder: clamp_eps must lie in (0, 0.5)");
}

GraphEncoder::GraphEncoder(nn::ParameterSet& params, const std::string& name, EncoderConfig config, Rng& rng)
    : config_(config) {
  config_.validate();
  const int positions = config_.window - config_.kernel + 1;
  conv_ = nn::Linear(params, name + ".conv", static_cast<Eigen::Index>(config_.kernel) * config_.obs_dim,
                     config_.channels, rng);
  fc_ = nn::Linear(params, name + ".fc", static_cast<Eigen::Index>(positions) * config_.channels,
                   config_.embedding_dim, rng);
  pair_hidden_ = nn::Linear(params, name + ".pair_hidden", 2 * config_.embedding_dim, config_.pair_hidden, rng);
  pair_out_ = nn::Linear(params, name + ".pair_out", config_.pair_hidden, 1, rng);
}

Matrix GraphEncoder::unfold(const TrajectoryBatch& batch, int kernel) {
  const int positions = batch.window - kernel + 1;
  Matrix out(static_cast<Eigen::Index>(batch.batch) * batch.n_agents * positions,
             static_cast<Eigen::Index>(kernel) * batch.obs_dim);
  Eigen::Index r = 0;
  for (int b = 0; b < batch.batch; ++b) {
    for (int i = 0; i < batch.n_agents; ++i) {
      for (int p = 0; p < positions; ++p, ++r) {
        for (int k = 0; k < kernel; ++k) {
          out.row(r).segment(static_cast<Eigen::Index>(k) * batch.obs_dim, batch.obs_dim) =
              batch.observations.row(batch.row(b, i, p + k));
        }
      }
    }
  }
  return out;
}

Var GraphEncoder::extract_experience(const TrajectoryBatch& batch) const {
  if (batch.window != config_.window) {
    throw ConfigError("encoder: batch window " + std::to_string(batch.window) + " does not match configured window " +
                      std::to_string(config_.window));
  }
  if (batch.obs_dim != config_.obs_dim) throw ConfigError("encoder: observation width mismatch");
  const int positions = config_.window - config_.kernel + 1;
  const Var windows = ad::constant(unfold(batch, config_.kernel));
  const Var conv = ad::relu(conv_.forward(windows));
  const Var flat = ad::reshape(conv, static_cast<Eigen::Index>(batch.batch) * batch.n_agents,
                               static_cast<Eigen::Index>(positions) * config_.channels);
  return fc_.forward(flat);
}

Var GraphEncoder::predict_pair_probabilities(const Var& z, int n_agents) const {
  const Var pairs = ad::pair_concat(z, n_agents);
  const Var hidden = ad::relu(pair_hidden_.forward(pairs));
  const Var logits = ad::reshape(pair_out_.forward(hidden), z.rows(), n_agents);
  return ad::clamp(ad::sigmoid(logits), config_.clamp_eps, 1.0 - config_.clamp_eps);
}

GumbelNoise GumbelNoise::draw(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  GumbelNoise n{Matrix(rows, cols), Matrix(rows, cols)};
  for (Eigen::Index k = 0; k < n.g1.size(); ++k) {
    n.g1.data()[k] = rng.gumbel();
    n.g2.data()[k] = rng.gumbel();
  }
  return n;
}

GumbelNoise GumbelNoise::zero(Eigen::Index rows, Eigen::Index cols) {
  return {Matrix::Zero(rows, cols), Matrix::Zero(rows, cols)};
}

Var relaxed_bernoulli(const Var& theta, double temperature, const GumbelNoise& noise) {
  if (!(temperature > 0.0)) throw ConfigError("sample_adjacency: temperature must be positive");
  if (noise.g1.rows() != theta.rows() || noise.g1.cols() != theta.cols()) {
    throw ContractError("sample_adjacency: noise shape does not match theta");
  }
  const Var log_odds = ad::sub(ad::log(theta), ad::log(ad::one_minus(theta)));
  const Var perturbed = ad::add(log_odds, ad::constant(noise.g1 - noise.g2));
  return ad::sigmoid(ad::scale(perturbed, 1.0 / temperature));
}

Var sample_adjacency(const Var& theta, double temperature, const GumbelNoise& noise) {
  return ad::set_block_diagonal(relaxed_bernoulli(theta, temperature, noise), 1.0);
}

Var sample_adjacency(const Var& theta, double temperature, Rng& rng) {
  if (!(temperature > 0.0)) throw ConfigError("sample_adjacency: temperature must be positive");
  return sample_adjacency(theta, temperature, GumbelNoise::draw(theta.rows(), theta.cols(), rng));
}

Matrix hard_adjacency(const Matrix& theta) {
  return theta.unaryExpr([](double p) { return p > 0.5 ? 1.0 : 0.0; });
}

Matrix evaluation_adjacency(const Matrix& theta) {
  Matrix a = hard_adjacency(theta);
  const Eigen::Index n = a.cols();
  for (Eigen::Index r = 0; r < a.rows(); ++r) a(r, r % n) = 1.0;
  return a;
}

Matrix fully_connected(int batch, int n_agents) {
  return Matrix::Ones(static_cast<Eigen::Index>(batch) * n_agents, n_agents);
}

}  // namespace ltscg::graph
