// Sparse graph construction from observation trajectories.
//
// Pipeline: a temporal convolution plus linear layer turns each agent's
// trajectory window into an embedding z_i; a two-layer pair predictor maps
// every ordered pair [z_i || z_j] to an edge probability theta_ij; a
// Gumbel-sigmoid relaxation draws a differentiable adjacency from theta.
#pragma once

#include "ltscg/autodiff.hpp"
#include "ltscg/nn.hpp"
#include "ltscg/rng.hpp"

#include <string>

namespace ltscg::graph {

using ad::Matrix;
using ad::Var;

// Observation windows for a batch of episodes.
//   observations: (batch * n_agents * window) x obs_dim, row (b, i, t)
//   states:       (batch * window) x state_dim, row (b, t); may be empty
//   mask:         batch x window, 1 for valid steps
// Masked-out observation and state rows are exactly zero.
struct TrajectoryBatch {
  int batch = 0;
  int n_agents = 0;
  int window = 0;
  int obs_dim = 0;
  Matrix observations;
  Matrix states;
  Matrix mask;

  TrajectoryBatch() = default;
  TrajectoryBatch(int batch, int n_agents, int window, int obs_dim, int state_dim);

  double& obs(int b, int i, int t, int k) { return observations(row(b, i, t), k); }
  double obs(int b, int i, int t, int k) const { return observations(row(b, i, t), k); }
  Eigen::Index row(int b, int i, int t) const {
    return (static_cast<Eigen::Index>(b) * n_agents + i) * window + t;
  }

  // (batch * n_agents) x obs_dim observations at step t.
  Matrix time_slice(int t) const;
  // batch x state_dim states at step t.
  Matrix state_slice(int t) const;
  // Column of length batch * n_agents with the step-t mask repeated per agent.
  ad::ColVector agent_mask(int t) const;
  // Zeros every masked-out row (restores the padding invariant).
  void apply_padding();
};

struct EncoderConfig {
  int obs_dim = 0;
  int window = 10;
  int kernel = 3;
  int channels = 16;
  int embedding_dim = 64;
  int pair_hidden = 64;
  double clamp_eps = 1e-6;

  void validate() const;
};

class GraphEncoder {
 public:
  GraphEncoder(nn::ParameterSet& params, const std::string& name, EncoderConfig config, Rng& rng);

  // z_i = FC(ReLU(Conv1d_time(O_i))); shared weights across agents.
  // Returns (batch * n_agents) x embedding_dim.
  Var extract_experience(const TrajectoryBatch& batch) const;

  // theta_ij = clamp(sigmoid(FC(ReLU(FC([z_i || z_j]))))), returned as a
  // (batch * n) x n block matrix. Directed: theta_ij != theta_ji in general.
  Var predict_pair_probabilities(const Var& z, int n_agents) const;

  Var encode(const TrajectoryBatch& batch) const {
    return predict_pair_probabilities(extract_experience(batch), batch.n_agents);
  }

  const EncoderConfig& config() const { return config_; }
  const nn::Linear& conv() const { return conv_; }
  const nn::Linear& fc() const { return fc_; }
  const nn::Linear& pair_hidden() const { return pair_hidden_; }
  const nn::Linear& pair_out() const { return pair_out_; }

  // Time-unfolded windows: rows (b, i, p) hold [o_p, ..., o_{p+kernel-1}].
  static Matrix unfold(const TrajectoryBatch& batch, int kernel);

 private:
  EncoderConfig config_;
  nn::Linear conv_;
  nn::Linear fc_;
  nn::Linear pair_hidden_;
  nn::Linear pair_out_;
};

// Independent standard Gumbel draws g1, g2 shaped like theta.
struct GumbelNoise {
  Matrix g1;
  Matrix g2;

  static GumbelNoise draw(Eigen::Index rows, Eigen::Index cols, Rng& rng);
  static GumbelNoise zero(Eigen::Index rows, Eigen::Index cols);
};

// A_ij = sigmoid((log(theta_ij / (1 - theta_ij)) + g1_ij - g2_ij) / s).
// Throws ConfigError for s <= 0.
Var relaxed_bernoulli(const Var& theta, double temperature, const GumbelNoise& noise);

// relaxed_bernoulli with every block diagonal overwritten to 1.
Var sample_adjacency(const Var& theta, double temperature, const GumbelNoise& noise);
Var sample_adjacency(const Var& theta, double temperature, Rng& rng);

// 1 where theta_ij > 0.5 (strict), else 0.
Matrix hard_adjacency(const Matrix& theta);
// hard_adjacency with unit block diagonals: the graph used at evaluation time.
Matrix evaluation_adjacency(const Matrix& theta);

// Fully connected graph (all ones) for `batch` samples of n agents.
Matrix fully_connected(int batch, int n_agents);

}  // namespace ltscg::graph
