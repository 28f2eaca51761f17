// Graph-shaping losses.
//
// Predict-Future runs a one-layer diffusion-convolutional GRU over the
// observation window on the sampled graph and scores the one-step
// observation deltas it predicts. Infer-Present embeds current observations,
// reweights the sampled graph with neighbor attention, runs a two-layer
// normalized graph convolution and regresses the global state from the mean
// node feature.
#pragma once

#include "ltscg/autodiff.hpp"
#include "ltscg/encoder.hpp"
#include "ltscg/nn.hpp"

#include <array>
#include <string>
#include <vector>

namespace ltscg::decoder {

using ad::Matrix;
using ad::Var;

// Random-walk transition matrices of a (batch * n) x n block adjacency:
// forward = D_O^+ A, backward = D_I^+ A^T, with zero-degree rows mapped to 0.
struct DiffusionSupports {
  Var forward;
  Var backward;
};

DiffusionSupports diffusion_supports(const Var& adjacency);

// Per-hop weight matrices w_{k,1} (forward) and w_{k,2} (backward), k = 0..K,
// each d_in x d_out.
struct DiffusionWeights {
  std::vector<Var> forward;
  std::vector<Var> backward;

  int degree() const { return static_cast<int>(forward.size()) - 1; }
};

DiffusionWeights make_diffusion_weights(nn::ParameterSet& params, const std::string& name, int degree,
                                        Eigen::Index d_in, Eigen::Index d_out, Rng& rng);

// sum_k (P_f^k Y w_{k,1} + P_b^k Y w_{k,2}).
Var diffusion_convolution(const DiffusionWeights& weights, const DiffusionSupports& supports, const Var& y);

struct DcrnnConfig {
  int obs_dim = 0;
  int hidden = 64;
  int degree = 3;
};

class DcrnnCell {
 public:
  DcrnnCell(nn::ParameterSet& params, const std::string& name, DcrnnConfig config, Rng& rng);

  // R = sig(W_R * [O || H] + b_R), U = sig(W_U * [O || H] + b_U),
  // C = tanh(W_C * [O || R . H] + b_C), H' = U . H + (1 - U) . C.
  Var step(const DiffusionSupports& supports, const Var& observations, const Var& hidden) const;

  const DcrnnConfig& config() const { return config_; }
  const DiffusionWeights& reset_weights() const { return reset_; }
  const DiffusionWeights& update_weights() const { return update_; }
  const DiffusionWeights& candidate_weights() const { return candidate_; }
  const Var& reset_bias() const { return b_reset_; }
  const Var& update_bias() const { return b_update_; }
  const Var& candidate_bias() const { return b_candidate_; }

 private:
  DcrnnConfig config_;
  DiffusionWeights reset_, update_, candidate_;
  Var b_reset_, b_update_, b_candidate_;
};

// sum over valid transitions (mask[t] and mask[t+1]) and agents of
// || o_t + delta_t - o_{t+1} ||_2. deltas[t] is (batch * n) x obs_dim.
// A window of length 1 has no transition and yields 0.
Var predict_future_loss_from_deltas(const std::vector<Var>& deltas, const graph::TrajectoryBatch& window);

// Attention-weighted two-layer graph convolution with an observation MLP;
// used both for Infer-Present and for inter-agent messages.
struct AttentionGcnConfig {
  int obs_dim = 0;
  int hidden = 64;
  int layers = 2;
};

// Neighbor sets N_i = {j : A_ij > 0.5} plus i itself, or every agent when
// `dense` is set.
Matrix neighbor_mask(const Matrix& adjacency, bool dense);

// mu_ij = softmax_{j in N_i}(e_j^T W_a e_i); rows outside N_i are 0.
Var attention_edge_weights(const Var& embeddings, const Var& w_attention, const Matrix& neighbors);

// Â = D^-1/2 (C . A) D^-1/2 with D_ii = sum_j (C . A)_ij.
Var normalized_weighted_adjacency(const Var& adjacency, const Var& attention);

// H^l = ReLU(Â H^{l-1} W^{l-1}) for each weight in `layers`.
Var weighted_graph_convolution(const Var& adjacency, const Var& attention, const Var& h_in,
                               const std::vector<Var>& layers);

class AttentionGcn {
 public:
  AttentionGcn(nn::ParameterSet& params, const std::string& name, AttentionGcnConfig config, Rng& rng);

  Var embed(const Var& observations) const { return f_obs_.forward(observations); }

  struct Output {
    Var attention;  // (batch * n) x n
    Var nodes;      // (batch * n) x hidden
  };
  Output forward(const Var& observations, const Var& adjacency, const Matrix& neighbors) const;

  const AttentionGcnConfig& config() const { return config_; }
  const nn::Mlp& f_obs() const { return f_obs_; }
  const Var& w_attention() const { return w_attention_; }
  const std::vector<Var>& layers() const { return layers_; }

 private:
  AttentionGcnConfig config_;
  nn::Mlp f_obs_;
  Var w_attention_;
  std::vector<Var> layers_;
};

// Mean over the n agent rows of every block followed by a linear map.
Var graph_readout(const Var& nodes, int n_agents, const nn::Linear& projection);

// sum_t sum_b mask(b, t) * || g_t,b - s_t,b ||_2; graph_embeddings[t] and
// states[t] are batch x state_dim.
Var infer_present_loss(const std::vector<Var>& graph_embeddings, const std::vector<Matrix>& states,
                       const Matrix& mask);

// b * L_pre + c * L_inf.
Var graph_loss(const Var& predict_future, const Var& infer_present, double b, double c);

struct DecoderConfig {
  int obs_dim = 0;
  int state_dim = 0;
  int dcrnn_hidden = 64;
  int diffusion_degree = 3;
  int gnn_hidden = 64;
};

class GraphDecoder {
 public:
  GraphDecoder(nn::ParameterSet& params, const std::string& name, DecoderConfig config, Rng& rng);

  // Hidden-state outputs projected to observation deltas for every step.
  std::vector<Var> predict_deltas(const Var& adjacency, const graph::TrajectoryBatch& window) const;
  Var predict_future_loss(const Var& adjacency, const graph::TrajectoryBatch& window) const;

  // Per-step graph embeddings g_t (batch x state_dim).
  std::vector<Var> graph_embeddings(const Var& adjacency, const graph::TrajectoryBatch& window,
                                    bool dense_neighbors = false) const;
  Var infer_present_loss(const Var& adjacency, const graph::TrajectoryBatch& window,
                         bool dense_neighbors = false) const;

  const DecoderConfig& config() const { return config_; }
  const DcrnnCell& dcrnn() const { return dcrnn_; }
  const nn::Linear& delta_projection() const { return delta_projection_; }
  const AttentionGcn& inference_gcn() const { return gcn_; }
  const nn::Linear& readout() const { return readout_; }

 private:
  DecoderConfig config_;
  DcrnnCell dcrnn_;
  nn::Linear delta_projection_;
  AttentionGcn gcn_;
  nn::Linear readout_;
};

}  // namespace ltscg::decoder
