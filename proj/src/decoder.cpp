#include "ltscg/decoder.hpp"

#include "ltscg/errors.hpp"

#include <cmath>

namespace ltscg::decoder {

namespace {

Var row_normalize(const Var& a) { return ad::mul_col(a, ad::pinv_reciprocal(ad::sum_cols(a))); }

}  // namespace

DiffusionSupports diffusion_supports(const Var& adjacency) {
  return {row_normalize(adjacency), row_normalize(ad::block_transpose(adjacency))};
}

DiffusionWeights make_diffusion_weights(nn::ParameterSet& params, const std::string& name, int degree,
                                        Eigen::Index d_in, Eigen::Index d_out, Rng& rng) {
  if (degree < 0) throw ConfigError("diffusion degree must be non-negative");
  DiffusionWeights w;
  const double bound = 1.0 / std::sqrt(static_cast<double>(d_in * (degree + 1)));
  for (int k = 0; k <= degree; ++k) {
    w.forward.push_back(params.add(name + ".fwd" + std::to_string(k), nn::uniform_init(d_in, d_out, bound, rng)));
    w.backward.push_back(params.add(name + ".bwd" + std::to_string(k), nn::uniform_init(d_in, d_out, bound, rng)));
  }
  return w;
}

Var diffusion_convolution(const DiffusionWeights& weights, const DiffusionSupports& supports, const Var& y) {
  Var fwd = y;
  Var bwd = y;
  Var out;
  for (int k = 0; k <= weights.degree(); ++k) {
    if (k > 0) {
      fwd = ad::block_matmul(supports.forward, fwd);
      bwd = ad::block_matmul(supports.backward, bwd);
    }
    const auto ku = static_cast<std::size_t>(k);
    const Var term = ad::add(ad::matmul(fwd, weights.forward[ku]), ad::matmul(bwd, weights.backward[ku]));
    out = out.defined() ? ad::add(out, term) : term;
  }
  return out;
}

DcrnnCell::DcrnnCell(nn::ParameterSet& params, const std::string& name, DcrnnConfig config, Rng& rng)
    : config_(config) {
  if (config.obs_dim <= 0 || config.hidden <= 0) throw ConfigError("dcrnn: sizes must be positive");
  const Eigen::Index d_in = config.obs_dim + config.hidden;
  reset_ = make_diffusion_weights(params, name + ".reset", config.degree, d_in, config.hidden, rng);
  update_ = make_diffusion_weights(params, name + ".update", config.degree, d_in, config.hidden, rng);
  candidate_ = make_diffusion_weights(params, name + ".candidate", config.degree, d_in, config.hidden, rng);
  b_reset_ = params.add(name + ".reset.bias", Matrix::Zero(1, config.hidden));
  b_update_ = params.add(name + ".update.bias", Matrix::Zero(1, config.hidden));
  b_candidate_ = params.add(name + ".candidate.bias", Matrix::Zero(1, config.hidden));
}

Var DcrnnCell::step(const DiffusionSupports& supports, const Var& observations, const Var& hidden) const {
  const std::array<Var, 2> joint{observations, hidden};
  const Var x = ad::concat_cols(joint);
  const Var r = ad::sigmoid(ad::add_row(diffusion_convolution(reset_, supports, x), b_reset_));
  const Var u = ad::sigmoid(ad::add_row(diffusion_convolution(update_, supports, x), b_update_));
  const std::array<Var, 2> gated{observations, ad::mul(r, hidden)};
  const Var c =
      ad::tanh(ad::add_row(diffusion_convolution(candidate_, supports, ad::concat_cols(gated)), b_candidate_));
  return ad::add(ad::mul(u, hidden), ad::mul(ad::one_minus(u), c));
}

Var predict_future_loss_from_deltas(const std::vector<Var>& deltas, const graph::TrajectoryBatch& window) {
  Var total = ad::scalar_constant(0.0);
  for (int t = 0; t + 1 < window.window; ++t) {
    ad::ColVector valid = window.agent_mask(t).cwiseProduct(window.agent_mask(t + 1));
    if (valid.sum() == 0.0) continue;
    const Var current = ad::constant(window.time_slice(t));
    const Var next = ad::constant(window.time_slice(t + 1));
    const Var error = ad::sub(ad::add(current, deltas[static_cast<std::size_t>(t)]), next);
    total = ad::add(total, ad::sum(ad::mask_rows(ad::row_norms(error), valid)));
  }
  return total;
}

Matrix neighbor_mask(const Matrix& adjacency, bool dense) {
  const Eigen::Index n = adjacency.cols();
  Matrix mask = dense ? Matrix::Ones(adjacency.rows(), n) : graph::hard_adjacency(adjacency);
  for (Eigen::Index r = 0; r < mask.rows(); ++r) mask(r, r % n) = 1.0;
  return mask;
}

Var attention_edge_weights(const Var& embeddings, const Var& w_attention, const Matrix& neighbors) {
  const Var queries = ad::matmul(embeddings, ad::transpose(w_attention));
  const Var scores = ad::block_matmul_nt(queries, embeddings, neighbors.cols());
  return ad::masked_softmax_rows(scores, neighbors);
}

Var normalized_weighted_adjacency(const Var& adjacency, const Var& attention) {
  const Var weighted = ad::mul(attention, adjacency);
  const Var inv_sqrt = ad::pow(ad::sum_cols(weighted), -0.5);
  return ad::mul_col(ad::block_scale_cols(weighted, inv_sqrt), inv_sqrt);
}

Var weighted_graph_convolution(const Var& adjacency, const Var& attention, const Var& h_in,
                               const std::vector<Var>& layers) {
  const Var normalized = normalized_weighted_adjacency(adjacency, attention);
  Var h = h_in;
  for (const Var& w : layers) h = ad::relu(ad::block_matmul(normalized, ad::matmul(h, w)));
  return h;
}

AttentionGcn::AttentionGcn(nn::ParameterSet& params, const std::string& name, AttentionGcnConfig config, Rng& rng)
    : config_(config) {
  if (config.obs_dim <= 0 || config.hidden <= 0 || config.layers <= 0) throw ConfigError("gcn: sizes must be positive");
  f_obs_ = nn::Mlp(params, name + ".f_obs", {config.obs_dim, config.hidden, config.hidden}, rng, false);
  const double bound = 1.0 / std::sqrt(static_cast<double>(config.hidden));
  w_attention_ = params.add(name + ".w_attention", nn::uniform_init(config.hidden, config.hidden, bound, rng));
  for (int l = 0; l < config.layers; ++l) {
    layers_.push_back(
        params.add(name + ".gcn" + std::to_string(l), nn::uniform_init(config.hidden, config.hidden, bound, rng)));
  }
}

AttentionGcn::Output AttentionGcn::forward(const Var& observations, const Var& adjacency,
                                           const Matrix& neighbors) const {
  const Var e = embed(observations);
  const Var c = attention_edge_weights(e, w_attention_, neighbors);
  return {c, weighted_graph_convolution(adjacency, c, e, layers_)};
}

Var graph_readout(const Var& nodes, int n_agents, const nn::Linear& projection) {
  return projection.forward(ad::block_mean_rows(nodes, n_agents));
}

Var infer_present_loss(const std::vector<Var>& graph_embeddings, const std::vector<Matrix>& states,
                       const Matrix& mask) {
  if (graph_embeddings.size() != states.size()) throw ContractError("infer_present_loss: step count mismatch");
  Var total = ad::scalar_constant(0.0);
  for (std::size_t t = 0; t < states.size(); ++t) {
    const ad::ColVector valid = mask.col(static_cast<Eigen::Index>(t));
    if (valid.sum() == 0.0) continue;
    const Var error = ad::sub(graph_embeddings[t], ad::constant(states[t]));
    total = ad::add(total, ad::sum(ad::mask_rows(ad::row_norms(error), valid)));
  }
  return total;
}

Var graph_loss(const Var& predict_future, const Var& infer_present, double b, double c) {
  if (b < 0.0 || c < 0.0) throw ContractError("graph_loss: weights must be non-negative");
  return ad::add(ad::scale(predict_future, b), ad::scale(infer_present, c));
}

GraphDecoder::GraphDecoder(nn::ParameterSet& params, const std::string& name, DecoderConfig config, Rng& rng)
    : config_(config),
      dcrnn_(params, name + ".dcrnn", {config.obs_dim, config.dcrnn_hidden, config.diffusion_degree}, rng),
      delta_projection_(params, name + ".delta", config.dcrnn_hidden, config.obs_dim, rng),
      gcn_(params, name + ".inference", {config.obs_dim, config.gnn_hidden, 2}, rng),
      readout_(params, name + ".readout", config.gnn_hidden, config.state_dim, rng) {}

std::vector<Var> GraphDecoder::predict_deltas(const Var& adjacency, const graph::TrajectoryBatch& window) const {
  const DiffusionSupports supports = diffusion_supports(adjacency);
  Var hidden = ad::zeros(static_cast<Eigen::Index>(window.batch) * window.n_agents, config_.dcrnn_hidden);
  std::vector<Var> deltas;
  for (int t = 0; t + 1 < window.window; ++t) {
    hidden = dcrnn_.step(supports, ad::constant(window.time_slice(t)), hidden);
    deltas.push_back(delta_projection_.forward(hidden));
  }
  return deltas;
}

Var GraphDecoder::predict_future_loss(const Var& adjacency, const graph::TrajectoryBatch& window) const {
  if (window.window < 2) return ad::scalar_constant(0.0);
  return predict_future_loss_from_deltas(predict_deltas(adjacency, window), window);
}

std::vector<Var> GraphDecoder::graph_embeddings(const Var& adjacency, const graph::TrajectoryBatch& window,
                                                bool dense_neighbors) const {
  const Matrix neighbors = neighbor_mask(adjacency.value(), dense_neighbors);
  std::vector<Var> out;
  for (int t = 0; t < window.window; ++t) {
    const auto result = gcn_.forward(ad::constant(window.time_slice(t)), adjacency, neighbors);
    out.push_back(graph_readout(result.nodes, window.n_agents, readout_));
  }
  return out;
}

Var GraphDecoder::infer_present_loss(const Var& adjacency, const graph::TrajectoryBatch& window,
                                     bool dense_neighbors) const {
  std::vector<Matrix> states;
  for (int t = 0; t < window.window; ++t) states.push_back(window.state_slice(t));
  return decoder::infer_present_loss(graph_embeddings(adjacency, window, dense_neighbors), states, window.mask);
}

}  // namespace ltscg::decoder
