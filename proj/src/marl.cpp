#include "ltscg/marl.hpp"

#include "ltscg/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace ltscg::marl {

AgentNetwork::AgentNetwork(nn::ParameterSet& params, const std::string& name, AgentConfig config, Rng& rng)
    : config_(config),
      encoder_(params, name + ".encoder", config.obs_dim + config.n_actions, config.hidden, rng),
      cell_(params, name + ".gru", config.hidden, config.hidden, rng),
      head_(params, name + ".head", config.hidden + config.message_dim, config.n_actions, rng) {}

AgentNetwork::Output AgentNetwork::forward(const Var& observations, const Var& last_actions, const Var& hidden,
                                           const Var& messages) const {
  const std::array<Var, 2> inputs{observations, last_actions};
  const Var x = ad::relu(encoder_.forward(ad::concat_cols(inputs)));
  const Var h = cell_.forward(x, hidden);
  const std::array<Var, 2> features{h, messages};
  return {head_.forward(ad::concat_cols(features)), h};
}

Matrix one_hot(const std::vector<int>& actions, int n_actions) {
  Matrix m = Matrix::Zero(static_cast<Eigen::Index>(actions.size()), n_actions);
  for (std::size_t r = 0; r < actions.size(); ++r) {
    if (actions[r] >= 0) m(static_cast<Eigen::Index>(r), actions[r]) = 1.0;
  }
  return m;
}

Var compute_messages(const decoder::AttentionGcn& network, const Var& observations, const Var& adjacency,
                     const Matrix& neighbors) {
  return network.forward(observations, adjacency, neighbors).nodes;
}

MonotoneMixer::MonotoneMixer(nn::ParameterSet& params, const std::string& name, MixerConfig config, Rng& rng)
    : config_(config),
      hyper_w1_(params, name + ".hyper_w1", config.state_dim, static_cast<Eigen::Index>(config.n_agents) * config.embed,
                rng),
      hyper_b1_(params, name + ".hyper_b1", config.state_dim, config.embed, rng),
      hyper_w2_(params, name + ".hyper_w2", config.state_dim, config.embed, rng),
      value_hidden_(params, name + ".value_hidden", config.state_dim, config.embed, rng),
      value_out_(params, name + ".value_out", config.embed, 1, rng) {}

Var MonotoneMixer::mix(const Var& q, const Var& states) const {
  if (q.cols() != config_.n_agents || q.rows() != states.rows()) throw ContractError("mix: shape mismatch");
  const Var w1 = ad::abs(hyper_w1_.forward(states));
  const Var b1 = hyper_b1_.forward(states);
  const Var hidden = ad::elu(ad::add(ad::rowwise_bilinear(q, w1, config_.embed), b1));
  const Var w2 = ad::abs(hyper_w2_.forward(states));
  const Var v = value_out_.forward(ad::relu(value_hidden_.forward(states)));
  return ad::add(ad::sum_cols(ad::mul(hidden, w2)), v);
}

int argmax_lowest(const Eigen::Ref<const Eigen::RowVectorXd>& row) {
  int best = 0;
  for (Eigen::Index a = 1; a < row.size(); ++a) {
    if (row(a) > row(best)) best = static_cast<int>(a);
  }
  return best;
}

std::vector<int> epsilon_greedy(const Matrix& q, double epsilon, Rng& rng) {
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw ContractError("epsilon_greedy: epsilon must lie in [0, 1]");
  std::vector<int> actions(static_cast<std::size_t>(q.rows()));
  for (Eigen::Index r = 0; r < q.rows(); ++r) {
    // Always consume one draw per agent so streams stay aligned across epsilon.
    const double u = rng.uniform();
    const std::uint64_t random_action = rng.below(static_cast<std::uint64_t>(q.cols()));
    actions[static_cast<std::size_t>(r)] =
        u < epsilon ? static_cast<int>(random_action) : argmax_lowest(q.row(r));
  }
  return actions;
}

double EpsilonSchedule::at(std::int64_t env_steps) const {
  if (anneal_steps <= 0 || env_steps >= anneal_steps) return finish;
  const double frac = static_cast<double>(env_steps) / static_cast<double>(anneal_steps);
  return start + (finish - start) * frac;
}

ReplayBuffer::ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
  if (capacity == 0) throw ConfigError("replay buffer capacity must be positive");
}

void ReplayBuffer::insert(env::EpisodeRecord episode, GraphAnnotation graph) {
  if (episodes_.size() == capacity_) episodes_.pop_front();
  episodes_.push_back({std::move(episode), std::move(graph), insertions_++});
}

std::vector<std::size_t> ReplayBuffer::sample_indices(std::size_t count, Rng& rng) const {
  if (count > episodes_.size()) throw ContractError("replay buffer: not enough episodes to sample");
  // Partial Fisher-Yates: distinct episodes in a batch.
  std::vector<std::size_t> pool(episodes_.size());
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(pool.size() - i));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(count);
  return pool;
}

void ReplayBuffer::restore(std::deque<StoredEpisode> episodes, std::uint64_t insertions) {
  if (episodes.size() > capacity_) throw LoadError("replay buffer: stored episodes exceed capacity");
  episodes_ = std::move(episodes);
  insertions_ = insertions;
}

bool TargetNetworkPair::maybe_update(std::int64_t trainer_step) {
  if (period <= 0) throw ConfigError("target update period must be positive");
  if (trainer_step % period != 0) return false;
  sync();
  return true;
}

void TargetNetworkPair::sync() { target->copy_values_from(*online); }

EpisodeBatch EpisodeBatch::from_episodes(const std::vector<const env::EpisodeRecord*>& episodes) {
  if (episodes.empty()) throw ContractError("episode batch: no episodes");
  const env::EnvSpec& spec = episodes.front()->spec;
  EpisodeBatch out;
  out.batch = static_cast<int>(episodes.size());
  out.n_agents = spec.n_agents;
  out.steps = spec.max_steps;
  out.n_actions = spec.n_actions;
  out.discount = spec.discount;
  const Eigen::Index rows = static_cast<Eigen::Index>(out.batch) * out.n_agents;
  out.rewards = Matrix::Zero(out.batch, out.steps);
  out.terminated = Matrix::Zero(out.batch, out.steps);
  out.mask = Matrix::Zero(out.batch, out.steps);
  for (int t = 0; t <= out.steps; ++t) {
    Matrix obs(rows, spec.obs_dim);
    Matrix states(out.batch, spec.state_dim);
    Matrix last = Matrix::Zero(rows, spec.n_actions);
    for (int b = 0; b < out.batch; ++b) {
      const env::EpisodeRecord& ep = *episodes[static_cast<std::size_t>(b)];
      if (!(ep.spec == spec)) throw ContractError("episode batch: mixed environment specs");
      const env::StepResult& step = ep.steps[static_cast<std::size_t>(t)];
      obs.middleRows(static_cast<Eigen::Index>(b) * out.n_agents, out.n_agents) = step.observations;
      states.row(b) = step.state.transpose();
      if (t > 0 && t <= ep.length) {
        const auto& prev = ep.actions[static_cast<std::size_t>(t) - 1];
        for (int i = 0; i < out.n_agents; ++i) {
          last(static_cast<Eigen::Index>(b) * out.n_agents + i, prev[static_cast<std::size_t>(i)]) = 1.0;
        }
      }
    }
    out.observations.push_back(std::move(obs));
    out.states.push_back(std::move(states));
    out.last_actions.push_back(std::move(last));
  }
  for (int t = 0; t < out.steps; ++t) {
    std::vector<Eigen::Index> chosen(static_cast<std::size_t>(rows));
    for (int b = 0; b < out.batch; ++b) {
      const env::EpisodeRecord& ep = *episodes[static_cast<std::size_t>(b)];
      for (int i = 0; i < out.n_agents; ++i) {
        chosen[static_cast<std::size_t>(b * out.n_agents + i)] =
            ep.actions[static_cast<std::size_t>(t)][static_cast<std::size_t>(i)];
      }
      out.rewards(b, t) = ep.reward(t);
      out.terminated(b, t) = ep.terminated(t) ? 1.0 : 0.0;
      out.mask(b, t) = ep.mask[static_cast<std::size_t>(t)];
    }
    out.actions.push_back(std::move(chosen));
  }
  return out;
}

Matrix one_step_sparse_graph(const decoder::AttentionGcn& network, const Matrix& observations, int n_agents) {
  ad::NoGradGuard guard;
  const Matrix dense = Matrix::Ones(observations.rows(), n_agents);
  const Var e = network.embed(ad::constant(observations));
  const Matrix attention = decoder::attention_edge_weights(e, network.w_attention(), dense).value();
  const int keep = (n_agents + 1) / 2;
  Matrix graph = Matrix::Zero(observations.rows(), n_agents);
  std::vector<int> order(static_cast<std::size_t>(n_agents));
  for (Eigen::Index r = 0; r < observations.rows(); ++r) {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return attention(r, a) > attention(r, b); });
    for (int k = 0; k < keep; ++k) graph(r, order[static_cast<std::size_t>(k)]) = 1.0;
    graph(r, r % n_agents) = 1.0;
  }
  return graph;
}

Var messages_for_step(const ValueNetworks& nets, const MessageGraph& graph, const Var& observations, int n_agents) {
  const Eigen::Index rows = observations.rows();
  switch (graph.kind) {
    case MessageGraph::Kind::None:
      return ad::zeros(rows, nets.agent->config().message_dim);
    case MessageGraph::Kind::Stored: {
      const Matrix neighbors = decoder::neighbor_mask(graph.adjacency, graph.dense_neighbors);
      return compute_messages(*nets.messenger, observations, ad::constant(graph.adjacency), neighbors);
    }
    case MessageGraph::Kind::OneStepDense: {
      const Matrix ones = Matrix::Ones(rows, n_agents);
      return compute_messages(*nets.messenger, observations, ad::constant(ones), ones);
    }
    case MessageGraph::Kind::OneStepSparse: {
      const Matrix sparse = one_step_sparse_graph(*nets.messenger, observations.value(), n_agents);
      return compute_messages(*nets.messenger, observations, ad::constant(sparse), sparse);
    }
  }
  throw ContractError("messages_for_step: unknown graph kind");
}

TdResult td_loss(const EpisodeBatch& batch, const MessageGraph& graph, const ValueNetworks& online,
                 const ValueNetworks& target) {
  const int B = batch.batch;
  const int n = batch.n_agents;
  const Eigen::Index rows = static_cast<Eigen::Index>(B) * n;

  // Target pass: per-agent greedy values under the target network, mixed on s_{t}.
  Matrix target_totals(B, batch.steps + 1);
  {
    ad::NoGradGuard guard;
    Var hidden = target.agent->initial_hidden(rows);
    for (int t = 0; t <= batch.steps; ++t) {
      const Var obs = ad::constant(batch.observations[static_cast<std::size_t>(t)]);
      const Var messages = messages_for_step(target, graph, obs, n);
      const auto out = target.agent->forward(obs, ad::constant(batch.last_actions[static_cast<std::size_t>(t)]),
                                             hidden, messages);
      hidden = out.hidden;
      const Matrix best = out.q.value().rowwise().maxCoeff();
      const Var q = ad::constant(Eigen::Map<const Matrix>(best.data(), B, n));
      target_totals.col(t) =
          target.mixer->mix(q, ad::constant(batch.states[static_cast<std::size_t>(t)])).value().col(0);
    }
  }

  TdResult result;
  result.chosen_q_total = Matrix::Zero(B, batch.steps);
  result.targets = Matrix::Zero(B, batch.steps);
  Var total = ad::scalar_constant(0.0);
  Var hidden = online.agent->initial_hidden(rows);
  for (int t = 0; t < batch.steps; ++t) {
    const ad::ColVector valid = batch.mask.col(t);
    if (valid.sum() == 0.0) break;
    const Var obs = ad::constant(batch.observations[static_cast<std::size_t>(t)]);
    const Var messages = messages_for_step(online, graph, obs, n);
    const auto out = online.agent->forward(obs, ad::constant(batch.last_actions[static_cast<std::size_t>(t)]), hidden,
                                           messages);
    hidden = out.hidden;
    const Var chosen = ad::reshape(ad::pick_cols(out.q, batch.actions[static_cast<std::size_t>(t)]), B, n);
    const Var q_total = online.mixer->mix(chosen, ad::constant(batch.states[static_cast<std::size_t>(t)]));
    Matrix y(B, 1);
    for (int b = 0; b < B; ++b) {
      const double bootstrap = batch.terminated(b, t) != 0.0 ? 0.0 : target_totals(b, t + 1);
      y(b, 0) = batch.rewards(b, t) + batch.discount * bootstrap;
    }
    result.chosen_q_total.col(t) = q_total.value().col(0);
    result.targets.col(t) = y.col(0);
    const Var err = ad::sub(ad::constant(y), q_total);
    total = ad::add(total, ad::sum(ad::mask_rows(ad::square(err), valid)));
  }
  result.loss = ad::scale(total, 1.0 / B);
  return result;
}

Var total_loss(const Var& td, const Var& graph_loss, double lambda) {
  if (lambda < 0.0) throw ContractError("total_loss: lambda must be non-negative");
  if (lambda == 0.0) return td;
  return ad::add(td, ad::scale(graph_loss, lambda));
}

}  // namespace ltscg::marl
