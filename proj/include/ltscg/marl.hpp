// Value-decomposition learner: recurrent per-agent utilities conditioned on
// graph messages, a state-conditioned monotone mixer, TD training against a
// periodically copied target network, and the episode replay buffer that
// stores each episode's inter-agent graph.
#pragma once

#include "ltscg/autodiff.hpp"
#include "ltscg/decoder.hpp"
#include "ltscg/encoder.hpp"
#include "ltscg/env.hpp"
#include "ltscg/nn.hpp"
#include "ltscg/rng.hpp"

#include <cstdint>
#include <deque>
#include <string>
#include <vector>

namespace ltscg::marl {

using ad::Matrix;
using ad::Var;

struct AgentConfig {
  int obs_dim = 0;
  int n_actions = 0;
  int hidden = 64;
  int message_dim = 64;
};

// Shared-parameter agent utility network: ReLU(Linear([o || onehot(a_prev)]))
// -> GRU -> Linear([h || m]) -> Q over actions.
class AgentNetwork {
 public:
  AgentNetwork(nn::ParameterSet& params, const std::string& name, AgentConfig config, Rng& rng);

  struct Output {
    Var q;       // rows x n_actions
    Var hidden;  // rows x hidden
  };
  Output forward(const Var& observations, const Var& last_actions, const Var& hidden, const Var& messages) const;

  Var initial_hidden(Eigen::Index rows) const { return ad::zeros(rows, config_.hidden); }

  const AgentConfig& config() const { return config_; }
  const nn::Linear& encoder() const { return encoder_; }
  const nn::GruCell& cell() const { return cell_; }
  const nn::Linear& head() const { return head_; }

 private:
  AgentConfig config_;
  nn::Linear encoder_;
  nn::GruCell cell_;
  nn::Linear head_;
};

// Rows x n_actions one-hot encoding (all zeros for action < 0).
Matrix one_hot(const std::vector<int>& actions, int n_actions);

// Per-agent messages m_i = H^2[i, :] from the attention-weighted graph
// convolution over the current observations.
Var compute_messages(const decoder::AttentionGcn& network, const Var& observations, const Var& adjacency,
                     const Matrix& neighbors);

struct MixerConfig {
  int n_agents = 0;
  int state_dim = 0;
  int embed = 32;
};

// Q_tot = w2(s)^T ELU(q^T |W1(s)| + b1(s)) + V(s) with w2 = |hyper_w2(s)|.
class MonotoneMixer {
 public:
  MonotoneMixer(nn::ParameterSet& params, const std::string& name, MixerConfig config, Rng& rng);

  // q: batch x n_agents, states: batch x state_dim -> batch x 1.
  Var mix(const Var& q, const Var& states) const;

  const MixerConfig& config() const { return config_; }
  const nn::Linear& hyper_w1() const { return hyper_w1_; }
  const nn::Linear& hyper_b1() const { return hyper_b1_; }
  const nn::Linear& hyper_w2() const { return hyper_w2_; }
  const nn::Linear& value_hidden() const { return value_hidden_; }
  const nn::Linear& value_out() const { return value_out_; }

 private:
  MixerConfig config_;
  nn::Linear hyper_w1_;
  nn::Linear hyper_b1_;
  nn::Linear hyper_w2_;
  nn::Linear value_hidden_;
  nn::Linear value_out_;
};

// With probability epsilon a uniform action, otherwise the lowest-index argmax.
std::vector<int> epsilon_greedy(const Matrix& q, double epsilon, Rng& rng);
int argmax_lowest(const Eigen::Ref<const Eigen::RowVectorXd>& row);

// Linear annealing from start to finish over `anneal_steps` environment steps.
struct EpsilonSchedule {
  double start = 1.0;
  double finish = 0.05;
  std::int64_t anneal_steps = 50000;

  double at(std::int64_t env_steps) const;
};

// Inter-agent graph attached to a stored episode.
struct GraphAnnotation {
  Matrix adjacency;  // n x n
  std::int64_t computed_at = -1;  // trainer step; -1 for the initial fully connected graph
};

struct StoredEpisode {
  env::EpisodeRecord episode;
  GraphAnnotation graph;
  std::uint64_t insertion_index = 0;
};

class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity);

  // Oldest episode is evicted when full.
  void insert(env::EpisodeRecord episode, GraphAnnotation graph);
  std::vector<std::size_t> sample_indices(std::size_t count, Rng& rng) const;

  std::size_t size() const { return episodes_.size(); }
  std::size_t capacity() const { return capacity_; }
  std::uint64_t insertions() const { return insertions_; }
  StoredEpisode& at(std::size_t i) { return episodes_[i]; }
  const StoredEpisode& at(std::size_t i) const { return episodes_[i]; }

  void restore(std::deque<StoredEpisode> episodes, std::uint64_t insertions);
  const std::deque<StoredEpisode>& episodes() const { return episodes_; }

 private:
  std::size_t capacity_;
  std::deque<StoredEpisode> episodes_;
  std::uint64_t insertions_ = 0;
};

// Hard copy of online values into the target every `period` trainer steps.
struct TargetNetworkPair {
  nn::ParameterSet* online = nullptr;
  nn::ParameterSet* target = nullptr;
  std::int64_t period = 200;

  // Returns true when a copy happened at this (1-based) trainer step.
  bool maybe_update(std::int64_t trainer_step);
  void sync();
};

// Time-major batch of whole episodes assembled for TD training.
struct EpisodeBatch {
  int batch = 0;
  int n_agents = 0;
  int steps = 0;  // max_steps
  int n_actions = 0;
  std::vector<Matrix> observations;      // steps + 1 entries, (batch * n) x obs_dim
  std::vector<Matrix> states;            // steps + 1 entries, batch x state_dim
  std::vector<Matrix> last_actions;      // steps + 1 entries, (batch * n) x n_actions
  std::vector<std::vector<Eigen::Index>> actions;  // steps entries, batch * n
  Matrix rewards;      // batch x steps
  Matrix terminated;   // batch x steps
  Matrix mask;         // batch x steps
  double discount = 0.99;

  static EpisodeBatch from_episodes(const std::vector<const env::EpisodeRecord*>& episodes);
};

// Supplies the adjacency and neighbor mask used for message passing at step t.
struct MessageGraph {
  enum class Kind { Stored, OneStepDense, OneStepSparse, None };
  Kind kind = Kind::Stored;
  Matrix adjacency;  // (batch * n) x n, for Kind::Stored
  bool dense_neighbors = false;
};

struct ValueNetworks {
  const AgentNetwork* agent = nullptr;
  const decoder::AttentionGcn* messenger = nullptr;
  const MonotoneMixer* mixer = nullptr;
};

// Per-step graph and messages for the configured message graph kind.
Var messages_for_step(const ValueNetworks& nets, const MessageGraph& graph, const Var& observations, int n_agents);

// Builds a (batch * n) x n one-step sparse graph: per row, the ceil(n/2)
// highest-attention neighbors on the fully connected graph plus self.
Matrix one_step_sparse_graph(const decoder::AttentionGcn& network, const Matrix& observations, int n_agents);

struct TdResult {
  Var loss;               // sum over valid steps of squared TD error, divided by batch
  Matrix chosen_q_total;  // batch x steps
  Matrix targets;         // batch x steps
};

// [r + gamma * (1 - term) * Q_tot'(s', argmax-per-agent Q') - Q_tot(s, a)]^2
// summed over valid steps and averaged over episodes.
TdResult td_loss(const EpisodeBatch& batch, const MessageGraph& graph, const ValueNetworks& online,
                 const ValueNetworks& target);

// L_TD + lambda * L_g.
Var total_loss(const Var& td, const Var& graph_loss, double lambda);

}  // namespace ltscg::marl
