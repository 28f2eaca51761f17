// Run configuration: flat `key = value` text with typed parsing.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace ltscg::harness {

enum class Variant {
  LtsCg,           // trajectory graph, sampled, b = c = 1
  NoGraphLoss,     // trajectory graph, sampled, b = c = 0
  PredictOnly,     // c = 0
  InferOnly,       // b = 0
  OneStepDense,    // fully connected graph from current observations
  OneStepSparse,   // top-half attention graph from current observations
  DenseAttention,  // theta used directly as a weighted dense adjacency
  Qmix,            // no messages, no graph loss
};

Variant parse_variant(const std::string& name);
std::string variant_name(Variant v);
const std::vector<std::string>& variant_names();

// Whether the variant infers its graph from trajectories with the encoder.
bool uses_trajectory_graph(Variant v);

struct RunConfig {
  // environment
  std::string env = "gather";
  int n_agents = 6;
  int max_steps = 0;  // 0 = environment default
  double gamma = 0.99;

  // run
  std::uint64_t seed = 1;
  std::int64_t total_steps = 50000;
  std::string variant = "ltscg";
  int workers = 1;

  // graph encoder
  int graph_window = 10;
  int conv_kernel = 3;
  int conv_channels = 16;
  int embedding_dim = 64;
  int pair_hidden = 64;
  double temperature = 0.5;

  // graph decoder
  int diffusion_degree = 3;
  int dcrnn_hidden = 64;
  int gnn_hidden = 64;

  // agents and mixer
  int rnn_hidden = 64;
  int message_dim = 64;
  int mixer_embed = 32;

  // loss weights
  double lambda = 1.0;
  double weight_pre = 1.0;  // b
  double weight_inf = 1.0;  // c

  // optimisation
  double learning_rate = 5e-4;
  double grad_clip = 10.0;
  double epsilon_start = 1.0;
  double epsilon_finish = 0.05;
  std::int64_t epsilon_anneal_steps = 50000;
  int buffer_capacity = 5000;
  int batch_size = 32;
  int train_every_episodes = 1;
  int target_update_period = 200;
  int graph_refresh_period = 200;

  // evaluation and output
  std::int64_t eval_every_steps = 1000;
  int eval_episodes = 32;
  bool log_wallclock = false;

  // Parses `key = value` lines; '#' starts a comment. Unknown keys and
  // malformed values raise ConfigError naming the field.
  static RunConfig parse(const std::string& text);
  static RunConfig load(const std::string& path);
  std::string serialize() const;
  void set(const std::string& key, const std::string& value);
  void validate() const;

  Variant variant_tag() const { return parse_variant(variant); }
  // Loss weights after applying the variant's wiring.
  double effective_lambda() const;
  double effective_weight_pre() const;
  double effective_weight_inf() const;

  bool operator==(const RunConfig&) const = default;
};

}  // namespace ltscg::harness
