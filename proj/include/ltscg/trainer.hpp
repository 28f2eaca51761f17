// End-to-end training, evaluation, ablation, graph snapshot export and the
// graph-inference scaling benchmark.
#pragma once

#include "ltscg/config.hpp"
#include "ltscg/decoder.hpp"
#include "ltscg/encoder.hpp"
#include "ltscg/env.hpp"
#include "ltscg/marl.hpp"
#include "ltscg/nn.hpp"
#include "ltscg/rng.hpp"

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace ltscg::harness {

using ad::Matrix;

// Every network of one run. Online parameters are grouped so the optimizer,
// target copies and checkpoints see a fixed registration order.
class Model {
 public:
  Model(const RunConfig& config, const env::EnvSpec& spec);

  nn::ParameterSet encoder_params;
  nn::ParameterSet decoder_params;
  nn::ParameterSet value_params;   // agent + messenger + mixer
  nn::ParameterSet target_params;  // target copies of value_params
  nn::ParameterSet all_online;     // encoder + decoder + value (shared nodes)

  std::unique_ptr<graph::GraphEncoder> encoder;
  std::unique_ptr<decoder::GraphDecoder> decoder;
  std::unique_ptr<marl::AgentNetwork> agent;
  std::unique_ptr<decoder::AttentionGcn> messenger;
  std::unique_ptr<marl::MonotoneMixer> mixer;
  std::unique_ptr<marl::AgentNetwork> target_agent;
  std::unique_ptr<decoder::AttentionGcn> target_messenger;
  std::unique_ptr<marl::MonotoneMixer> target_mixer;

  marl::ValueNetworks online_networks() const { return {agent.get(), messenger.get(), mixer.get()}; }
  marl::ValueNetworks target_networks() const {
    return {target_agent.get(), target_messenger.get(), target_mixer.get()};
  }
};

// Observation windows [end - window, end) of each episode, clipped at 0 and
// zero-padded at the tail. `end` counts pre-action observations.
graph::TrajectoryBatch make_window(const std::vector<const env::EpisodeRecord*>& episodes,
                                   const std::vector<int>& ends, int window);

struct MetricsRecord {
  std::int64_t step = 0;
  std::int64_t episodes = 0;
  std::int64_t trainer_steps = 0;
  double return_mean = 0.0;
  double return_std = 0.0;
  double loss_td = 0.0;
  double loss_pre = 0.0;
  double loss_inf = 0.0;
  double epsilon = 0.0;
  double graph_inference_ms = 0.0;  // wall clock; only written when log_wallclock is set

  std::string to_json(bool with_wallclock) const;
  static MetricsRecord from_json(const std::string& line);
};

struct EvalResult {
  std::vector<double> returns;
  double mean = 0.0;
  double std = 0.0;
};

struct TrainStepStats {
  double loss_td = 0.0;
  double loss_pre = 0.0;
  double loss_inf = 0.0;
  double grad_norm = 0.0;
};

// One captured evaluation step for the case-study export.
struct GraphSnapshot {
  int step = 0;
  Matrix theta;      // n x n
  Matrix adjacency;  // n x n, hard (unit diagonal)
  Matrix attention;  // n x n, row-stochastic
};

class Trainer {
 public:
  explicit Trainer(RunConfig config);

  const RunConfig& config() const { return config_; }
  const env::EnvSpec& spec() const { return spec_; }
  Model& model() { return *model_; }
  const Model& model() const { return *model_; }
  marl::ReplayBuffer& buffer() { return buffer_; }
  std::int64_t env_steps() const { return env_steps_; }
  std::int64_t trainer_steps() const { return trainer_steps_; }
  std::int64_t episodes() const { return episodes_; }

  using MetricsSink = std::function<void(const MetricsRecord&)>;

  // Trains until `until_steps` environment steps (defaults to total_steps),
  // evaluating every eval_every_steps and once more at the end.
  void run(const MetricsSink& sink, std::optional<std::int64_t> until_steps = std::nullopt);

  // Collects one exploratory episode and stores it with its graph annotation.
  const env::EpisodeRecord& collect_episode();
  TrainStepStats train_step();

  struct LossTerms {
    ad::Var total;
    ad::Var td;
    ad::Var predict_future;  // already divided by the batch size
    ad::Var infer_present;   // already divided by the batch size
  };
  // Full training objective on stored episodes with frozen Gumbel noise for
  // the graph-loss sample ((batch * n) x n). Deterministic given the inputs.
  LossTerms compute_loss(const std::vector<const marl::StoredEpisode*>& batch,
                         const graph::GumbelNoise& noise) const;

  // Greedy episodes with hard graphs; never mutates parameters.
  EvalResult evaluate(int episodes, std::uint64_t seed) const;
  std::vector<GraphSnapshot> capture_snapshots(std::uint64_t seed, const std::vector<int>& steps) const;

  // Graph annotation for a stored episode given the current encoder.
  marl::GraphAnnotation annotate(const env::EpisodeRecord& episode, Rng& rng) const;

  void save(std::ostream& out) const;
  void save(const std::string& path) const;
  // When `expected` is given, a checkpoint whose network layout differs from
  // it raises LoadError.
  static Trainer load(std::istream& in, const RunConfig* expected = nullptr);
  static Trainer load(const std::string& path, const RunConfig* expected = nullptr);

  const Rng& rollout_rng() const { return rollout_rng_; }
  const Rng& train_rng() const { return train_rng_; }

  std::uint64_t eval_seed() const { return derive_seed(config_.seed, 0xe7a1); }
  std::uint64_t episode_seed(std::int64_t index) const;

 private:
  struct RolloutOptions {
    double epsilon = 0.0;
    bool greedy_graphs = false;  // hard graphs (evaluation) vs sampled
    std::vector<int> capture_steps;
  };
  std::vector<env::EpisodeRecord> rollout(const std::vector<std::uint64_t>& seeds, const RolloutOptions& options,
                                          Rng& rng, std::vector<GraphSnapshot>* snapshots) const;
  Matrix acting_graph(const std::vector<env::EpisodeRecord>& episodes, int t, bool greedy, Rng& rng,
                      Matrix* theta_out) const;
  marl::MessageGraph message_graph_for(const Matrix& stacked) const;

  RunConfig config_;
  Variant variant_;
  env::EnvSpec spec_;
  std::unique_ptr<Model> model_;
  nn::Adam optimizer_;
  marl::ReplayBuffer buffer_;
  marl::EpsilonSchedule schedule_;
  Rng rollout_rng_;
  Rng train_rng_;
  std::int64_t env_steps_ = 0;
  std::int64_t trainer_steps_ = 0;
  std::int64_t episodes_ = 0;
  std::int64_t next_eval_ = 0;
  // Loss sums since the last evaluation.
  double acc_td_ = 0.0, acc_pre_ = 0.0, acc_inf_ = 0.0;
  std::int64_t acc_count_ = 0;
  mutable double graph_seconds_ = 0.0;
};

// Writes the config echo header and one JSON record per evaluation.
class MetricsWriter {
 public:
  MetricsWriter(std::ostream& out, const RunConfig& config);
  void write(const MetricsRecord& record);

 private:
  std::ostream& out_;
  bool wallclock_;
};

struct TrainOutcome {
  std::vector<MetricsRecord> metrics;
  std::string metrics_text;
  std::string checkpoint_bytes;
};

// Runs a full training job in memory; used by the CLI and the acceptance suite.
TrainOutcome train(const RunConfig& config);
TrainOutcome ablate(RunConfig config, const std::string& variant);

// Snapshot text: per matrix a header "<step> <name> <n>" followed by n rows
// of n values with 9 significant digits. Names: theta, adjacency, attention.
void write_snapshots(std::ostream& out, const std::vector<GraphSnapshot>& snapshots);
struct SnapshotMatrix {
  int step = 0;
  std::string name;
  Matrix values;
};
std::vector<SnapshotMatrix> read_snapshots(std::istream& in);

struct ScalingRow {
  int n_agents = 0;
  int window = 0;
  double seconds = 0.0;  // median over trials
};

struct ScalingReport {
  std::vector<ScalingRow> rows;
  double slope = 0.0;  // least-squares slope of log(seconds) vs log(n)
};

// Times per-step graph inference (extract + pair-predict + sample) across a
// rollout of `window` steps for each agent count.
ScalingReport scaling_benchmark(const std::vector<int>& n_list, int window, int trials, int obs_dim = 8,
                                std::uint64_t seed = 7);
double loglog_slope(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace ltscg::harness
