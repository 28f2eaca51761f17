#include "ltscg/trainer.hpp"

#include "ltscg/errors.hpp"
#include "ltscg/serialize.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace ltscg::harness {

using ad::Var;

namespace {

constexpr char kMagic[8] = {'L', 'T', 'S', 'C', 'G', 'C', 'K', '1'};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

env::EnvSpec resolve_spec(const RunConfig& config) {
  auto environment = env::make_environment(config.env, config.n_agents, config.max_steps);
  env::EnvSpec spec = environment->spec();
  spec.discount = config.gamma;
  return spec;
}

std::unique_ptr<env::Environment> fresh_env(const RunConfig& config) {
  return env::make_environment(config.env, config.n_agents, config.max_steps);
}

// Copies block b (n rows) of a stacked (batch * n) x n matrix.
Matrix block(const Matrix& stacked, int b, int n) { return stacked.middleRows(static_cast<Eigen::Index>(b) * n, n); }

EvalResult summarize(std::vector<double> returns) {
  EvalResult out;
  out.returns = std::move(returns);
  if (out.returns.empty()) return out;
  const double n = static_cast<double>(out.returns.size());
  out.mean = std::accumulate(out.returns.begin(), out.returns.end(), 0.0) / n;
  double sq = 0.0;
  for (double r : out.returns) sq += (r - out.mean) * (r - out.mean);
  out.std = std::sqrt(sq / n);
  return out;
}

// Fields that fix the shape of every network and of the environment.
std::vector<std::pair<std::string, std::string>> layout_of(const RunConfig& c) {
  return {{"env", c.env},
          {"n_agents", std::to_string(c.n_agents)},
          {"max_steps", std::to_string(c.max_steps)},
          {"graph_window", std::to_string(c.graph_window)},
          {"conv_kernel", std::to_string(c.conv_kernel)},
          {"conv_channels", std::to_string(c.conv_channels)},
          {"embedding_dim", std::to_string(c.embedding_dim)},
          {"pair_hidden", std::to_string(c.pair_hidden)},
          {"dcrnn_hidden", std::to_string(c.dcrnn_hidden)},
          {"diffusion_degree", std::to_string(c.diffusion_degree)},
          {"gnn_hidden", std::to_string(c.gnn_hidden)},
          {"rnn_hidden", std::to_string(c.rnn_hidden)},
          {"message_dim", std::to_string(c.message_dim)},
          {"mixer_embed", std::to_string(c.mixer_embed)}};
}

void put_params(io::BinaryWriter& w, const nn::ParameterSet& params) {
  w.put<std::uint64_t>(params.entries().size());
  for (const auto& p : params.entries()) {
    w.put_string(p.name);
    w.put_matrix(p.var.value());
  }
}

void get_params(io::BinaryReader& r, nn::ParameterSet& params) {
  const auto count = r.get<std::uint64_t>();
  if (count != params.entries().size()) throw LoadError("checkpoint: parameter count mismatch");
  for (const auto& p : params.entries()) {
    const std::string name = r.get_string();
    Matrix value = r.get_matrix();
    if (name != p.name) throw LoadError("checkpoint: expected parameter '" + p.name + "', found '" + name + "'");
    if (value.rows() != p.var.rows() || value.cols() != p.var.cols()) {
      throw LoadError("checkpoint: shape mismatch for parameter '" + name + "'");
    }
    Var var = p.var;
    var.mutable_value() = std::move(value);
  }
}

void put_step(io::BinaryWriter& w, const env::StepResult& s) {
  w.put_matrix(s.observations);
  w.put_matrix(Matrix(s.state.transpose()));
  w.put<double>(s.reward);
  w.put<std::uint8_t>(s.terminated ? 1 : 0);
  w.put<std::int32_t>(s.step_index);
}

env::StepResult get_step(io::BinaryReader& r) {
  env::StepResult s;
  s.observations = r.get_matrix();
  const Matrix state = r.get_matrix();
  s.state = state.transpose();
  s.reward = r.get<double>();
  s.terminated = r.get<std::uint8_t>() != 0;
  s.step_index = r.get<std::int32_t>();
  return s;
}

}  // namespace

Model::Model(const RunConfig& config, const env::EnvSpec& spec) {
  Rng rng(derive_seed(config.seed, 0x11));
  graph::EncoderConfig ec;
  ec.obs_dim = spec.obs_dim;
  ec.window = config.graph_window;
  ec.kernel = config.conv_kernel;
  ec.channels = config.conv_channels;
  ec.embedding_dim = config.embedding_dim;
  ec.pair_hidden = config.pair_hidden;
  encoder = std::make_unique<graph::GraphEncoder>(encoder_params, "encoder", ec, rng);

  decoder::DecoderConfig dc{spec.obs_dim, spec.state_dim, config.dcrnn_hidden, config.diffusion_degree,
                            config.gnn_hidden};
  decoder = std::make_unique<decoder::GraphDecoder>(decoder_params, "decoder", dc, rng);

  const marl::AgentConfig ac{spec.obs_dim, spec.n_actions, config.rnn_hidden, config.message_dim};
  const decoder::AttentionGcnConfig gc{spec.obs_dim, config.gnn_hidden, 2};
  const marl::MixerConfig mc{spec.n_agents, spec.state_dim, config.mixer_embed};
  agent = std::make_unique<marl::AgentNetwork>(value_params, "agent", ac, rng);
  messenger = std::make_unique<decoder::AttentionGcn>(value_params, "messenger", gc, rng);
  mixer = std::make_unique<marl::MonotoneMixer>(value_params, "mixer", mc, rng);

  target_agent = std::make_unique<marl::AgentNetwork>(target_params, "agent", ac, rng);
  target_messenger = std::make_unique<decoder::AttentionGcn>(target_params, "messenger", gc, rng);
  target_mixer = std::make_unique<marl::MonotoneMixer>(target_params, "mixer", mc, rng);
  target_params.copy_values_from(value_params);

  all_online.extend(encoder_params);
  all_online.extend(decoder_params);
  all_online.extend(value_params);
}

graph::TrajectoryBatch make_window(const std::vector<const env::EpisodeRecord*>& episodes,
                                   const std::vector<int>& ends, int window) {
  if (episodes.empty() || episodes.size() != ends.size()) throw ContractError("make_window: episodes/ends mismatch");
  const env::EnvSpec& spec = episodes.front()->spec;
  graph::TrajectoryBatch out(static_cast<int>(episodes.size()), spec.n_agents, window, spec.obs_dim, spec.state_dim);
  for (std::size_t b = 0; b < episodes.size(); ++b) {
    const env::EpisodeRecord& ep = *episodes[b];
    const int end = ends[b];
    if (end < 1 || end > static_cast<int>(ep.steps.size())) throw ContractError("make_window: end out of range");
    const int start = std::max(0, end - window);
    for (int t = 0; t < end - start; ++t) {
      const env::StepResult& s = ep.steps[static_cast<std::size_t>(start + t)];
      for (int i = 0; i < spec.n_agents; ++i) {
        out.observations.row(out.row(static_cast<int>(b), i, t)) = s.observations.row(i);
      }
      out.states.row(static_cast<Eigen::Index>(b) * window + t) = s.state.transpose();
      out.mask(static_cast<Eigen::Index>(b), t) = 1.0;
    }
  }
  return out;
}

std::string MetricsRecord::to_json(bool with_wallclock) const {
  nlohmann::ordered_json j;
  j["step"] = step;
  j["episodes"] = episodes;
  j["trainer_steps"] = trainer_steps;
  j["return_mean"] = return_mean;
  j["return_std"] = return_std;
  j["loss_td"] = loss_td;
  j["loss_pre"] = loss_pre;
  j["loss_inf"] = loss_inf;
  j["epsilon"] = epsilon;
  if (with_wallclock) j["graph_inference_ms"] = graph_inference_ms;
  return j.dump();
}

MetricsRecord MetricsRecord::from_json(const std::string& line) {
  const auto j = nlohmann::json::parse(line);
  MetricsRecord r;
  r.step = j.at("step").get<std::int64_t>();
  r.episodes = j.at("episodes").get<std::int64_t>();
  r.trainer_steps = j.at("trainer_steps").get<std::int64_t>();
  r.return_mean = j.at("return_mean").get<double>();
  r.return_std = j.at("return_std").get<double>();
  r.loss_td = j.at("loss_td").get<double>();
  r.loss_pre = j.at("loss_pre").get<double>();
  r.loss_inf = j.at("loss_inf").get<double>();
  r.epsilon = j.at("epsilon").get<double>();
  if (j.contains("graph_inference_ms")) r.graph_inference_ms = j.at("graph_inference_ms").get<double>();
  return r;
}

Trainer::Trainer(RunConfig config)
    : config_(std::move(config)),
      variant_((config_.validate(), config_.variant_tag())),
      spec_(resolve_spec(config_)),
      model_(std::make_unique<Model>(config_, spec_)),
      optimizer_(model_->all_online, nn::AdamOptions{config_.learning_rate, 0.9, 0.999, 1e-8, config_.grad_clip}),
      buffer_(static_cast<std::size_t>(config_.buffer_capacity)),
      schedule_{config_.epsilon_start, config_.epsilon_finish, config_.epsilon_anneal_steps},
      rollout_rng_(derive_seed(config_.seed, 0x21)),
      train_rng_(derive_seed(config_.seed, 0x31)) {
  if (config_.workers != 1) throw ConfigError("config field 'workers': only single-worker training is supported");
}

std::uint64_t Trainer::episode_seed(std::int64_t index) const {
  return derive_seed(config_.seed, 1000 + static_cast<std::uint64_t>(index));
}

marl::MessageGraph Trainer::message_graph_for(const Matrix& stacked) const {
  marl::MessageGraph g;
  switch (variant_) {
    case Variant::Qmix:
      g.kind = marl::MessageGraph::Kind::None;
      break;
    case Variant::OneStepDense:
      g.kind = marl::MessageGraph::Kind::OneStepDense;
      break;
    case Variant::OneStepSparse:
      g.kind = marl::MessageGraph::Kind::OneStepSparse;
      break;
    default:
      g.kind = marl::MessageGraph::Kind::Stored;
      g.adjacency = stacked;
      g.dense_neighbors = variant_ == Variant::DenseAttention;
      break;
  }
  return g;
}

Matrix Trainer::acting_graph(const std::vector<env::EpisodeRecord>& episodes, int t, bool greedy, Rng& rng,
                             Matrix* theta_out) const {
  const int n = spec_.n_agents;
  const int E = static_cast<int>(episodes.size());
  const bool need_theta = theta_out != nullptr;
  if (!uses_trajectory_graph(variant_) && !need_theta) return {};
  if (!greedy && trainer_steps_ == 0 && !need_theta) return graph::fully_connected(E, n);

  const auto start = Clock::now();
  std::vector<const env::EpisodeRecord*> ptrs;
  for (const auto& ep : episodes) ptrs.push_back(&ep);
  const graph::TrajectoryBatch window = make_window(ptrs, std::vector<int>(ptrs.size(), t + 1), config_.graph_window);
  ad::NoGradGuard guard;
  const Var theta = model_->encoder->encode(window);
  if (theta_out) *theta_out = theta.value();
  Matrix adjacency;
  if (!uses_trajectory_graph(variant_)) {
    adjacency = Matrix();
  } else if (!greedy && trainer_steps_ == 0) {
    adjacency = graph::fully_connected(E, n);
  } else if (variant_ == Variant::DenseAttention) {
    adjacency = ad::set_block_diagonal(theta, 1.0).value();
  } else if (greedy) {
    adjacency = graph::evaluation_adjacency(theta.value());
  } else {
    adjacency = graph::sample_adjacency(theta, config_.temperature, rng).value();
  }
  graph_seconds_ += seconds_since(start);
  return adjacency;
}

std::vector<env::EpisodeRecord> Trainer::rollout(const std::vector<std::uint64_t>& seeds, const RolloutOptions& options,
                                                 Rng& rng, std::vector<GraphSnapshot>* snapshots) const {
  const int E = static_cast<int>(seeds.size());
  const int n = spec_.n_agents;
  const int A = spec_.n_actions;
  const auto T = static_cast<std::size_t>(spec_.max_steps);
  const Eigen::Index rows = static_cast<Eigen::Index>(E) * n;

  std::vector<std::unique_ptr<env::Environment>> envs;
  std::vector<env::EpisodeRecord> records(static_cast<std::size_t>(E));
  std::vector<bool> active(static_cast<std::size_t>(E), true);
  for (int e = 0; e < E; ++e) {
    envs.push_back(fresh_env(config_));
    auto& rec = records[static_cast<std::size_t>(e)];
    rec.spec = spec_;
    rec.seed = seeds[static_cast<std::size_t>(e)];
    rec.steps.assign(T + 1, env::StepResult::zeros(spec_));
    rec.actions.assign(T, env::JointAction(static_cast<std::size_t>(n), 0));
    rec.mask.assign(T, 0);
    rec.steps[0] = envs.back()->reset(rec.seed);
  }

  ad::NoGradGuard guard;
  const marl::ValueNetworks nets = model_->online_networks();
  Var hidden = model_->agent->initial_hidden(rows);
  Matrix last_actions = Matrix::Zero(rows, A);
  for (int t = 0; t < spec_.max_steps; ++t) {
    if (std::none_of(active.begin(), active.end(), [](bool a) { return a; })) break;
    Matrix obs = Matrix::Zero(rows, spec_.obs_dim);
    for (int e = 0; e < E; ++e) {
      if (active[static_cast<std::size_t>(e)]) {
        obs.middleRows(static_cast<Eigen::Index>(e) * n, n) =
            records[static_cast<std::size_t>(e)].steps[static_cast<std::size_t>(t)].observations;
      }
    }
    const bool capture = snapshots && std::find(options.capture_steps.begin(), options.capture_steps.end(), t) !=
                                          options.capture_steps.end();
    Matrix theta;
    const Matrix adjacency = acting_graph(records, t, options.greedy_graphs, rng, capture ? &theta : nullptr);
    const marl::MessageGraph graph = message_graph_for(adjacency);
    const Var obs_var = ad::constant(obs);
    const Var messages = marl::messages_for_step(nets, graph, obs_var, n);
    const auto out = model_->agent->forward(obs_var, ad::constant(last_actions), hidden, messages);
    hidden = out.hidden;

    if (capture) {
      GraphSnapshot snap;
      snap.step = t;
      snap.theta = block(theta, 0, n);
      const Matrix hard = graph::evaluation_adjacency(theta);
      snap.adjacency = block(hard, 0, n);
      // Attention over the graph the agents actually message on.
      Matrix used = adjacency;
      bool dense = variant_ == Variant::DenseAttention;
      if (graph.kind == marl::MessageGraph::Kind::OneStepDense || graph.kind == marl::MessageGraph::Kind::None) {
        used = Matrix::Ones(rows, n);
        dense = true;
      } else if (graph.kind == marl::MessageGraph::Kind::OneStepSparse) {
        used = marl::one_step_sparse_graph(*model_->messenger, obs, n);
      }
      const Matrix neighbors = decoder::neighbor_mask(used, dense);
      const auto att = model_->messenger->forward(obs_var, ad::constant(used), neighbors);
      snap.attention = block(att.attention.value(), 0, n);
      snapshots->push_back(std::move(snap));
    }

    const std::vector<int> actions = marl::epsilon_greedy(out.q.value(), options.epsilon, rng);
    std::vector<int> fed(actions.size(), -1);
    for (int e = 0; e < E; ++e) {
      if (!active[static_cast<std::size_t>(e)]) continue;
      auto& rec = records[static_cast<std::size_t>(e)];
      env::JointAction joint(actions.begin() + e * n, actions.begin() + (e + 1) * n);
      std::copy(joint.begin(), joint.end(), fed.begin() + e * n);
      env::StepResult res = envs[static_cast<std::size_t>(e)]->step(joint);
      rec.actions[static_cast<std::size_t>(t)] = std::move(joint);
      rec.mask[static_cast<std::size_t>(t)] = 1;
      rec.length = t + 1;
      if (res.terminated) active[static_cast<std::size_t>(e)] = false;
      rec.steps[static_cast<std::size_t>(t) + 1] = std::move(res);
    }
    last_actions = marl::one_hot(fed, A);
  }
  return records;
}

marl::GraphAnnotation Trainer::annotate(const env::EpisodeRecord& episode, Rng& rng) const {
  marl::GraphAnnotation ann;
  const int n = spec_.n_agents;
  if (!uses_trajectory_graph(variant_)) {
    ann.adjacency = Matrix::Ones(n, n);
    ann.computed_at = -1;
    return ann;
  }
  if (trainer_steps_ == 0) {
    ann.adjacency = graph::fully_connected(1, n);
    ann.computed_at = -1;
    return ann;
  }
  const auto start = Clock::now();
  ad::NoGradGuard guard;
  const graph::TrajectoryBatch window = make_window({&episode}, {std::max(1, episode.length)}, config_.graph_window);
  const Var theta = model_->encoder->encode(window);
  if (variant_ == Variant::DenseAttention) {
    ann.adjacency = ad::set_block_diagonal(theta, 1.0).value();
  } else {
    ann.adjacency = graph::sample_adjacency(theta, config_.temperature, rng).value();
  }
  ann.computed_at = trainer_steps_;
  graph_seconds_ += seconds_since(start);
  return ann;
}

const env::EpisodeRecord& Trainer::collect_episode() {
  RolloutOptions options;
  options.epsilon = schedule_.at(env_steps_);
  options.greedy_graphs = false;
  auto records = rollout({episode_seed(episodes_)}, options, rollout_rng_, nullptr);
  env::EpisodeRecord& rec = records.front();
  marl::GraphAnnotation ann = annotate(rec, rollout_rng_);
  env_steps_ += rec.length;
  ++episodes_;
  buffer_.insert(std::move(rec), std::move(ann));
  return buffer_.episodes().back().episode;
}

Trainer::LossTerms Trainer::compute_loss(const std::vector<const marl::StoredEpisode*>& batch,
                                         const graph::GumbelNoise& noise) const {
  if (batch.empty()) throw ContractError("compute_loss: empty batch");
  const int n = spec_.n_agents;
  const int B = static_cast<int>(batch.size());
  std::vector<const env::EpisodeRecord*> episodes;
  std::vector<int> ends;
  Matrix stacked(static_cast<Eigen::Index>(B) * n, n);
  for (int b = 0; b < B; ++b) {
    const marl::StoredEpisode& s = *batch[static_cast<std::size_t>(b)];
    episodes.push_back(&s.episode);
    ends.push_back(std::max(1, s.episode.length));
    stacked.middleRows(static_cast<Eigen::Index>(b) * n, n) = s.graph.adjacency;
  }
  marl::EpisodeBatch eb = marl::EpisodeBatch::from_episodes(episodes);
  eb.discount = config_.gamma;

  LossTerms out;
  const marl::TdResult td =
      marl::td_loss(eb, message_graph_for(stacked), model_->online_networks(), model_->target_networks());
  out.td = td.loss;

  const double lambda = config_.effective_lambda();
  const double b_w = config_.effective_weight_pre();
  const double c_w = config_.effective_weight_inf();
  if (!uses_trajectory_graph(variant_)) {
    out.predict_future = ad::scalar_constant(0.0);
    out.infer_present = ad::scalar_constant(0.0);
    out.total = marl::total_loss(out.td, ad::scalar_constant(0.0), 0.0);
    return out;
  }

  const graph::TrajectoryBatch window = make_window(episodes, ends, config_.graph_window);
  const bool pre_grad = lambda > 0.0 && b_w > 0.0;
  const bool inf_grad = lambda > 0.0 && c_w > 0.0;
  const bool dense = variant_ == Variant::DenseAttention;
  const double inv_b = 1.0 / static_cast<double>(B);

  auto build = [&]() {
    const Var theta = model_->encoder->encode(window);
    return dense ? ad::set_block_diagonal(theta, 1.0) : graph::sample_adjacency(theta, config_.temperature, noise);
  };
  Var adjacency;
  if (pre_grad || inf_grad) {
    adjacency = build();
  } else {
    ad::NoGradGuard guard;
    adjacency = build();
  }
  if (pre_grad) {
    out.predict_future = ad::scale(model_->decoder->predict_future_loss(adjacency, window), inv_b);
  } else {
    ad::NoGradGuard guard;
    out.predict_future = ad::scale(model_->decoder->predict_future_loss(adjacency, window), inv_b);
  }
  if (inf_grad) {
    out.infer_present = ad::scale(model_->decoder->infer_present_loss(adjacency, window, dense), inv_b);
  } else {
    ad::NoGradGuard guard;
    out.infer_present = ad::scale(model_->decoder->infer_present_loss(adjacency, window, dense), inv_b);
  }
  const Var lg = decoder::graph_loss(out.predict_future, out.infer_present, b_w, c_w);
  out.total = marl::total_loss(out.td, lg, lambda);
  return out;
}

TrainStepStats Trainer::train_step() {
  const auto batch_size = static_cast<std::size_t>(config_.batch_size);
  const std::vector<std::size_t> indices = buffer_.sample_indices(batch_size, train_rng_);
  const int n = spec_.n_agents;

  graph::GumbelNoise noise;
  if (uses_trajectory_graph(variant_) && variant_ != Variant::DenseAttention) {
    noise = graph::GumbelNoise::draw(static_cast<Eigen::Index>(indices.size()) * n, n, train_rng_);
  } else {
    noise = graph::GumbelNoise::zero(static_cast<Eigen::Index>(indices.size()) * n, n);
  }

  // Stale annotations take this batch's sample (the same draw the graph loss sees).
  if (uses_trajectory_graph(variant_) && trainer_steps_ > 0) {
    std::vector<std::size_t> stale;
    for (std::size_t k = 0; k < indices.size(); ++k) {
      const marl::GraphAnnotation& g = buffer_.at(indices[k]).graph;
      if (g.computed_at < 0 || trainer_steps_ - g.computed_at > config_.graph_refresh_period) stale.push_back(k);
    }
    if (!stale.empty()) {
      std::vector<const env::EpisodeRecord*> episodes;
      std::vector<int> ends;
      for (std::size_t idx : indices) {
        episodes.push_back(&buffer_.at(idx).episode);
        ends.push_back(std::max(1, buffer_.at(idx).episode.length));
      }
      ad::NoGradGuard guard;
      const auto start = Clock::now();
      const Var theta = model_->encoder->encode(make_window(episodes, ends, config_.graph_window));
      const Matrix sample = variant_ == Variant::DenseAttention
                                ? ad::set_block_diagonal(theta, 1.0).value()
                                : graph::sample_adjacency(theta, config_.temperature, noise).value();
      for (std::size_t k : stale) {
        marl::GraphAnnotation& g = buffer_.at(indices[k]).graph;
        g.adjacency = block(sample, static_cast<int>(k), n);
        g.computed_at = trainer_steps_;
      }
      graph_seconds_ += seconds_since(start);
    }
  }
  std::vector<const marl::StoredEpisode*> batch;
  for (std::size_t idx : indices) batch.push_back(&buffer_.at(idx));

  const LossTerms loss = compute_loss(batch, noise);
  model_->all_online.zero_grad();
  ad::backward(loss.total);
  TrainStepStats stats;
  stats.grad_norm = optimizer_.step(model_->all_online);
  stats.loss_td = loss.td.scalar();
  stats.loss_pre = loss.predict_future.scalar();
  stats.loss_inf = loss.infer_present.scalar();

  ++trainer_steps_;
  marl::TargetNetworkPair pair{&model_->value_params, &model_->target_params, config_.target_update_period};
  pair.maybe_update(trainer_steps_);
  return stats;
}

EvalResult Trainer::evaluate(int episodes, std::uint64_t seed) const {
  if (episodes < 1) throw ContractError("evaluate: episodes must be >= 1");
  std::vector<std::uint64_t> seeds;
  for (int k = 0; k < episodes; ++k) seeds.push_back(derive_seed(seed, static_cast<std::uint64_t>(k)));
  Rng rng(derive_seed(seed, 0x5eed));
  RolloutOptions options;
  options.epsilon = 0.0;
  options.greedy_graphs = true;
  const auto records = rollout(seeds, options, rng, nullptr);
  std::vector<double> returns;
  for (const auto& r : records) returns.push_back(r.total_return());
  return summarize(std::move(returns));
}

std::vector<GraphSnapshot> Trainer::capture_snapshots(std::uint64_t seed, const std::vector<int>& steps) const {
  Rng rng(derive_seed(seed, 0x5eed));
  RolloutOptions options;
  options.epsilon = 0.0;
  options.greedy_graphs = true;
  options.capture_steps = steps;
  std::vector<GraphSnapshot> out;
  rollout({seed}, options, rng, &out);
  return out;
}

void Trainer::run(const MetricsSink& sink, std::optional<std::int64_t> until_steps) {
  const std::int64_t until = until_steps.value_or(config_.total_steps);
  auto emit = [&]() {
    const double graph_before = graph_seconds_;
    const EvalResult eval = evaluate(config_.eval_episodes, eval_seed());
    MetricsRecord r;
    r.step = env_steps_;
    r.episodes = episodes_;
    r.trainer_steps = trainer_steps_;
    r.return_mean = eval.mean;
    r.return_std = eval.std;
    if (acc_count_ > 0) {
      r.loss_td = acc_td_ / static_cast<double>(acc_count_);
      r.loss_pre = acc_pre_ / static_cast<double>(acc_count_);
      r.loss_inf = acc_inf_ / static_cast<double>(acc_count_);
    }
    r.epsilon = schedule_.at(env_steps_);
    r.graph_inference_ms = graph_before * 1000.0;
    graph_seconds_ = 0.0;
    acc_td_ = acc_pre_ = acc_inf_ = 0.0;
    acc_count_ = 0;
    if (sink) sink(r);
  };

  while (env_steps_ < until) {
    if (env_steps_ >= next_eval_) {
      emit();
      next_eval_ = (env_steps_ / config_.eval_every_steps + 1) * config_.eval_every_steps;
    }
    collect_episode();
    if (episodes_ % config_.train_every_episodes == 0 &&
        buffer_.size() >= static_cast<std::size_t>(config_.batch_size)) {
      const TrainStepStats s = train_step();
      acc_td_ += s.loss_td;
      acc_pre_ += s.loss_pre;
      acc_inf_ += s.loss_inf;
      ++acc_count_;
    }
  }
  if (env_steps_ >= config_.total_steps && until >= config_.total_steps) emit();
}

void Trainer::save(std::ostream& out) const {
  io::BinaryWriter w(out);
  out.write(kMagic, sizeof(kMagic));
  w.put_string(config_.serialize());
  w.put<std::int64_t>(env_steps_);
  w.put<std::int64_t>(trainer_steps_);
  w.put<std::int64_t>(episodes_);
  w.put<std::int64_t>(next_eval_);
  w.put<double>(acc_td_);
  w.put<double>(acc_pre_);
  w.put<double>(acc_inf_);
  w.put<std::int64_t>(acc_count_);
  w.put_string(rollout_rng_.serialize());
  w.put_string(train_rng_.serialize());
  put_params(w, model_->all_online);
  put_params(w, model_->target_params);
  w.put<std::int64_t>(optimizer_.step_count());
  w.put<std::uint64_t>(optimizer_.first_moments().size());
  for (std::size_t k = 0; k < optimizer_.first_moments().size(); ++k) {
    w.put_matrix(optimizer_.first_moments()[k]);
    w.put_matrix(optimizer_.second_moments()[k]);
  }
  w.put<std::uint64_t>(buffer_.insertions());
  w.put<std::uint64_t>(buffer_.size());
  for (const auto& s : buffer_.episodes()) {
    w.put<std::uint64_t>(s.insertion_index);
    w.put<std::uint64_t>(s.episode.seed);
    w.put<std::int32_t>(s.episode.length);
    for (const auto& step : s.episode.steps) put_step(w, step);
    for (const auto& a : s.episode.actions) {
      for (int x : a) w.put<std::int32_t>(x);
    }
    for (auto m : s.episode.mask) w.put<std::uint8_t>(m);
    w.put_matrix(s.graph.adjacency);
    w.put<std::int64_t>(s.graph.computed_at);
  }
  if (!out) throw LoadError("checkpoint: write failed");
}

void Trainer::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw LoadError("cannot open checkpoint for writing: " + path);
  save(out);
}

Trainer Trainer::load(std::istream& in, const RunConfig* expected) {
  char magic[sizeof(kMagic)] = {};
  in.read(magic, sizeof(magic));
  if (!in || !std::equal(std::begin(magic), std::end(magic), std::begin(kMagic))) {
    throw LoadError("checkpoint: bad magic (not a checkpoint file)");
  }
  io::BinaryReader r(in);
  RunConfig config;
  try {
    config = RunConfig::parse(r.get_string());
  } catch (const ConfigError& e) {
    throw LoadError(std::string("checkpoint: embedded config invalid: ") + e.what());
  }
  if (expected) {
    const auto have = layout_of(config);
    const auto want = layout_of(*expected);
    for (std::size_t k = 0; k < have.size(); ++k) {
      if (have[k].second != want[k].second) {
        throw LoadError("checkpoint/config mismatch on '" + have[k].first + "': checkpoint has " + have[k].second +
                        ", config has " + want[k].second);
      }
    }
  }
  Trainer t(config);
  t.env_steps_ = r.get<std::int64_t>();
  t.trainer_steps_ = r.get<std::int64_t>();
  t.episodes_ = r.get<std::int64_t>();
  t.next_eval_ = r.get<std::int64_t>();
  t.acc_td_ = r.get<double>();
  t.acc_pre_ = r.get<double>();
  t.acc_inf_ = r.get<double>();
  t.acc_count_ = r.get<std::int64_t>();
  t.rollout_rng_.deserialize(r.get_string());
  t.train_rng_.deserialize(r.get_string());
  get_params(r, t.model_->all_online);
  get_params(r, t.model_->target_params);
  t.optimizer_.set_step_count(r.get<std::int64_t>());
  const auto moments = r.get<std::uint64_t>();
  if (moments != t.optimizer_.first_moments().size()) throw LoadError("checkpoint: optimizer state mismatch");
  for (std::size_t k = 0; k < moments; ++k) {
    Matrix m = r.get_matrix();
    Matrix v = r.get_matrix();
    if (m.rows() != t.optimizer_.first_moments()[k].rows() || m.cols() != t.optimizer_.first_moments()[k].cols() ||
        v.rows() != m.rows() || v.cols() != m.cols()) {
      throw LoadError("checkpoint: optimizer moment shape mismatch");
    }
    t.optimizer_.first_moments()[k] = std::move(m);
    t.optimizer_.second_moments()[k] = std::move(v);
  }
  const auto insertions = r.get<std::uint64_t>();
  const auto count = r.get<std::uint64_t>();
  if (count > t.buffer_.capacity()) throw LoadError("checkpoint: replay buffer exceeds capacity");
  std::deque<marl::StoredEpisode> episodes;
  const auto T = static_cast<std::size_t>(t.spec_.max_steps);
  const auto n = static_cast<std::size_t>(t.spec_.n_agents);
  for (std::uint64_t k = 0; k < count; ++k) {
    marl::StoredEpisode s;
    s.insertion_index = r.get<std::uint64_t>();
    s.episode.spec = t.spec_;
    s.episode.seed = r.get<std::uint64_t>();
    s.episode.length = r.get<std::int32_t>();
    if (s.episode.length < 0 || static_cast<std::size_t>(s.episode.length) > T) {
      throw LoadError("checkpoint: episode length out of range");
    }
    for (std::size_t j = 0; j <= T; ++j) s.episode.steps.push_back(get_step(r));
    for (std::size_t j = 0; j < T; ++j) {
      env::JointAction a(n);
      for (auto& x : a) x = r.get<std::int32_t>();
      s.episode.actions.push_back(std::move(a));
    }
    for (std::size_t j = 0; j < T; ++j) s.episode.mask.push_back(r.get<std::uint8_t>());
    s.graph.adjacency = r.get_matrix();
    s.graph.computed_at = r.get<std::int64_t>();
    for (const auto& step : s.episode.steps) {
      if (step.observations.rows() != t.spec_.n_agents || step.observations.cols() != t.spec_.obs_dim) {
        throw LoadError("checkpoint: stored observation shape mismatch");
      }
    }
    episodes.push_back(std::move(s));
  }
  t.buffer_.restore(std::move(episodes), insertions);
  return t;
}

Trainer Trainer::load(const std::string& path, const RunConfig* expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open checkpoint: " + path);
  return load(in, expected);
}

MetricsWriter::MetricsWriter(std::ostream& out, const RunConfig& config)
    : out_(out), wallclock_(config.log_wallclock) {
  std::istringstream lines(config.serialize());
  std::string line;
  while (std::getline(lines, line)) out_ << "# " << line << '\n';
}

void MetricsWriter::write(const MetricsRecord& record) { out_ << record.to_json(wallclock_) << '\n'; }

TrainOutcome train(const RunConfig& config) {
  Trainer trainer(config);
  TrainOutcome outcome;
  std::ostringstream text;
  MetricsWriter writer(text, config);
  trainer.run([&](const MetricsRecord& r) {
    outcome.metrics.push_back(r);
    writer.write(r);
  });
  outcome.metrics_text = text.str();
  std::ostringstream bytes(std::ios::binary);
  trainer.save(bytes);
  outcome.checkpoint_bytes = bytes.str();
  return outcome;
}

TrainOutcome ablate(RunConfig config, const std::string& variant) {
  parse_variant(variant);
  config.variant = variant;
  return train(config);
}

void write_snapshots(std::ostream& out, const std::vector<GraphSnapshot>& snapshots) {
  char buf[32];
  auto emit = [&](int step, const char* name, const Matrix& m) {
    out << step << ' ' << name << ' ' << m.rows() << '\n';
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) {
        std::snprintf(buf, sizeof(buf), "%.9g", m(i, j));
        out << (j ? " " : "") << buf;
      }
      out << '\n';
    }
  };
  for (const auto& s : snapshots) {
    emit(s.step, "theta", s.theta);
    emit(s.step, "adjacency", s.adjacency);
    emit(s.step, "attention", s.attention);
  }
}

std::vector<SnapshotMatrix> read_snapshots(std::istream& in) {
  std::vector<SnapshotMatrix> out;
  SnapshotMatrix m;
  Eigen::Index n = 0;
  while (in >> m.step >> m.name >> n) {
    if (n < 0) throw LoadError("snapshot: negative matrix size");
    m.values.resize(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < n; ++j) {
        if (!(in >> m.values(i, j))) throw LoadError("snapshot: truncated matrix '" + m.name + "'");
      }
    }
    out.push_back(m);
  }
  return out;
}

double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw ContractError("loglog_slope: need at least two points");
  double mx = 0, my = 0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    mx += std::log(x[k]);
    my += std::log(y[k]);
  }
  mx /= static_cast<double>(x.size());
  my /= static_cast<double>(y.size());
  double sxy = 0, sxx = 0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double dx = std::log(x[k]) - mx;
    sxy += dx * (std::log(y[k]) - my);
    sxx += dx * dx;
  }
  if (sxx == 0.0) throw ContractError("loglog_slope: x values are all equal");
  return sxy / sxx;
}

ScalingReport scaling_benchmark(const std::vector<int>& n_list, int window, int trials, int obs_dim,
                                std::uint64_t seed) {
  if (n_list.empty() || !std::is_sorted(n_list.begin(), n_list.end())) {
    throw ContractError("scaling_benchmark: n_list must be non-empty and sorted ascending");
  }
  if (n_list.front() < 1 || window < 1 || trials < 1 || obs_dim < 1) {
    throw ContractError("scaling_benchmark: n, window, trials and obs_dim must be positive");
  }
  ScalingReport report;
  for (int n : n_list) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(n)));
    graph::EncoderConfig ec;
    ec.obs_dim = obs_dim;
    ec.window = std::max(window, ec.kernel);
    nn::ParameterSet params;
    const graph::GraphEncoder encoder(params, "encoder", ec, rng);

    // A synthetic rollout of `window` steps.
    env::EpisodeRecord episode;
    episode.spec = env::EnvSpec{n, 1, obs_dim, 1, window, 0.99};
    episode.length = window;
    for (int t = 0; t <= window; ++t) {
      env::StepResult s;
      s.observations = nn::uniform_init(n, obs_dim, 1.0, rng);
      s.state = Eigen::VectorXd::Zero(1);
      episode.steps.push_back(std::move(s));
    }

    std::vector<double> times;
    for (int trial = 0; trial < trials; ++trial) {
      ad::NoGradGuard guard;
      const auto start = Clock::now();
      for (int t = 0; t < window; ++t) {
        const graph::TrajectoryBatch w = make_window({&episode}, {t + 1}, ec.window);
        const Var theta = encoder.encode(w);
        const Var a = graph::sample_adjacency(theta, 0.5, rng);
        if (a.rows() != n) throw ContractError("scaling_benchmark: unexpected graph shape");
      }
      times.push_back(seconds_since(start));
    }
    std::sort(times.begin(), times.end());
    report.rows.push_back({n, window, times[times.size() / 2]});
  }
  if (report.rows.size() >= 2) {
    std::vector<double> x, y;
    for (const auto& r : report.rows) {
      x.push_back(r.n_agents);
      y.push_back(r.seconds);
    }
    report.slope = loglog_slope(x, y);
  }
  return report;
}

}  // namespace ltscg::harness
