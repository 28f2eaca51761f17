#include "support/gradcheck.hpp"

#include "ltscg/errors.hpp"
#include "ltscg/trainer.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

namespace ltscg::harness {
namespace {

using testing::gradcheck;

RunConfig tiny_config(const std::string& variant = "ltscg") {
  RunConfig c;
  c.env = "gather";
  c.n_agents = 3;
  c.max_steps = 6;
  c.seed = 5;
  c.total_steps = 120;
  c.variant = variant;
  c.graph_window = 4;
  c.conv_channels = 3;
  c.embedding_dim = 4;
  c.pair_hidden = 4;
  c.dcrnn_hidden = 3;
  c.diffusion_degree = 2;
  c.gnn_hidden = 4;
  c.message_dim = 4;
  c.rnn_hidden = 5;
  c.mixer_embed = 4;
  c.batch_size = 3;
  c.buffer_capacity = 8;
  c.target_update_period = 4;
  c.graph_refresh_period = 3;
  c.epsilon_anneal_steps = 100;
  c.eval_every_steps = 30;
  c.eval_episodes = 3;
  return c;
}

TEST(Config, RejectsMultipleWorkers) {
  RunConfig c = tiny_config();
  c.workers = 2;
  EXPECT_THROW(Trainer{c}, ConfigError);
}

TEST(Window, ClipsAtZeroAndPadsTail) {
  env::GatherEnv e({.n_agents = 2, .max_steps = 5});
  const env::EpisodeRecord ep =
      env::run_episode(e, [](std::span<const env::StepResult> h, double) {
        return env::JointAction{static_cast<int>(h.size() % 3), 1};
      }, 0);
  const graph::TrajectoryBatch early = make_window({&ep}, {2}, 4);
  EXPECT_EQ(early.mask, (Matrix(1, 4) << 1, 1, 0, 0).finished());
  for (int i = 0; i < 2; ++i) {
    for (int t = 0; t < 2; ++t) {
      EXPECT_EQ(early.observations.row(early.row(0, i, t)), ep.steps[static_cast<std::size_t>(t)].observations.row(i));
    }
    for (int t = 2; t < 4; ++t) EXPECT_EQ(early.observations.row(early.row(0, i, t)).squaredNorm(), 0.0);
  }
  const graph::TrajectoryBatch late = make_window({&ep}, {5}, 3);
  EXPECT_EQ(late.mask, Matrix::Ones(1, 3));
  EXPECT_EQ(late.observations.row(late.row(0, 1, 0)), ep.steps[2].observations.row(1));
  EXPECT_EQ(late.states.row(2), ep.steps[4].state.transpose());
  EXPECT_THROW(make_window({&ep}, {0}, 3), ContractError);
  EXPECT_THROW(make_window({&ep}, {7}, 3), ContractError);
}

TEST(Metrics, JsonRoundTrip) {
  MetricsRecord r;
  r.step = 3000;
  r.episodes = 120;
  r.trainer_steps = 113;
  r.return_mean = 1.0 / 3.0;
  r.return_std = 2.5;
  r.loss_td = 0.125;
  r.loss_pre = 7.0;
  r.loss_inf = 1e-9;
  r.epsilon = 0.43;
  r.graph_inference_ms = 12.5;
  const MetricsRecord back = MetricsRecord::from_json(r.to_json(true));
  EXPECT_EQ(back.step, r.step);
  EXPECT_EQ(back.trainer_steps, r.trainer_steps);
  EXPECT_EQ(back.return_mean, r.return_mean);
  EXPECT_EQ(back.loss_inf, r.loss_inf);
  EXPECT_EQ(back.graph_inference_ms, r.graph_inference_ms);
  EXPECT_EQ(r.to_json(false).find("graph_inference_ms"), std::string::npos);
  EXPECT_EQ(MetricsRecord::from_json(r.to_json(false)).graph_inference_ms, 0.0);
}

TEST(Training, IdenticalRunsAreBitIdentical) {
  const TrainOutcome a = train(tiny_config());
  const TrainOutcome b = train(tiny_config());
  EXPECT_EQ(a.metrics_text, b.metrics_text);
  EXPECT_EQ(a.checkpoint_bytes, b.checkpoint_bytes);
  ASSERT_GE(a.metrics.size(), 4u);
  EXPECT_EQ(a.metrics.front().step, 0);
  EXPECT_GE(a.metrics.back().step, 120);
  EXPECT_GT(a.metrics.back().trainer_steps, 0);
  EXPECT_NE(a.metrics_text.find("# variant = ltscg"), std::string::npos);
}

TEST(Training, DifferentSeedsDiverge) {
  RunConfig c = tiny_config();
  const TrainOutcome a = train(c);
  c.seed = 6;
  EXPECT_NE(train(c).checkpoint_bytes, a.checkpoint_bytes);
}

TEST(Training, MetricsLogEveryLossTerm) {
  const TrainOutcome out = train(tiny_config());
  const MetricsRecord& last = out.metrics.back();
  EXPECT_GT(last.loss_td, 0.0);
  EXPECT_GT(last.loss_pre, 0.0);
  EXPECT_GT(last.loss_inf, 0.0);
  const TrainOutcome q = ablate(tiny_config(), "qmix");
  EXPECT_EQ(q.metrics.back().loss_pre, 0.0);
  EXPECT_EQ(q.metrics.back().loss_inf, 0.0);
}

TEST(Training, ResumeFromCheckpointMatchesUninterruptedRun) {
  const RunConfig c = tiny_config();
  std::vector<MetricsRecord> full;
  Trainer straight(c);
  straight.run([&](const MetricsRecord& r) { full.push_back(r); });
  std::ostringstream straight_bytes;
  straight.save(straight_bytes);

  std::vector<MetricsRecord> split;
  Trainer first(c);
  first.run([&](const MetricsRecord& r) { split.push_back(r); }, 50);
  std::stringstream bytes;
  first.save(bytes);
  Trainer resumed = Trainer::load(bytes, &c);
  resumed.run([&](const MetricsRecord& r) { split.push_back(r); });
  std::ostringstream resumed_bytes;
  resumed.save(resumed_bytes);

  EXPECT_EQ(straight_bytes.str(), resumed_bytes.str());
  ASSERT_EQ(full.size(), split.size());
  for (std::size_t k = 0; k < full.size(); ++k) EXPECT_EQ(full[k].to_json(false), split[k].to_json(false));
}

TEST(Checkpoint, LayoutMismatchIsLoadError) {
  const RunConfig c = tiny_config();
  Trainer t(c);
  std::stringstream bytes;
  t.save(bytes);
  RunConfig other = c;
  other.rnn_hidden = 7;
  EXPECT_THROW(Trainer::load(bytes, &other), LoadError);
  std::stringstream garbage("not a checkpoint");
  EXPECT_THROW(Trainer::load(garbage), LoadError);
  std::string truncated = bytes.str();
  truncated.resize(truncated.size() / 2);
  std::stringstream cut(truncated);
  EXPECT_THROW(Trainer::load(cut), LoadError);
}

TEST(Evaluate, PureAndRepeatable) {
  Trainer t(tiny_config());
  for (int k = 0; k < 4; ++k) t.collect_episode();
  t.train_step();
  const std::uint64_t before = t.model().all_online.hash();
  const Rng rng_before = t.rollout_rng();
  const EvalResult a = t.evaluate(4, 11);
  const EvalResult b = t.evaluate(4, 11);
  EXPECT_EQ(a.returns, b.returns);
  EXPECT_EQ(t.model().all_online.hash(), before);
  EXPECT_TRUE(t.rollout_rng() == rng_before);
  EXPECT_THROW(t.evaluate(0, 1), ContractError);
}

TEST(Evaluate, FreshNetworkOverlapsRandomBaseline) {
  RunConfig c = RunConfig::load(LTSCG_SOURCE_DIR "/configs/gather_acceptance.cfg");
  const EvalResult fresh = Trainer(c).evaluate(8, 3);

  env::GatherEnv e({.n_agents = 6});
  Rng rng(17);
  std::vector<double> returns;
  for (std::uint64_t k = 0; k < 4000; ++k) {
    returns.push_back(env::run_episode(
                          e,
                          [&](std::span<const env::StepResult>, double) {
                            env::JointAction a(6);
                            for (auto& x : a) x = static_cast<int>(rng.below(3));
                            return a;
                          },
                          k)
                          .total_return());
  }
  double mean = 0.0, sq = 0.0;
  for (double r : returns) mean += r;
  mean /= static_cast<double>(returns.size());
  for (double r : returns) sq += (r - mean) * (r - mean);
  const double sd = std::sqrt(sq / static_cast<double>(returns.size()));
  // Intervals mean +- 2 sd overlap.
  EXPECT_LE(std::abs(fresh.mean - mean), 2.0 * (sd + fresh.std));
}

TEST(Variants, ShareEpisodeSeeds) {
  const Trainer a(tiny_config("ltscg"));
  const Trainer b(tiny_config("onestep_sparse"));
  for (int k = 0; k < 10; ++k) EXPECT_EQ(a.episode_seed(k), b.episode_seed(k));
  EXPECT_EQ(a.eval_seed(), b.eval_seed());
  EXPECT_THROW(ablate(tiny_config(), "gcn"), ConfigError);
}

TEST(Variants, EveryVariantTrains) {
  for (const auto& v : variant_names()) {
    RunConfig c = tiny_config(v);
    c.total_steps = 48;
    const TrainOutcome out = ablate(c, v);
    EXPECT_FALSE(out.metrics.empty()) << v;
    for (const auto& m : out.metrics) EXPECT_TRUE(std::isfinite(m.return_mean) && std::isfinite(m.loss_td)) << v;
  }
}

TEST(Annotations, RefreshedWithinPeriod) {
  Trainer t(tiny_config());
  for (int k = 0; k < 6; ++k) t.collect_episode();
  for (const auto& s : t.buffer().episodes()) EXPECT_EQ(s.graph.computed_at, -1);
  for (int k = 0; k < 12; ++k) {
    t.train_step();
    t.collect_episode();
  }
  const auto& newest = t.buffer().episodes().back().graph;
  EXPECT_EQ(newest.computed_at, t.trainer_steps());
  for (Eigen::Index i = 0; i < newest.adjacency.rows(); ++i) EXPECT_EQ(newest.adjacency(i, i), 1.0);
}

TEST(Objective, GradientMatchesFiniteDifferences) {
  RunConfig c = tiny_config();
  c.n_agents = 2;
  c.graph_window = 3;
  c.max_steps = 3;
  Trainer t(c);
  for (int k = 0; k < 3; ++k) t.collect_episode();
  std::vector<const marl::StoredEpisode*> batch;
  for (const auto& s : t.buffer().episodes()) batch.push_back(&s);
  Rng rng(1);
  const graph::GumbelNoise noise = graph::GumbelNoise::draw(3 * 2, 2, rng);
  std::vector<ad::Var> inputs;
  for (const auto& p : t.model().all_online.entries()) inputs.push_back(p.var);
  const auto terms = t.compute_loss(batch, noise);
  EXPECT_GT(terms.predict_future.scalar(), 0.0);
  EXPECT_GT(terms.infer_present.scalar(), 0.0);
  const auto result = gradcheck([&] { return t.compute_loss(batch, noise).total; }, inputs);
  EXPECT_LT(result.overall_relative_error, 1e-4);
  EXPECT_EQ(result.checked, t.model().all_online.scalar_count());
}

TEST(Snapshots, IntegrityAndRoundTrip) {
  const RunConfig c = tiny_config();
  Trainer t(c);
  for (int k = 0; k < 4; ++k) t.collect_episode();
  t.train_step();
  const auto snaps = t.capture_snapshots(21, {0, 2, 5});
  ASSERT_EQ(snaps.size(), 3u);
  for (const auto& s : snaps) {
    for (Eigen::Index i = 0; i < s.attention.rows(); ++i) EXPECT_NEAR(s.attention.row(i).sum(), 1.0, 1e-6);
    EXPECT_EQ(s.adjacency.diagonal(), Eigen::VectorXd::Ones(3));
    EXPECT_EQ(s.adjacency, graph::evaluation_adjacency(s.theta));
    // Attention is supported on the hard graph.
    EXPECT_EQ(s.attention.cwiseProduct(Matrix::Ones(3, 3) - s.adjacency).cwiseAbs().sum(), 0.0);
  }
  // Step 0 sees only the reset observation, so theta can be recomputed directly.
  env::GatherEnv e({.n_agents = 3, .max_steps = 6});
  env::EpisodeRecord ep;
  ep.spec = t.spec();
  ep.steps = {e.reset(21)};
  const Matrix theta = t.model().encoder->encode(make_window({&ep}, {1}, c.graph_window)).value();
  EXPECT_EQ(theta, snaps[0].theta);

  std::stringstream text;
  write_snapshots(text, snaps);
  const auto back = read_snapshots(text);
  ASSERT_EQ(back.size(), 9u);
  EXPECT_EQ(back[1].name, "adjacency");
  EXPECT_EQ(back[5].step, 2);
  EXPECT_LT((back[2].values - snaps[0].attention).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(Benchmark, DegenerateSingleAgent) {
  const ScalingReport r = scaling_benchmark({1}, 3, 1);
  ASSERT_EQ(r.rows.size(), 1u);
  EXPECT_GT(r.rows[0].seconds, 0.0);
  EXPECT_THROW(scaling_benchmark({4, 2}, 3, 1), ContractError);
}

TEST(Benchmark, LogLogSlope) {
  EXPECT_NEAR(loglog_slope({1, 2, 4, 8}, {3, 12, 48, 192}), 2.0, 1e-12);
  EXPECT_THROW(loglog_slope({1}, {1}), ContractError);
}

}  // namespace
}  // namespace ltscg::harness
