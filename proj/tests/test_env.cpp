#include "ltscg/env.hpp"
#include "ltscg/errors.hpp"

#include <gtest/gtest.h>

#include <cmath>

namespace ltscg::env {
namespace {

Policy fixed(JointAction a) {
  return [a](std::span<const StepResult>, double) { return a; };
}

Policy uniform_random(int n, int n_actions, Rng& rng) {
  return [n, n_actions, &rng](std::span<const StepResult>, double) {
    JointAction a(static_cast<std::size_t>(n));
    for (auto& x : a) x = static_cast<int>(rng.below(static_cast<std::uint64_t>(n_actions)));
    return a;
  };
}

TEST(Gather, SpecShape) {
  GatherEnv env({.n_agents = 6});
  EXPECT_EQ(env.spec().n_actions, 3);
  EXPECT_EQ(env.spec().obs_dim, 4);
  EXPECT_EQ(env.spec().state_dim, 19);
  EXPECT_EQ(env.spec().max_steps, 25);
}

TEST(Gather, RewardRule) {
  GatherEnv env({.n_agents = 4});
  EXPECT_DOUBLE_EQ(env.reward_for({0, 0, 0, 0}), 10.0);
  EXPECT_DOUBLE_EQ(env.reward_for({0, 0, 0, 1}), 0.5);
  EXPECT_DOUBLE_EQ(env.reward_for({1, 1, 2, 0}), 1.3);
  EXPECT_DOUBLE_EQ(env.reward_for({2, 2, 2, 2}), 1.2);
}

TEST(Gather, RewardDependsOnlyOnCounts) {
  GatherEnv env({.n_agents = 5});
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    JointAction a(5);
    for (auto& x : a) x = static_cast<int>(rng.below(3));
    JointAction b = a;
    std::swap(b[0], b[static_cast<std::size_t>(rng.below(5))]);
    EXPECT_DOUBLE_EQ(env.reward_for(a), env.reward_for(b));
  }
}

TEST(Gather, AllA0EarnsHighRewardEveryStep) {
  GatherEnv env({.n_agents = 6});
  const EpisodeRecord rec = run_episode(env, fixed(JointAction(6, 0)), 1);
  EXPECT_EQ(rec.length, 25);
  for (int t = 0; t < rec.length; ++t) EXPECT_DOUBLE_EQ(rec.reward(t), 10.0);
  EXPECT_DOUBLE_EQ(rec.total_return(), 250.0);
}

TEST(Gather, RandomPolicyHighRewardFrequency) {
  GatherEnv env({.n_agents = 6});
  Rng rng(11);
  const Policy policy = uniform_random(6, 3, rng);
  long high = 0, steps = 0;
  while (steps < 200000) {
    const EpisodeRecord rec = run_episode(env, policy, static_cast<std::uint64_t>(steps));
    for (int t = 0; t < rec.length; ++t) high += rec.reward(t) == 10.0;
    steps += rec.length;
  }
  const double freq = static_cast<double>(high) / static_cast<double>(steps);
  EXPECT_NEAR(freq, 1.0 / 729.0, 0.2 / 729.0);
}

TEST(Gather, ObservationsEncodeOwnLastActionAndRound) {
  GatherEnv env({.n_agents = 3, .max_steps = 4});
  const StepResult r0 = env.reset(0);
  EXPECT_EQ(r0.observations.leftCols(3).sum(), 0.0);
  const StepResult r1 = env.step({2, 0, 1});
  EXPECT_EQ(r1.observations(0, 2), 1.0);
  EXPECT_EQ(r1.observations(1, 0), 1.0);
  EXPECT_EQ(r1.observations(2, 1), 1.0);
  EXPECT_DOUBLE_EQ(r1.observations(0, 3), 0.25);
  EXPECT_EQ(r1.state(3 * 0 + 2), 1.0);
  EXPECT_EQ(r1.state(3 * 2 + 1), 1.0);
  EXPECT_DOUBLE_EQ(r1.state(9), 0.25);
  EXPECT_EQ(r1.step_index, 0);
}

TEST(Gather, LifecycleAndContractErrors) {
  GatherEnv env({.n_agents = 2, .max_steps = 2});
  EXPECT_THROW(env.step({0, 0}), LifecycleError);
  env.reset(0);
  EXPECT_THROW(env.step({0, 3}), ContractError);
  EXPECT_THROW(env.step({0}), ContractError);
  env.step({0, 0});
  const StepResult last = env.step({0, 0});
  EXPECT_TRUE(last.terminated);
  EXPECT_THROW(env.step({0, 0}), LifecycleError);
}

TEST(Episode, InvalidPolicyActionPropagates) {
  GatherEnv env({.n_agents = 2});
  EXPECT_THROW(run_episode(env, fixed({0, 7}), 0), ContractError);
}

// Terminates after a fixed number of steps to exercise padding.
class ShortEnv final : public Environment {
 public:
  ShortEnv(int stop_after, int max_steps) : stop_(stop_after) {
    spec_ = {2, 2, 3, 2, max_steps, 0.9};
  }
  const EnvSpec& spec() const override { return spec_; }
  std::string name() const override { return "short"; }
  StepResult reset(std::uint64_t) override {
    t_ = 0;
    StepResult r = StepResult::zeros(spec_);
    r.observations.setConstant(1.0);
    r.state.setConstant(1.0);
    return r;
  }
  StepResult step(const JointAction&) override {
    StepResult r = StepResult::zeros(spec_);
    r.observations.setConstant(1.0);
    r.state.setConstant(1.0);
    r.reward = 1.0;
    r.step_index = t_;
    r.terminated = ++t_ >= stop_;
    return r;
  }

 private:
  EnvSpec spec_;
  int stop_;
  int t_ = 0;
};

TEST(Episode, TerminationAtStepThreePadsMask) {
  ShortEnv env(3, 10);
  const EpisodeRecord rec = run_episode(env, fixed({0, 1}), 0);
  EXPECT_EQ(rec.length, 3);
  const std::vector<std::uint8_t> expected{1, 1, 1, 0, 0, 0, 0, 0, 0, 0};
  EXPECT_EQ(rec.mask, expected);
  for (int t = 4; t <= 10; ++t) {
    const StepResult& s = rec.steps[static_cast<std::size_t>(t)];
    EXPECT_EQ(s.observations.cwiseAbs().sum(), 0.0);
    EXPECT_EQ(s.state.cwiseAbs().sum(), 0.0);
    EXPECT_EQ(s.reward, 0.0);
  }
  EXPECT_DOUBLE_EQ(rec.total_return(), 3.0);
  EXPECT_DOUBLE_EQ(rec.discounted_return(), 1.0 + 0.9 + 0.81);
}

TEST(Tag, SpecShape) {
  TagEnv env;
  EXPECT_EQ(env.spec().obs_dim, 3 * 49 + 2);
  EXPECT_EQ(env.spec().state_dim, 2 * 6 + 4);
  EXPECT_EQ(env.spec().n_actions, 5);
}

TEST(Tag, ResetIsDeterministicPerSeedAndEntitiesDisjoint) {
  TagEnv a, b;
  const StepResult ra = a.reset(42);
  const StepResult rb = b.reset(42);
  EXPECT_EQ(ra.observations, rb.observations);
  EXPECT_EQ(a.layout().predators, b.layout().predators);
  std::vector<Cell> all = a.layout().predators;
  all.insert(all.end(), a.layout().prey.begin(), a.layout().prey.end());
  all.insert(all.end(), a.layout().obstacles.begin(), a.layout().obstacles.end());
  for (std::size_t i = 0; i < all.size(); ++i) {
    for (std::size_t j = i + 1; j < all.size(); ++j) EXPECT_FALSE(all[i] == all[j]);
  }
  TagEnv c;
  c.reset(43);
  EXPECT_FALSE(c.layout().predators == a.layout().predators);
}

TEST(Tag, SeedAndActionsDetermineEpisodeBitExactly) {
  TagEnv a, b;
  Rng r1(5), r2(5);
  const EpisodeRecord ea = run_episode(a, uniform_random(6, 5, r1), 9);
  const EpisodeRecord eb = run_episode(b, uniform_random(6, 5, r2), 9);
  ASSERT_EQ(ea.length, eb.length);
  for (std::size_t t = 0; t < ea.steps.size(); ++t) {
    EXPECT_EQ(ea.steps[t].observations, eb.steps[t].observations);
    EXPECT_EQ(ea.steps[t].state, eb.steps[t].state);
    EXPECT_EQ(ea.steps[t].reward, eb.steps[t].reward);
  }
}

TEST(Tag, ObservationLocality) {
  TagParams p;
  TagLayout layout;
  layout.predators = {{0, 0}, {6, 6}};
  layout.prey = {{2, 1}, {8, 8}};
  layout.obstacles = {{11, 11}, {5, 0}};
  const Matrix base = TagEnv::observe(layout, p);
  // Moving entities that stay outside predator 0's window leaves its observation unchanged.
  TagLayout moved = layout;
  moved.prey[1] = {7, 5};
  moved.obstacles[1] = {4, 6};
  moved.predators[1] = {6, 7};
  const Matrix after = TagEnv::observe(moved, p);
  EXPECT_EQ(base.row(0), after.row(0));
  EXPECT_NE(base.row(1), after.row(1));
  // Predator 0 sees the prey at offset (2, 1) and the wrapped obstacle at (-1, -1).
  const int w = 7, r = 3;
  EXPECT_EQ(base(0, 1 * w * w + (1 + r) * w + (2 + r)), 1.0);
  EXPECT_EQ(base(0, 2 * w * w + (-1 + r) * w + (-1 + r)), 1.0);
}

TEST(Tag, CollisionCountUsesToroidalManhattanDistance) {
  TagParams p;
  TagLayout layout;
  layout.predators = {{0, 0}, {11, 0}, {5, 5}};
  layout.prey = {{0, 11}, {5, 7}};
  // (0,0)-(0,11): distance 1; (11,0)-(0,11): distance 2; (5,5)-(5,7): distance 2.
  EXPECT_EQ(TagEnv::collisions(layout, p), 1);
  layout.prey[1] = {5, 6};
  EXPECT_EQ(TagEnv::collisions(layout, p), 2);
}

TEST(Tag, PreyNeverApproachAStationaryPredator) {
  TagParams p;
  p.n_predators = 1;
  p.n_prey = 2;
  p.n_obstacles = 0;
  auto distance = [&](const Vector& s, int prey) {
    auto d = [&](double a, double b) {
      const int k = std::abs(static_cast<int>(std::lround((a - b) * p.grid))) % p.grid;
      return std::min(k, p.grid - k);
    };
    return d(s(0), s(2 + 2 * prey)) + d(s(1), s(3 + 2 * prey));
  };
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    TagEnv env(p);
    Vector s = env.reset(seed).state;
    for (int t = 0; t < 12; ++t) {
      const Vector next = env.step({0}).state;
      for (int k = 0; k < 2; ++k) EXPECT_GE(distance(next, k), distance(s, k));
      s = next;
    }
  }
}

TEST(Factory, UnknownEnvironmentIsConfigError) {
  EXPECT_THROW(make_environment("smac", 3, 0), ConfigError);
  EXPECT_EQ(make_environment("gather", 3, 7)->spec().max_steps, 7);
  EXPECT_EQ(make_environment("tag", 4, 0)->spec().n_agents, 4);
}

}  // namespace
}  // namespace ltscg::env
