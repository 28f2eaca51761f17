// Cooperative partially observable environments and the episode runner.
//
// Two games are provided:
//  * Gather: a repeated n-player Climb game. Action a0 pays a large shared
//    reward only when every agent picks it; a1 and a2 pay small per-agent
//    amounts regardless of what the others do.
//  * Tag: predators on a toroidal grid chase scripted prey around static
//    obstacles, with egocentric windowed observations.
#pragma once

#include "ltscg/autodiff.hpp"
#include "ltscg/rng.hpp"

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace ltscg::env {

using ad::Matrix;
using Vector = Eigen::VectorXd;

struct EnvSpec {
  int n_agents = 0;
  int n_actions = 0;
  int obs_dim = 0;
  int state_dim = 0;
  int max_steps = 0;
  double discount = 0.99;

  void validate() const;
  bool operator==(const EnvSpec&) const = default;
};

struct StepResult {
  Matrix observations;  // n_agents x obs_dim
  Vector state;         // state_dim
  double reward = 0.0;
  bool terminated = false;
  int step_index = 0;

  static StepResult zeros(const EnvSpec& spec);
};

using JointAction = std::vector<int>;

class Environment {
 public:
  virtual ~Environment() = default;

  virtual const EnvSpec& spec() const = 0;
  virtual std::string name() const = 0;

  // Same seed gives a bit-identical initial condition.
  virtual StepResult reset(std::uint64_t seed) = 0;
  // Throws ContractError on an out-of-range action and LifecycleError when the
  // episode has already terminated (or was never reset).
  virtual StepResult step(const JointAction& actions) = 0;
};

struct GatherParams {
  int n_agents = 6;
  int max_steps = 25;
  double discount = 0.99;
  double reward_high = 10.0;  // paid only when every agent picks a0
  double reward_a1 = 0.5;     // per agent choosing a1
  double reward_a2 = 0.3;     // per agent choosing a2
};

class GatherEnv final : public Environment {
 public:
  explicit GatherEnv(GatherParams params = {});

  const EnvSpec& spec() const override { return spec_; }
  std::string name() const override { return "gather"; }
  StepResult reset(std::uint64_t seed) override;
  StepResult step(const JointAction& actions) override;

  // Shared reward for one joint action; depends only on action counts.
  double reward_for(const JointAction& actions) const;

 private:
  StepResult observe(double reward, bool terminated) const;

  GatherParams params_;
  EnvSpec spec_;
  JointAction last_actions_;
  int round_ = 0;
  bool active_ = false;
};

struct TagParams {
  int n_predators = 6;
  int n_prey = 2;
  int grid = 12;
  int n_obstacles = 3;
  int view_radius = 3;
  int max_steps = 50;
  int prey_bonus_period = 3;  // prey take a second move on every k-th step
  double discount = 0.99;
};

struct Cell {
  int x = 0;
  int y = 0;
  bool operator==(const Cell&) const = default;
};

struct TagLayout {
  std::vector<Cell> predators;
  std::vector<Cell> prey;
  std::vector<Cell> obstacles;
};

class TagEnv final : public Environment {
 public:
  explicit TagEnv(TagParams params = {});

  const EnvSpec& spec() const override { return spec_; }
  std::string name() const override { return "tag"; }
  StepResult reset(std::uint64_t seed) override;
  StepResult step(const JointAction& actions) override;

  const TagLayout& layout() const { return layout_; }

  // Pure observation/state functions of a layout.
  static Matrix observe(const TagLayout& layout, const TagParams& params);
  static Vector global_state(const TagLayout& layout, const TagParams& params);
  // Number of (predator, prey) pairs at toroidal Manhattan distance <= 1.
  static int collisions(const TagLayout& layout, const TagParams& params);

  static constexpr int kActions = 5;  // stay, up, down, left, right

 private:
  StepResult make_result(double reward, bool terminated, int step_index) const;
  void move_prey();

  TagParams params_;
  EnvSpec spec_;
  TagLayout layout_;
  int t_ = 0;
  bool active_ = false;
};

// Episode data zero-padded to max_steps. steps[0] is the reset result and
// steps[t + 1] the result of actions[t]; everything past `length` is zero.
struct EpisodeRecord {
  EnvSpec spec;
  std::uint64_t seed = 0;
  int length = 0;
  std::vector<StepResult> steps;       // max_steps + 1
  std::vector<JointAction> actions;    // max_steps
  std::vector<std::uint8_t> mask;      // max_steps

  double total_return() const;
  double discounted_return() const;
  double reward(int t) const { return steps[static_cast<std::size_t>(t) + 1].reward; }
  bool terminated(int t) const { return steps[static_cast<std::size_t>(t) + 1].terminated; }
};

// A policy sees the step results observed so far (steps[0..t]) and the
// exploration rate and returns one action per agent.
using Policy = std::function<JointAction(std::span<const StepResult> history, double epsilon)>;

EpisodeRecord run_episode(Environment& env, const Policy& policy, std::uint64_t seed, double epsilon = 0.0);

std::unique_ptr<Environment> make_environment(const std::string& name, int n_agents, int max_steps);

}  // namespace ltscg::env
