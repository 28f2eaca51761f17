#include "ltscg/env.hpp"

#include "ltscg/errors.hpp"

#include <algorithm>
#include <cmath>

namespace ltscg::env {

void EnvSpec::validate() const {
  if (n_agents <= 0 || n_actions <= 0 || obs_dim <= 0 || state_dim <= 0) {
    throw ConfigError("EnvSpec: dimensions must be positive");
  }
  if (max_steps < 1) throw ConfigError("EnvSpec: max_steps must be >= 1");
  if (!(discount >= 0.0 && discount < 1.0)) throw ConfigError("EnvSpec: discount must lie in [0, 1)");
}

StepResult StepResult::zeros(const EnvSpec& spec) {
  StepResult r;
  r.observations = Matrix::Zero(spec.n_agents, spec.obs_dim);
  r.state = Vector::Zero(spec.state_dim);
  return r;
}

namespace {

void check_actions(const EnvSpec& spec, const JointAction& actions) {
  if (static_cast<int>(actions.size()) != spec.n_agents) {
    throw ContractError("step: expected " + std::to_string(spec.n_agents) + " actions, got " +
                        std::to_string(actions.size()));
  }
  for (int a : actions) {
    if (a < 0 || a >= spec.n_actions) {
      throw ContractError("step: action " + std::to_string(a) + " outside [0, " + std::to_string(spec.n_actions) +
                          ")");
    }
  }
}

}  // namespace

// ---- Gather ---------------------------------------------------------------

GatherEnv::GatherEnv(GatherParams params) : params_(params) {
  spec_.n_agents = params.n_agents;
  spec_.n_actions = 3;
  spec_.obs_dim = 4;
  spec_.state_dim = 3 * params.n_agents + 1;
  spec_.max_steps = params.max_steps;
  spec_.discount = params.discount;
  spec_.validate();
}

double GatherEnv::reward_for(const JointAction& actions) const {
  int c0 = 0, c1 = 0, c2 = 0;
  for (int a : actions) {
    c0 += a == 0;
    c1 += a == 1;
    c2 += a == 2;
  }
  if (c0 == spec_.n_agents) return params_.reward_high;
  return params_.reward_a1 * c1 + params_.reward_a2 * c2;
}

StepResult GatherEnv::observe(double reward, bool terminated) const {
  StepResult r = StepResult::zeros(spec_);
  const double phase = static_cast<double>(round_) / spec_.max_steps;
  for (int i = 0; i < spec_.n_agents; ++i) {
    if (!last_actions_.empty()) {
      r.observations(i, last_actions_[static_cast<std::size_t>(i)]) = 1.0;
      r.state(3 * i + last_actions_[static_cast<std::size_t>(i)]) = 1.0;
    }
    r.observations(i, 3) = phase;
  }
  r.state(3 * spec_.n_agents) = phase;
  r.reward = reward;
  r.terminated = terminated;
  return r;
}

StepResult GatherEnv::reset(std::uint64_t /*seed*/) {
  // The game is deterministic; the seed only fixes the (empty) initial history.
  last_actions_.clear();
  round_ = 0;
  active_ = true;
  StepResult r = observe(0.0, false);
  r.step_index = 0;
  return r;
}

StepResult GatherEnv::step(const JointAction& actions) {
  if (!active_) throw LifecycleError("gather: step called on a terminated or unreset episode");
  check_actions(spec_, actions);
  const double reward = reward_for(actions);
  const int index = round_;
  last_actions_ = actions;
  ++round_;
  const bool done = round_ >= spec_.max_steps;
  if (done) active_ = false;
  StepResult r = observe(reward, done);
  r.step_index = index;
  return r;
}

// ---- Tag ------------------------------------------------------------------

namespace {

int wrap(int v, int n) { return ((v % n) + n) % n; }

int torus_delta(int a, int b, int n) {
  const int d = std::abs(a - b) % n;
  return std::min(d, n - d);
}

int torus_manhattan(Cell a, Cell b, int n) { return torus_delta(a.x, b.x, n) + torus_delta(a.y, b.y, n); }

constexpr std::array<Cell, 5> kMoves{{{0, 0}, {0, -1}, {0, 1}, {-1, 0}, {1, 0}}};

Cell apply_move(Cell c, int action, int grid) {
  return {wrap(c.x + kMoves[static_cast<std::size_t>(action)].x, grid),
          wrap(c.y + kMoves[static_cast<std::size_t>(action)].y, grid)};
}

bool contains(const std::vector<Cell>& cells, Cell c) { return std::find(cells.begin(), cells.end(), c) != cells.end(); }

}  // namespace

TagEnv::TagEnv(TagParams params) : params_(params) {
  if (params.grid < 2 * params.view_radius + 1) throw ConfigError("tag: grid smaller than the view window");
  if (params.n_predators + params.n_prey + params.n_obstacles > params.grid * params.grid) {
    throw ConfigError("tag: too many entities for the grid");
  }
  const int w = 2 * params.view_radius + 1;
  spec_.n_agents = params.n_predators;
  spec_.n_actions = kActions;
  spec_.obs_dim = 3 * w * w + 2;
  spec_.state_dim = 2 * params.n_predators + 2 * params.n_prey;
  spec_.max_steps = params.max_steps;
  spec_.discount = params.discount;
  spec_.validate();
}

Matrix TagEnv::observe(const TagLayout& layout, const TagParams& params) {
  const int r = params.view_radius;
  const int w = 2 * r + 1;
  const int g = params.grid;
  const int n = static_cast<int>(layout.predators.size());
  Matrix obs = Matrix::Zero(n, 3 * w * w + 2);
  auto mark = [&](int agent, int channel, Cell self, Cell other) {
    int dx = wrap(other.x - self.x, g);
    int dy = wrap(other.y - self.y, g);
    if (dx > g / 2) dx -= g;
    if (dy > g / 2) dy -= g;
    if (std::abs(dx) > r || std::abs(dy) > r) return;
    obs(agent, channel * w * w + (dy + r) * w + (dx + r)) += 1.0;
  };
  for (int i = 0; i < n; ++i) {
    const Cell self = layout.predators[static_cast<std::size_t>(i)];
    for (int j = 0; j < n; ++j) {
      if (j != i) mark(i, 0, self, layout.predators[static_cast<std::size_t>(j)]);
    }
    for (const Cell& p : layout.prey) mark(i, 1, self, p);
    for (const Cell& o : layout.obstacles) mark(i, 2, self, o);
    obs(i, 3 * w * w) = static_cast<double>(self.x) / g;
    obs(i, 3 * w * w + 1) = static_cast<double>(self.y) / g;
  }
  return obs;
}

Vector TagEnv::global_state(const TagLayout& layout, const TagParams& params) {
  Vector s(2 * (layout.predators.size() + layout.prey.size()));
  Eigen::Index k = 0;
  for (const Cell& c : layout.predators) {
    s(k++) = static_cast<double>(c.x) / params.grid;
    s(k++) = static_cast<double>(c.y) / params.grid;
  }
  for (const Cell& c : layout.prey) {
    s(k++) = static_cast<double>(c.x) / params.grid;
    s(k++) = static_cast<double>(c.y) / params.grid;
  }
  return s;
}

int TagEnv::collisions(const TagLayout& layout, const TagParams& params) {
  int count = 0;
  for (const Cell& a : layout.predators) {
    for (const Cell& p : layout.prey) count += torus_manhattan(a, p, params.grid) <= 1;
  }
  return count;
}

StepResult TagEnv::make_result(double reward, bool terminated, int step_index) const {
  StepResult r;
  r.observations = observe(layout_, params_);
  r.state = global_state(layout_, params_);
  r.reward = reward;
  r.terminated = terminated;
  r.step_index = step_index;
  return r;
}

StepResult TagEnv::reset(std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x7a9));
  const int g = params_.grid;
  std::vector<Cell> taken;
  auto fresh_cell = [&]() {
    for (;;) {
      const Cell c{static_cast<int>(rng.below(static_cast<std::uint64_t>(g))),
                   static_cast<int>(rng.below(static_cast<std::uint64_t>(g)))};
      if (!contains(taken, c)) {
        taken.push_back(c);
        return c;
      }
    }
  };
  layout_ = {};
  for (int k = 0; k < params_.n_obstacles; ++k) layout_.obstacles.push_back(fresh_cell());
  for (int k = 0; k < params_.n_predators; ++k) layout_.predators.push_back(fresh_cell());
  for (int k = 0; k < params_.n_prey; ++k) layout_.prey.push_back(fresh_cell());
  t_ = 0;
  active_ = true;
  return make_result(0.0, false, 0);
}

void TagEnv::move_prey() {
  const int g = params_.grid;
  for (Cell& prey : layout_.prey) {
    int best_action = 0;
    int best_distance = -1;
    for (int a = 0; a < kActions; ++a) {
      const Cell c = apply_move(prey, a, g);
      if (contains(layout_.obstacles, c)) continue;
      int nearest = g * g;
      for (const Cell& p : layout_.predators) nearest = std::min(nearest, torus_manhattan(c, p, g));
      if (nearest > best_distance) {
        best_distance = nearest;
        best_action = a;
      }
    }
    prey = apply_move(prey, best_action, g);
  }
}

StepResult TagEnv::step(const JointAction& actions) {
  if (!active_) throw LifecycleError("tag: step called on a terminated or unreset episode");
  check_actions(spec_, actions);
  for (std::size_t i = 0; i < actions.size(); ++i) {
    const Cell next = apply_move(layout_.predators[i], actions[i], params_.grid);
    if (!contains(layout_.obstacles, next)) layout_.predators[i] = next;
  }
  move_prey();
  if (params_.prey_bonus_period > 0 && t_ % params_.prey_bonus_period == params_.prey_bonus_period - 1) move_prey();
  const double reward = collisions(layout_, params_);
  const int index = t_;
  ++t_;
  const bool done = t_ >= spec_.max_steps;
  if (done) active_ = false;
  return make_result(reward, done, index);
}

// ---- episodes ---------------------------------------------------------------

double EpisodeRecord::total_return() const {
  double total = 0.0;
  for (int t = 0; t < length; ++t) total += reward(t);
  return total;
}

double EpisodeRecord::discounted_return() const {
  double total = 0.0;
  double w = 1.0;
  for (int t = 0; t < length; ++t) {
    total += w * reward(t);
    w *= spec.discount;
  }
  return total;
}

EpisodeRecord run_episode(Environment& env, const Policy& policy, std::uint64_t seed, double epsilon) {
  const EnvSpec& spec = env.spec();
  EpisodeRecord rec;
  rec.spec = spec;
  rec.seed = seed;
  const auto T = static_cast<std::size_t>(spec.max_steps);
  rec.steps.assign(T + 1, StepResult::zeros(spec));
  rec.actions.assign(T, JointAction(static_cast<std::size_t>(spec.n_agents), 0));
  rec.mask.assign(T, 0);

  rec.steps[0] = env.reset(seed);
  int t = 0;
  while (t < spec.max_steps) {
    JointAction a = policy(std::span<const StepResult>(rec.steps.data(), static_cast<std::size_t>(t) + 1), epsilon);
    StepResult next = env.step(a);
    rec.actions[static_cast<std::size_t>(t)] = std::move(a);
    rec.mask[static_cast<std::size_t>(t)] = 1;
    rec.steps[static_cast<std::size_t>(t) + 1] = std::move(next);
    ++t;
    if (rec.steps[static_cast<std::size_t>(t)].terminated) break;
  }
  rec.length = t;
  return rec;
}

std::unique_ptr<Environment> make_environment(const std::string& name, int n_agents, int max_steps) {
  if (name == "gather") {
    GatherParams p;
    p.n_agents = n_agents;
    if (max_steps > 0) p.max_steps = max_steps;
    return std::make_unique<GatherEnv>(p);
  }
  if (name == "tag") {
    TagParams p;
    p.n_predators = n_agents;
    if (max_steps > 0) p.max_steps = max_steps;
    return std::make_unique<TagEnv>(p);
  }
  throw ConfigError("unknown environment '" + name + "' (expected gather or tag)");
}

}  // namespace ltscg::env
