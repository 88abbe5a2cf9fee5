#include "skylink/env.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace skylink::env {

namespace {

void require(bool ok, const char* field, const char* what) {
  if (!ok) {
    throw std::invalid_argument(std::string("world.") + field + ": " + what);
  }
}

Vec2 clip_norm(const Vec2& v, double limit) {
  const double n = v.norm();
  if (n > limit && n > 0.0) return v * (limit / n);
  return v;
}

}  // namespace

void WorldConfig::validate() const {
  require(n_agents >= 2, "n_agents", "must be at least 2");
  require(region_side > 0.0, "region_side", "must be positive");
  require(altitude > 0.0, "altitude", "must be positive");
  require(goal_reward_cap > 0.0, "goal_reward_cap", "must be positive");
  require(collision_radius > 0.0, "collision_radius", "must be positive");
  require(goal_radius > 0.0, "goal_radius", "must be positive");
  require(wind_std >= 0.0, "wind_std", "must be non-negative");
  require(a_max > 0.0, "a_max", "must be positive");
  require(v_max > 0.0, "v_max", "must be positive");
  require(max_episode_steps > 0, "max_episode_steps", "must be positive");
  require(destination.x() >= 0.0 && destination.x() <= region_side &&
              destination.y() >= 0.0 && destination.y() <= region_side,
          "destination", "must lie inside the region");
}

std::vector<UavState> reset(std::uint64_t rng_seed, const WorldConfig& cfg) {
  std::mt19937_64 rng(rng_seed);
  std::uniform_real_distribution<double> coord(0.0, cfg.region_side);
  std::vector<UavState> states(static_cast<std::size_t>(cfg.n_agents));
  for (auto& s : states) {
    // Sequenced explicitly: argument evaluation order is unspecified.
    const double x = coord(rng);
    const double y = coord(rng);
    s.position = Vec2(x, y);
    s.velocity = Vec2::Zero();
    s.altitude = cfg.altitude;
  }
  return states;
}

UavState step_dynamics(const UavState& state, const ControlAction& action,
                       const Vec2& wind, double dt, const WorldConfig& cfg) {
  const Vec2 accel = clip_norm(action.acceleration, cfg.a_max) + wind;
  UavState next = state;
  next.velocity = clip_norm(state.velocity + accel * dt, cfg.v_max);
  Vec2 p = state.position + state.velocity * dt + 0.5 * accel * dt * dt;
  p = p.cwiseMax(0.0).cwiseMin(cfg.region_side);
  next.position = p;
  return next;
}

double positive_reward(const UavState& state, const WorldConfig& cfg) {
  const double d = (state.position - cfg.destination).norm();
  if (d <= 0.0) return cfg.goal_reward_cap;
  return std::min(1.0 / std::sqrt(d), cfg.goal_reward_cap);
}

double negative_reward(int agent, const std::vector<UavState>& states,
                       const WorldConfig& cfg) {
  (void)cfg;
  const auto n = static_cast<int>(states.size());
  double sum = 0.0;
  for (int m = 0; m < n; ++m) {
    if (m == agent) continue;
    const double d = std::max(
        (states[static_cast<std::size_t>(agent)].position - states[static_cast<std::size_t>(m)].position).norm(),
        kDistanceFloor);
    sum += 1.0 / std::sqrt(d);
  }
  return -sum / static_cast<double>(n);
}

Events detect_events(const std::vector<UavState>& states, const WorldConfig& cfg,
                     const std::vector<bool>* active) {
  Events ev;
  const auto n = static_cast<int>(states.size());
  ev.arrived.resize(states.size());
  for (int i = 0; i < n; ++i) {
    const auto& si = states[static_cast<std::size_t>(i)];
    ev.arrived[static_cast<std::size_t>(i)] = (si.position - cfg.destination).norm() <= cfg.goal_radius;
    for (int j = i + 1; j < n; ++j) {
      if (active && !(*active)[static_cast<std::size_t>(i)] && !(*active)[static_cast<std::size_t>(j)]) {
        continue;
      }
      if ((si.position - states[static_cast<std::size_t>(j)].position).norm() < cfg.collision_radius) {
        ev.collided_pairs.emplace_back(i, j);
      }
    }
  }
  return ev;
}

Vec2 sample_wind(std::mt19937_64& rng, const WorldConfig& cfg) {
  if (cfg.wind_std <= 0.0) return Vec2::Zero();
  std::normal_distribution<double> g(0.0, cfg.wind_std);
  const double x = g(rng);
  const double y = g(rng);
  return {x, y};
}

World::World(WorldConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

const std::vector<UavState>& World::reset(std::uint64_t seed) {
  // Positions and wind draw from separate streams so that the initial layout
  // depends on the seed alone.
  states_ = env::reset(seed, cfg_);
  rng_.seed(seed ^ 0x9e3779b97f4a7c15ULL);
  arrived_ = detect_events(states_, cfg_).arrived;
  steps_ = 0;
  return states_;
}

void World::set_states(std::vector<UavState> states) {
  if (static_cast<int>(states.size()) != cfg_.n_agents) {
    throw std::invalid_argument("world.set_states: agent count mismatch");
  }
  states_ = std::move(states);
  arrived_ = detect_events(states_, cfg_).arrived;
  steps_ = 0;
}

bool World::all_arrived() const {
  return std::all_of(arrived_.begin(), arrived_.end(), [](bool a) { return a; });
}

StepOutcome World::step(const std::vector<ControlAction>& actions, double dt) {
  if (static_cast<int>(actions.size()) != cfg_.n_agents) {
    throw std::invalid_argument("world.step: action count mismatch");
  }
  const std::vector<bool> flying = [&] {
    std::vector<bool> f(arrived_.size());
    for (std::size_t i = 0; i < f.size(); ++i) f[i] = !arrived_[i];
    return f;
  }();

  for (std::size_t i = 0; i < states_.size(); ++i) {
    // Wind is drawn for every agent so the stream does not depend on arrivals.
    const Vec2 wind = sample_wind(rng_, cfg_);
    if (arrived_[i]) continue;
    states_[i] = step_dynamics(states_[i], actions[i], wind, dt, cfg_);
  }
  ++steps_;

  StepOutcome out;
  Events ev = detect_events(states_, cfg_, &flying);
  for (std::size_t i = 0; i < states_.size(); ++i) {
    if (ev.arrived[i]) arrived_[i] = true;
  }
  out.next_states = states_;
  out.collided_pairs = std::move(ev.collided_pairs);
  out.done_flags = arrived_;
  const auto n = states_.size();
  out.rewards.resize(n);
  out.positive_rewards.resize(n);
  out.negative_rewards.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    out.positive_rewards[i] = positive_reward(states_[i], cfg_);
    out.negative_rewards[i] = negative_reward(static_cast<int>(i), states_, cfg_);
    out.rewards[i] = out.positive_rewards[i] + out.negative_rewards[i];
  }
  return out;
}

Eigen::Vector4d observe(const UavState& state, const WorldConfig& cfg) {
  Eigen::Vector4d o;
  o << (state.position - cfg.destination) / cfg.region_side, state.velocity / cfg.v_max;
  return o;
}

}  // namespace skylink::env
