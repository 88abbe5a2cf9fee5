#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <random>
#include <utility>
#include <vector>

namespace skylink::env {

using Vec2 = Eigen::Vector2d;

/// Planar kinematic state of one UAV flying at a fixed altitude.
struct UavState {
  Vec2 position = Vec2::Zero();  // m
  Vec2 velocity = Vec2::Zero();  // m/s
  double altitude = 50.0;        // m
};

struct ControlAction {
  Vec2 acceleration = Vec2::Zero();  // m/s^2
};

struct WorldConfig {
  int n_agents = 4;
  double region_side = 200.0;             // m, square region [0, side]^2
  double altitude = 50.0;                 // m
  Vec2 destination = Vec2::Zero();        // m
  double goal_reward_cap = 1.0;           // r_g
  double collision_radius = 5.0;          // m
  double goal_radius = 10.0;              // m
  double wind_std = 0.2;                  // m/s^2 per axis
  double a_max = 5.0;                     // m/s^2
  double v_max = 30.0;                    // m/s
  int max_episode_steps = 200;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
};

using AgentPair = std::pair<int, int>;

struct StepOutcome {
  std::vector<UavState> next_states;
  std::vector<double> rewards;
  std::vector<double> positive_rewards;
  std::vector<double> negative_rewards;
  std::vector<AgentPair> collided_pairs;
  std::vector<bool> done_flags;  // arrived (frozen) after this step
};

struct Events {
  std::vector<AgentPair> collided_pairs;  // i < j
  std::vector<bool> arrived;
};

/// Minimum inter-agent distance used by negative_reward.
inline constexpr double kDistanceFloor = 1e-3;

std::vector<UavState> reset(std::uint64_t rng_seed, const WorldConfig& cfg);

/// Clips the action to a_max (by magnitude), integrates one step, then clips
/// speed to v_max and position to the region.
UavState step_dynamics(const UavState& state, const ControlAction& action,
                       const Vec2& wind, double dt, const WorldConfig& cfg);

double positive_reward(const UavState& state, const WorldConfig& cfg);
double negative_reward(int agent, const std::vector<UavState>& states,
                       const WorldConfig& cfg);

/// Collision pairs are all (i, j), i < j, closer than collision_radius.
/// When `active` is given, pairs where both agents are inactive are skipped.
Events detect_events(const std::vector<UavState>& states, const WorldConfig& cfg,
                     const std::vector<bool>* active = nullptr);

Vec2 sample_wind(std::mt19937_64& rng, const WorldConfig& cfg);

/// One simulated airspace. Owns the wind RNG and the arrival (frozen) flags.
class World {
 public:
  explicit World(WorldConfig cfg);

  const std::vector<UavState>& reset(std::uint64_t seed);
  /// Sets an explicit initial configuration (used for scripted scenarios).
  void set_states(std::vector<UavState> states);

  /// Advances every non-frozen agent by dt under its action plus fresh wind.
  StepOutcome step(const std::vector<ControlAction>& actions, double dt);

  const std::vector<UavState>& states() const { return states_; }
  const std::vector<bool>& arrived() const { return arrived_; }
  bool all_arrived() const;
  const WorldConfig& config() const { return cfg_; }
  int steps() const { return steps_; }

 private:
  WorldConfig cfg_;
  std::mt19937_64 rng_;
  std::vector<UavState> states_;
  std::vector<bool> arrived_;
  int steps_ = 0;
};

/// Agent-local observation: offset to the destination / region_side,
/// velocity / v_max.
Eigen::Vector4d observe(const UavState& state, const WorldConfig& cfg);

}  // namespace skylink::env
