#include "skylink/env.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace skylink::env;

namespace {

UavState at(double x, double y) {
  UavState s;
  s.position = Vec2(x, y);
  return s;
}

WorldConfig no_wind(WorldConfig cfg = {}) {
  cfg.wind_std = 0.0;
  return cfg;
}

}  // namespace

TEST(Reset, PositionsInsideRegionAtRest) {
  WorldConfig cfg;
  cfg.region_side = 1000.0;
  const auto states = reset(7, cfg);
  ASSERT_EQ(states.size(), 4u);
  for (const auto& s : states) {
    EXPECT_GE(s.position.x(), 0.0);
    EXPECT_LE(s.position.x(), 1000.0);
    EXPECT_GE(s.position.y(), 0.0);
    EXPECT_LE(s.position.y(), 1000.0);
    EXPECT_EQ(s.velocity, Vec2::Zero());
    EXPECT_EQ(s.altitude, cfg.altitude);
  }
}

TEST(Reset, SameSeedSameStatesDifferentSeedDifferentStates) {
  WorldConfig cfg;
  const auto a = reset(7, cfg);
  const auto b = reset(7, cfg);
  const auto c = reset(8, cfg);
  bool any_diff = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].position, b[i].position);
    any_diff = any_diff || a[i].position != c[i].position;
  }
  EXPECT_TRUE(any_diff);
}

TEST(StepDynamics, RestStaysAtRest) {
  const auto cfg = no_wind();
  const auto next = step_dynamics(at(0, 0), {}, Vec2::Zero(), 0.1, cfg);
  EXPECT_EQ(next.position, Vec2(0, 0));
  EXPECT_EQ(next.velocity, Vec2(0, 0));
}

TEST(StepDynamics, UniformMotion) {
  const auto cfg = no_wind();
  auto s = at(0, 0);
  s.velocity = Vec2(10, 0);
  const auto next = step_dynamics(s, {}, Vec2::Zero(), 0.1, cfg);
  EXPECT_NEAR(next.position.x(), 1.0, 1e-12);
  EXPECT_NEAR(next.position.y(), 0.0, 1e-12);
  EXPECT_NEAR(next.velocity.x(), 10.0, 1e-12);
}

TEST(StepDynamics, ConstantAccelerationFromRest) {
  const auto cfg = no_wind();
  ControlAction a;
  a.acceleration = Vec2(2, 0);
  const auto next = step_dynamics(at(0, 0), a, Vec2::Zero(), 0.1, cfg);
  EXPECT_NEAR(next.velocity.x(), 0.2, 1e-12);
  EXPECT_NEAR(next.position.x(), 0.01, 1e-12);
  EXPECT_EQ(next.altitude, 50.0);
}

TEST(StepDynamics, ClipsActionSpeedAndRegion) {
  WorldConfig cfg = no_wind();
  ControlAction a;
  a.acceleration = Vec2(300, 400);  // magnitude 500 -> a_max along (0.6, 0.8)
  const auto next = step_dynamics(at(100, 100), a, Vec2::Zero(), 1.0, cfg);
  EXPECT_NEAR(next.velocity.x(), 0.6 * cfg.a_max, 1e-12);
  EXPECT_NEAR(next.velocity.y(), 0.8 * cfg.a_max, 1e-12);

  auto fast = at(199, 199);
  fast.velocity = Vec2(100, 0);
  const auto clipped = step_dynamics(fast, {}, Vec2::Zero(), 1.0, cfg);
  EXPECT_NEAR(clipped.velocity.norm(), cfg.v_max, 1e-12);
  EXPECT_EQ(clipped.position.x(), cfg.region_side);
}

TEST(PositiveReward, Examples) {
  WorldConfig cfg;
  EXPECT_DOUBLE_EQ(positive_reward(at(1, 0), cfg), 1.0);
  EXPECT_DOUBLE_EQ(positive_reward(at(0, 0), cfg), 1.0);
  EXPECT_DOUBLE_EQ(positive_reward(at(0, 4), cfg), 0.5);
}

TEST(PositiveReward, BoundedAndNonIncreasing) {
  WorldConfig cfg;
  double prev = cfg.goal_reward_cap;
  for (double d = 0.0; d < 300.0; d += 0.37) {
    const double r = positive_reward(at(d / std::sqrt(2.0), d / std::sqrt(2.0)), cfg);
    EXPECT_GT(r, 0.0);
    EXPECT_LE(r, cfg.goal_reward_cap);
    EXPECT_LE(r, prev + 1e-15);
    prev = r;
  }
}

TEST(NegativeReward, Examples) {
  WorldConfig cfg;
  cfg.n_agents = 2;
  EXPECT_DOUBLE_EQ(negative_reward(0, {at(0, 0), at(1, 0)}, cfg), -0.5);
  EXPECT_NEAR(negative_reward(0, {at(0, 0), at(1e6, 0)}, cfg), -5e-4, 1e-12);

  cfg.n_agents = 4;
  const std::vector<UavState> s{at(0, 0), at(4, 0), at(0, 4), at(-4, 0)};
  EXPECT_DOUBLE_EQ(negative_reward(0, s, cfg), -0.375);
}

TEST(NegativeReward, CoincidentPositionsAreFloored) {
  WorldConfig cfg;
  cfg.n_agents = 2;
  const double r = negative_reward(0, {at(3, 3), at(3, 3)}, cfg);
  EXPECT_DOUBLE_EQ(r, -0.5 / std::sqrt(kDistanceFloor));
}

TEST(NegativeReward, StrictlyNegativeAndPermutationInvariant) {
  WorldConfig cfg;
  const std::vector<UavState> s{at(10, 10), at(50, 20), at(120, 180), at(30, 90)};
  const std::vector<UavState> p{at(10, 10), at(30, 90), at(50, 20), at(120, 180)};
  EXPECT_LT(negative_reward(0, s, cfg), 0.0);
  EXPECT_NEAR(negative_reward(0, s, cfg), negative_reward(0, p, cfg), 1e-15);
}

TEST(DetectEvents, Examples) {
  WorldConfig cfg;
  cfg.n_agents = 2;
  EXPECT_EQ(detect_events({at(50, 50), at(50, 50)}, cfg).collided_pairs.size(), 1u);
  EXPECT_TRUE(detect_events({at(0, 0), at(200, 0)}, cfg).collided_pairs.empty());

  cfg.n_agents = 3;
  const auto ev = detect_events({at(100, 100), at(101, 100), at(100, 101)}, cfg);
  ASSERT_EQ(ev.collided_pairs.size(), 3u);
  EXPECT_EQ(ev.collided_pairs[0], AgentPair(0, 1));
  EXPECT_EQ(ev.collided_pairs[1], AgentPair(0, 2));
  EXPECT_EQ(ev.collided_pairs[2], AgentPair(1, 2));
}

TEST(DetectEvents, ArrivalAndInactivePairs) {
  WorldConfig cfg;
  cfg.n_agents = 3;
  const std::vector<UavState> s{at(1, 1), at(2, 1), at(9.9, 0)};
  const auto ev = detect_events(s, cfg);
  EXPECT_TRUE(ev.arrived[0] && ev.arrived[1] && ev.arrived[2]);
  const std::vector<bool> active{false, false, true};
  const auto filtered = detect_events(s, cfg, &active);
  for (const auto& pr : filtered.collided_pairs) EXPECT_TRUE(pr.first == 2 || pr.second == 2);
  EXPECT_EQ(filtered.collided_pairs.size(), ev.collided_pairs.size() - 1);
}

TEST(SampleWind, ZeroStdIsZero) {
  std::mt19937_64 rng(1);
  const auto cfg = no_wind();
  for (int i = 0; i < 100; ++i) EXPECT_EQ(sample_wind(rng, cfg), Vec2::Zero());
}

TEST(SampleWind, MomentsMatch) {
  std::mt19937_64 rng(12345);
  WorldConfig cfg;
  const int n = 100000;
  Vec2 sum = Vec2::Zero(), sq = Vec2::Zero();
  for (int i = 0; i < n; ++i) {
    const Vec2 w = sample_wind(rng, cfg);
    sum += w;
    sq += w.cwiseProduct(w);
  }
  const Vec2 mean = sum / n;
  const double bound = 3.0 * cfg.wind_std / std::sqrt(static_cast<double>(n));
  for (int k = 0; k < 2; ++k) {
    EXPECT_LT(std::abs(mean[k]), bound);
    const double sd = std::sqrt(sq[k] / n - mean[k] * mean[k]);
    EXPECT_LT(std::abs(sd - cfg.wind_std) / cfg.wind_std, 0.02);
  }
}

TEST(World, ArrivedAgentsFreeze) {
  WorldConfig cfg;
  cfg.n_agents = 2;
  World w(cfg);
  w.set_states({at(3, 3), at(150, 150)});
  ASSERT_TRUE(w.arrived()[0]);
  ControlAction push;
  push.acceleration = Vec2(5, 5);
  for (int k = 0; k < 10; ++k) {
    const auto out = w.step({push, push}, 0.1);
    EXPECT_EQ(out.next_states[0].position, Vec2(3, 3));
    EXPECT_TRUE(out.done_flags[0]);
  }
  EXPECT_NE(w.states()[1].position, Vec2(150, 150));
}

TEST(World, RewardIsPositivePlusNegative) {
  World w(WorldConfig{});
  w.reset(3);
  const auto out = w.step(std::vector<ControlAction>(4), 0.1);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_DOUBLE_EQ(out.rewards[i], out.positive_rewards[i] + out.negative_rewards[i]);
    EXPECT_DOUBLE_EQ(out.positive_rewards[i], positive_reward(out.next_states[i], w.config()));
  }
}

TEST(World, DeterministicForSeed) {
  World a(WorldConfig{}), b(WorldConfig{});
  a.reset(11);
  b.reset(11);
  ControlAction u;
  u.acceleration = Vec2(1, -2);
  for (int k = 0; k < 20; ++k) {
    const auto oa = a.step(std::vector<ControlAction>(4, u), 0.1);
    const auto ob = b.step(std::vector<ControlAction>(4, u), 0.1);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(oa.next_states[i].position, ob.next_states[i].position);
  }
}

TEST(WorldConfig, ValidationNamesField) {
  WorldConfig cfg;
  cfg.collision_radius = -1.0;
  try {
    cfg.validate();
    FAIL() << "expected rejection";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("world.collision_radius"), std::string::npos);
  }
}

TEST(Observe, RelativeAndScaled) {
  WorldConfig cfg;
  cfg.destination = Vec2(100, 100);
  auto s = at(150, 50);
  s.velocity = Vec2(15, -30);
  const auto o = observe(s, cfg);
  EXPECT_DOUBLE_EQ(o[0], 0.25);
  EXPECT_DOUBLE_EQ(o[1], -0.25);
  EXPECT_DOUBLE_EQ(o[2], 0.5);
  EXPECT_DOUBLE_EQ(o[3], -1.0);
}
