#include "skylink/comms.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace skylink;
using namespace skylink::comms;

namespace {

PayloadSpec spec_for(Method m, int count) {
  PayloadSpec s;
  s.method = m;
  s.n_iterations_or_heads = count;
  return s;
}

env::UavState uav(double x, double y, double h = 50.0) {
  env::UavState s;
  s.position = env::Vec2(x, y);
  s.altitude = h;
  return s;
}

}  // namespace

TEST(PathLoss, UnitDistanceLeavesCarrierTerm) {
  // 30.9 + 20 log10(2), 30 significant digits.
  EXPECT_NEAR(path_loss(Vec3(0, 0, 50), Vec3(0, 0, 49), 2e9), 36.9205999132796224831893063743, 1e-12);
}

TEST(PathLoss, DistanceSlope) {
  const double l10 = path_loss(Vec3(10, 0, 50), Vec3(0, 0, 50), 2e9);
  const double l100 = path_loss(Vec3(100, 0, 50), Vec3(0, 0, 50), 2e9);
  EXPECT_NEAR(l100 - l10, 21.4005149978319905976068694474, 1e-12);
}

TEST(PathLoss, CarrierDoubling) {
  const double a = path_loss(Vec3(80, 20, 50), Vec3(0, 0, 0), 2e9);
  const double b = path_loss(Vec3(80, 20, 50), Vec3(0, 0, 0), 4e9);
  EXPECT_NEAR(b - a, 20.0 * std::log10(2.0), 1e-12);
}

TEST(PathLoss, SlantRangeGeometry) {
  // d = sqrt(150^2 + 150^2 + 50^2), h = 50, f = 2 GHz.
  EXPECT_NEAR(path_loss(Vec3(50, 50, 50), Vec3(200, 200, 0), 2e9), 86.9624257798006153383068329669,
              1e-10);
}

TEST(DataRate, UnitSnrGivesBandwidth) {
  ChannelConfig cfg;
  EXPECT_NEAR(data_rate(0.0, cfg.noise_density * cfg.bandwidth, cfg), cfg.bandwidth, 1e-6);
}

TEST(DataRate, StrictlyDecreasingInPathLoss) {
  ChannelConfig cfg;
  double prev = data_rate(40.0, 1.0, cfg);
  for (double l = 41.0; l < 160.0; l += 1.0) {
    const double r = data_rate(l, 1.0, cfg);
    EXPECT_LT(r, prev);
    prev = r;
  }
}

TEST(DataRate, IncreasingInPowerAndBandwidth) {
  ChannelConfig cfg;
  EXPECT_LT(data_rate(90.0, 0.1, cfg), data_rate(90.0, 0.2, cfg));
  ChannelConfig wide = cfg;
  wide.bandwidth *= 2.0;
  EXPECT_LT(data_rate(90.0, 0.1, cfg), data_rate(90.0, 0.1, wide));
}

TEST(PayloadBits, PerAgentAndRound) {
  EXPECT_EQ(payload_bits(spec_for(Method::Isha, 1), Direction::Downlink), 672);
  EXPECT_EQ(round_bits(spec_for(Method::Isha, 1), Direction::Downlink), 2688);
  EXPECT_EQ(payload_bits(spec_for(Method::Vanilla, 0), Direction::Downlink), 6048);
  EXPECT_EQ(round_bits(spec_for(Method::Vanilla, 0), Direction::Downlink), 24192);
  for (auto m : {Method::Vanilla, Method::Mha, Method::Isha}) {
    EXPECT_EQ(payload_bits(spec_for(m, 3), Direction::Uplink), 2016);
    EXPECT_EQ(round_bits(spec_for(m, 3), Direction::Uplink), 8064);
  }
  EXPECT_EQ(round_bits(spec_for(Method::Isha, 3), Direction::Downlink), 8064);
  EXPECT_EQ(round_bits(spec_for(Method::Mha, 3), Direction::Downlink), 8064);
}

TEST(RoundDelays, NearHelperHugePowerIsFast) {
  ChannelConfig cfg;
  cfg.tx_power_uav = 1e3;
  cfg.tx_power_helper = 1e3;
  const auto b = round_delays({uav(200, 200, 1.0)}, spec_for(Method::Isha, 1), cfg);
  ASSERT_EQ(b.size(), 1u);
  EXPECT_FALSE(b[0].stale_ul);
  EXPECT_FALSE(b[0].stale_dl);
  EXPECT_LT(control_interval(b, cfg), 1e-3);
  EXPECT_NEAR(b[0].ul_delay, 2016.0 / b[0].ul_rate, 1e-15);
}

TEST(RoundDelays, LowPowerMarksStaleAndCapsInterval) {
  ChannelConfig cfg;
  cfg.tx_power_uav = 1e-9;
  const auto b = round_delays({uav(0, 0), uav(50, 50)}, spec_for(Method::Isha, 1), cfg);
  for (const auto& x : b) {
    EXPECT_TRUE(x.stale_ul);
    EXPECT_EQ(x.stale_ul, x.ul_delay > cfg.delay_limit);
    EXPECT_EQ(x.stale_dl, x.dl_delay > cfg.delay_limit);
  }
  EXPECT_EQ(control_interval(b, cfg), cfg.delay_limit);
}

TEST(RoundDelays, VanillaToIshaDownlinkRatioIsNine) {
  ChannelConfig cfg;
  const std::vector<env::UavState> s{uav(10, 20), uav(150, 40), uav(90, 190), uav(199, 1)};
  const auto v = round_delays(s, spec_for(Method::Vanilla, 0), cfg);
  const auto i = round_delays(s, spec_for(Method::Isha, 1), cfg);
  for (std::size_t k = 0; k < s.size(); ++k) EXPECT_NEAR(v[k].dl_delay / i[k].dl_delay, 9.0, 1e-12);
}

TEST(RoundDelays, Deterministic) {
  ChannelConfig cfg;
  const std::vector<env::UavState> s{uav(10, 20), uav(150, 40)};
  const auto a = round_delays(s, spec_for(Method::Mha, 3), cfg);
  const auto b = round_delays(s, spec_for(Method::Mha, 3), cfg);
  for (std::size_t k = 0; k < s.size(); ++k) {
    EXPECT_EQ(a[k].ul_delay, b[k].ul_delay);
    EXPECT_EQ(a[k].dl_delay, b[k].dl_delay);
  }
}

TEST(TxEnergy, Examples) {
  EXPECT_DOUBLE_EQ(leg_energy(0.01, 1.0, 1.0), 0.01);
  EXPECT_DOUBLE_EQ(leg_energy(3.0, 0.5, 1.0), 0.5);
  ChannelConfig cfg;
  const auto one = round_delays({uav(40, 40)}, spec_for(Method::Mha, 3), cfg);
  const auto two = round_delays({uav(40, 40)}, spec_for(Method::Vanilla, 0), cfg);
  // Vanilla DL carries 3x the MHA payload; the UL leg is identical.
  const double dl_one = one[0].energy - leg_energy(one[0].ul_delay, cfg.tx_power_uav, cfg.delay_limit);
  const double dl_two = two[0].energy - leg_energy(two[0].ul_delay, cfg.tx_power_uav, cfg.delay_limit);
  ASSERT_LT(two[0].dl_delay, cfg.delay_limit);
  EXPECT_NEAR(dl_two / dl_one, 3.0, 1e-9);
}

TEST(StaleCache, ReusesLastDelivered) {
  StaleCache c(2);
  const Eigen::VectorXd a = Eigen::VectorXd::Constant(3, 1.0);
  const Eigen::VectorXd b = Eigen::VectorXd::Constant(3, 2.0);
  EXPECT_EQ(c.deliver(0, true, a), Eigen::VectorXd::Zero(3));
  EXPECT_EQ(c.deliver(0, false, a), a);
  EXPECT_EQ(c.deliver(0, true, b), a);
  EXPECT_EQ(c.deliver(1, false, b), b);
  EXPECT_EQ(c.deliver(0, false, b), b);
}

TEST(Power, DbmConversions) {
  EXPECT_DOUBLE_EQ(dbm_to_watts(30.0), 1.0);
  EXPECT_NEAR(dbm_to_watts(20.0), 0.1, 1e-15);
  EXPECT_NEAR(watts_to_dbm(0.001), 0.0, 1e-12);
}

TEST(ChannelConfig, ValidationNamesField) {
  ChannelConfig cfg;
  cfg.bandwidth = 0.0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}
