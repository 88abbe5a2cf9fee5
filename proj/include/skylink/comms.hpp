#pragma once

#include "skylink/env.hpp"
#include "skylink/mechanism.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <vector>

namespace skylink::comms {

using Vec3 = Eigen::Vector3d;

double dbm_to_watts(double dbm);
double watts_to_dbm(double watts);

struct ChannelConfig {
  double bandwidth = 5e6;          // Hz, per agent-helper link
  double tx_power_uav = 0.1;       // W, uplink (20 dBm)
  double tx_power_helper = 1.0;    // W, downlink
  double noise_density = 1e-13;    // W/Hz (-100 dBm/Hz)
  double carrier_freq = 2e9;       // Hz
  Vec3 helper_position = Vec3(200.0, 200.0, 0.0);
  double delay_limit = 1.0;        // s, per leg and per control interval
  int float_width_bits = 32;

  void validate() const;
};

struct LinkBudget {
  double path_loss_db = 0.0;
  double ul_rate = 0.0;  // bit/s
  double dl_rate = 0.0;  // bit/s
  double ul_delay = 0.0;
  double dl_delay = 0.0;
  bool stale_ul = false;
  bool stale_dl = false;
  double energy = 0.0;  // J, both legs
};

struct PayloadSpec {
  Method method = Method::Isha;
  int embedding_dim = 63;
  int sub_message_dim = 21;
  int n_iterations_or_heads = 1;
  int n_agents = 4;
};

enum class Direction { Uplink, Downlink };

/// LOS urban-micro aerial path loss in dB. The UAV altitude is taken from
/// uav_pos.z(); distances below 1 m are clamped.
double path_loss(const Vec3& uav_pos, const Vec3& helper_pos, double carrier_freq);

/// B log2(1 + P / (N0 B) 10^(-L/10)).
double data_rate(double path_loss_db, double tx_power, const ChannelConfig& cfg);

/// Bits carried per agent per round on one leg.
std::int64_t payload_bits(const PayloadSpec& spec, Direction dir, int float_width_bits = 32);

/// Bits for a whole round (all agents) on one leg.
std::int64_t round_bits(const PayloadSpec& spec, Direction dir, int float_width_bits = 32);

/// Per-leg transmit energy; a stale leg is charged for the full delay window.
double leg_energy(double delay, double tx_power, double delay_limit);

/// UL energy at the UAV plus DL energy at the helper.
double tx_energy(const LinkBudget& budget, const ChannelConfig& cfg);

std::vector<LinkBudget> round_delays(const std::vector<env::UavState>& states,
                                     const PayloadSpec& spec, const ChannelConfig& cfg);

/// min(delay_limit, max_n (ul + dl)).
double control_interval(const std::vector<LinkBudget>& budgets, const ChannelConfig& cfg);

/// Last successfully delivered payload per agent for one leg.
class StaleCache {
 public:
  explicit StaleCache(int n_agents = 0) : last_(static_cast<std::size_t>(n_agents)) {}

  void reset(int n_agents) { last_.assign(static_cast<std::size_t>(n_agents), {}); }

  /// Returns the payload the receiver actually uses: `fresh` when delivered,
  /// otherwise the last delivered one (zeros if nothing got through yet).
  Eigen::VectorXd deliver(int agent, bool stale, const Eigen::VectorXd& fresh);

 private:
  std::vector<Eigen::VectorXd> last_;
};

}  // namespace skylink::comms
