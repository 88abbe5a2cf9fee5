#include "skylink/comms.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace skylink::comms {

double dbm_to_watts(double dbm) { return std::pow(10.0, (dbm - 30.0) / 10.0); }
double watts_to_dbm(double watts) { return 10.0 * std::log10(watts) + 30.0; }

void ChannelConfig::validate() const {
  auto require = [](bool ok, const char* field) {
    if (!ok) throw std::invalid_argument(std::string("channel.") + field + ": must be positive");
  };
  require(bandwidth > 0.0, "bandwidth");
  require(tx_power_uav > 0.0, "tx_power_uav");
  require(tx_power_helper > 0.0, "tx_power_helper");
  require(noise_density > 0.0, "noise_density");
  require(carrier_freq > 0.0, "carrier_freq");
  require(delay_limit > 0.0, "delay_limit");
  require(float_width_bits > 0, "float_width_bits");
}

double path_loss(const Vec3& uav_pos, const Vec3& helper_pos, double carrier_freq) {
  const double d = std::max((uav_pos - helper_pos).norm(), 1.0);
  const double h = std::max(uav_pos.z(), 1.0);
  const double f_ghz = carrier_freq / 1e9;
  return 30.9 + (22.25 - 0.5 * std::log10(h)) * std::log10(d) + 20.0 * std::log10(f_ghz);
}

double data_rate(double path_loss_db, double tx_power, const ChannelConfig& cfg) {
  const double snr = tx_power / (cfg.noise_density * cfg.bandwidth) *
                     std::pow(10.0, -path_loss_db / 10.0);
  // log1p keeps precision in the low-SNR regime the sweeps live in.
  return cfg.bandwidth * std::log1p(snr) / std::log(2.0);
}

std::int64_t payload_bits(const PayloadSpec& spec, Direction dir, int float_width_bits) {
  const std::int64_t w = float_width_bits;
  if (dir == Direction::Uplink) return spec.embedding_dim * w;
  switch (spec.method) {
    case Method::Isha: return std::int64_t{spec.n_iterations_or_heads} * spec.sub_message_dim * w;
    case Method::Mha: return spec.embedding_dim * w;
    case Method::Vanilla: return std::int64_t{spec.n_agents - 1} * spec.embedding_dim * w;
  }
  return 0;
}

std::int64_t round_bits(const PayloadSpec& spec, Direction dir, int float_width_bits) {
  return payload_bits(spec, dir, float_width_bits) * spec.n_agents;
}

double leg_energy(double delay, double tx_power, double delay_limit) {
  return tx_power * std::min(delay, delay_limit);
}

double tx_energy(const LinkBudget& budget, const ChannelConfig& cfg) {
  return leg_energy(budget.ul_delay, cfg.tx_power_uav, cfg.delay_limit) +
         leg_energy(budget.dl_delay, cfg.tx_power_helper, cfg.delay_limit);
}

std::vector<LinkBudget> round_delays(const std::vector<env::UavState>& states,
                                     const PayloadSpec& spec, const ChannelConfig& cfg) {
  const auto ul_bits = static_cast<double>(payload_bits(spec, Direction::Uplink, cfg.float_width_bits));
  const auto dl_bits = static_cast<double>(payload_bits(spec, Direction::Downlink, cfg.float_width_bits));
  std::vector<LinkBudget> out;
  out.reserve(states.size());
  for (const auto& s : states) {
    LinkBudget b;
    const Vec3 pos(s.position.x(), s.position.y(), s.altitude);
    b.path_loss_db = path_loss(pos, cfg.helper_position, cfg.carrier_freq);
    b.ul_rate = data_rate(b.path_loss_db, cfg.tx_power_uav, cfg);
    b.dl_rate = data_rate(b.path_loss_db, cfg.tx_power_helper, cfg);
    b.ul_delay = ul_bits / b.ul_rate;
    b.dl_delay = dl_bits / b.dl_rate;
    b.stale_ul = b.ul_delay > cfg.delay_limit;
    b.stale_dl = b.dl_delay > cfg.delay_limit;
    b.energy = tx_energy(b, cfg);
    out.push_back(b);
  }
  return out;
}

double control_interval(const std::vector<LinkBudget>& budgets, const ChannelConfig& cfg) {
  double worst = 0.0;
  for (const auto& b : budgets) worst = std::max(worst, b.ul_delay + b.dl_delay);
  return std::min(worst, cfg.delay_limit);
}

Eigen::VectorXd StaleCache::deliver(int agent, bool stale, const Eigen::VectorXd& fresh) {
  auto& slot = last_.at(static_cast<std::size_t>(agent));
  if (!stale) {
    slot = fresh;
    return fresh;
  }
  if (slot.size() != fresh.size()) return Eigen::VectorXd::Zero(fresh.size());
  return slot;
}

}  // namespace skylink::comms
