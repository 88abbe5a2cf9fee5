#include "skylink/harness.hpp"

#include "json.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#ifndef SKYLINK_VERSION
#define SKYLINK_VERSION "unknown"
#endif

namespace skylink::harness {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Splits "path: what" messages thrown by component validators.
[[noreturn]] void rethrow_as_config_error(const std::invalid_argument& e) {
  const std::string msg = e.what();
  const auto colon = msg.find(": ");
  if (colon == std::string::npos) throw ConfigError("config", msg);
  throw ConfigError(msg.substr(0, colon), msg.substr(colon + 2));
}

// Reads the members of one JSON object, tracking which keys were consumed so
// that leftovers can be reported as unknown.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_.empty() ? "config" : path_, "must be an object");
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const json* find(const std::string& key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void get(const std::string& key, double& out) {
    if (const json* v = find(key)) {
      if (!v->is_number()) throw ConfigError(field(key), "must be a number");
      out = v->get<double>();
    }
  }

  void get(const std::string& key, int& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_integer()) throw ConfigError(field(key), "must be an integer");
      out = v->get<int>();
    }
  }

  void get(const std::string& key, std::string& out) {
    if (const json* v = find(key)) {
      if (!v->is_string()) throw ConfigError(field(key), "must be a string");
      out = v->get<std::string>();
    }
  }

  void get(const std::string& key, std::vector<int>& out) {
    if (const json* v = find(key)) {
      if (!v->is_array()) throw ConfigError(field(key), "must be an array of integers");
      out.clear();
      for (std::size_t i = 0; i < v->size(); ++i) {
        if (!(*v)[i].is_number_integer()) {
          throw ConfigError(field(key) + "[" + std::to_string(i) + "]", "must be an integer");
        }
        out.push_back((*v)[i].get<int>());
      }
    }
  }

  template <int Dim>
  void get(const std::string& key, Eigen::Matrix<double, Dim, 1>& out) {
    if (const json* v = find(key)) {
      if (!v->is_array() || v->size() != static_cast<std::size_t>(Dim)) {
        throw ConfigError(field(key), "must be an array of " + std::to_string(Dim) + " numbers");
      }
      for (int i = 0; i < Dim; ++i) {
        if (!(*v)[static_cast<std::size_t>(i)].is_number()) {
          throw ConfigError(field(key) + "[" + std::to_string(i) + "]", "must be a number");
        }
        out[i] = (*v)[static_cast<std::size_t>(i)].get<double>();
      }
    }
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(field(it.key()), "unknown key");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

json world_json(const env::WorldConfig& w) {
  return {{"n_agents", w.n_agents},
          {"region_side", w.region_side},
          {"altitude", w.altitude},
          {"destination", {w.destination.x(), w.destination.y()}},
          {"goal_reward_cap", w.goal_reward_cap},
          {"collision_radius", w.collision_radius},
          {"goal_radius", w.goal_radius},
          {"wind_std", w.wind_std},
          {"a_max", w.a_max},
          {"v_max", w.v_max},
          {"max_episode_steps", w.max_episode_steps}};
}

json channel_json(const comms::ChannelConfig& c) {
  return {{"bandwidth", c.bandwidth},
          {"tx_power_uav", c.tx_power_uav},
          {"tx_power_helper", c.tx_power_helper},
          {"noise_density", c.noise_density},
          {"carrier_freq", c.carrier_freq},
          {"helper_position", {c.helper_position.x(), c.helper_position.y(), c.helper_position.z()}},
          {"delay_limit", c.delay_limit},
          {"float_width_bits", c.float_width_bits}};
}

json sac_json(const madrl::SacConfig& s) {
  return {{"gamma", s.gamma},
          {"entropy_weight", s.entropy_weight},
          {"tau", s.tau},
          {"batch_size", s.batch_size},
          {"replay_capacity", s.replay_capacity},
          {"warmup_steps", s.warmup_steps},
          {"update_every", s.update_every},
          {"updates_per_round", s.updates_per_round},
          {"episodes", s.episodes},
          {"actor_lr", s.actor_lr},
          {"critic_lr", s.critic_lr}};
}

std::string lowercase(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

std::string channel_mode_name(ChannelMode m) { return m == ChannelMode::Perfect ? "perfect" : "modeled"; }

std::string format_double(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_atomic(const std::string& path, const std::string& text) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp);
    out << text;
  }
  fs::rename(tmp, path);
}

void write_checkpoint_atomic(const std::string& path, const std::vector<nn::NamedBlock>& blocks) {
  const std::string tmp = path + ".tmp";
  nn::write_checkpoint(tmp, blocks);
  fs::rename(tmp, path);
}

// Strings travel through checkpoints as one byte per matrix entry.
nn::NamedBlock string_block(const std::string& name, const std::string& s) {
  madrl::Matrix m(1, static_cast<Eigen::Index>(s.size()));
  for (std::size_t i = 0; i < s.size(); ++i) m(0, static_cast<Eigen::Index>(i)) = static_cast<unsigned char>(s[i]);
  return {name, m};
}

std::string block_string(const madrl::Matrix& m) {
  std::string s(static_cast<std::size_t>(m.size()), '\0');
  for (Eigen::Index i = 0; i < m.size(); ++i) s[static_cast<std::size_t>(i)] = static_cast<char>(static_cast<int>(m(i)));
  return s;
}

const madrl::Matrix& require_block(const std::vector<nn::NamedBlock>& blocks, const std::string& name) {
  for (const auto& b : blocks)
    if (b.name == name) return b.value;
  throw std::runtime_error("checkpoint has no block " + name);
}

// Keeps the header and the first `rows` data lines of a CSV.
void truncate_csv(const std::string& path, int rows) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::string line, kept;
  for (int i = 0; i <= rows && std::getline(in, line); ++i) kept += line + "\n";
  in.close();
  write_file_atomic(path, kept);
}

int csv_data_rows(const std::string& path) {
  std::ifstream in(path);
  if (!in) return 0;
  std::string line;
  int n = -1;
  while (std::getline(in, line))
    if (!line.empty()) ++n;
  return std::max(n, 0);
}

std::unique_ptr<madrl::Learner> make_learner(const ExperimentConfig& cfg, std::uint64_t seed) {
  return std::make_unique<madrl::Learner>(cfg.world.n_agents, cfg.mechanism, cfg.sac, seed,
                                          cfg.network);
}

json summary_json(const EvalSummary& s) {
  return {{"episodes", s.episodes},
          {"total_steps", s.total_steps},
          {"travel_time_mean", s.travel_time_mean},
          {"travel_time_max", s.travel_time_max},
          {"collision_rate", s.collision_rate},
          {"system_reward", s.system_reward},
          {"energy", s.energy},
          {"control_interval", s.control_interval},
          {"stale_dl_fraction", s.stale_dl_fraction}};
}

}  // namespace

// ---------------------------------------------------------------------------

void ExperimentConfig::validate() const {
  try {
    world.validate();
    channel.validate();
    sac.validate();
    attention::validate_mechanism(mechanism, world.n_agents, network.embed_dim);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    rethrow_as_config_error(e);
  }
  if (seeds.empty()) throw ConfigError("seeds", "must not be empty");
  if (output_dir.empty()) throw ConfigError("output_dir", "must not be empty");
  if (!(control_interval > 0.0)) throw ConfigError("control_interval", "must be positive");
  if (checkpoint_every < 1) throw ConfigError("checkpoint_every", "must be at least 1");
  if (eval_episodes < 1) throw ConfigError("eval_episodes", "must be at least 1");
  if (network.encoder_hidden.empty()) throw ConfigError("network.encoder_hidden", "must not be empty");
  if (network.head_hidden.empty()) throw ConfigError("network.head_hidden", "must not be empty");
  for (std::size_t i = 0; i < network.encoder_hidden.size(); ++i)
    if (network.encoder_hidden[i] < 1)
      throw ConfigError("network.encoder_hidden[" + std::to_string(i) + "]", "must be positive");
  for (std::size_t i = 0; i < network.head_hidden.size(); ++i)
    if (network.head_hidden[i] < 1)
      throw ConfigError("network.head_hidden[" + std::to_string(i) + "]", "must be positive");
  if (!(network.head_output_init > 0.0)) throw ConfigError("network.head_output_init", "must be positive");
}

madrl::ChannelSetup ExperimentConfig::channel_setup() const {
  madrl::ChannelSetup s;
  s.perfect = channel_mode == ChannelMode::Perfect;
  s.fixed_dt = control_interval;
  s.channel = channel;
  return s;
}

ExperimentConfig parse_config(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError("config", std::string("invalid JSON: ") + e.what());
  }
  ExperimentConfig cfg;
  Section top(root, "");

  if (const json* w = top.find("world")) {
    Section s(*w, "world");
    auto& c = cfg.world;
    s.get("n_agents", c.n_agents);
    s.get("region_side", c.region_side);
    s.get("altitude", c.altitude);
    s.get("destination", c.destination);
    s.get("goal_reward_cap", c.goal_reward_cap);
    s.get("collision_radius", c.collision_radius);
    s.get("goal_radius", c.goal_radius);
    s.get("wind_std", c.wind_std);
    s.get("a_max", c.a_max);
    s.get("v_max", c.v_max);
    s.get("max_episode_steps", c.max_episode_steps);
    s.finish();
  }
  if (const json* ch = top.find("channel")) {
    Section s(*ch, "channel");
    auto& c = cfg.channel;
    s.get("bandwidth", c.bandwidth);
    s.get("tx_power_uav", c.tx_power_uav);
    s.get("tx_power_helper", c.tx_power_helper);
    s.get("noise_density", c.noise_density);
    s.get("carrier_freq", c.carrier_freq);
    s.get("helper_position", c.helper_position);
    s.get("delay_limit", c.delay_limit);
    s.get("float_width_bits", c.float_width_bits);
    s.finish();
  }
  if (const json* m = top.find("mechanism")) {
    Section s(*m, "mechanism");
    std::string method = std::string(method_name(cfg.mechanism.method));
    s.get("method", method);
    try {
      cfg.mechanism.method = parse_method(method);
    } catch (const std::invalid_argument& e) {
      throw ConfigError("mechanism.method", e.what());
    }
    s.get("count", cfg.mechanism.count);
    s.get("beta", cfg.mechanism.beta);
    s.finish();
  }
  if (const json* sc = top.find("sac")) {
    Section s(*sc, "sac");
    auto& c = cfg.sac;
    s.get("gamma", c.gamma);
    s.get("entropy_weight", c.entropy_weight);
    s.get("tau", c.tau);
    s.get("batch_size", c.batch_size);
    s.get("replay_capacity", c.replay_capacity);
    s.get("warmup_steps", c.warmup_steps);
    s.get("update_every", c.update_every);
    s.get("updates_per_round", c.updates_per_round);
    s.get("episodes", c.episodes);
    s.get("actor_lr", c.actor_lr);
    s.get("critic_lr", c.critic_lr);
    s.finish();
  }
  if (const json* n = top.find("network")) {
    Section s(*n, "network");
    s.get("encoder_hidden", cfg.network.encoder_hidden);
    s.get("head_hidden", cfg.network.head_hidden);
    s.get("head_output_init", cfg.network.head_output_init);
    s.finish();
  }
  if (const json* seeds = top.find("seeds")) {
    if (!seeds->is_array()) throw ConfigError("seeds", "must be an array of non-negative integers");
    cfg.seeds.clear();
    for (std::size_t i = 0; i < seeds->size(); ++i) {
      const auto& v = (*seeds)[i];
      if (!v.is_number_unsigned()) {
        throw ConfigError("seeds[" + std::to_string(i) + "]", "must be a non-negative integer");
      }
      cfg.seeds.push_back(v.get<std::uint64_t>());
    }
  }
  top.get("output_dir", cfg.output_dir);
  {
    std::string mode = channel_mode_name(cfg.channel_mode);
    top.get("channel_mode", mode);
    mode = lowercase(mode);
    if (mode == "perfect") {
      cfg.channel_mode = ChannelMode::Perfect;
    } else if (mode == "modeled") {
      cfg.channel_mode = ChannelMode::Modeled;
    } else {
      throw ConfigError("channel_mode", "must be \"perfect\" or \"modeled\", got \"" + mode + "\"");
    }
  }
  top.get("control_interval", cfg.control_interval);
  top.get("checkpoint_every", cfg.checkpoint_every);
  top.get("eval_episodes", cfg.eval_episodes);
  top.finish();

  cfg.validate();
  return cfg;
}

std::string config_to_json(const ExperimentConfig& cfg) {
  json j;
  j["world"] = world_json(cfg.world);
  j["channel"] = channel_json(cfg.channel);
  j["mechanism"] = {{"method", lowercase(std::string(method_name(cfg.mechanism.method)))},
                    {"count", cfg.mechanism.count},
                    {"beta", cfg.mechanism.beta}};
  j["sac"] = sac_json(cfg.sac);
  j["network"] = {{"encoder_hidden", cfg.network.encoder_hidden},
                  {"head_hidden", cfg.network.head_hidden},
                  {"head_output_init", cfg.network.head_output_init}};
  j["seeds"] = cfg.seeds;
  j["output_dir"] = cfg.output_dir;
  j["channel_mode"] = channel_mode_name(cfg.channel_mode);
  j["control_interval"] = cfg.control_interval;
  j["checkpoint_every"] = cfg.checkpoint_every;
  j["eval_episodes"] = cfg.eval_episodes;
  return j.dump(2);
}

void apply_environment_overrides(ExperimentConfig& cfg) {
  if (const char* out = std::getenv("SKYLINK_OUT"); out && *out) cfg.output_dir = out;
  if (const char* seed = std::getenv("SKYLINK_SEED"); seed && *seed) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(seed, &end, 10);
    if (*end != '\0' || seed[0] == '-') throw ConfigError("SKYLINK_SEED", "must be a non-negative integer");
    cfg.seeds = {static_cast<std::uint64_t>(v)};
  }
}

ExperimentConfig load_config(const std::string& path) {
  auto cfg = parse_config(read_file(path));
  apply_environment_overrides(cfg);
  return cfg;
}

std::string config_hash(const ExperimentConfig& cfg) {
  // The output directory and seed list do not change what a single seed
  // computes, so they stay out of the hash.
  auto copy = cfg;
  copy.output_dir = "";
  copy.seeds = {};
  const std::string text = config_to_json(copy);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string code_version() { return SKYLINK_VERSION; }

std::uint64_t episode_seed(std::uint64_t seed, int episode) {
  return splitmix64(splitmix64(seed) ^ static_cast<std::uint64_t>(episode));
}

std::uint64_t eval_seed(std::uint64_t seed, int episode) {
  return splitmix64(splitmix64(seed ^ 0x5851f42d4c957f2dULL) + static_cast<std::uint64_t>(episode) + 1);
}

// ---------------------------------------------------------------------------

MetricsRow MetricsRow::from_stats(int episode, const madrl::EpisodeStats& s) {
  MetricsRow r;
  r.episode = episode;
  r.agent_reward = s.cumulative_reward;
  r.system_reward = s.system_reward;
  r.collision_pairs = s.collision_pairs;
  r.collision_events = s.collision_events;
  r.collision_rate = s.collision_rate;
  r.travel_time_mean = s.travel_time_mean;
  r.travel_time_max = s.travel_time_max;
  r.steps = s.steps;
  r.sim_time = s.elapsed;
  r.ul_bits = s.ul_bits;
  r.dl_bits = s.dl_bits;
  r.energy = s.energy;
  r.stale_ul = s.stale_ul;
  r.stale_dl = s.stale_dl;
  return r;
}

std::string metrics_header(int n_agents) {
  std::string h = "episode";
  for (int n = 0; n < n_agents; ++n) h += ",reward_agent" + std::to_string(n);
  h += ",system_reward,collision_pairs,collision_events,collision_rate,travel_time_mean,"
       "travel_time_max,steps,sim_time,ul_bits,dl_bits,energy_j,stale_ul,stale_dl";
  return h;
}

std::string metrics_line(const MetricsRow& r) {
  std::string s = std::to_string(r.episode);
  for (double x : r.agent_reward) s += "," + format_double(x);
  s += "," + format_double(r.system_reward) + "," + std::to_string(r.collision_pairs) + "," +
       std::to_string(r.collision_events) + "," + format_double(r.collision_rate) + "," +
       format_double(r.travel_time_mean) + "," + format_double(r.travel_time_max) + "," +
       std::to_string(r.steps) + "," + format_double(r.sim_time) + "," + std::to_string(r.ul_bits) +
       "," + std::to_string(r.dl_bits) + "," + format_double(r.energy) + "," +
       std::to_string(r.stale_ul) + "," + std::to_string(r.stale_dl);
  return s;
}

std::vector<MetricsRow> read_metrics(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error(path + ": empty metrics file");
  int n_agents = 0;
  for (std::size_t pos = 0; (pos = line.find("reward_agent", pos)) != std::string::npos; ++pos) ++n_agents;
  const std::size_t expected = static_cast<std::size_t>(n_agents) + 14;
  std::vector<MetricsRow> rows;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != expected) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected " +
                               std::to_string(expected) + " fields, got " + std::to_string(f.size()));
    }
    MetricsRow r;
    std::size_t k = 0;
    r.episode = std::stoi(f[k++]);
    for (int n = 0; n < n_agents; ++n) r.agent_reward.push_back(std::stod(f[k++]));
    r.system_reward = std::stod(f[k++]);
    r.collision_pairs = std::stoi(f[k++]);
    r.collision_events = std::stoi(f[k++]);
    r.collision_rate = std::stod(f[k++]);
    r.travel_time_mean = std::stod(f[k++]);
    r.travel_time_max = std::stod(f[k++]);
    r.steps = std::stoi(f[k++]);
    r.sim_time = std::stod(f[k++]);
    r.ul_bits = std::stoll(f[k++]);
    r.dl_bits = std::stoll(f[k++]);
    r.energy = std::stod(f[k++]);
    r.stale_ul = std::stoi(f[k++]);
    r.stale_dl = std::stoi(f[k++]);
    rows.push_back(std::move(r));
  }
  return rows;
}

// ---------------------------------------------------------------------------

std::string run_dir(const ExperimentConfig& cfg, std::uint64_t seed) {
  return (fs::path(cfg.output_dir) / ("seed_" + std::to_string(seed))).string();
}

namespace {

TrainResult train_seed(const ExperimentConfig& cfg, std::uint64_t seed, const TrainOptions& opts) {
  TrainResult result;
  result.seed = seed;
  result.run_dir = run_dir(cfg, seed);
  const fs::path dir(result.run_dir);
  fs::create_directories(dir);
  const std::string hash = config_hash(cfg);
  const fs::path manifest = dir / "manifest.json";
  const fs::path metrics = dir / "metrics.csv";
  const fs::path timing = dir / "timing.csv";
  const fs::path ckpt = dir / "checkpoint.ckpt";
  const fs::path final_ckpt = dir / "final.ckpt";
  const int episodes = cfg.sac.episodes;

  if (fs::exists(manifest)) {
    const auto m = json::parse(read_file(manifest.string()));
    const std::string stored = m.value("config_hash", "");
    if (stored != hash) {
      throw std::runtime_error(result.run_dir + " holds a run of config " + stored +
                               ", not " + hash + "; choose another output directory");
    }
  }

  auto learner = make_learner(cfg, seed);
  int start = 0;
  if (fs::exists(final_ckpt) && csv_data_rows(metrics.string()) == episodes) {
    result.resumed_from = episodes;
    result.episodes_done = episodes;
    return result;
  }
  if (fs::exists(ckpt)) {
    const auto blocks = nn::read_checkpoint(ckpt.string());
    learner->load_checkpoint_blocks(blocks, true);
    learner->set_rng_state(block_string(require_block(blocks, "meta/rng")));
    start = static_cast<int>(require_block(blocks, "meta/episodes")(0, 0));
    // Rows written after the checkpoint are regenerated identically.
    truncate_csv(metrics.string(), start);
    if (fs::exists(timing)) truncate_csv(timing.string(), start);
  } else {
    json m;
    m["config_hash"] = hash;
    m["seed"] = seed;
    m["code_version"] = code_version();
    m["config"] = json::parse(config_to_json(cfg));
    write_file_atomic(manifest.string(), m.dump(2) + "\n");
    write_file_atomic(metrics.string(), metrics_header(cfg.world.n_agents) + "\n");
    write_file_atomic(timing.string(), "episode,wall_clock_s\n");
  }
  result.resumed_from = start;

  env::World world(cfg.world);
  const auto setup = cfg.channel_setup();
  std::ofstream metrics_out(metrics, std::ios::app);
  std::ofstream timing_out(timing, std::ios::app);
  int done_now = 0;
  int e = start;
  for (; e < episodes; ++e) {
    if (opts.stop_after >= 0 && done_now >= opts.stop_after) break;
    const auto t0 = std::chrono::steady_clock::now();
    const auto stats = madrl::run_episode(world, *learner, setup, madrl::Mode::Train, episode_seed(seed, e));
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    metrics_out << metrics_line(MetricsRow::from_stats(e, stats)) << "\n" << std::flush;
    timing_out << e << "," << format_double(wall) << "\n" << std::flush;
    ++done_now;
    if ((e + 1) % cfg.checkpoint_every == 0 && e + 1 < episodes) {
      auto blocks = learner->checkpoint_blocks();
      blocks.push_back(string_block("meta/rng", learner->rng_state()));
      blocks.push_back({"meta/episodes", madrl::Matrix::Constant(1, 1, e + 1)});
      write_checkpoint_atomic(ckpt.string(), blocks);
    }
    if (opts.log) {
      *opts.log << "seed " << seed << " episode " << e << " reward " << stats.system_reward
                << " collision_rate " << stats.collision_rate << " travel_time " << stats.travel_time_mean
                << "\n";
    }
  }
  result.episodes_done = e;
  if (e == episodes) {
    write_checkpoint_atomic(final_ckpt.string(), learner->system().to_blocks());
    std::error_code ec;
    fs::remove(ckpt, ec);
  } else {
    // Interrupted on purpose: leave a checkpoint at exactly this episode.
    auto blocks = learner->checkpoint_blocks();
    blocks.push_back(string_block("meta/rng", learner->rng_state()));
    blocks.push_back({"meta/episodes", madrl::Matrix::Constant(1, 1, e)});
    write_checkpoint_atomic(ckpt.string(), blocks);
  }
  return result;
}

}  // namespace

std::vector<TrainResult> cli_train(const ExperimentConfig& cfg, const TrainOptions& opts) {
  cfg.validate();
  std::vector<TrainResult> out;
  for (auto seed : cfg.seeds) out.push_back(train_seed(cfg, seed, opts));
  return out;
}

// ---------------------------------------------------------------------------

std::unique_ptr<madrl::Learner> load_policy(const ExperimentConfig& cfg, const std::string& checkpoint) {
  cfg.validate();
  auto learner = make_learner(cfg, cfg.seeds.front());
  learner->load_checkpoint_blocks(nn::read_checkpoint(checkpoint), false);
  return learner;
}

EvalSummary evaluate(madrl::Learner& learner, const ExperimentConfig& cfg, int episodes,
                     std::ostream* trajectory) {
  if (episodes < 1) throw std::invalid_argument("eval: episodes must be at least 1");
  env::World world(cfg.world);
  const auto setup = cfg.channel_setup();
  const int n = cfg.world.n_agents;
  if (trajectory) {
    *trajectory << "episode,step,time";
    for (int i = 0; i < n; ++i) {
      const std::string a = std::to_string(i);
      *trajectory << ",x" << a << ",y" << a << ",vx" << a << ",vy" << a << ",r_pos" << a << ",r_neg" << a
                  << ",arrived" << a;
    }
    *trajectory << "\n";
  }
  EvalSummary sum;
  double dl_rounds = 0.0, dl_stale = 0.0;
  for (int e = 0; e < episodes; ++e) {
    std::vector<madrl::TrajectoryRecord> round;
    madrl::EpisodeObservers obs;
    // Records arrive agent by agent; a round is complete after the last one.
    obs.on_trajectory = [&](const madrl::TrajectoryRecord& r) {
      round.push_back(r);
      if (static_cast<int>(round.size()) < n) return;
      if (trajectory) {
        *trajectory << e << "," << r.step << "," << format_double(r.time);
        for (const auto& a : round) {
          *trajectory << "," << format_double(a.state.position.x()) << ","
                      << format_double(a.state.position.y()) << ","
                      << format_double(a.state.velocity.x()) << ","
                      << format_double(a.state.velocity.y()) << "," << format_double(a.positive_reward)
                      << "," << format_double(a.negative_reward) << "," << (a.arrived ? 1 : 0);
        }
        *trajectory << "\n";
      }
      round.clear();
    };
    const auto st = madrl::run_episode(world, learner, setup, madrl::Mode::Eval,
                                       eval_seed(cfg.seeds.front(), e), obs);
    sum.total_steps += st.steps;
    sum.travel_time_mean += st.travel_time_mean;
    sum.travel_time_max += st.travel_time_max;
    sum.collision_rate += st.collision_rate;
    sum.system_reward += st.system_reward;
    sum.energy += st.energy;
    sum.control_interval += st.steps > 0 ? st.elapsed / st.steps : 0.0;
    dl_rounds += static_cast<double>(st.steps) * n;
    dl_stale += st.stale_dl;
  }
  const double k = episodes;
  sum.episodes = episodes;
  sum.travel_time_mean /= k;
  sum.travel_time_max /= k;
  sum.collision_rate /= k;
  sum.system_reward /= k;
  sum.energy /= k;
  sum.control_interval /= k;
  sum.stale_dl_fraction = dl_rounds > 0.0 ? dl_stale / dl_rounds : 0.0;
  return sum;
}

EvalSummary cli_eval(const std::string& checkpoint, const ExperimentConfig& cfg, int episodes,
                     const std::string& out_dir) {
  auto learner = load_policy(cfg, checkpoint);
  if (out_dir.empty()) return evaluate(*learner, cfg, episodes, nullptr);
  fs::create_directories(out_dir);
  std::ofstream traj(fs::path(out_dir) / "trajectory.csv", std::ios::trunc);
  if (!traj) throw std::runtime_error("cannot write trajectory log in " + out_dir);
  const auto s = evaluate(*learner, cfg, episodes, &traj);
  json j = summary_json(s);
  j["checkpoint"] = checkpoint;
  j["mechanism"] = cfg.mechanism.label();
  write_file_atomic((fs::path(out_dir) / "summary.json").string(), j.dump(2) + "\n");
  return s;
}

// ---------------------------------------------------------------------------

std::string sweep_header() {
  return "power_dbm,mechanism,episodes,travel_time_mean,travel_time_max,collision_rate,"
         "system_reward,energy_j,control_interval,stale_dl_fraction";
}

std::string sweep_line(const SweepRow& r) {
  const auto& s = r.summary;
  return format_double(r.power_dbm) + "," + r.mechanism + "," + std::to_string(s.episodes) + "," +
         format_double(s.travel_time_mean) + "," + format_double(s.travel_time_max) + "," +
         format_double(s.collision_rate) + "," + format_double(s.system_reward) + "," +
         format_double(s.energy) + "," + format_double(s.control_interval) + "," +
         format_double(s.stale_dl_fraction);
}

std::vector<double> parse_power_list(const std::string& s) {
  auto number = [&](const std::string& t) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(t, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != t.size() || t.empty()) throw std::invalid_argument("powers: '" + t + "' is not a number");
    return v;
  };
  std::vector<double> out;
  if (s.find(':') != std::string::npos) {
    std::vector<std::string> parts;
    std::stringstream ss(s);
    for (std::string p; std::getline(ss, p, ':');) parts.push_back(p);
    if (parts.size() != 3) throw std::invalid_argument("powers: range must be start:stop:step");
    const double lo = number(parts[0]), hi = number(parts[1]), step = number(parts[2]);
    if (!(step > 0.0) || hi < lo) throw std::invalid_argument("powers: need step > 0 and stop >= start");
    const int count = static_cast<int>(std::floor((hi - lo) / step + 1e-9)) + 1;
    for (int i = 0; i < count; ++i) out.push_back(lo + i * step);
  } else {
    std::stringstream ss(s);
    for (std::string p; std::getline(ss, p, ',');) out.push_back(number(p));
  }
  if (out.empty()) throw std::invalid_argument("powers: empty list");
  return out;
}

std::vector<SweepRow> cli_sweep(const ExperimentConfig& cfg, const std::vector<double>& powers_dbm,
                                const std::map<std::string, std::string>& checkpoints,
                                const std::string& out_dir, std::ostream* warn) {
  struct Entry {
    std::string label;
    ExperimentConfig cfg;
    std::unique_ptr<madrl::Learner> learner;
  };
  std::vector<Entry> entries;
  std::vector<std::string> missing;
  for (const auto& [label, path] : checkpoints) {
    if (!fs::exists(path)) {
      missing.push_back(label + " (" + path + ")");
      continue;
    }
    ExperimentConfig c = cfg;
    c.mechanism = parse_mechanism_label(label);
    c.channel_mode = ChannelMode::Modeled;
    entries.push_back({label, c, load_policy(c, path)});
  }
  if (warn && !missing.empty()) {
    *warn << "warning: skipping mechanisms without a checkpoint:";
    for (const auto& m : missing) *warn << " " << m;
    *warn << "\n";
  }
  std::vector<SweepRow> rows;
  for (double p : powers_dbm) {
    for (auto& en : entries) {
      ExperimentConfig c = en.cfg;
      c.channel.tx_power_helper = comms::dbm_to_watts(p);
      rows.push_back({p, en.label, evaluate(*en.learner, c, c.eval_episodes, nullptr)});
    }
  }
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    std::string text = sweep_header() + "\n";
    for (const auto& r : rows) text += sweep_line(r) + "\n";
    write_file_atomic((fs::path(out_dir) / "sweep.csv").string(), text);
  }
  return rows;
}

// ---------------------------------------------------------------------------

std::vector<madrl::Matrix> cli_dump_attention(const std::string& checkpoint, const ExperimentConfig& cfg,
                                              std::uint64_t scenario_seed, const std::string& out_dir) {
  if (cfg.mechanism.method == Method::Vanilla) {
    throw std::logic_error("dump-attention: Vanilla has no attention scores");
  }
  auto learner = load_policy(cfg, checkpoint);
  auto& sys = learner->system();
  const auto states = env::reset(scenario_seed, cfg.world);
  std::vector<madrl::Vector> embeddings;
  for (int n = 0; n < sys.n_agents(); ++n) {
    const madrl::Matrix obs = env::observe(states[static_cast<std::size_t>(n)], cfg.world);
    embeddings.push_back(sys.encode_actor(n, obs).col(0));
  }
  std::vector<madrl::Matrix> heat;
  for (int n = 0; n < sys.n_agents(); ++n) {
    heat.push_back(attention::score_heatmap(sys.actor_helper().work(embeddings, n)));
  }
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    for (int n = 0; n < sys.n_agents(); ++n) {
      const auto& h = heat[static_cast<std::size_t>(n)];
      std::string text = "row";
      for (Eigen::Index m = 0; m < h.cols(); ++m) text += ",agent" + std::to_string(m);
      text += "\n";
      for (Eigen::Index r = 0; r < h.rows(); ++r) {
        text += std::to_string(r);
        for (Eigen::Index m = 0; m < h.cols(); ++m) text += "," + format_double(h(r, m));
        text += "\n";
      }
      write_file_atomic((fs::path(out_dir) / ("attention_agent" + std::to_string(n) + ".csv")).string(), text);
    }
  }
  return heat;
}

// ---------------------------------------------------------------------------

std::vector<CostRow> cli_costs(const ExperimentConfig& cfg) {
  const int n = cfg.world.n_agents;
  const std::vector<MechanismSpec> specs{
      {Method::Vanilla, 0, 1.0}, {Method::Mha, 3, 1.0}, {Method::Isha, 3, 1.0}, {Method::Isha, 1, 1.0}};
  std::vector<CostRow> rows;
  for (const auto& spec : specs) {
    attention::validate_mechanism(spec, n, cfg.network.embed_dim);
    madrl::System sys(n, spec, cfg.network, 0);
    const comms::PayloadSpec payload{spec.method, cfg.network.embed_dim, attention::kSubMessageDim, spec.count, n};
    CostRow r;
    r.mechanism = spec.label();
    r.helper_parameters = sys.helper_parameter_count();
    r.agent_parameters = sys.agent_parameter_count(0);
    r.agent_bits = comms::round_bits(payload, comms::Direction::Uplink, cfg.channel.float_width_bits);
    r.helper_bits = comms::round_bits(payload, comms::Direction::Downlink, cfg.channel.float_width_bits);
    rows.push_back(r);
  }
  return rows;
}

void print_costs(const std::vector<CostRow>& rows, std::ostream& out) {
  out << "mechanism,helper_parameters,agent_parameters,agent_bits_per_round,helper_bits_per_round\n";
  for (const auto& r : rows) {
    out << r.mechanism << "," << r.helper_parameters << "," << r.agent_parameters << "," << r.agent_bits
        << "," << r.helper_bits << "\n";
  }
}

double max_dl_delay(const std::vector<env::UavState>& states, const MechanismSpec& mechanism,
                    const comms::ChannelConfig& channel, int n_agents) {
  const comms::PayloadSpec payload{mechanism.method, attention::kEmbeddingDim, attention::kSubMessageDim,
                                   mechanism.count, n_agents};
  double worst = 0.0;
  for (const auto& b : comms::round_delays(states, payload, channel)) worst = std::max(worst, b.dl_delay);
  return worst;
}

}  // namespace skylink::harness
