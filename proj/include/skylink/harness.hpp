#pragma once

// Experiment configuration, metrics persistence and the command entry points.
//
// Run layout under the output directory:
//   seed_<s>/manifest.json   config, config hash, seed, code revision
//   seed_<s>/metrics.csv     one row per training episode, append-only
//   seed_<s>/timing.csv      wall-clock per episode (kept apart so metrics
//                            stay byte-reproducible)
//   seed_<s>/checkpoint.ckpt latest resumable state
//   seed_<s>/final.ckpt      state after the last episode

#include "skylink/comms.hpp"
#include "skylink/env.hpp"
#include "skylink/madrl.hpp"
#include "skylink/mechanism.hpp"

#include <cstdint>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace skylink::harness {

/// Invalid configuration; what() starts with the offending field path.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(const std::string& path, const std::string& what)
      : std::invalid_argument(path + ": " + what), path_(path) {}
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

enum class ChannelMode { Perfect, Modeled };

struct ExperimentConfig {
  env::WorldConfig world;
  comms::ChannelConfig channel;
  MechanismSpec mechanism;
  madrl::SacConfig sac;
  madrl::NetworkShape network;
  std::vector<std::uint64_t> seeds{0};
  std::string output_dir = "runs";
  ChannelMode channel_mode = ChannelMode::Perfect;
  double control_interval = 0.1;  // s, used by the perfect channel
  int checkpoint_every = 50;      // episodes
  int eval_episodes = 10;

  /// Throws ConfigError naming the field path.
  void validate() const;
  madrl::ChannelSetup channel_setup() const;
};

/// Parses a JSON document. Unknown keys and wrong types are rejected with
/// their path. Missing keys keep their defaults.
ExperimentConfig parse_config(const std::string& json_text);
std::string config_to_json(const ExperimentConfig& cfg);

/// Reads and parses a config file, then applies SKYLINK_OUT and SKYLINK_SEED
/// from the environment when set.
ExperimentConfig load_config(const std::string& path);
void apply_environment_overrides(ExperimentConfig& cfg);

/// FNV-1a 64 of the canonical JSON form, as 16 hex digits.
std::string config_hash(const ExperimentConfig& cfg);

/// Code revision recorded in manifests.
std::string code_version();

/// Seed of training episode `episode` for run seed `seed`.
std::uint64_t episode_seed(std::uint64_t seed, int episode);
/// Seed of evaluation episode `episode`; disjoint from the training stream.
std::uint64_t eval_seed(std::uint64_t seed, int episode);

// ---------------------------------------------------------------------------

struct MetricsRow {
  int episode = 0;
  std::vector<double> agent_reward;
  double system_reward = 0.0;
  int collision_pairs = 0;
  int collision_events = 0;
  double collision_rate = 0.0;
  double travel_time_mean = 0.0;
  double travel_time_max = 0.0;
  int steps = 0;
  double sim_time = 0.0;
  std::int64_t ul_bits = 0;
  std::int64_t dl_bits = 0;
  double energy = 0.0;
  int stale_ul = 0;
  int stale_dl = 0;

  static MetricsRow from_stats(int episode, const madrl::EpisodeStats& s);
};

std::string metrics_header(int n_agents);
std::string metrics_line(const MetricsRow& row);
/// Parses a metrics CSV written by metrics_line; throws on malformed rows.
std::vector<MetricsRow> read_metrics(const std::string& path);

// ---------------------------------------------------------------------------

struct TrainOptions {
  /// Stop after this many episodes in this invocation (simulates an
  /// interruption); negative runs to completion.
  int stop_after = -1;
  std::ostream* log = nullptr;
};

struct TrainResult {
  std::uint64_t seed = 0;
  std::string run_dir;
  int resumed_from = 0;  // episodes already present when the run started
  int episodes_done = 0;
};

/// Trains every seed of the config; resumes from an existing checkpoint
/// whose manifest matches the config hash.
std::vector<TrainResult> cli_train(const ExperimentConfig& cfg, const TrainOptions& opts = {});

std::string run_dir(const ExperimentConfig& cfg, std::uint64_t seed);

// ---------------------------------------------------------------------------

struct EvalSummary {
  int episodes = 0;
  int total_steps = 0;
  double travel_time_mean = 0.0;
  double travel_time_max = 0.0;
  double collision_rate = 0.0;
  double system_reward = 0.0;
  double energy = 0.0;            // J per episode
  double control_interval = 0.0;  // s, mean over rounds
  double stale_dl_fraction = 0.0;
};

/// Loads policy weights from a checkpoint into a learner built from `cfg`.
/// Throws naming both mechanisms when they differ.
std::unique_ptr<madrl::Learner> load_policy(const ExperimentConfig& cfg,
                                            const std::string& checkpoint);

/// Deterministic-policy episodes. Writes trajectory.csv (one row per control
/// round, all agents side by side) and summary.json into out_dir when it is
/// non-empty.
EvalSummary cli_eval(const std::string& checkpoint, const ExperimentConfig& cfg, int episodes,
                     const std::string& out_dir);
EvalSummary evaluate(madrl::Learner& learner, const ExperimentConfig& cfg, int episodes,
                     std::ostream* trajectory);

// ---------------------------------------------------------------------------

struct SweepRow {
  double power_dbm = 0.0;
  std::string mechanism;
  EvalSummary summary;
};

/// Evaluates each available checkpoint (keyed by mechanism label) under the
/// modeled channel at every helper power. Missing checkpoints are reported
/// on `warn` and skipped. Writes sweep.csv into out_dir when non-empty.
std::vector<SweepRow> cli_sweep(const ExperimentConfig& cfg, const std::vector<double>& powers_dbm,
                                const std::map<std::string, std::string>& checkpoints,
                                const std::string& out_dir, std::ostream* warn);

std::string sweep_header();
std::string sweep_line(const SweepRow& row);

/// Parses "15:40:1" (inclusive range) or "15,20,25".
std::vector<double> parse_power_list(const std::string& s);

// ---------------------------------------------------------------------------

/// Per-agent (iterations or heads) x agents score matrices of the actor-path
/// helper for the layout drawn from `scenario_seed`. Writes
/// attention_agent<n>.csv into out_dir when non-empty. Vanilla throws
/// std::logic_error("... no attention scores ...").
std::vector<madrl::Matrix> cli_dump_attention(const std::string& checkpoint,
                                              const ExperimentConfig& cfg,
                                              std::uint64_t scenario_seed,
                                              const std::string& out_dir);

// ---------------------------------------------------------------------------

struct CostRow {
  std::string mechanism;
  std::int64_t helper_parameters = 0;
  std::int64_t agent_parameters = 0;  // per agent
  std::int64_t agent_bits = 0;        // uplink, all agents, per round
  std::int64_t helper_bits = 0;       // downlink, all agents, per round
};

/// Rows for Vanilla, MHA3, ISHA3 and ISHA1 at the config's agent count.
std::vector<CostRow> cli_costs(const ExperimentConfig& cfg);
void print_costs(const std::vector<CostRow>& rows, std::ostream& out);

// ---------------------------------------------------------------------------

/// Largest per-agent downlink delay of one round at a fixed layout.
double max_dl_delay(const std::vector<env::UavState>& states, const MechanismSpec& mechanism,
                    const comms::ChannelConfig& channel, int n_agents);

}  // namespace skylink::harness
