#pragma once

// Soft actor-critic for N agents sharing a communication helper.
//
// Each agent owns an actor encoder (obs -> x_pi), a critic encoder
// ((obs, action) -> x_Q), a squashed-Gaussian policy head over
// [x_pi ; m_pi] and twin critic heads over [x_Q ; m_Q]. The helper holds two
// independent message functions, one for the actor path and one for the
// critic path. Training is centralized: the loss of every agent is
// back-propagated through the helper into every agent's encoder.

#include "skylink/attention.hpp"
#include "skylink/comms.hpp"
#include "skylink/env.hpp"
#include "skylink/nn.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace skylink::madrl {

using nn::Matrix;
using nn::Vector;

struct SacConfig {
  double gamma = 0.99;
  double entropy_weight = 0.2;  // lambda
  double tau = 0.005;
  int batch_size = 256;
  int replay_capacity = 100000;
  int warmup_steps = 1000;
  int update_every = 1;         // environment steps between update rounds
  int updates_per_round = 1;
  int episodes = 500;
  double actor_lr = 3e-4;
  double critic_lr = 3e-4;

  void validate() const;
};

struct NetworkShape {
  int obs_dim = 4;
  int action_dim = 2;
  int embed_dim = attention::kEmbeddingDim;
  std::vector<int> encoder_hidden{63, 63};
  std::vector<int> head_hidden{100, 100, 100};
  /// Output layers of the heads start in U(-init, init).
  double head_output_init = 3e-3;
};

struct AgentNets {
  nn::Mlp actor_encoder;
  nn::Mlp critic_encoder;
  nn::Mlp policy;
  nn::Mlp q1, q2;
  nn::Mlp target_critic_encoder, target_q1, target_q2;

  AgentNets(const std::string& name, const NetworkShape& shape, int message_dim,
            std::mt19937_64& rng);

  void collect_actor(nn::ParamList& out);
  void collect_critic(nn::ParamList& out);
  void collect_target_critic(nn::ParamList& out);
};

/// Forward state of the actor path for a batch.
struct ActorPass {
  std::vector<nn::Mlp::Cache> encoder;
  std::vector<Matrix> embeddings;
  std::unique_ptr<attention::HelperCache> helper;
  std::vector<Matrix> messages;
  std::vector<nn::Mlp::Cache> head;
  std::vector<nn::SquashedGaussian> policy;
};

/// Forward state of a critic path (main or target) for a batch.
struct CriticPass {
  bool target = false;
  std::vector<nn::Mlp::Cache> encoder;
  std::vector<Matrix> embeddings;
  std::unique_ptr<attention::HelperCache> helper;
  std::vector<nn::Mlp::Cache> q1_cache, q2_cache;
  std::vector<Eigen::RowVectorXd> q1, q2;
};

/// All learnable state of the multi-agent system.
class System {
 public:
  System(int n_agents, const MechanismSpec& mechanism, const NetworkShape& shape,
         std::uint64_t seed);
  System(const System& other);
  System& operator=(const System&) = delete;

  int n_agents() const { return static_cast<int>(agents_.size()); }
  const MechanismSpec& mechanism() const { return mechanism_; }
  const NetworkShape& shape() const { return shape_; }
  int message_dim() const { return actor_helper_->message_dim(); }

  AgentNets& agent(int n) { return agents_.at(static_cast<std::size_t>(n)); }
  attention::Helper& actor_helper() { return *actor_helper_; }
  attention::Helper& critic_helper() { return *critic_helper_; }
  const attention::Helper& actor_helper() const { return *actor_helper_; }
  const attention::Helper& critic_helper() const { return *critic_helper_; }

  /// x_pi for one agent (obs is obs_dim x batch).
  Matrix encode_actor(int n, const Matrix& obs) const;
  /// x_Q for one agent from [obs ; action].
  Matrix encode_critic(int n, const Matrix& obs, const Matrix& action) const;

  /// Policy head on [x_pi ; message]. `noise` empty -> deterministic mean.
  nn::SquashedGaussian policy(int n, const Matrix& embedding, const Matrix& message,
                              const Matrix& noise) const;

  /// Full actor path. noise[n] may be empty for deterministic actions.
  ActorPass actor_forward(const std::vector<Matrix>& obs, const std::vector<Matrix>& noise,
                          bool keep_cache) const;
  /// Accumulates actor-path gradients from d(loss)/d(action) and
  /// d(loss)/d(log_prob).
  void actor_backward(const ActorPass& pass, const std::vector<Matrix>& daction,
                      const std::vector<Eigen::RowVectorXd>& dlog_prob);

  CriticPass critic_forward(const std::vector<Matrix>& obs, const std::vector<Matrix>& actions,
                            bool target, bool keep_cache) const;
  /// Accumulates main-critic gradients; returns d(loss)/d(action) per agent.
  std::vector<Matrix> critic_backward(const CriticPass& pass,
                                      const std::vector<Eigen::RowVectorXd>& dq1,
                                      const std::vector<Eigen::RowVectorXd>& dq2);

  /// Twin Q estimates for one agent on a single joint snapshot.
  std::pair<double, double> critic_value(int n, const std::vector<Vector>& obs,
                                         const std::vector<Vector>& actions) const;

  nn::ParamList actor_params();
  nn::ParamList critic_params();
  nn::ParamList target_critic_params();
  nn::ParamList helper_params();

  /// Parameters held by one agent (encoders, policy, critics).
  std::int64_t agent_parameter_count(int n);
  /// Parameters held by the helper (actor- and critic-path mechanisms).
  std::int64_t helper_parameter_count();

  void soft_update_targets(double tau);

  std::vector<nn::NamedBlock> to_blocks();
  /// Throws if a block is missing or has the wrong shape.
  void load_blocks(const std::vector<nn::NamedBlock>& blocks);

 private:
  MechanismSpec mechanism_;
  NetworkShape shape_;
  std::vector<AgentNets> agents_;
  std::unique_ptr<attention::Helper> actor_helper_;
  std::unique_ptr<attention::Helper> critic_helper_;
  std::unique_ptr<attention::Helper> target_critic_helper_;
};

// ---------------------------------------------------------------------------

struct JointTransition {
  std::vector<Vector> obs;       // per agent, obs_dim
  std::vector<Vector> actions;   // per agent, unit-scaled
  std::vector<double> rewards;
  std::vector<Vector> next_obs;
  std::vector<bool> active;      // flying before the step
  std::vector<bool> done;        // arrived after the step
  std::vector<double> tail;      // absorbing value used when done
};

struct Batch {
  std::vector<Matrix> obs, actions, next_obs;  // per agent, dim x batch
  Matrix rewards, active, done, tail;           // n_agents x batch
};

/// Fixed-capacity FIFO of joint transitions.
class ReplayBuffer {
 public:
  ReplayBuffer(int capacity, int n_agents, int obs_dim, int action_dim);

  void push(const JointTransition& t);
  int size() const { return size_; }
  int capacity() const { return capacity_; }
  /// Uniform sampling with replacement.
  Batch sample(int batch_size, std::mt19937_64& rng) const;
  /// Every stored transition in storage order (for tests).
  Batch all() const;

  std::vector<nn::NamedBlock> to_blocks() const;
  void load_blocks(const std::vector<nn::NamedBlock>& blocks);

 private:
  Batch gather(const std::vector<int>& rows) const;

  int capacity_, n_agents_, obs_dim_, action_dim_;
  int size_ = 0;
  int head_ = 0;
  Matrix data_;  // capacity x row_width
};

struct UpdateDiagnostics {
  double critic_loss = 0.0;
  double actor_loss = 0.0;
  double mean_q = 0.0;
  double mean_log_prob = 0.0;
  bool skipped = false;
};

class SacTrainer {
 public:
  SacTrainer(System& system, const SacConfig& cfg);

  /// One critic step, one actor step and a soft target update.
  UpdateDiagnostics update(const Batch& batch, std::mt19937_64& rng);

  /// Critic regression targets y for a batch (noise drawn from rng).
  Matrix critic_targets(const Batch& batch, std::mt19937_64& rng) const;

  std::int64_t skipped_updates() const { return skipped_; }
  nn::Adam& actor_optimizer() { return actor_opt_; }
  nn::Adam& critic_optimizer() { return critic_opt_; }

 private:
  System& system_;
  SacConfig cfg_;
  nn::Adam actor_opt_;
  nn::Adam critic_opt_;
  std::int64_t skipped_ = 0;
};

// ---------------------------------------------------------------------------

enum class Mode { Train, Eval };

struct ChannelSetup {
  bool perfect = true;
  double fixed_dt = 0.1;  // control interval when perfect
  comms::ChannelConfig channel;
};

struct EpisodeStats {
  std::vector<double> cumulative_reward;  // per agent, over the full horizon
  double system_reward = 0.0;
  int collision_pairs = 0;                // distinct pairs that collided
  double collision_rate = 0.0;            // collision_pairs / (N (N-1) / 2)
  int collision_events = 0;               // (pair, step) occurrences
  std::vector<double> arrival_time;       // s; horizon time if never arrived
  double travel_time_mean = 0.0;
  double travel_time_max = 0.0;
  int steps = 0;                          // simulated control rounds
  double elapsed = 0.0;                   // simulated seconds
  std::int64_t ul_bits = 0;
  std::int64_t dl_bits = 0;
  double energy = 0.0;                    // J
  int stale_ul = 0;
  int stale_dl = 0;
  std::vector<std::vector<double>> step_rewards;  // [step][agent]
};

struct TrajectoryRecord {
  int step;
  double time;
  int agent;
  env::UavState state;
  double positive_reward;
  double negative_reward;
  bool arrived;
};

struct LinkRecord {
  int step;
  int agent;
  comms::LinkBudget budget;
};

struct EpisodeObservers {
  std::function<void(const TrajectoryRecord&)> on_trajectory;
  std::function<void(const LinkRecord&)> on_link;
};

/// Owns the system, its optimizers, replay and RNG streams.
class Learner {
 public:
  Learner(int n_agents, const MechanismSpec& mechanism, const SacConfig& sac,
          std::uint64_t seed, const NetworkShape& shape = {});

  System& system() { return system_; }
  SacTrainer& trainer() { return trainer_; }
  ReplayBuffer& replay() { return replay_; }
  const SacConfig& config() const { return sac_; }
  std::mt19937_64& rng() { return rng_; }
  std::int64_t env_steps() const { return env_steps_; }
  std::int64_t updates() const { return updates_; }

  /// Records a transition and runs updates when due.
  void observe(const JointTransition& t);

  std::vector<nn::NamedBlock> checkpoint_blocks();
  void load_checkpoint_blocks(const std::vector<nn::NamedBlock>& blocks, bool with_training_state);

  std::string rng_state() const;
  void set_rng_state(const std::string& s);

 private:
  SacConfig sac_;
  System system_;
  SacTrainer trainer_;
  ReplayBuffer replay_;
  std::mt19937_64 rng_;
  std::int64_t env_steps_ = 0;
  std::int64_t updates_ = 0;
};

/// Tail value credited to an agent that parks at the destination with
/// per-step reward r: r / (1 - gamma), or r * remaining_steps when gamma = 1.
double absorbing_value(double reward, double gamma, int remaining_steps);

/// Runs one episode of `world` (already configured) from `seed`.
///
/// Each round: agents encode, uplink embeddings to the helper (stale uplinks
/// reuse the last delivered embedding), the helper builds messages, agents
/// downlink them (stale downlinks reuse the last message), act, and the world
/// advances by the realized control interval. The episode stops once every
/// agent has arrived or the horizon is reached; rewards of the remaining
/// horizon steps are those of the frozen final layout. A non-null
/// `initial_states` replaces the seeded layout (the seed still drives wind).
EpisodeStats run_episode(env::World& world, Learner& learner, const ChannelSetup& channel,
                         Mode mode, std::uint64_t seed, const EpisodeObservers& observers = {},
                         const std::vector<env::UavState>* initial_states = nullptr);

/// sum_t gamma^t r_t per agent.
std::vector<double> evaluate_return(const std::vector<std::vector<double>>& step_rewards,
                                    double gamma);

}  // namespace skylink::madrl
