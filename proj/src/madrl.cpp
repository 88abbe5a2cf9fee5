#include "skylink/madrl.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <stdexcept>

namespace skylink::madrl {

namespace {

Matrix vcat(const Matrix& top, const Matrix& bottom) {
  Matrix out(top.rows() + bottom.rows(), top.cols());
  out.topRows(top.rows()) = top;
  out.bottomRows(bottom.rows()) = bottom;
  return out;
}

Matrix standard_normal(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  Matrix m(rows, cols);
  for (Eigen::Index c = 0; c < cols; ++c)
    for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = g(rng);
  return m;
}

void prefix_blocks(nn::ParamList& params, const std::string& prefix,
                   std::vector<nn::NamedBlock>& out) {
  for (auto* p : params) out.push_back({prefix + p->name, p->value});
}

void load_into(nn::ParamList& params, const std::string& prefix,
               const std::map<std::string, const Matrix*>& index) {
  for (auto* p : params) {
    const auto it = index.find(prefix + p->name);
    if (it == index.end()) throw std::runtime_error("checkpoint is missing block '" + prefix + p->name + "'");
    if (it->second->rows() != p->value.rows() || it->second->cols() != p->value.cols()) {
      throw std::runtime_error("checkpoint block '" + prefix + p->name + "' has the wrong shape");
    }
    p->value = *it->second;
  }
}

std::map<std::string, const Matrix*> index_blocks(const std::vector<nn::NamedBlock>& blocks) {
  std::map<std::string, const Matrix*> index;
  for (const auto& b : blocks) index[b.name] = &b.value;
  return index;
}

}  // namespace

void SacConfig::validate() const {
  auto fail = [](const std::string& f, const std::string& what) {
    throw std::invalid_argument("sac." + f + ": " + what);
  };
  if (!(gamma >= 0.0 && gamma <= 1.0)) fail("gamma", "must be in [0, 1]");
  if (!(entropy_weight >= 0.0)) fail("entropy_weight", "must be non-negative");
  if (!(tau > 0.0 && tau <= 1.0)) fail("tau", "must be in (0, 1]");
  if (batch_size <= 0) fail("batch_size", "must be positive");
  if (replay_capacity <= 0) fail("replay_capacity", "must be positive");
  if (warmup_steps < 0) fail("warmup_steps", "must be non-negative");
  if (update_every <= 0) fail("update_every", "must be positive");
  if (updates_per_round <= 0) fail("updates_per_round", "must be positive");
  if (episodes <= 0) fail("episodes", "must be positive");
  if (!(actor_lr > 0.0)) fail("actor_lr", "must be positive");
  if (!(critic_lr > 0.0)) fail("critic_lr", "must be positive");
}

// ---------------------------------------------------------------------------

AgentNets::AgentNets(const std::string& name, const NetworkShape& shape, int message_dim,
                     std::mt19937_64& rng)
    : actor_encoder(name + ".actor_encoder", shape.obs_dim, shape.encoder_hidden, shape.embed_dim,
                    nn::Activation::Relu, rng),
      critic_encoder(name + ".critic_encoder", shape.obs_dim + shape.action_dim, shape.encoder_hidden,
                     shape.embed_dim, nn::Activation::Relu, rng),
      policy(name + ".policy", shape.embed_dim + message_dim, shape.head_hidden, 2 * shape.action_dim,
             nn::Activation::Identity, rng, shape.head_output_init),
      q1(name + ".q1", shape.embed_dim + message_dim, shape.head_hidden, 1, nn::Activation::Identity,
         rng, shape.head_output_init),
      q2(name + ".q2", shape.embed_dim + message_dim, shape.head_hidden, 1, nn::Activation::Identity,
         rng, shape.head_output_init),
      target_critic_encoder(critic_encoder),
      target_q1(q1),
      target_q2(q2) {}

void AgentNets::collect_actor(nn::ParamList& out) {
  actor_encoder.collect(out);
  policy.collect(out);
}

void AgentNets::collect_critic(nn::ParamList& out) {
  critic_encoder.collect(out);
  q1.collect(out);
  q2.collect(out);
}

void AgentNets::collect_target_critic(nn::ParamList& out) {
  target_critic_encoder.collect(out);
  target_q1.collect(out);
  target_q2.collect(out);
}

// ---------------------------------------------------------------------------

System::System(int n_agents, const MechanismSpec& mechanism, const NetworkShape& shape,
               std::uint64_t seed)
    : mechanism_(mechanism), shape_(shape) {
  std::mt19937_64 rng(seed);
  actor_helper_ = attention::make_helper("helper.actor", mechanism, n_agents, rng, shape.embed_dim);
  critic_helper_ = attention::make_helper("helper.critic", mechanism, n_agents, rng, shape.embed_dim);
  target_critic_helper_ = critic_helper_->clone();
  const int mdim = actor_helper_->message_dim();
  agents_.reserve(static_cast<std::size_t>(n_agents));
  for (int n = 0; n < n_agents; ++n) agents_.emplace_back("agent" + std::to_string(n), shape, mdim, rng);
}

System::System(const System& other)
    : mechanism_(other.mechanism_),
      shape_(other.shape_),
      agents_(other.agents_),
      actor_helper_(other.actor_helper_->clone()),
      critic_helper_(other.critic_helper_->clone()),
      target_critic_helper_(other.target_critic_helper_->clone()) {}

Matrix System::encode_actor(int n, const Matrix& obs) const {
  return agents_.at(static_cast<std::size_t>(n)).actor_encoder.forward(obs);
}

Matrix System::encode_critic(int n, const Matrix& obs, const Matrix& action) const {
  return agents_.at(static_cast<std::size_t>(n)).critic_encoder.forward(vcat(obs, action));
}

nn::SquashedGaussian System::policy(int n, const Matrix& embedding, const Matrix& message,
                                    const Matrix& noise) const {
  const Matrix head = agents_.at(static_cast<std::size_t>(n)).policy.forward(vcat(embedding, message));
  return nn::SquashedGaussian::sample(head, noise);
}

ActorPass System::actor_forward(const std::vector<Matrix>& obs, const std::vector<Matrix>& noise,
                                bool keep_cache) const {
  const auto n = agents_.size();
  ActorPass p;
  p.encoder.resize(n);
  p.head.resize(n);
  p.embeddings.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    p.embeddings[i] = agents_[i].actor_encoder.forward(obs[i], keep_cache ? &p.encoder[i] : nullptr);
  }
  p.messages = actor_helper_->forward(p.embeddings, keep_cache ? &p.helper : nullptr);
  for (std::size_t i = 0; i < n; ++i) {
    const Matrix head = agents_[i].policy.forward(vcat(p.embeddings[i], p.messages[i]),
                                                  keep_cache ? &p.head[i] : nullptr);
    p.policy.push_back(nn::SquashedGaussian::sample(head, noise.empty() ? Matrix() : noise[i]));
  }
  return p;
}

void System::actor_backward(const ActorPass& pass, const std::vector<Matrix>& daction,
                            const std::vector<Eigen::RowVectorXd>& dlog_prob) {
  const auto n = agents_.size();
  const Eigen::Index e = shape_.embed_dim;
  std::vector<Matrix> demb(n), dmsg(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Matrix dhead = pass.policy[i].backward(daction[i], dlog_prob[i]);
    const Matrix din = agents_[i].policy.backward(pass.head[i], dhead);
    demb[i] = din.topRows(e);
    dmsg[i] = din.bottomRows(din.rows() - e);
  }
  const auto dvia_helper = actor_helper_->backward(*pass.helper, dmsg);
  for (std::size_t i = 0; i < n; ++i) {
    agents_[i].actor_encoder.backward(pass.encoder[i], demb[i] + dvia_helper[i]);
  }
}

CriticPass System::critic_forward(const std::vector<Matrix>& obs, const std::vector<Matrix>& actions,
                                  bool target, bool keep_cache) const {
  const auto n = agents_.size();
  CriticPass p;
  p.target = target;
  p.encoder.resize(n);
  p.q1_cache.resize(n);
  p.q2_cache.resize(n);
  p.embeddings.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& enc = target ? agents_[i].target_critic_encoder : agents_[i].critic_encoder;
    p.embeddings[i] = enc.forward(vcat(obs[i], actions[i]), keep_cache ? &p.encoder[i] : nullptr);
  }
  const auto& helper = target ? *target_critic_helper_ : *critic_helper_;
  const auto messages = helper.forward(p.embeddings, keep_cache ? &p.helper : nullptr);
  for (std::size_t i = 0; i < n; ++i) {
    const Matrix in = vcat(p.embeddings[i], messages[i]);
    const auto& h1 = target ? agents_[i].target_q1 : agents_[i].q1;
    const auto& h2 = target ? agents_[i].target_q2 : agents_[i].q2;
    p.q1.push_back(h1.forward(in, keep_cache ? &p.q1_cache[i] : nullptr).row(0));
    p.q2.push_back(h2.forward(in, keep_cache ? &p.q2_cache[i] : nullptr).row(0));
  }
  return p;
}

std::vector<Matrix> System::critic_backward(const CriticPass& pass,
                                            const std::vector<Eigen::RowVectorXd>& dq1,
                                            const std::vector<Eigen::RowVectorXd>& dq2) {
  if (pass.target) throw std::logic_error("critic_backward on a target pass");
  const auto n = agents_.size();
  const Eigen::Index e = shape_.embed_dim;
  std::vector<Matrix> demb(n), dmsg(n);
  for (std::size_t i = 0; i < n; ++i) {
    Matrix din = agents_[i].q1.backward(pass.q1_cache[i], dq1[i]);
    din += agents_[i].q2.backward(pass.q2_cache[i], dq2[i]);
    demb[i] = din.topRows(e);
    dmsg[i] = din.bottomRows(din.rows() - e);
  }
  const auto dvia_helper = critic_helper_->backward(*pass.helper, dmsg);
  std::vector<Matrix> daction(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Matrix dinput = agents_[i].critic_encoder.backward(pass.encoder[i], demb[i] + dvia_helper[i]);
    daction[i] = dinput.bottomRows(shape_.action_dim);
  }
  return daction;
}

std::pair<double, double> System::critic_value(int n, const std::vector<Vector>& obs,
                                               const std::vector<Vector>& actions) const {
  std::vector<Matrix> o(obs.begin(), obs.end());
  std::vector<Matrix> a(actions.begin(), actions.end());
  const auto p = critic_forward(o, a, false, false);
  return {p.q1.at(static_cast<std::size_t>(n))[0], p.q2.at(static_cast<std::size_t>(n))[0]};
}

nn::ParamList System::actor_params() {
  nn::ParamList out;
  for (auto& a : agents_) a.collect_actor(out);
  actor_helper_->collect(out);
  return out;
}

nn::ParamList System::critic_params() {
  nn::ParamList out;
  for (auto& a : agents_) a.collect_critic(out);
  critic_helper_->collect(out);
  return out;
}

nn::ParamList System::target_critic_params() {
  nn::ParamList out;
  for (auto& a : agents_) a.collect_target_critic(out);
  target_critic_helper_->collect(out);
  return out;
}

nn::ParamList System::helper_params() {
  nn::ParamList out;
  actor_helper_->collect(out);
  critic_helper_->collect(out);
  return out;
}

std::int64_t System::agent_parameter_count(int n) {
  nn::ParamList p;
  agent(n).collect_actor(p);
  agent(n).collect_critic(p);
  return nn::parameter_count(p);
}

std::int64_t System::helper_parameter_count() { return nn::parameter_count(helper_params()); }

void System::soft_update_targets(double tau) {
  nn::soft_update(target_critic_params(), critic_params(), tau);
}

std::vector<nn::NamedBlock> System::to_blocks() {
  std::vector<nn::NamedBlock> out;
  auto actor = actor_params();
  auto critic = critic_params();
  auto target = target_critic_params();
  prefix_blocks(actor, "", out);
  prefix_blocks(critic, "", out);
  prefix_blocks(target, "target/", out);
  Matrix mech(1, 3);
  mech << static_cast<double>(mechanism_.method), mechanism_.count, n_agents();
  out.push_back({"meta/mechanism", mech});
  return out;
}

void System::load_blocks(const std::vector<nn::NamedBlock>& blocks) {
  const auto index = index_blocks(blocks);
  if (const auto it = index.find("meta/mechanism"); it != index.end()) {
    const Matrix& m = *it->second;
    MechanismSpec stored{static_cast<Method>(static_cast<int>(m(0, 0))), static_cast<int>(m(0, 1)),
                         mechanism_.beta};
    if (stored.method != mechanism_.method || stored.count != mechanism_.count ||
        static_cast<int>(m(0, 2)) != n_agents()) {
      throw std::runtime_error("checkpoint mechanism " + stored.label() + " (N=" +
                               std::to_string(static_cast<int>(m(0, 2))) +
                               ") does not match configured " + mechanism_.label() +
                               " (N=" + std::to_string(n_agents()) + ")");
    }
  }
  auto actor = actor_params();
  auto critic = critic_params();
  auto target = target_critic_params();
  load_into(actor, "", index);
  load_into(critic, "", index);
  load_into(target, "target/", index);
}

// ---------------------------------------------------------------------------

ReplayBuffer::ReplayBuffer(int capacity, int n_agents, int obs_dim, int action_dim)
    : capacity_(capacity), n_agents_(n_agents), obs_dim_(obs_dim), action_dim_(action_dim) {
  if (capacity <= 0) throw std::invalid_argument("replay capacity must be positive");
  const int width = n_agents * (2 * obs_dim + action_dim + 4);
  data_ = Matrix::Zero(capacity, width);
}

void ReplayBuffer::push(const JointTransition& t) {
  Eigen::Index c = 0;
  auto row = data_.row(head_);
  for (int n = 0; n < n_agents_; ++n) {
    const auto i = static_cast<std::size_t>(n);
    row.segment(c, obs_dim_) = t.obs[i].transpose();
    c += obs_dim_;
    row.segment(c, action_dim_) = t.actions[i].transpose();
    c += action_dim_;
    row.segment(c, obs_dim_) = t.next_obs[i].transpose();
    c += obs_dim_;
    row(c++) = t.rewards[i];
    row(c++) = t.active[i] ? 1.0 : 0.0;
    row(c++) = t.done[i] ? 1.0 : 0.0;
    row(c++) = t.tail[i];
  }
  head_ = (head_ + 1) % capacity_;
  size_ = std::min(size_ + 1, capacity_);
}

Batch ReplayBuffer::gather(const std::vector<int>& rows) const {
  const auto b = static_cast<Eigen::Index>(rows.size());
  Batch out;
  out.obs.assign(static_cast<std::size_t>(n_agents_), Matrix(obs_dim_, b));
  out.actions.assign(static_cast<std::size_t>(n_agents_), Matrix(action_dim_, b));
  out.next_obs.assign(static_cast<std::size_t>(n_agents_), Matrix(obs_dim_, b));
  out.rewards.resize(n_agents_, b);
  out.active.resize(n_agents_, b);
  out.done.resize(n_agents_, b);
  out.tail.resize(n_agents_, b);
  for (Eigen::Index j = 0; j < b; ++j) {
    const auto row = data_.row(rows[static_cast<std::size_t>(j)]);
    Eigen::Index c = 0;
    for (int n = 0; n < n_agents_; ++n) {
      const auto i = static_cast<std::size_t>(n);
      out.obs[i].col(j) = row.segment(c, obs_dim_).transpose();
      c += obs_dim_;
      out.actions[i].col(j) = row.segment(c, action_dim_).transpose();
      c += action_dim_;
      out.next_obs[i].col(j) = row.segment(c, obs_dim_).transpose();
      c += obs_dim_;
      out.rewards(n, j) = row(c++);
      out.active(n, j) = row(c++);
      out.done(n, j) = row(c++);
      out.tail(n, j) = row(c++);
    }
  }
  return out;
}

Batch ReplayBuffer::sample(int batch_size, std::mt19937_64& rng) const {
  if (size_ == 0) throw std::logic_error("sampling from an empty replay buffer");
  std::uniform_int_distribution<int> pick(0, size_ - 1);
  std::vector<int> rows(static_cast<std::size_t>(batch_size));
  for (auto& r : rows) r = pick(rng);
  return gather(rows);
}

Batch ReplayBuffer::all() const {
  std::vector<int> rows;
  const int start = size_ < capacity_ ? 0 : head_;
  for (int i = 0; i < size_; ++i) rows.push_back((start + i) % capacity_);
  return gather(rows);
}

std::vector<nn::NamedBlock> ReplayBuffer::to_blocks() const {
  Matrix meta(1, 2);
  meta << size_, head_;
  return {{"replay/data", data_.topRows(size_)}, {"replay/meta", meta}};
}

void ReplayBuffer::load_blocks(const std::vector<nn::NamedBlock>& blocks) {
  const auto index = index_blocks(blocks);
  const auto d = index.find("replay/data");
  const auto m = index.find("replay/meta");
  if (d == index.end() || m == index.end()) throw std::runtime_error("checkpoint has no replay state");
  if (d->second->cols() != data_.cols() || d->second->rows() > capacity_) {
    throw std::runtime_error("replay state does not match the configured buffer");
  }
  data_.setZero();
  data_.topRows(d->second->rows()) = *d->second;
  size_ = static_cast<int>((*m->second)(0, 0));
  head_ = static_cast<int>((*m->second)(0, 1));
}

// ---------------------------------------------------------------------------

SacTrainer::SacTrainer(System& system, const SacConfig& cfg)
    : system_(system),
      cfg_(cfg),
      actor_opt_(system.actor_params(), nn::AdamConfig{cfg.actor_lr}),
      critic_opt_(system.critic_params(), nn::AdamConfig{cfg.critic_lr}) {}

Matrix SacTrainer::critic_targets(const Batch& batch, std::mt19937_64& rng) const {
  const auto n = static_cast<std::size_t>(system_.n_agents());
  const Eigen::Index b = batch.rewards.cols();
  std::vector<Matrix> noise;
  for (std::size_t i = 0; i < n; ++i) noise.push_back(standard_normal(system_.shape().action_dim, b, rng));
  const auto next = system_.actor_forward(batch.next_obs, noise, false);
  std::vector<Matrix> next_actions;
  for (const auto& p : next.policy) next_actions.push_back(p.action);
  const auto tq = system_.critic_forward(batch.next_obs, next_actions, true, false);
  Matrix y(static_cast<Eigen::Index>(n), b);
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    const Eigen::RowVectorXd soft_v =
        tq.q1[i].cwiseMin(tq.q2[i]) - cfg_.entropy_weight * next.policy[i].log_prob;
    const Eigen::RowVectorXd cont = (1.0 - batch.done.row(r).array()).matrix();
    y.row(r) = batch.rewards.row(r) +
               cfg_.gamma * (cont.cwiseProduct(soft_v) + batch.done.row(r).cwiseProduct(batch.tail.row(r)));
  }
  return y;
}

UpdateDiagnostics SacTrainer::update(const Batch& batch, std::mt19937_64& rng) {
  const auto n = static_cast<std::size_t>(system_.n_agents());
  const Eigen::Index b = batch.rewards.cols();
  UpdateDiagnostics diag;

  // Critic step.
  critic_opt_.zero_grad();
  const Matrix y = critic_targets(batch, rng);
  const auto cp = system_.critic_forward(batch.obs, batch.actions, false, true);
  std::vector<Eigen::RowVectorXd> dq1(n), dq2(n);
  double q_sum = 0.0, q_count = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    const Eigen::RowVectorXd mask = batch.active.row(r);
    const double cnt = std::max(1.0, mask.sum());
    const Eigen::RowVectorXd e1 = cp.q1[i] - y.row(r);
    const Eigen::RowVectorXd e2 = cp.q2[i] - y.row(r);
    diag.critic_loss += (mask.cwiseProduct(e1.cwiseProduct(e1) + e2.cwiseProduct(e2))).sum() / cnt;
    dq1[i] = 2.0 * mask.cwiseProduct(e1) / cnt;
    dq2[i] = 2.0 * mask.cwiseProduct(e2) / cnt;
    q_sum += mask.cwiseProduct(cp.q1[i]).sum();
    q_count += mask.sum();
  }
  diag.mean_q = q_count > 0 ? q_sum / q_count : 0.0;
  if (!std::isfinite(diag.critic_loss)) {
    ++skipped_;
    diag.skipped = true;
    return diag;
  }
  system_.critic_backward(cp, dq1, dq2);
  if (!critic_opt_.step()) {
    ++skipped_;
    diag.skipped = true;
    return diag;
  }

  // Actor step: reparameterized actions for every agent, scored by the
  // (just updated) critics.
  actor_opt_.zero_grad();
  std::vector<Matrix> noise;
  for (std::size_t i = 0; i < n; ++i) noise.push_back(standard_normal(system_.shape().action_dim, b, rng));
  const auto ap = system_.actor_forward(batch.obs, noise, true);
  std::vector<Matrix> actions;
  for (const auto& p : ap.policy) actions.push_back(p.action);
  const auto qp = system_.critic_forward(batch.obs, actions, false, true);
  std::vector<Eigen::RowVectorXd> dlogp(n);
  double lp_sum = 0.0, lp_count = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    const Eigen::RowVectorXd mask = batch.active.row(r);
    const double cnt = std::max(1.0, mask.sum());
    const Eigen::RowVectorXd qmin = qp.q1[i].cwiseMin(qp.q2[i]);
    diag.actor_loss +=
        mask.cwiseProduct(cfg_.entropy_weight * ap.policy[i].log_prob - qmin).sum() / cnt;
    dq1[i].resize(b);
    dq2[i].resize(b);
    for (Eigen::Index j = 0; j < b; ++j) {
      const bool first = qp.q1[i][j] <= qp.q2[i][j];
      dq1[i][j] = first ? -mask[j] / cnt : 0.0;
      dq2[i][j] = first ? 0.0 : -mask[j] / cnt;
    }
    dlogp[i] = cfg_.entropy_weight * mask / cnt;
    lp_sum += mask.cwiseProduct(ap.policy[i].log_prob).sum();
    lp_count += mask.sum();
  }
  diag.mean_log_prob = lp_count > 0 ? lp_sum / lp_count : 0.0;
  if (!std::isfinite(diag.actor_loss)) {
    ++skipped_;
    diag.skipped = true;
    return diag;
  }
  // Critic parameter gradients accumulated here are discarded by the next
  // critic step's zero_grad.
  const auto daction = system_.critic_backward(qp, dq1, dq2);
  system_.actor_backward(ap, daction, dlogp);
  if (!actor_opt_.step()) {
    ++skipped_;
    diag.skipped = true;
  }
  system_.soft_update_targets(cfg_.tau);
  return diag;
}

// ---------------------------------------------------------------------------

Learner::Learner(int n_agents, const MechanismSpec& mechanism, const SacConfig& sac,
                 std::uint64_t seed, const NetworkShape& shape)
    : sac_(sac),
      system_(n_agents, mechanism, shape, seed),
      trainer_(system_, sac),
      replay_(sac.replay_capacity, n_agents, shape.obs_dim, shape.action_dim),
      rng_(seed ^ 0xd1b54a32d192ed03ULL) {
  sac.validate();
}

void Learner::observe(const JointTransition& t) {
  replay_.push(t);
  ++env_steps_;
  if (env_steps_ < sac_.warmup_steps || replay_.size() < sac_.batch_size) return;
  if (env_steps_ % sac_.update_every != 0) return;
  for (int k = 0; k < sac_.updates_per_round; ++k) {
    trainer_.update(replay_.sample(sac_.batch_size, rng_), rng_);
    ++updates_;
  }
}

std::vector<nn::NamedBlock> Learner::checkpoint_blocks() {
  auto blocks = system_.to_blocks();
  auto add_adam = [&](nn::Adam& opt, const std::string& tag) {
    auto& params = opt.params();
    for (std::size_t i = 0; i < params.size(); ++i) {
      blocks.push_back({"adam." + tag + ".m/" + params[i]->name, opt.first_moments()[i]});
      blocks.push_back({"adam." + tag + ".v/" + params[i]->name, opt.second_moments()[i]});
    }
  };
  add_adam(trainer_.actor_optimizer(), "actor");
  add_adam(trainer_.critic_optimizer(), "critic");
  for (auto& b : replay_.to_blocks()) blocks.push_back(std::move(b));
  Matrix meta(1, 4);
  meta << static_cast<double>(env_steps_), static_cast<double>(updates_),
      static_cast<double>(trainer_.actor_optimizer().steps()),
      static_cast<double>(trainer_.critic_optimizer().steps());
  blocks.push_back({"meta/counters", meta});
  return blocks;
}

void Learner::load_checkpoint_blocks(const std::vector<nn::NamedBlock>& blocks,
                                     bool with_training_state) {
  system_.load_blocks(blocks);
  if (!with_training_state) return;
  const auto index = index_blocks(blocks);
  auto load_adam = [&](nn::Adam& opt, const std::string& tag) {
    auto& params = opt.params();
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto m = index.find("adam." + tag + ".m/" + params[i]->name);
      const auto v = index.find("adam." + tag + ".v/" + params[i]->name);
      if (m == index.end() || v == index.end()) throw std::runtime_error("checkpoint has no optimizer state");
      opt.first_moments()[i] = *m->second;
      opt.second_moments()[i] = *v->second;
    }
  };
  load_adam(trainer_.actor_optimizer(), "actor");
  load_adam(trainer_.critic_optimizer(), "critic");
  replay_.load_blocks(blocks);
  const auto it = index.find("meta/counters");
  if (it == index.end()) throw std::runtime_error("checkpoint has no counters");
  const Matrix& meta = *it->second;
  env_steps_ = static_cast<std::int64_t>(meta(0, 0));
  updates_ = static_cast<std::int64_t>(meta(0, 1));
  trainer_.actor_optimizer().set_steps(static_cast<std::int64_t>(meta(0, 2)));
  trainer_.critic_optimizer().set_steps(static_cast<std::int64_t>(meta(0, 3)));
}

std::string Learner::rng_state() const {
  std::ostringstream os;
  os << rng_;
  return os.str();
}

void Learner::set_rng_state(const std::string& s) {
  std::istringstream is(s);
  is >> rng_;
  if (!is) throw std::runtime_error("invalid RNG state");
}

// ---------------------------------------------------------------------------

double absorbing_value(double reward, double gamma, int remaining_steps) {
  if (gamma < 1.0) return reward / (1.0 - gamma);
  return reward * static_cast<double>(std::max(remaining_steps, 0));
}

EpisodeStats run_episode(env::World& world, Learner& learner, const ChannelSetup& channel,
                         Mode mode, std::uint64_t seed, const EpisodeObservers& observers,
                         const std::vector<env::UavState>* initial_states) {
  const auto& cfg = world.config();
  System& sys = learner.system();
  const int n_agents = cfg.n_agents;
  const auto nu = static_cast<std::size_t>(n_agents);
  if (sys.n_agents() != n_agents) throw std::invalid_argument("run_episode: agent count mismatch");
  const bool train = mode == Mode::Train;
  const int horizon = cfg.max_episode_steps;
  const auto& sac = learner.config();

  world.reset(seed);
  if (initial_states) world.set_states(*initial_states);
  const comms::PayloadSpec payload{sys.mechanism().method, sys.shape().embed_dim,
                                   attention::kSubMessageDim, sys.mechanism().count, n_agents};
  const int width = channel.channel.float_width_bits;
  const auto ul_round = comms::round_bits(payload, comms::Direction::Uplink, width);
  const auto dl_round = comms::round_bits(payload, comms::Direction::Downlink, width);
  comms::StaleCache ul_cache(n_agents), dl_cache(n_agents);

  EpisodeStats st;
  st.cumulative_reward.assign(nu, 0.0);
  st.arrival_time.assign(nu, -1.0);
  for (std::size_t i = 0; i < nu; ++i)
    if (world.arrived()[i]) st.arrival_time[i] = 0.0;
  std::vector<std::vector<bool>> collided(nu, std::vector<bool>(nu, false));
  double t = 0.0;
  std::uniform_real_distribution<double> uniform(-1.0, 1.0);
  std::normal_distribution<double> gauss;

  auto record = [&](const std::vector<double>& rewards) {
    for (std::size_t i = 0; i < nu; ++i) st.cumulative_reward[i] += rewards[i];
    st.step_rewards.push_back(rewards);
  };

  for (int step = 0; step < horizon; ++step) {
    if (world.all_arrived()) {
      // Every agent is parked: the rest of the horizon repeats this layout.
      std::vector<double> frozen(nu);
      for (std::size_t i = 0; i < nu; ++i) {
        frozen[i] = env::positive_reward(world.states()[i], cfg) +
                    env::negative_reward(static_cast<int>(i), world.states(), cfg);
      }
      for (int k = step; k < horizon; ++k) record(frozen);
      break;
    }
    const auto states = world.states();
    const auto arrived_before = world.arrived();
    std::vector<Matrix> obs(nu), emb(nu);
    for (std::size_t i = 0; i < nu; ++i) {
      obs[i] = env::observe(states[i], cfg);
      emb[i] = sys.encode_actor(static_cast<int>(i), obs[i]);
    }

    double dt = channel.fixed_dt;
    std::vector<comms::LinkBudget> budgets;
    std::vector<Matrix> uploaded = emb;
    if (!channel.perfect) {
      budgets = comms::round_delays(states, payload, channel.channel);
      for (std::size_t i = 0; i < nu; ++i) {
        uploaded[i] = ul_cache.deliver(static_cast<int>(i), budgets[i].stale_ul, emb[i].col(0));
        st.energy += budgets[i].energy;
        st.stale_ul += budgets[i].stale_ul ? 1 : 0;
        st.stale_dl += budgets[i].stale_dl ? 1 : 0;
        if (observers.on_link) observers.on_link({step, static_cast<int>(i), budgets[i]});
      }
      dt = comms::control_interval(budgets, channel.channel);
    }
    st.ul_bits += ul_round;
    st.dl_bits += dl_round;

    auto messages = sys.actor_helper().forward(uploaded, nullptr);
    if (!channel.perfect) {
      for (std::size_t i = 0; i < nu; ++i) {
        messages[i] = dl_cache.deliver(static_cast<int>(i), budgets[i].stale_dl, messages[i].col(0));
      }
    }

    const bool warmup = train && learner.env_steps() < sac.warmup_steps;
    std::vector<Vector> unit_actions(nu);
    std::vector<env::ControlAction> actions(nu);
    for (std::size_t i = 0; i < nu; ++i) {
      Vector u(sys.shape().action_dim);
      if (warmup) {
        for (Eigen::Index k = 0; k < u.size(); ++k) u[k] = uniform(learner.rng());
      } else {
        Matrix noise;
        if (train) {
          noise.resize(u.size(), 1);
          for (Eigen::Index k = 0; k < u.size(); ++k) noise(k, 0) = gauss(learner.rng());
        }
        u = sys.policy(static_cast<int>(i), emb[i], messages[i], noise).action.col(0);
      }
      unit_actions[i] = u;
      actions[i].acceleration = env::Vec2(u[0], u[1]) * cfg.a_max;
    }

    const auto out = world.step(actions, dt);
    t += dt;
    ++st.steps;
    record(out.rewards);
    st.collision_events += static_cast<int>(out.collided_pairs.size());
    for (const auto& [a, b] : out.collided_pairs) {
      collided[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)] = true;
    }
    for (std::size_t i = 0; i < nu; ++i) {
      if (out.done_flags[i] && !arrived_before[i]) st.arrival_time[i] = t;
      if (observers.on_trajectory) {
        observers.on_trajectory({step, t, static_cast<int>(i), out.next_states[i],
                                 out.positive_rewards[i], out.negative_rewards[i],
                                 static_cast<bool>(out.done_flags[i])});
      }
    }

    if (train) {
      JointTransition tr;
      tr.rewards = out.rewards;
      for (std::size_t i = 0; i < nu; ++i) {
        tr.obs.push_back(obs[i].col(0));
        tr.actions.push_back(unit_actions[i]);
        tr.next_obs.push_back(env::observe(out.next_states[i], cfg));
        tr.active.push_back(!arrived_before[i]);
        tr.done.push_back(out.done_flags[i]);
        tr.tail.push_back(out.done_flags[i]
                              ? absorbing_value(out.rewards[i], sac.gamma, horizon - step - 1)
                              : 0.0);
      }
      learner.observe(tr);
    }
  }

  st.elapsed = t;
  for (auto& a : st.arrival_time)
    if (a < 0.0) a = t;
  double sum = 0.0;
  for (std::size_t i = 0; i < nu; ++i) {
    sum += st.arrival_time[i];
    st.travel_time_max = std::max(st.travel_time_max, st.arrival_time[i]);
    st.system_reward += st.cumulative_reward[i];
    for (std::size_t j = i + 1; j < nu; ++j) st.collision_pairs += collided[i][j] ? 1 : 0;
  }
  st.travel_time_mean = sum / static_cast<double>(nu);
  st.collision_rate = static_cast<double>(st.collision_pairs) /
                      (static_cast<double>(n_agents) * (n_agents - 1) / 2.0);
  return st;
}

std::vector<double> evaluate_return(const std::vector<std::vector<double>>& step_rewards,
                                    double gamma) {
  std::vector<double> out;
  if (step_rewards.empty()) return out;
  out.assign(step_rewards.front().size(), 0.0);
  double discount = 1.0;
  for (const auto& r : step_rewards) {
    for (std::size_t i = 0; i < r.size(); ++i) out[i] += discount * r[i];
    discount *= gamma;
  }
  return out;
}

}  // namespace skylink::madrl
