#include "skylink/attention.hpp"

#include <stdexcept>

namespace skylink::attention {

namespace {

// Agent embeddings stacked sample-major: column b * N + n.
Matrix stack_sample_major(const std::vector<Matrix>& per_agent) {
  const auto n_agents = static_cast<Eigen::Index>(per_agent.size());
  const Eigen::Index batch = per_agent.front().cols();
  Matrix out(per_agent.front().rows(), batch * n_agents);
  for (Eigen::Index b = 0; b < batch; ++b)
    for (Eigen::Index n = 0; n < n_agents; ++n)
      out.col(b * n_agents + n) = per_agent[static_cast<std::size_t>(n)].col(b);
  return out;
}

std::vector<Matrix> unstack_sample_major(const Matrix& stacked, Eigen::Index n_agents) {
  const Eigen::Index batch = stacked.cols() / n_agents;
  std::vector<Matrix> out(static_cast<std::size_t>(n_agents), Matrix(stacked.rows(), batch));
  for (Eigen::Index b = 0; b < batch; ++b)
    for (Eigen::Index n = 0; n < n_agents; ++n)
      out[static_cast<std::size_t>(n)].col(b) = stacked.col(b * n_agents + n);
  return out;
}

Matrix to_columns(const EmbeddingSet& e) {
  Matrix m(e.front().size(), static_cast<Eigen::Index>(e.size()));
  for (std::size_t i = 0; i < e.size(); ++i) m.col(static_cast<Eigen::Index>(i)) = e[i];
  return m;
}

std::vector<Matrix> as_batch_of_one(const EmbeddingSet& e) {
  std::vector<Matrix> out;
  out.reserve(e.size());
  for (const auto& v : e) out.emplace_back(v);
  return out;
}

nn::Mask self_mask(Eigen::Index n_agents, Eigen::Index agent) {
  nn::Mask m(static_cast<std::size_t>(n_agents), false);
  m[static_cast<std::size_t>(agent)] = true;
  return m;
}

int argmax_lowest(const Vector& v, const nn::Mask& mask) {
  int best = -1;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (mask[static_cast<std::size_t>(i)]) continue;
    if (best < 0 || v[i] > v[best]) best = static_cast<int>(i);
  }
  return best;
}

}  // namespace

// ---------------------------------------------------------------------------

QkvBlock::QkvBlock(const std::string& name, int in, int out, std::mt19937_64& rng)
    : query(name + ".query", in, out, nn::Activation::Identity, rng),
      key(name + ".key", in, out, nn::Activation::Identity, rng),
      value(name + ".value", in, out, nn::Activation::Identity, rng),
      query_norm(name + ".query_norm", out),
      key_norm(name + ".key_norm", out),
      value_norm(name + ".value_norm", out) {}

void QkvBlock::forward(const Matrix& x, Matrix& q, Matrix& k, Matrix& v, Cache* cache) const {
  q = query_norm.forward(query.forward(x, cache ? &cache->q : nullptr), cache ? &cache->qn : nullptr);
  k = key_norm.forward(key.forward(x, cache ? &cache->k : nullptr), cache ? &cache->kn : nullptr);
  v = value_norm.forward(value.forward(x, cache ? &cache->v : nullptr), cache ? &cache->vn : nullptr);
}

Matrix QkvBlock::backward(const Cache& cache, const Matrix& dq, const Matrix& dk,
                          const Matrix& dv) {
  Matrix dx = query.backward(cache.q, query_norm.backward(cache.qn, dq));
  dx += key.backward(cache.k, key_norm.backward(cache.kn, dk));
  dx += value.backward(cache.v, value_norm.backward(cache.vn, dv));
  return dx;
}

void QkvBlock::collect(nn::ParamList& out) {
  query.collect(out);
  query_norm.collect(out);
  key.collect(out);
  key_norm.collect(out);
  value.collect(out);
  value_norm.collect(out);
}

QkvTriple compute_qkv(const EmbeddingSet& embeddings, const QkvBlock& params) {
  Matrix q, k, v;
  params.forward(to_columns(embeddings), q, k, v, nullptr);
  QkvTriple t;
  for (Eigen::Index i = 0; i < q.cols(); ++i) {
    t.query.emplace_back(q.col(i));
    t.key.emplace_back(k.col(i));
    t.value.emplace_back(v.col(i));
  }
  return t;
}

Vector relevance_scores(const Vector& query, const std::vector<Vector>& keys) {
  Vector rho(static_cast<Eigen::Index>(keys.size()));
  for (std::size_t m = 0; m < keys.size(); ++m) {
    if (keys[m].size() != query.size()) throw std::invalid_argument("relevance_scores: dim mismatch");
    rho[static_cast<Eigen::Index>(m)] = query.dot(keys[m]);
  }
  return rho;
}

IshaScores isha_scores(const Vector& rho, int agent, int n_iter, double beta) {
  const auto n_agents = static_cast<int>(rho.size());
  if (agent < 0 || agent >= n_agents) throw std::domain_error("isha_scores: agent out of range");
  if (n_iter < 1 || n_iter > n_agents - 1) {
    throw std::domain_error("isha_scores: iterations must be in [1, N-1]");
  }
  IshaScores out;
  nn::Mask eliminated = self_mask(n_agents, agent);
  for (int c = 0; c < n_iter; ++c) {
    Vector alpha = nn::softmax_temp(rho, beta, eliminated);
    const int top = argmax_lowest(alpha, eliminated);
    out.masks.push_back(eliminated);
    out.scores.push_back(std::move(alpha));
    out.eliminated.push_back(top);
    eliminated[static_cast<std::size_t>(top)] = true;
  }
  return out;
}

Matrix score_heatmap(const AttentionWork& work) {
  if (work.scores.empty()) return Matrix();
  Matrix h(static_cast<Eigen::Index>(work.scores.size()), work.scores.front().size());
  for (std::size_t r = 0; r < work.scores.size(); ++r) h.row(static_cast<Eigen::Index>(r)) = work.scores[r].transpose();
  return h;
}

Vector Helper::message(const EmbeddingSet& embeddings, int agent) const {
  const auto out = forward(as_batch_of_one(embeddings), nullptr);
  return out.at(static_cast<std::size_t>(agent)).col(0);
}

// ---------------------------------------------------------------------------

namespace {

struct IshaCache final : HelperCache {
  QkvBlock::Cache qkv;
  Matrix q, k, v;
  std::vector<IshaScores> scores;  // index b * N + n
  nn::Dense::Cache out;
  Eigen::Index n_agents = 0;
  Eigen::Index batch = 0;
};

}  // namespace

IshaHelper::IshaHelper(const std::string& name, int n_iter, double beta, std::mt19937_64& rng,
                       int embed_dim, int sub_dim)
    : qkv_(name + ".qkv", embed_dim, embed_dim, rng),
      output_(name + ".output", embed_dim, sub_dim, nn::Activation::Relu, rng),
      n_iter_(n_iter),
      beta_(beta) {
  if (n_iter < 1) throw std::invalid_argument(name + ": iterations must be >= 1");
  if (!(beta > 0.0)) throw std::invalid_argument(name + ": beta must be positive");
}

std::vector<Matrix> IshaHelper::forward(const std::vector<Matrix>& embeddings,
                                        std::unique_ptr<HelperCache>* cache) const {
  const auto n_agents = static_cast<Eigen::Index>(embeddings.size());
  const Eigen::Index batch = embeddings.front().cols();
  auto c = std::make_unique<IshaCache>();
  c->n_agents = n_agents;
  c->batch = batch;
  qkv_.forward(stack_sample_major(embeddings), c->q, c->k, c->v, cache ? &c->qkv : nullptr);

  const Eigen::Index d = c->v.rows();
  Matrix weighted(d, batch * n_agents * n_iter_);
  c->scores.resize(static_cast<std::size_t>(batch * n_agents));
  for (Eigen::Index b = 0; b < batch; ++b) {
    const auto qb = c->q.middleCols(b * n_agents, n_agents);
    const auto kb = c->k.middleCols(b * n_agents, n_agents);
    const auto vb = c->v.middleCols(b * n_agents, n_agents);
    const Matrix rho = qb.transpose() * kb;  // rho(n, m) = q_n . k_m
    for (Eigen::Index n = 0; n < n_agents; ++n) {
      auto& s = c->scores[static_cast<std::size_t>(b * n_agents + n)];
      s = isha_scores(rho.row(n).transpose(), static_cast<int>(n), n_iter_, beta_);
      for (int it = 0; it < n_iter_; ++it) {
        weighted.col((b * n_agents + n) * n_iter_ + it) = vb * s.scores[static_cast<std::size_t>(it)];
      }
    }
  }

  const Matrix sub = output_.forward(weighted, cache ? &c->out : nullptr);
  const Eigen::Index sd = sub.rows();
  std::vector<Matrix> messages(static_cast<std::size_t>(n_agents), Matrix(sd * n_iter_, batch));
  for (Eigen::Index b = 0; b < batch; ++b)
    for (Eigen::Index n = 0; n < n_agents; ++n)
      for (int it = 0; it < n_iter_; ++it)
        messages[static_cast<std::size_t>(n)].block(it * sd, b, sd, 1) =
            sub.col((b * n_agents + n) * n_iter_ + it);
  if (cache) *cache = std::move(c);
  return messages;
}

std::vector<Matrix> IshaHelper::backward(const HelperCache& base,
                                         const std::vector<Matrix>& dmessages) {
  const auto& c = dynamic_cast<const IshaCache&>(base);
  const Eigen::Index n_agents = c.n_agents;
  const Eigen::Index batch = c.batch;
  const Eigen::Index sd = output_.out_dim();

  Matrix dsub(sd, batch * n_agents * n_iter_);
  for (Eigen::Index b = 0; b < batch; ++b)
    for (Eigen::Index n = 0; n < n_agents; ++n)
      for (int it = 0; it < n_iter_; ++it)
        dsub.col((b * n_agents + n) * n_iter_ + it) =
            dmessages[static_cast<std::size_t>(n)].block(it * sd, b, sd, 1);
  const Matrix dweighted = output_.backward(c.out, dsub);

  Matrix dq = Matrix::Zero(c.q.rows(), c.q.cols());
  Matrix dk = Matrix::Zero(c.k.rows(), c.k.cols());
  Matrix dv = Matrix::Zero(c.v.rows(), c.v.cols());
  for (Eigen::Index b = 0; b < batch; ++b) {
    const auto qb = c.q.middleCols(b * n_agents, n_agents);
    const auto kb = c.k.middleCols(b * n_agents, n_agents);
    const auto vb = c.v.middleCols(b * n_agents, n_agents);
    for (Eigen::Index n = 0; n < n_agents; ++n) {
      const auto& s = c.scores[static_cast<std::size_t>(b * n_agents + n)];
      Vector drho = Vector::Zero(n_agents);
      for (int it = 0; it < n_iter_; ++it) {
        const auto& alpha = s.scores[static_cast<std::size_t>(it)];
        const auto dy = dweighted.col((b * n_agents + n) * n_iter_ + it);
        const Vector dalpha = vb.transpose() * dy;
        dv.middleCols(b * n_agents, n_agents).noalias() += dy * alpha.transpose();
        // Elimination mask is treated as a constant.
        drho += nn::softmax_temp_backward(alpha, dalpha, beta_, s.masks[static_cast<std::size_t>(it)]);
      }
      dq.col(b * n_agents + n) += kb * drho;
      dk.middleCols(b * n_agents, n_agents).noalias() += qb.col(n) * drho.transpose();
    }
  }
  return unstack_sample_major(qkv_.backward(c.qkv, dq, dk, dv), n_agents);
}

void IshaHelper::collect(nn::ParamList& out) {
  qkv_.collect(out);
  output_.collect(out);
}

AttentionWork IshaHelper::work(const EmbeddingSet& embeddings, int agent) const {
  AttentionWork w;
  w.qkv = compute_qkv(embeddings, qkv_);
  w.relevance.push_back(relevance_scores(w.qkv.query[static_cast<std::size_t>(agent)], w.qkv.key));
  auto s = isha_scores(w.relevance.front(), agent, n_iter_, beta_);
  w.scores = std::move(s.scores);
  w.eliminated.push_back(agent);
  w.eliminated.insert(w.eliminated.end(), s.eliminated.begin(), s.eliminated.end());
  return w;
}

// ---------------------------------------------------------------------------

namespace {

struct MhaCache final : HelperCache {
  std::vector<QkvBlock::Cache> qkv;
  std::vector<Matrix> q, k, v;
  std::vector<Vector> scores;  // index (b * N + n) * H + h
  nn::Dense::Cache out;
  Eigen::Index n_agents = 0;
  Eigen::Index batch = 0;
};

}  // namespace

MhaHelper::MhaHelper(const std::string& name, int n_heads, double beta, std::mt19937_64& rng,
                     int embed_dim)
    : beta_(beta) {
  if (n_heads < 1 || embed_dim % n_heads != 0) {
    throw std::invalid_argument(name + ": embedding dim " + std::to_string(embed_dim) +
                                " is not divisible by " + std::to_string(n_heads) + " heads");
  }
  if (!(beta > 0.0)) throw std::invalid_argument(name + ": beta must be positive");
  const int head_dim = embed_dim / n_heads;
  for (int h = 0; h < n_heads; ++h) {
    heads_.emplace_back(name + ".head" + std::to_string(h), embed_dim, head_dim, rng);
  }
  output_ = nn::Dense(name + ".output", embed_dim, embed_dim, nn::Activation::Relu, rng);
}

std::vector<Matrix> MhaHelper::forward(const std::vector<Matrix>& embeddings,
                                       std::unique_ptr<HelperCache>* cache) const {
  const auto n_agents = static_cast<Eigen::Index>(embeddings.size());
  const Eigen::Index batch = embeddings.front().cols();
  const auto n_heads = static_cast<Eigen::Index>(heads_.size());
  auto c = std::make_unique<MhaCache>();
  c->n_agents = n_agents;
  c->batch = batch;
  c->qkv.resize(heads_.size());
  c->q.resize(heads_.size());
  c->k.resize(heads_.size());
  c->v.resize(heads_.size());
  c->scores.resize(static_cast<std::size_t>(batch * n_agents * n_heads));

  const Matrix stacked = stack_sample_major(embeddings);
  Eigen::Index head_dim = 0;
  for (std::size_t h = 0; h < heads_.size(); ++h) {
    heads_[h].forward(stacked, c->q[h], c->k[h], c->v[h], cache ? &c->qkv[h] : nullptr);
    head_dim = c->v[h].rows();
  }

  Matrix concat(head_dim * n_heads, batch * n_agents);
  for (Eigen::Index b = 0; b < batch; ++b) {
    for (Eigen::Index h = 0; h < n_heads; ++h) {
      const auto hs = static_cast<std::size_t>(h);
      const Matrix rho = c->q[hs].middleCols(b * n_agents, n_agents).transpose() *
                         c->k[hs].middleCols(b * n_agents, n_agents);
      const auto vb = c->v[hs].middleCols(b * n_agents, n_agents);
      for (Eigen::Index n = 0; n < n_agents; ++n) {
        auto& alpha = c->scores[static_cast<std::size_t>((b * n_agents + n) * n_heads + h)];
        alpha = nn::softmax_temp(rho.row(n).transpose(), beta_, self_mask(n_agents, n));
        concat.block(h * head_dim, b * n_agents + n, head_dim, 1) = vb * alpha;
      }
    }
  }
  const Matrix out = output_.forward(concat, cache ? &c->out : nullptr);
  auto messages = unstack_sample_major(out, n_agents);
  if (cache) *cache = std::move(c);
  return messages;
}

std::vector<Matrix> MhaHelper::backward(const HelperCache& base,
                                        const std::vector<Matrix>& dmessages) {
  const auto& c = dynamic_cast<const MhaCache&>(base);
  const Eigen::Index n_agents = c.n_agents;
  const Eigen::Index batch = c.batch;
  const auto n_heads = static_cast<Eigen::Index>(heads_.size());
  const Matrix dconcat = output_.backward(c.out, stack_sample_major(dmessages));
  const Eigen::Index head_dim = c.v.front().rows();

  Matrix dstacked;
  for (Eigen::Index h = 0; h < n_heads; ++h) {
    const auto hs = static_cast<std::size_t>(h);
    Matrix dq = Matrix::Zero(c.q[hs].rows(), c.q[hs].cols());
    Matrix dk = Matrix::Zero(c.k[hs].rows(), c.k[hs].cols());
    Matrix dv = Matrix::Zero(c.v[hs].rows(), c.v[hs].cols());
    for (Eigen::Index b = 0; b < batch; ++b) {
      const auto qb = c.q[hs].middleCols(b * n_agents, n_agents);
      const auto kb = c.k[hs].middleCols(b * n_agents, n_agents);
      const auto vb = c.v[hs].middleCols(b * n_agents, n_agents);
      for (Eigen::Index n = 0; n < n_agents; ++n) {
        const auto& alpha = c.scores[static_cast<std::size_t>((b * n_agents + n) * n_heads + h)];
        const auto dy = dconcat.block(h * head_dim, b * n_agents + n, head_dim, 1);
        const Vector dalpha = vb.transpose() * dy;
        dv.middleCols(b * n_agents, n_agents).noalias() += dy * alpha.transpose();
        const Vector drho = nn::softmax_temp_backward(alpha, dalpha, beta_, self_mask(n_agents, n));
        dq.col(b * n_agents + n) += kb * drho;
        dk.middleCols(b * n_agents, n_agents).noalias() += qb.col(n) * drho.transpose();
      }
    }
    Matrix dx = heads_[hs].backward(c.qkv[hs], dq, dk, dv);
    if (h == 0) {
      dstacked = std::move(dx);
    } else {
      dstacked += dx;
    }
  }
  return unstack_sample_major(dstacked, n_agents);
}

void MhaHelper::collect(nn::ParamList& out) {
  for (auto& h : heads_) h.collect(out);
  output_.collect(out);
}

AttentionWork MhaHelper::work(const EmbeddingSet& embeddings, int agent) const {
  AttentionWork w;
  const auto n_agents = static_cast<Eigen::Index>(embeddings.size());
  for (std::size_t h = 0; h < heads_.size(); ++h) {
    auto t = compute_qkv(embeddings, heads_[h]);
    Vector rho = relevance_scores(t.query[static_cast<std::size_t>(agent)], t.key);
    w.scores.push_back(nn::softmax_temp(rho, beta_, self_mask(n_agents, agent)));
    w.relevance.push_back(std::move(rho));
    if (h == 0) w.qkv = std::move(t);
  }
  return w;
}

// ---------------------------------------------------------------------------

namespace {

struct VanillaCache final : HelperCache {
  Eigen::Index n_agents = 0;
};

}  // namespace

std::vector<Matrix> VanillaHelper::forward(const std::vector<Matrix>& embeddings,
                                           std::unique_ptr<HelperCache>* cache) const {
  const auto n_agents = static_cast<Eigen::Index>(embeddings.size());
  const Eigen::Index d = embeddings.front().rows();
  const Eigen::Index batch = embeddings.front().cols();
  std::vector<Matrix> messages(static_cast<std::size_t>(n_agents), Matrix(d * (n_agents - 1), batch));
  for (Eigen::Index n = 0; n < n_agents; ++n) {
    Eigen::Index slot = 0;
    for (Eigen::Index m = 0; m < n_agents; ++m) {
      if (m == n) continue;
      messages[static_cast<std::size_t>(n)].middleRows(slot * d, d) = embeddings[static_cast<std::size_t>(m)];
      ++slot;
    }
  }
  if (cache) {
    auto c = std::make_unique<VanillaCache>();
    c->n_agents = n_agents;
    *cache = std::move(c);
  }
  return messages;
}

std::vector<Matrix> VanillaHelper::backward(const HelperCache& base,
                                            const std::vector<Matrix>& dmessages) {
  const auto& c = dynamic_cast<const VanillaCache&>(base);
  const Eigen::Index n_agents = c.n_agents;
  const Eigen::Index batch = dmessages.front().cols();
  const Eigen::Index d = dmessages.front().rows() / (n_agents - 1);
  std::vector<Matrix> dx(static_cast<std::size_t>(n_agents), Matrix::Zero(d, batch));
  for (Eigen::Index n = 0; n < n_agents; ++n) {
    Eigen::Index slot = 0;
    for (Eigen::Index m = 0; m < n_agents; ++m) {
      if (m == n) continue;
      dx[static_cast<std::size_t>(m)] += dmessages[static_cast<std::size_t>(n)].middleRows(slot * d, d);
      ++slot;
    }
  }
  return dx;
}

AttentionWork VanillaHelper::work(const EmbeddingSet&, int) const {
  throw std::logic_error("vanilla helper has no attention scores");
}

// ---------------------------------------------------------------------------

void validate_mechanism(const MechanismSpec& spec, int n_agents, int embed_dim) {
  if (spec.method == Method::Isha && (spec.count < 1 || spec.count > n_agents - 1)) {
    throw std::invalid_argument("mechanism.count: ISHA iterations must be in [1, N-1] = [1, " +
                                std::to_string(n_agents - 1) + "], got " + std::to_string(spec.count));
  }
  if (spec.method == Method::Mha && (spec.count < 1 || embed_dim % spec.count != 0)) {
    throw std::invalid_argument("mechanism.count: MHA heads must divide the embedding dim " +
                                std::to_string(embed_dim) + ", got " + std::to_string(spec.count));
  }
  if (spec.method != Method::Vanilla && !(spec.beta > 0.0)) {
    throw std::invalid_argument("mechanism.beta: must be positive");
  }
}

std::unique_ptr<Helper> make_helper(const std::string& name, const MechanismSpec& spec,
                                    int n_agents, std::mt19937_64& rng, int embed_dim) {
  validate_mechanism(spec, n_agents, embed_dim);
  switch (spec.method) {
    case Method::Isha:
      return std::make_unique<IshaHelper>(name, spec.count, spec.beta, rng, embed_dim);
    case Method::Mha:
      return std::make_unique<MhaHelper>(name, spec.count, spec.beta, rng, embed_dim);
    case Method::Vanilla:
      return std::make_unique<VanillaHelper>(n_agents, embed_dim);
  }
  throw std::logic_error("unreachable");
}

Vector isha_message(const EmbeddingSet& embeddings, int agent, const IshaHelper& helper) {
  return helper.message(embeddings, agent);
}

Vector mha_message(const EmbeddingSet& embeddings, int agent, const MhaHelper& helper) {
  return helper.message(embeddings, agent);
}

Vector vanilla_message(const EmbeddingSet& embeddings, int agent) {
  const auto n = static_cast<int>(embeddings.size());
  if (n < 2) throw std::invalid_argument("vanilla_message: need at least two agents");
  const Eigen::Index d = embeddings.front().size();
  Vector out(d * (n - 1));
  Eigen::Index slot = 0;
  for (int m = 0; m < n; ++m) {
    if (m == agent) continue;
    out.segment(slot * d, d) = embeddings[static_cast<std::size_t>(m)];
    ++slot;
  }
  return out;
}

}  // namespace skylink::attention
