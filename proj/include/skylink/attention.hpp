#pragma once

// Helper-side message functions. Each helper maps the set of agent
// embeddings {x^n} to one message per agent.
//
// Batched layout: embeddings arrive as one (embed_dim x batch) matrix per
// agent and messages leave as one (message_dim x batch) matrix per agent.

#include "skylink/mechanism.hpp"
#include "skylink/nn.hpp"

#include <memory>
#include <random>
#include <string>
#include <vector>

namespace skylink::attention {

using nn::Matrix;
using nn::Vector;

inline constexpr int kEmbeddingDim = 63;
inline constexpr int kSubMessageDim = 21;

using EmbeddingSet = std::vector<Vector>;  // one embedding per agent

/// Linear projection followed by layer normalization, for query, key and
/// value alike.
struct QkvBlock {
  nn::Dense query, key, value;
  nn::LayerNorm query_norm, key_norm, value_norm;

  struct Cache {
    nn::Dense::Cache q, k, v;
    nn::LayerNorm::Cache qn, kn, vn;
  };

  QkvBlock() = default;
  QkvBlock(const std::string& name, int in, int out, std::mt19937_64& rng);

  /// Columns of x are independent inputs.
  void forward(const Matrix& x, Matrix& q, Matrix& k, Matrix& v, Cache* cache) const;
  Matrix backward(const Cache& cache, const Matrix& dq, const Matrix& dk, const Matrix& dv);
  void collect(nn::ParamList& out);
};

struct QkvTriple {
  std::vector<Vector> query, key, value;
};

QkvTriple compute_qkv(const EmbeddingSet& embeddings, const QkvBlock& params);

/// rho^{n,m} = q_n . k_m for every m (self included).
Vector relevance_scores(const Vector& query, const std::vector<Vector>& keys);

/// Iterative elimination: E = {n}; for each iteration compute the masked
/// temperature softmax over rho, then add its argmax (lowest index on ties)
/// to E.
struct IshaScores {
  std::vector<Vector> scores;     // one per iteration
  std::vector<int> eliminated;    // argmax of each iteration, in order
  std::vector<nn::Mask> masks;    // mask active while computing each row
};

IshaScores isha_scores(const Vector& rho, int agent, int n_iter, double beta);

/// Everything computed for one agent's message, for inspection and heatmaps.
struct AttentionWork {
  QkvTriple qkv;                   // ISHA: shared projections; MHA: head 0
  std::vector<Vector> relevance;   // ISHA: one row; MHA: one per head
  std::vector<Vector> scores;      // per iteration / head
  std::vector<int> eliminated;     // ISHA only, includes the agent itself first
};

/// rows = iterations or heads, cols = agents.
Matrix score_heatmap(const AttentionWork& work);

struct HelperCache {
  virtual ~HelperCache() = default;
};

class Helper {
 public:
  virtual ~Helper() = default;
  virtual std::unique_ptr<Helper> clone() const = 0;
  virtual Method method() const = 0;
  virtual int message_dim() const = 0;

  /// embeddings[n] is (embed_dim x batch). Fills `cache` for backward when
  /// non-null.
  virtual std::vector<Matrix> forward(const std::vector<Matrix>& embeddings,
                                      std::unique_ptr<HelperCache>* cache) const = 0;
  /// Accumulates parameter gradients and returns d(loss)/d(embeddings).
  virtual std::vector<Matrix> backward(const HelperCache& cache,
                                       const std::vector<Matrix>& dmessages) = 0;
  virtual void collect(nn::ParamList& out) = 0;

  /// Per-agent score breakdown for a single snapshot. Vanilla throws.
  virtual AttentionWork work(const EmbeddingSet& embeddings, int agent) const = 0;

  /// Single-snapshot message for one agent.
  Vector message(const EmbeddingSet& embeddings, int agent) const;
};

/// Iterative single-head attention with N_I iterations.
class IshaHelper final : public Helper {
 public:
  IshaHelper(const std::string& name, int n_iter, double beta, std::mt19937_64& rng,
             int embed_dim = kEmbeddingDim, int sub_dim = kSubMessageDim);

  std::unique_ptr<Helper> clone() const override { return std::make_unique<IshaHelper>(*this); }
  Method method() const override { return Method::Isha; }
  int message_dim() const override { return n_iter_ * output_.out_dim(); }
  int iterations() const { return n_iter_; }
  double beta() const { return beta_; }

  std::vector<Matrix> forward(const std::vector<Matrix>& embeddings,
                              std::unique_ptr<HelperCache>* cache) const override;
  std::vector<Matrix> backward(const HelperCache& cache,
                               const std::vector<Matrix>& dmessages) override;
  void collect(nn::ParamList& out) override;
  AttentionWork work(const EmbeddingSet& embeddings, int agent) const override;

  QkvBlock& qkv() { return qkv_; }
  nn::Dense& output() { return output_; }
  const QkvBlock& qkv() const { return qkv_; }
  const nn::Dense& output() const { return output_; }

 private:
  QkvBlock qkv_;
  nn::Dense output_;  // embed_dim -> sub_dim, ReLU
  int n_iter_;
  double beta_;
};

/// N_H parallel heads of size embed_dim / N_H, concatenated and projected.
class MhaHelper final : public Helper {
 public:
  MhaHelper(const std::string& name, int n_heads, double beta, std::mt19937_64& rng,
            int embed_dim = kEmbeddingDim);

  std::unique_ptr<Helper> clone() const override { return std::make_unique<MhaHelper>(*this); }
  Method method() const override { return Method::Mha; }
  int message_dim() const override { return output_.out_dim(); }
  int heads() const { return static_cast<int>(heads_.size()); }

  std::vector<Matrix> forward(const std::vector<Matrix>& embeddings,
                              std::unique_ptr<HelperCache>* cache) const override;
  std::vector<Matrix> backward(const HelperCache& cache,
                               const std::vector<Matrix>& dmessages) override;
  void collect(nn::ParamList& out) override;
  AttentionWork work(const EmbeddingSet& embeddings, int agent) const override;

  std::vector<QkvBlock>& head_blocks() { return heads_; }
  nn::Dense& output() { return output_; }

 private:
  std::vector<QkvBlock> heads_;
  nn::Dense output_;  // embed_dim -> embed_dim, ReLU
  double beta_;
};

/// Relays the N-1 foreign embeddings in agent-index order. No parameters.
class VanillaHelper final : public Helper {
 public:
  VanillaHelper(int n_agents, int embed_dim = kEmbeddingDim)
      : n_agents_(n_agents), embed_dim_(embed_dim) {}

  std::unique_ptr<Helper> clone() const override { return std::make_unique<VanillaHelper>(*this); }
  Method method() const override { return Method::Vanilla; }
  int message_dim() const override { return (n_agents_ - 1) * embed_dim_; }

  std::vector<Matrix> forward(const std::vector<Matrix>& embeddings,
                              std::unique_ptr<HelperCache>* cache) const override;
  std::vector<Matrix> backward(const HelperCache& cache,
                               const std::vector<Matrix>& dmessages) override;
  void collect(nn::ParamList&) override {}
  AttentionWork work(const EmbeddingSet& embeddings, int agent) const override;

 private:
  int n_agents_;
  int embed_dim_;
};

/// Builds the helper for `spec`. Validates N_I <= N - 1 and embed_dim % N_H.
std::unique_ptr<Helper> make_helper(const std::string& name, const MechanismSpec& spec,
                                    int n_agents, std::mt19937_64& rng,
                                    int embed_dim = kEmbeddingDim);

void validate_mechanism(const MechanismSpec& spec, int n_agents, int embed_dim = kEmbeddingDim);

// Single-snapshot entry points.
Vector isha_message(const EmbeddingSet& embeddings, int agent, const IshaHelper& helper);
Vector mha_message(const EmbeddingSet& embeddings, int agent, const MhaHelper& helper);
Vector vanilla_message(const EmbeddingSet& embeddings, int agent);

}  // namespace skylink::attention
