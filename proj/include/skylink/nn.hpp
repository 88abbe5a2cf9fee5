#pragma once

// Small dense-network kernel with hand-written backward passes.
//
// Activations are stored column-wise: a Matrix of shape (features x batch).
// Every layer's forward() fills a cache that its backward() consumes;
// backward() accumulates parameter gradients and returns the input gradient.

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace skylink::nn {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Mask = std::vector<bool>;  // true = masked out

struct Param {
  std::string name;
  Matrix value;
  Matrix grad;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
  Eigen::Index size() const { return value.size(); }
};

using ParamList = std::vector<Param*>;

enum class Activation { Identity, Relu };

class Dense {
 public:
  struct Cache {
    Matrix input;
    Matrix pre;  // pre-activation, kept only for ReLU
  };

  Dense() = default;
  /// Weights and bias ~ U(-init, init); init <= 0 selects 1/sqrt(in).
  Dense(const std::string& name, int in, int out, Activation act, std::mt19937_64& rng,
        double init = 0.0);

  Matrix forward(const Matrix& x, Cache* cache = nullptr) const;
  Matrix backward(const Cache& cache, const Matrix& dy);
  void collect(ParamList& out);

  int in_dim() const { return static_cast<int>(weight_.value.cols()); }
  int out_dim() const { return static_cast<int>(weight_.value.rows()); }
  Activation activation() const { return act_; }
  Param& weight() { return weight_; }
  Param& bias() { return bias_; }
  const Param& weight() const { return weight_; }
  const Param& bias() const { return bias_; }

 private:
  Param weight_;  // out x in
  Param bias_;    // out x 1
  Activation act_ = Activation::Identity;
};

/// Layer normalization over the feature dimension (each column separately).
class LayerNorm {
 public:
  struct Cache {
    Matrix normalized;       // (x - mean) / sqrt(var + eps)
    Eigen::RowVectorXd inv_std;
  };

  static constexpr double kDefaultEpsilon = 1e-5;

  LayerNorm() = default;
  LayerNorm(const std::string& name, int dim, double epsilon = kDefaultEpsilon);

  Matrix forward(const Matrix& x, Cache* cache = nullptr) const;
  Matrix backward(const Cache& cache, const Matrix& dy);
  void collect(ParamList& out);

  int dim() const { return static_cast<int>(gain_.value.rows()); }
  Param& gain() { return gain_; }
  Param& shift() { return shift_; }

 private:
  Param gain_;
  Param shift_;
  double epsilon_ = kDefaultEpsilon;
};

/// Stack of Dense layers. Hidden layers use ReLU; the last layer uses
/// `output_act`.
class Mlp {
 public:
  struct Cache {
    std::vector<Dense::Cache> layers;
  };

  Mlp() = default;
  Mlp(const std::string& name, int in, const std::vector<int>& hidden, int out,
      Activation output_act, std::mt19937_64& rng, double output_init = 0.0);

  Matrix forward(const Matrix& x, Cache* cache = nullptr) const;
  Matrix backward(const Cache& cache, const Matrix& dy);
  void collect(ParamList& out);

  int in_dim() const { return layers_.front().in_dim(); }
  int out_dim() const { return layers_.back().out_dim(); }
  std::vector<Dense>& layers() { return layers_; }

 private:
  std::vector<Dense> layers_;
};

/// exp(rho_i / beta) / sum_unmasked exp(rho_j / beta) on unmasked entries,
/// exactly 0 on masked ones. Throws std::domain_error if every entry is
/// masked or beta <= 0.
Vector softmax_temp(const Vector& scores, double beta, const Mask& mask);

/// Gradient of a softmax_temp output with respect to its scores.
Vector softmax_temp_backward(const Vector& probs, const Vector& dprobs, double beta,
                             const Mask& mask);

// ---------------------------------------------------------------------------
// Tanh-squashed diagonal Gaussian policy head.

inline constexpr double kLogStdMin = -20.0;
inline constexpr double kLogStdMax = 2.0;

/// log(1 - tanh(z)^2), evaluated without cancellation.
double log_one_minus_tanh_sq(double z);

/// Batched sample. `head` is (2*dim x batch): rows [0, dim) are means, rows
/// [dim, 2*dim) raw log-stds (clamped to [kLogStdMin, kLogStdMax]).
struct SquashedGaussian {
  Matrix mean;
  Matrix log_std;       // clamped
  Matrix clamp_active;  // 1 where the raw log-std was inside the clamp
  Matrix noise;         // standard normal draws
  Matrix pre_tanh;
  Matrix action;        // tanh(pre_tanh), in (-1, 1)
  Eigen::RowVectorXd log_prob;

  /// `noise` may be empty for a deterministic (mean) action; log_prob is
  /// then evaluated at the mean.
  static SquashedGaussian sample(const Matrix& head, const Matrix& noise);

  /// Gradient w.r.t. the head given gradients of the loss w.r.t. the
  /// squashed action and the log-probability (reparameterized, noise fixed).
  Matrix backward(const Matrix& daction, const Eigen::RowVectorXd& dlog_prob) const;
};

/// Draws a single action vector of size `dim` from a (2*dim) head.
struct PolicySample {
  Vector action;  // scaled to [-action_scale, action_scale]
  double log_prob = 0.0;
};
PolicySample gaussian_policy_sample(const Vector& mean, const Vector& log_std,
                                    std::mt19937_64& rng, double action_scale = 1.0);

// ---------------------------------------------------------------------------

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam() = default;
  Adam(ParamList params, AdamConfig cfg = {});

  /// Applies one update from the current gradients. Returns false and skips
  /// the whole update if any gradient entry is non-finite.
  bool step();
  void zero_grad();

  std::int64_t steps() const { return t_; }
  std::int64_t skipped() const { return skipped_; }
  const AdamConfig& config() const { return cfg_; }
  ParamList& params() { return params_; }
  std::vector<Matrix>& first_moments() { return m_; }
  std::vector<Matrix>& second_moments() { return v_; }
  void set_steps(std::int64_t t) { t_ = t; }

 private:
  ParamList params_;
  AdamConfig cfg_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  std::int64_t t_ = 0;
  std::int64_t skipped_ = 0;
};

std::int64_t parameter_count(const ParamList& params);

template <typename Model>
  requires requires(Model& m, ParamList& p) { m.collect(p); }
std::int64_t parameter_count(Model& model) {
  ParamList p;
  model.collect(p);
  return parameter_count(p);
}

void zero_grads(const ParamList& params);

/// target <- tau * source + (1 - tau) * target, elementwise.
void soft_update(const ParamList& target, const ParamList& source, double tau);
void hard_copy(const ParamList& target, const ParamList& source);

// ---------------------------------------------------------------------------
// Checkpoint files: "SKYLNKCK", u32 version, u32 block count, then per block
// u32 name length, name bytes, u32 rows, u32 cols, rows*cols f64 in row-major
// order. All integers and floats little-endian.

inline constexpr char kCheckpointMagic[8] = {'S', 'K', 'Y', 'L', 'N', 'K', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedBlock {
  std::string name;
  Matrix value;
};

void write_checkpoint(const std::string& path, const std::vector<NamedBlock>& blocks);
std::vector<NamedBlock> read_checkpoint(const std::string& path);

// ---------------------------------------------------------------------------

/// Central finite-difference gradient of a scalar function.
Matrix numeric_gradient(const std::function<double(const Matrix&)>& f, const Matrix& x,
                        double step = 1e-5);

/// max_i |a_i - n_i| / max(|a_i|, |n_i|, floor).
double max_relative_error(const Matrix& analytic, const Matrix& numeric, double floor = 1e-6);

}  // namespace skylink::nn
