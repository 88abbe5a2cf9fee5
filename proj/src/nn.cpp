#include "skylink/nn.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace skylink::nn {

namespace {

Param make_param(std::string name, int rows, int cols) {
  Param p;
  p.name = std::move(name);
  p.value = Matrix::Zero(rows, cols);
  p.grad = Matrix::Zero(rows, cols);
  return p;
}

void fill_uniform(Matrix& m, double limit, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-limit, limit);
  // Row-major fill order keeps initialization independent of Eigen's layout.
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = u(rng);
}

}  // namespace

// ---------------------------------------------------------------------------

Dense::Dense(const std::string& name, int in, int out, Activation act, std::mt19937_64& rng,
             double init)
    : weight_(make_param(name + ".weight", out, in)),
      bias_(make_param(name + ".bias", out, 1)),
      act_(act) {
  const double limit = init > 0.0 ? init : 1.0 / std::sqrt(static_cast<double>(in));
  fill_uniform(weight_.value, limit, rng);
  fill_uniform(bias_.value, limit, rng);
}

Matrix Dense::forward(const Matrix& x, Cache* cache) const {
  if (x.rows() != weight_.value.cols()) {
    throw std::invalid_argument(weight_.name + ": input has " + std::to_string(x.rows()) +
                                " rows, expected " + std::to_string(weight_.value.cols()));
  }
  Matrix pre = weight_.value * x;
  pre.colwise() += bias_.value.col(0);
  if (cache) cache->input = x;
  if (act_ == Activation::Identity) return pre;
  Matrix out = pre.cwiseMax(0.0);
  if (cache) cache->pre = std::move(pre);
  return out;
}

Matrix Dense::backward(const Cache& cache, const Matrix& dy) {
  Matrix dpre = dy;
  if (act_ == Activation::Relu) {
    dpre = (cache.pre.array() > 0.0).select(dy, 0.0);
  }
  weight_.grad.noalias() += dpre * cache.input.transpose();
  bias_.grad.col(0) += dpre.rowwise().sum();
  return weight_.value.transpose() * dpre;
}

void Dense::collect(ParamList& out) {
  out.push_back(&weight_);
  out.push_back(&bias_);
}

// ---------------------------------------------------------------------------

LayerNorm::LayerNorm(const std::string& name, int dim, double epsilon)
    : gain_(make_param(name + ".gain", dim, 1)),
      shift_(make_param(name + ".shift", dim, 1)),
      epsilon_(epsilon) {
  if (!(epsilon > 0.0)) throw std::invalid_argument(name + ": epsilon must be positive");
  gain_.value.setOnes();
}

Matrix LayerNorm::forward(const Matrix& x, Cache* cache) const {
  const double d = static_cast<double>(x.rows());
  const Eigen::RowVectorXd mean = x.colwise().sum() / d;
  Matrix centered = x.rowwise() - mean;
  const Eigen::RowVectorXd var = centered.array().square().colwise().sum() / d;
  const Eigen::RowVectorXd inv_std = (var.array() + epsilon_).rsqrt();
  Matrix normalized = centered.array().rowwise() * inv_std.array();
  Matrix out = (normalized.array().colwise() * gain_.value.col(0).array()).colwise() +
               shift_.value.col(0).array();
  if (cache) {
    cache->normalized = std::move(normalized);
    cache->inv_std = inv_std;
  }
  return out;
}

Matrix LayerNorm::backward(const Cache& cache, const Matrix& dy) {
  const Matrix& xhat = cache.normalized;
  gain_.grad.col(0) += (dy.cwiseProduct(xhat)).rowwise().sum();
  shift_.grad.col(0) += dy.rowwise().sum();
  const double d = static_cast<double>(dy.rows());
  const Matrix dxhat = dy.array().colwise() * gain_.value.col(0).array();
  const Eigen::RowVectorXd sum_dxhat = dxhat.colwise().sum();
  const Eigen::RowVectorXd sum_dxhat_xhat = dxhat.cwiseProduct(xhat).colwise().sum();
  Matrix dx = (d * dxhat).rowwise() - sum_dxhat;
  dx.array() -= xhat.array().rowwise() * sum_dxhat_xhat.array();
  dx.array().rowwise() *= cache.inv_std.array() / d;
  return dx;
}

void LayerNorm::collect(ParamList& out) {
  out.push_back(&gain_);
  out.push_back(&shift_);
}

// ---------------------------------------------------------------------------

Mlp::Mlp(const std::string& name, int in, const std::vector<int>& hidden, int out,
         Activation output_act, std::mt19937_64& rng, double output_init) {
  int prev = in;
  for (std::size_t i = 0; i < hidden.size(); ++i) {
    layers_.emplace_back(name + ".l" + std::to_string(i), prev, hidden[i], Activation::Relu, rng);
    prev = hidden[i];
  }
  layers_.emplace_back(name + ".l" + std::to_string(hidden.size()), prev, out, output_act, rng,
                       output_init);
}

Matrix Mlp::forward(const Matrix& x, Cache* cache) const {
  if (cache) cache->layers.resize(layers_.size());
  Matrix h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    h = layers_[i].forward(h, cache ? &cache->layers[i] : nullptr);
  }
  return h;
}

Matrix Mlp::backward(const Cache& cache, const Matrix& dy) {
  Matrix g = dy;
  for (std::size_t i = layers_.size(); i-- > 0;) g = layers_[i].backward(cache.layers[i], g);
  return g;
}

void Mlp::collect(ParamList& out) {
  for (auto& l : layers_) l.collect(out);
}

// ---------------------------------------------------------------------------

Vector softmax_temp(const Vector& scores, double beta, const Mask& mask) {
  if (!(beta > 0.0)) throw std::domain_error("softmax_temp: beta must be positive");
  if (mask.size() != static_cast<std::size_t>(scores.size())) {
    throw std::invalid_argument("softmax_temp: mask size mismatch");
  }
  double top = -std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < scores.size(); ++i)
    if (!mask[static_cast<std::size_t>(i)]) top = std::max(top, scores[i] / beta);
  if (top == -std::numeric_limits<double>::infinity()) {
    throw std::domain_error("softmax_temp: every entry is masked");
  }
  Vector out = Vector::Zero(scores.size());
  double total = 0.0;
  for (Eigen::Index i = 0; i < scores.size(); ++i) {
    if (mask[static_cast<std::size_t>(i)]) continue;
    out[i] = std::exp(scores[i] / beta - top);
    total += out[i];
  }
  return out / total;
}

Vector softmax_temp_backward(const Vector& probs, const Vector& dprobs, double beta,
                             const Mask& mask) {
  const double inner = probs.dot(dprobs);
  Vector d = Vector::Zero(probs.size());
  for (Eigen::Index i = 0; i < probs.size(); ++i) {
    if (mask[static_cast<std::size_t>(i)]) continue;
    d[i] = probs[i] * (dprobs[i] - inner) / beta;
  }
  return d;
}

// ---------------------------------------------------------------------------

double log_one_minus_tanh_sq(double z) {
  // 1 - tanh^2 z = 4 / (e^z + e^-z)^2  =>  2 (log 2 - |z| - log1p(e^{-2|z|}))
  const double a = std::abs(z);
  return 2.0 * (std::numbers::ln2 - a - std::log1p(std::exp(-2.0 * a)));
}

SquashedGaussian SquashedGaussian::sample(const Matrix& head, const Matrix& noise) {
  if (head.rows() % 2 != 0) throw std::invalid_argument("policy head must have 2*dim rows");
  const Eigen::Index dim = head.rows() / 2;
  const Eigen::Index batch = head.cols();
  SquashedGaussian s;
  s.mean = head.topRows(dim);
  const Matrix raw = head.bottomRows(dim);
  s.log_std = raw.cwiseMax(kLogStdMin).cwiseMin(kLogStdMax);
  s.clamp_active = ((raw.array() >= kLogStdMin) && (raw.array() <= kLogStdMax)).cast<double>();
  s.noise = noise.size() == 0 ? Matrix::Zero(dim, batch) : noise;
  if (s.noise.rows() != dim || s.noise.cols() != batch) {
    throw std::invalid_argument("policy noise shape mismatch");
  }
  const Matrix std_dev = s.log_std.array().exp();
  s.pre_tanh = s.mean + std_dev.cwiseProduct(s.noise);
  s.action = s.pre_tanh.array().tanh();
  const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  s.log_prob.resize(batch);
  for (Eigen::Index b = 0; b < batch; ++b) {
    double lp = 0.0;
    for (Eigen::Index i = 0; i < dim; ++i) {
      const double e = s.noise(i, b);
      lp += -0.5 * e * e - s.log_std(i, b) - half_log_2pi -
            log_one_minus_tanh_sq(s.pre_tanh(i, b));
    }
    s.log_prob[b] = lp;
  }
  return s;
}

Matrix SquashedGaussian::backward(const Matrix& daction,
                                  const Eigen::RowVectorXd& dlog_prob) const {
  const Eigen::Index dim = mean.rows();
  const Eigen::Index batch = mean.cols();
  Matrix dhead(2 * dim, batch);
  for (Eigen::Index b = 0; b < batch; ++b) {
    for (Eigen::Index i = 0; i < dim; ++i) {
      const double u = action(i, b);
      const double dz = daction(i, b) * (1.0 - u * u) + dlog_prob[b] * 2.0 * u;
      const double sigma = std::exp(log_std(i, b));
      dhead(i, b) = dz;
      dhead(dim + i, b) = (dz * sigma * noise(i, b) - dlog_prob[b]) * clamp_active(i, b);
    }
  }
  return dhead;
}

PolicySample gaussian_policy_sample(const Vector& mean, const Vector& log_std,
                                    std::mt19937_64& rng, double action_scale) {
  Matrix head(2 * mean.size(), 1);
  head.col(0) << mean, log_std;
  std::normal_distribution<double> g;
  Matrix noise(mean.size(), 1);
  for (Eigen::Index i = 0; i < mean.size(); ++i) noise(i, 0) = g(rng);
  const auto s = SquashedGaussian::sample(head, noise);
  return {s.action.col(0) * action_scale, s.log_prob[0]};
}

// ---------------------------------------------------------------------------

Adam::Adam(ParamList params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (auto* p : params_) {
    m_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    v_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
  }
}

bool Adam::step() {
  for (auto* p : params_) {
    if (!p->grad.allFinite()) {
      ++skipped_;
      return false;
    }
  }
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& g = params_[i]->grad;
    m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
    v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
    params_[i]->value.array() -=
        cfg_.lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + cfg_.eps);
  }
  return true;
}

void Adam::zero_grad() { zero_grads(params_); }

std::int64_t parameter_count(const ParamList& params) {
  std::int64_t n = 0;
  for (const auto* p : params) n += p->size();
  return n;
}

void zero_grads(const ParamList& params) {
  for (auto* p : params) p->grad.setZero(p->value.rows(), p->value.cols());
}

void soft_update(const ParamList& target, const ParamList& source, double tau) {
  if (target.size() != source.size()) throw std::invalid_argument("soft_update: size mismatch");
  for (std::size_t i = 0; i < target.size(); ++i) {
    target[i]->value = tau * source[i]->value + (1.0 - tau) * target[i]->value;
  }
}

void hard_copy(const ParamList& target, const ParamList& source) {
  if (target.size() != source.size()) throw std::invalid_argument("hard_copy: size mismatch");
  for (std::size_t i = 0; i < target.size(); ++i) target[i]->value = source[i]->value;
}

// ---------------------------------------------------------------------------

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
  std::array<char, 4> b{};
  for (int i = 0; i < 4; ++i) b[static_cast<std::size_t>(i)] = static_cast<char>((v >> (8 * i)) & 0xFFu);
  os.write(b.data(), 4);
}

void put_f64(std::ostream& os, double d) {
  const auto bits = std::bit_cast<std::uint64_t>(d);
  std::array<char, 8> b{};
  for (int i = 0; i < 8; ++i) b[static_cast<std::size_t>(i)] = static_cast<char>((bits >> (8 * i)) & 0xFFu);
  os.write(b.data(), 8);
}

std::uint32_t get_u32(std::istream& is) {
  std::array<unsigned char, 4> b{};
  if (!is.read(reinterpret_cast<char*>(b.data()), 4)) throw std::runtime_error("checkpoint truncated");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t{b[static_cast<std::size_t>(i)]} << (8 * i);
  return v;
}

double get_f64(std::istream& is) {
  std::array<unsigned char, 8> b{};
  if (!is.read(reinterpret_cast<char*>(b.data()), 8)) throw std::runtime_error("checkpoint truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t{b[static_cast<std::size_t>(i)]} << (8 * i);
  return std::bit_cast<double>(v);
}

}  // namespace

void write_checkpoint(const std::string& path, const std::vector<NamedBlock>& blocks) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  put_u32(os, kCheckpointVersion);
  put_u32(os, static_cast<std::uint32_t>(blocks.size()));
  for (const auto& b : blocks) {
    put_u32(os, static_cast<std::uint32_t>(b.name.size()));
    os.write(b.name.data(), static_cast<std::streamsize>(b.name.size()));
    put_u32(os, static_cast<std::uint32_t>(b.value.rows()));
    put_u32(os, static_cast<std::uint32_t>(b.value.cols()));
    for (Eigen::Index r = 0; r < b.value.rows(); ++r)
      for (Eigen::Index c = 0; c < b.value.cols(); ++c) put_f64(os, b.value(r, c));
  }
  if (!os) throw std::runtime_error("failed writing checkpoint: " + path);
}

std::vector<NamedBlock> read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
    throw std::runtime_error("not a checkpoint file: " + path);
  }
  if (const auto v = get_u32(is); v != kCheckpointVersion) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(v));
  }
  const auto count = get_u32(is);
  std::vector<NamedBlock> blocks;
  blocks.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedBlock b;
    b.name.resize(get_u32(is));
    if (!is.read(b.name.data(), static_cast<std::streamsize>(b.name.size()))) {
      throw std::runtime_error("checkpoint truncated");
    }
    const auto rows = get_u32(is);
    const auto cols = get_u32(is);
    b.value.resize(rows, cols);
    for (std::uint32_t r = 0; r < rows; ++r)
      for (std::uint32_t c = 0; c < cols; ++c) b.value(r, c) = get_f64(is);
    blocks.push_back(std::move(b));
  }
  return blocks;
}

// ---------------------------------------------------------------------------

Matrix numeric_gradient(const std::function<double(const Matrix&)>& f, const Matrix& x,
                        double step) {
  Matrix g(x.rows(), x.cols());
  Matrix probe = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double orig = probe(i);
    probe(i) = orig + step;
    const double up = f(probe);
    probe(i) = orig - step;
    const double down = f(probe);
    probe(i) = orig;
    g(i) = (up - down) / (2.0 * step);
  }
  return g;
}

double max_relative_error(const Matrix& analytic, const Matrix& numeric, double floor) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < analytic.size(); ++i) {
    const double a = analytic(i);
    const double n = numeric(i);
    const double denom = std::max({std::abs(a), std::abs(n), floor});
    worst = std::max(worst, std::abs(a - n) / denom);
  }
  return worst;
}

}  // namespace skylink::nn
