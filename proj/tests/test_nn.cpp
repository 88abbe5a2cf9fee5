#include "skylink/nn.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>

using namespace skylink::nn;

namespace {

Matrix random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = g(rng);
  return m;
}

// Scalar probe loss sum(w .* y) with fixed random weights w.
double probe(const Matrix& y, const Matrix& w) { return y.cwiseProduct(w).sum(); }

constexpr double kGradTol = 1e-4;

}  // namespace

TEST(Dense, IdentityLayer) {
  std::mt19937_64 rng(1);
  Dense d("d", 3, 3, Activation::Identity, rng);
  d.weight().value = Matrix::Identity(3, 3);
  d.bias().value.setZero();
  Matrix x(3, 2);
  x << 1, -2, 3, 4, -5, 6;
  EXPECT_EQ(d.forward(x), x);
}

TEST(Dense, ReluForwardAndBackward) {
  std::mt19937_64 rng(1);
  Dense d("d", 2, 2, Activation::Relu, rng);
  d.weight().value = Matrix::Identity(2, 2);
  d.bias().value.setZero();
  Matrix x(2, 1);
  x << -1, 2;
  Dense::Cache c;
  const Matrix y = d.forward(x, &c);
  EXPECT_EQ(y(0, 0), 0.0);
  EXPECT_EQ(y(1, 0), 2.0);
  d.weight().zero_grad();
  d.bias().zero_grad();
  const Matrix dx = d.backward(c, Matrix::Ones(2, 1));
  EXPECT_EQ(dx(0, 0), 0.0);
  EXPECT_EQ(dx(1, 0), 1.0);
}

TEST(Dense, LinearInputGradientIsTransposedWeight) {
  std::mt19937_64 rng(2);
  Dense d("d", 4, 3, Activation::Identity, rng);
  d.weight().zero_grad();
  d.bias().zero_grad();
  const Matrix x = random_matrix(4, 1, rng);
  Dense::Cache c;
  d.forward(x, &c);
  const Matrix g = random_matrix(3, 1, rng);
  EXPECT_LT((d.backward(c, g) - d.weight().value.transpose() * g).norm(), 1e-14);
}

TEST(Dense, InitializationRange) {
  std::mt19937_64 rng(3);
  Dense d("d", 16, 8, Activation::Identity, rng);
  EXPECT_LE(d.weight().value.cwiseAbs().maxCoeff(), 0.25);
  Dense small("s", 16, 8, Activation::Identity, rng, 3e-3);
  EXPECT_LE(small.weight().value.cwiseAbs().maxCoeff(), 3e-3);
}

TEST(LayerNorm, ConstantInputGivesZero) {
  LayerNorm ln("ln", 5);
  const Matrix x = Matrix::Constant(5, 2, 3.7);
  EXPECT_LT(ln.forward(x).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(LayerNorm, NormalizesColumns) {
  std::mt19937_64 rng(4);
  LayerNorm ln("ln", 21);
  const Matrix y = ln.forward(random_matrix(21, 6, rng, 3.0));
  for (Eigen::Index c = 0; c < y.cols(); ++c) {
    EXPECT_NEAR(y.col(c).mean(), 0.0, 1e-12);
    EXPECT_NEAR(y.col(c).squaredNorm() / 21.0, 1.0, 1e-5);
  }
}

TEST(Softmax, EqualScores) {
  const Vector s = Vector::Constant(5, 0.3);
  const Mask m{false, true, false, false, true};
  const Vector p = softmax_temp(s, 1.0, m);
  EXPECT_NEAR(p[0], 1.0 / 3.0, 1e-15);
  EXPECT_EQ(p[1], 0.0);
  EXPECT_EQ(p[4], 0.0);
}

TEST(Softmax, HandEvaluated) {
  Vector s(3);
  s << 2, 1, 0;
  const Vector p = softmax_temp(s, 1.0, Mask(3, false));
  // e^2, e^1, e^0 over their sum.
  const double z = std::exp(2.0) + std::exp(1.0) + 1.0;
  EXPECT_NEAR(p[0], std::exp(2.0) / z, 1e-15);
  EXPECT_NEAR(p[0], 0.6652, 1e-4);
  EXPECT_NEAR(p[1], 0.2447, 1e-4);
  EXPECT_NEAR(p[2], 0.0900, 1e-4);
}

TEST(Softmax, ArgmaxPreservedAndStable) {
  std::mt19937_64 rng(5);
  for (double beta : {0.01, 0.5, 1.0, 100.0}) {
    Vector s = random_matrix(7, 1, rng, 50.0).col(0);
    Mask m(7, false);
    m[2] = true;
    const Vector p = softmax_temp(s, beta, m);
    EXPECT_TRUE(p.allFinite());
    EXPECT_NEAR(p.sum(), 1.0, 1e-12);
    Eigen::Index best = -1;
    for (Eigen::Index i = 0; i < 7; ++i)
      if (!m[static_cast<std::size_t>(i)] && (best < 0 || s[i] > s[best])) best = i;
    Eigen::Index arg;
    p.maxCoeff(&arg);
    EXPECT_EQ(arg, best);
  }
}

TEST(Softmax, Errors) {
  EXPECT_THROW(softmax_temp(Vector::Zero(2), 1.0, Mask{true, true}), std::domain_error);
  EXPECT_THROW(softmax_temp(Vector::Zero(2), 0.0, Mask{false, false}), std::domain_error);
}

TEST(Softmax, BackwardMatchesFiniteDifferences) {
  for (int seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(100 + seed);
    const Vector s = random_matrix(6, 1, rng).col(0);
    const Vector w = random_matrix(6, 1, rng).col(0);
    Mask m(6, false);
    m[static_cast<std::size_t>(seed % 6)] = true;
    const double beta = 0.5 + 0.3 * seed;
    const Vector p = softmax_temp(s, beta, m);
    const Vector analytic = softmax_temp_backward(p, w, beta, m);
    const Matrix numeric = numeric_gradient(
        [&](const Matrix& x) { return softmax_temp(x.col(0), beta, m).dot(w); }, s);
    EXPECT_LT(max_relative_error(analytic, numeric), kGradTol);
  }
}

TEST(Mlp, GradientsMatchFiniteDifferences) {
  for (int seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(200 + seed);
    Mlp net("mlp", 5, {7, 6}, 4, Activation::Relu, rng);
    const Matrix x = random_matrix(5, 3, rng);
    const Matrix w = random_matrix(4, 3, rng);
    ParamList params;
    net.collect(params);
    zero_grads(params);
    Mlp::Cache c;
    const Matrix y = net.forward(x, &c);
    const Matrix dx = net.backward(c, w);
    (void)y;
    const Matrix ndx = numeric_gradient([&](const Matrix& v) { return probe(net.forward(v), w); }, x);
    EXPECT_LT(max_relative_error(dx, ndx), kGradTol) << "seed " << seed;
    for (auto* p : params) {
      const Matrix analytic = p->grad;
      const Matrix saved = p->value;
      const Matrix numeric = numeric_gradient(
          [&](const Matrix& v) {
            p->value = v;
            return probe(net.forward(x), w);
          },
          saved);
      p->value = saved;
      EXPECT_LT(max_relative_error(analytic, numeric), kGradTol) << p->name << " seed " << seed;
    }
  }
}

TEST(LayerNorm, GradientsMatchFiniteDifferences) {
  for (int seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(300 + seed);
    LayerNorm ln("ln", 6);
    ln.gain().value = random_matrix(6, 1, rng);
    ln.shift().value = random_matrix(6, 1, rng);
    ParamList params;
    ln.collect(params);
    zero_grads(params);
    const Matrix x = random_matrix(6, 3, rng, 2.0);
    const Matrix w = random_matrix(6, 3, rng);
    LayerNorm::Cache c;
    ln.forward(x, &c);
    const Matrix dx = ln.backward(c, w);
    const Matrix ndx = numeric_gradient([&](const Matrix& v) { return probe(ln.forward(v), w); }, x);
    EXPECT_LT(max_relative_error(dx, ndx), kGradTol);
    for (auto* p : params) {
      const Matrix saved = p->value;
      const Matrix numeric = numeric_gradient(
          [&](const Matrix& v) {
            p->value = v;
            return probe(ln.forward(x), w);
          },
          saved);
      p->value = saved;
      EXPECT_LT(max_relative_error(p->grad, numeric), kGradTol);
    }
  }
}

TEST(SquashedGaussian, LogOneMinusTanhSqMatchesDirectFormula) {
  for (double z : {-5.0, -1.0, -0.1, 0.0, 0.3, 2.0, 4.0}) {
    const double t = std::tanh(z);
    EXPECT_NEAR(log_one_minus_tanh_sq(z), std::log(1.0 - t * t), 1e-12);
  }
  EXPECT_TRUE(std::isfinite(log_one_minus_tanh_sq(400.0)));
}

TEST(SquashedGaussian, BackwardMatchesFiniteDifferences) {
  for (int seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(400 + seed);
    Matrix head = random_matrix(4, 3, rng, 0.7);
    const Matrix noise = random_matrix(2, 3, rng);
    const Matrix wa = random_matrix(2, 3, rng);
    const Eigen::RowVectorXd wl = random_matrix(1, 3, rng).row(0);
    auto loss = [&](const Matrix& h) {
      const auto s = SquashedGaussian::sample(h, noise);
      return s.action.cwiseProduct(wa).sum() + s.log_prob.dot(wl);
    };
    const auto s = SquashedGaussian::sample(head, noise);
    const Matrix analytic = s.backward(wa, wl);
    EXPECT_LT(max_relative_error(analytic, numeric_gradient(loss, head)), kGradTol);
  }
}

TEST(SquashedGaussian, ClampedLogStdHasNoGradient) {
  Matrix head(2, 1);
  head << 0.1, 5.0;
  const Matrix noise = Matrix::Constant(1, 1, 0.4);
  const auto s = SquashedGaussian::sample(head, noise);
  EXPECT_EQ(s.log_std(0, 0), kLogStdMax);
  const Matrix d = s.backward(Matrix::Ones(1, 1), Eigen::RowVectorXd::Ones(1));
  EXPECT_EQ(d(1, 0), 0.0);
}

TEST(PolicySample, NearDeterministicLimit) {
  std::mt19937_64 rng(6);
  Vector mean(2);
  mean << 0.3, -1.2;
  const Vector log_std = Vector::Constant(2, -20.0);
  for (int i = 0; i < 10; ++i) {
    const auto s = gaussian_policy_sample(mean, log_std, rng, 5.0);
    EXPECT_NEAR(s.action[0], std::tanh(0.3) * 5.0, 1e-7);
    EXPECT_NEAR(s.action[1], std::tanh(-1.2) * 5.0, 1e-7);
    EXPECT_TRUE(std::isfinite(s.log_prob));
  }
}

TEST(PolicySample, EntropyMatchesClosedFormPlusSquashCorrection) {
  Vector mean(2), log_std(2);
  mean << 0.4, -0.8;
  log_std << -0.5, 0.3;
  std::mt19937_64 rng(7);
  const int n = 100000;
  double mc = 0.0;
  for (int i = 0; i < n; ++i) mc -= gaussian_policy_sample(mean, log_std, rng).log_prob;
  mc /= n;

  // Gaussian entropy plus E[log(1 - tanh^2 z)] = E[-2 log cosh z] by
  // trapezoidal quadrature.
  double expected = 0.0;
  for (int k = 0; k < 2; ++k) {
    const double sigma = std::exp(log_std[k]);
    expected += 0.5 * std::log(2.0 * std::numbers::pi * std::numbers::e * sigma * sigma);
    const int steps = 20000;
    const double lo = mean[k] - 12.0 * sigma, hi = mean[k] + 12.0 * sigma;
    const double h = (hi - lo) / steps;
    double acc = 0.0;
    for (int j = 0; j <= steps; ++j) {
      const double z = lo + j * h;
      const double pdf = std::exp(-0.5 * std::pow((z - mean[k]) / sigma, 2)) /
                         (sigma * std::sqrt(2.0 * std::numbers::pi));
      const double f = -2.0 * std::log(std::cosh(z)) * pdf;
      acc += (j == 0 || j == steps) ? 0.5 * f : f;
    }
    expected += acc * h;
  }
  EXPECT_LT(std::abs(mc - expected) / std::abs(expected), 0.01) << mc << " vs " << expected;
}

TEST(Adam, ZeroGradientLeavesParams) {
  Param p{"p", Matrix::Constant(2, 2, 1.5), Matrix::Zero(2, 2)};
  Adam opt({&p});
  for (int i = 0; i < 5; ++i) EXPECT_TRUE(opt.step());
  EXPECT_EQ(p.value, Matrix::Constant(2, 2, 1.5));
}

TEST(Adam, ConstantGradientStepApproachesLrSign) {
  Param p{"p", Matrix::Zero(1, 2), Matrix::Zero(1, 2)};
  p.grad << 0.7, -3.0;
  AdamConfig cfg;
  cfg.lr = 1e-3;
  Adam opt({&p}, cfg);
  Matrix before = p.value;
  for (int i = 0; i < 2000; ++i) {
    before = p.value;
    opt.step();
  }
  const Matrix delta = p.value - before;
  // m/c1 = g, v/c2 = g^2 exactly for constant g: step = lr g / (|g| + eps).
  EXPECT_NEAR(delta(0, 0), -1e-3 * 0.7 / (0.7 + 1e-8), 1e-12);
  EXPECT_NEAR(delta(0, 1), 1e-3 * 3.0 / (3.0 + 1e-8), 1e-12);
}

TEST(Adam, NonFiniteGradientSkipsWholeUpdate) {
  Param a{"a", Matrix::Zero(1, 1), Matrix::Constant(1, 1, 1.0)};
  Param b{"b", Matrix::Zero(1, 1), Matrix::Constant(1, 1, std::nan(""))};
  Adam opt({&a, &b});
  EXPECT_FALSE(opt.step());
  EXPECT_EQ(a.value(0, 0), 0.0);
  EXPECT_EQ(opt.skipped(), 1);
  EXPECT_EQ(opt.steps(), 0);
}

TEST(ParamUtils, SoftUpdateIsExact) {
  Param t{"t", Matrix::Constant(2, 3, 1.0), Matrix::Zero(2, 3)};
  Param s{"s", Matrix::Constant(2, 3, 3.0), Matrix::Zero(2, 3)};
  soft_update({&t}, {&s}, 0.25);
  EXPECT_EQ(t.value, Matrix::Constant(2, 3, 0.25 * 3.0 + 0.75 * 1.0));
  hard_copy({&t}, {&s});
  EXPECT_EQ(t.value, s.value);
}

TEST(ParamUtils, ParameterCount) {
  std::mt19937_64 rng(8);
  Mlp net("m", 4, {63, 63}, 63, Activation::Relu, rng);
  EXPECT_EQ(parameter_count(net), (4 * 63 + 63) + 2 * (63 * 63 + 63));
}

TEST(Checkpoint, RoundTripAndLayout) {
  const auto path = (std::filesystem::temp_directory_path() / "skylink_ckpt_test.bin").string();
  Matrix a(2, 3);
  a << 1, 2, 3, 4, 5, 6;
  write_checkpoint(path, {{"alpha", a}, {"b", Matrix::Constant(1, 1, -0.5)}});
  const auto blocks = read_checkpoint(path);
  ASSERT_EQ(blocks.size(), 2u);
  EXPECT_EQ(blocks[0].name, "alpha");
  EXPECT_EQ(blocks[0].value, a);
  EXPECT_EQ(blocks[1].value(0, 0), -0.5);

  std::ifstream in(path, std::ios::binary);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), {});
  ASSERT_GE(bytes.size(), 8u + 4 + 4 + 4 + 5 + 4 + 4 + 6 * 8);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 8), "SKYLNKCK");
  EXPECT_EQ(bytes[8], 1);   // version, little-endian
  EXPECT_EQ(bytes[12], 2);  // block count
  EXPECT_EQ(bytes[16], 5);  // name length
  EXPECT_EQ(std::string(bytes.begin() + 20, bytes.begin() + 25), "alpha");
  double second;
  std::memcpy(&second, bytes.data() + 25 + 8 + 8, sizeof second);
  EXPECT_EQ(second, 2.0);  // row-major: a(0, 1)
  std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsBadMagic) {
  const auto path = (std::filesystem::temp_directory_path() / "skylink_bad_ckpt.bin").string();
  {
    std::ofstream out(path, std::ios::binary);
    out << "NOTACKPT";
  }
  EXPECT_THROW(read_checkpoint(path), std::runtime_error);
  std::filesystem::remove(path);
}

TEST(GradCheck, ToolsOnKnownFunction) {
  Matrix x(2, 1);
  x << 0.3, -1.1;
  const Matrix g = numeric_gradient([](const Matrix& v) { return v(0) * v(0) * v(1); }, x);
  EXPECT_NEAR(g(0), 2 * 0.3 * -1.1, 1e-9);
  EXPECT_NEAR(g(1), 0.09, 1e-9);
  EXPECT_EQ(max_relative_error(g, g), 0.0);
}
