#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "latent_motor/nn.hpp"

using namespace latent_motor;

namespace {

MlpParams single_layer(MatrixXd w, VectorXd b) {
  MlpParams p;
  p.layers.push_back({std::move(w), std::move(b)});
  return p;
}

// Straight-line evaluation with std::tanh, independent of mlp_forward_batch.
VectorXd reference_forward(const MlpParams& p, const VectorXd& x) {
  std::vector<double> a(x.data(), x.data() + x.size());
  for (std::size_t k = 0; k < p.layers.size(); ++k) {
    const auto& l = p.layers[k];
    std::vector<double> z(static_cast<std::size_t>(l.weight.rows()));
    for (Index r = 0; r < l.weight.rows(); ++r) {
      double s = l.bias[r];
      for (Index c = 0; c < l.weight.cols(); ++c) s += l.weight(r, c) * a[static_cast<std::size_t>(c)];
      z[static_cast<std::size_t>(r)] = k + 1 < p.layers.size() ? std::tanh(s) : s;
    }
    a = z;
  }
  return Eigen::Map<VectorXd>(a.data(), static_cast<Index>(a.size()));
}

}  // namespace

TEST(MlpForward, IdentityLayer) {
  const auto p = single_layer(MatrixXd::Identity(2, 2), VectorXd::Zero(2));
  VectorXd x(2);
  x << 3, -2;
  EXPECT_EQ(mlp_forward(p, x).output, x);
}

TEST(MlpForward, ZeroHiddenWeights) {
  MlpParams p;
  p.layers.push_back({MatrixXd::Zero(1, 1), VectorXd::Zero(1)});
  p.layers.push_back({MatrixXd::Constant(1, 1, 2.0), VectorXd::Constant(1, 1.0)});
  EXPECT_DOUBLE_EQ(mlp_forward(p, VectorXd::Constant(1, 5.0)).output[0], 1.0);
}

TEST(MlpForward, MatchesStraightLineEvaluation) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = make_mlp({4, 7, 3}, rng);
    VectorXd x(4);
    for (Index i = 0; i < 4; ++i) x[i] = rng.uniform(-3, 3);
    const VectorXd got = mlp_forward(p, x).output;
    const VectorXd want = reference_forward(p, x);
    for (Index i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
  }
}

TEST(MlpForward, BatchColumnsAreIndependent) {
  Rng rng(3);
  const auto p = make_mlp({3, 5, 5, 2}, rng);
  MatrixXd x(3, 4);
  for (Index i = 0; i < x.size(); ++i) x.data()[i] = rng.uniform(-1, 1);
  const MatrixXd y = mlp_forward_batch(p, x);
  for (Index j = 0; j < 4; ++j) EXPECT_LT((y.col(j) - mlp_forward(p, x.col(j)).output).norm(), 1e-14);
}

TEST(MlpForward, RejectsWrongInputWidth) {
  Rng rng(1);
  const auto p = make_mlp({3, 2}, rng);
  EXPECT_THROW(mlp_forward(p, VectorXd::Zero(2)), ConfigError);
}

TEST(MlpInit, UniformWithinFanInBound) {
  Rng rng(5);
  const auto p = make_mlp({16, 64, 4}, rng);
  EXPECT_LE(p.layers[0].weight.cwiseAbs().maxCoeff(), 1.0 / 4.0);
  EXPECT_LE(p.layers[1].weight.cwiseAbs().maxCoeff(), 1.0 / 8.0);
  EXPECT_NO_THROW(p.validate());
}

TEST(TanhActivation, MatchesStdTanh) {
  MatrixXd z(1, 7);
  z << -50, -20, -3.3, 0, 1e-9, 0.7, 40;
  const MatrixXd t = tanh_activation(z);
  for (Index i = 0; i < z.cols(); ++i) EXPECT_NEAR(t(0, i), std::tanh(z(0, i)), 2e-16);
}

TEST(MlpBackward, ZeroOutputGradient) {
  Rng rng(2);
  const auto p = make_mlp({3, 4, 2}, rng);
  const auto f = mlp_forward(p, VectorXd::Ones(3));
  const auto g = mlp_backward(p, f.cache, VectorXd::Zero(2));
  for (auto b : std::as_const(g.params).blocks())
    for (double v : b) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(g.input, VectorXd::Zero(3));
}

TEST(MlpBackward, LinearLayerAnalytic) {
  const auto p = single_layer(MatrixXd::Constant(1, 1, 0.7), VectorXd::Constant(1, -0.2));
  const auto f = mlp_forward(p, VectorXd::Constant(1, 3.0));
  const auto g = mlp_backward(p, f.cache, VectorXd::Constant(1, 1.0));
  EXPECT_DOUBLE_EQ(g.params.layers[0].weight(0, 0), 3.0);
  EXPECT_DOUBLE_EQ(g.params.layers[0].bias[0], 1.0);
  EXPECT_DOUBLE_EQ(g.input[0], 0.7);
}

TEST(MlpBackward, ThreeLayerFiniteDifferences) {
  Rng rng(21);
  auto p = make_mlp({3, 6, 5, 2}, rng);
  VectorXd x(3);
  x << 0.4, -1.1, 0.9;
  auto loss = [&](const MlpParams& q) { return 0.5 * mlp_forward(q, x).output.squaredNorm(); };
  const auto f = mlp_forward(p, x);
  const auto g = mlp_backward(p, f.cache, f.output);
  const double h = 1e-5;
  auto blocks = p.blocks();
  const auto gb = std::as_const(g.params).blocks();
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    for (std::size_t i = 0; i < blocks[b].size(); ++i) {
      const double saved = blocks[b][i];
      blocks[b][i] = saved + h;
      const double up = loss(p);
      blocks[b][i] = saved - h;
      const double down = loss(p);
      blocks[b][i] = saved;
      const double fd = (up - down) / (2 * h);
      EXPECT_LT(std::abs(fd - gb[b][i]) / std::max({std::abs(fd), std::abs(gb[b][i]), 1e-3}), 1e-4);
    }
  }
}

TEST(MlpBackward, StaleCacheIsRejected) {
  Rng rng(4);
  const auto p = make_mlp({2, 3, 1}, rng);
  const auto q = make_mlp({2, 4, 1}, rng);
  const auto f = mlp_forward(q, VectorXd::Ones(2));
  EXPECT_THROW(mlp_backward(p, f.cache, VectorXd::Ones(1)), InternalError);
}

TEST(GradientCheck, HundredRandomConfigurations) {
  const auto r = gradient_check(100, 7);
  EXPECT_EQ(r.configurations, 100);
  EXPECT_TRUE(r.passed) << r.max_relative_error;
}

TEST(Adam, ZeroGradientLeavesParameters) {
  ScalarParam p{2.5}, g{0.0};
  auto s = AdamState::for_params(p, {1e-3});
  adam_step(p, g, s);
  EXPECT_EQ(p.value, 2.5);
  EXPECT_EQ(s.step, 1);
}

// Expected values from a hand evaluation of the bias-corrected update.
TEST(Adam, HandComputedTrace) {
  ScalarParam p{0.0}, g{4.0};
  auto s = AdamState::for_params(p, {1e-3, 0.9, 0.999, 1e-8});
  adam_step(p, g, s);
  EXPECT_NEAR(p.value, -0.0009999999975, 1e-15);
  adam_step(p, g, s);
  EXPECT_NEAR(p.value, -0.0019999999949999927, 1e-15);

  ScalarParam q{1.5};
  auto t = AdamState::for_params(q, {1e-3});
  ScalarParam g1{0.3}, g2{-1.2};
  adam_step(q, g1, t);
  EXPECT_NEAR(q.value, 1.4990000000333332, 1e-12);
  adam_step(q, g2, t);
  EXPECT_NEAR(q.value, 1.4995595035209757, 1e-12);
}

TEST(Adam, NonFiniteGradientModifiesNothing) {
  Rng rng(8);
  auto p = make_mlp({2, 2}, rng);
  auto g = p.zeros_like();
  g.layers[0].bias[1] = std::nan("");
  auto s = AdamState::for_params(p);
  const auto before = p;
  const auto state_before = s;
  EXPECT_THROW(adam_step(p, g, s), NonFiniteError);
  EXPECT_EQ(p, before);
  EXPECT_EQ(s, state_before);
}

TEST(PolicyHead, DeterministicZeroMean) {
  VectorXd raw(2);
  raw << 0.0, -30.0;
  const auto out = GaussianPolicyOutput::from_raw(raw);
  EXPECT_EQ(out.log_std[0], kLogStdMin);
  Rng rng(1);
  EXPECT_EQ(policy_sample(out, rng, true).action[0], 0.0);
}

TEST(PolicyHead, LogStdClamped) {
  VectorXd raw(4);
  raw << 0, 0, -25, 9;
  const auto out = GaussianPolicyOutput::from_raw(raw);
  EXPECT_EQ(out.log_std[0], kLogStdMin);
  EXPECT_EQ(out.log_std[1], kLogStdMax);
}

TEST(PolicyHead, StableLogOneMinusTanhSquared) {
  for (double u : {-3.0, -0.4, 0.0, 0.8, 5.0})
    EXPECT_NEAR(log_one_minus_tanh_sq(u), std::log(1 - std::tanh(u) * std::tanh(u)), 1e-12);
  EXPECT_TRUE(std::isfinite(log_one_minus_tanh_sq(400.0)));
  EXPECT_NEAR(log_one_minus_tanh_sq(400.0), 2 * std::log(2.0) - 800.0, 1e-9);
}

// Quadrature of exp(log_prob) over a 10^4-point grid in action space.
TEST(PolicyHead, DensityIntegratesToOne) {
  for (auto [mu, ls] : {std::pair{0.0, 0.0}, std::pair{0.6, -1.0}, std::pair{-0.4, -0.3}}) {
    VectorXd raw(2);
    raw << mu, ls;
    const auto out = GaussianPolicyOutput::from_raw(raw);
    const int n = 10000;
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
      const double a = -1.0 + (i + 0.5) * 2.0 / n;
      const double eps = (std::atanh(a) - mu) / std::exp(ls);
      const auto s = policy_sample_with_noise(out, VectorXd::Constant(1, eps));
      total += std::exp(s.log_prob) * 2.0 / n;
    }
    EXPECT_NEAR(total, 1.0, 1e-3) << mu << " " << ls;
  }
}

// Wide policies put mass in the outermost action cells, so integrate on a grid in
// pre-tanh space instead: da = (1 - tanh^2 u) du.
TEST(PolicyHead, WideDensityIntegratesToOne) {
  const double mu = -1.2, ls = 0.5;
  VectorXd raw(2);
  raw << mu, ls;
  const auto out = GaussianPolicyOutput::from_raw(raw);
  const int n = 10000;
  const double lo = -20.0, hi = 20.0, h = (hi - lo) / n;
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    const double u = lo + (i + 0.5) * h;
    const auto s = policy_sample_with_noise(out, VectorXd::Constant(1, (u - mu) / std::exp(ls)));
    total += std::exp(s.log_prob) * (1 - std::tanh(u) * std::tanh(u)) * h;
  }
  EXPECT_NEAR(total, 1.0, 1e-3);
}

// Pearson chi-square of 10^5 draws against the analytic bin masses.
TEST(PolicyHead, SamplesFollowSquashedGaussian) {
  const double mu = 0.3, ls = -0.5, sd = std::exp(ls);
  VectorXd raw(2);
  raw << mu, ls;
  const auto out = GaussianPolicyOutput::from_raw(raw);
  Rng rng(99);
  const int bins = 20, n = 100000;
  std::vector<int> counts(bins, 0);
  for (int i = 0; i < n; ++i) {
    const double a = policy_sample(out, rng).action[0];
    ++counts[std::min(bins - 1, static_cast<int>((a + 1.0) / 2.0 * bins))];
  }
  auto cdf = [&](double a) {
    if (a <= -1) return 0.0;
    if (a >= 1) return 1.0;
    return 0.5 * std::erfc(-(std::atanh(a) - mu) / (sd * std::sqrt(2.0)));
  };
  double chi2 = 0.0;
  for (int b = 0; b < bins; ++b) {
    const double expect = n * (cdf(-1.0 + 2.0 * (b + 1) / bins) - cdf(-1.0 + 2.0 * b / bins));
    if (expect < 5) continue;
    chi2 += (counts[b] - expect) * (counts[b] - expect) / expect;
  }
  EXPECT_LT(chi2, 43.8);  // chi-square(19) at p = 0.001
}

TEST(PolicyHead, SeededSamplingIsReproducible) {
  VectorXd raw(4);
  raw << 0.1, -0.2, -1.0, 0.3;
  const auto out = GaussianPolicyOutput::from_raw(raw);
  Rng a(42), b(42);
  const auto s1 = policy_sample(out, a), s2 = policy_sample(out, b);
  EXPECT_EQ(s1.action, s2.action);
  EXPECT_EQ(s1.log_prob, s2.log_prob);
}

TEST(PolicyHead, ActionsStayInsideOpenInterval) {
  VectorXd raw(2);
  raw << 40.0, -20.0;
  Rng rng(0);
  const auto s = policy_sample(GaussianPolicyOutput::from_raw(raw), rng);
  EXPECT_LT(s.action[0], 1.0);
  EXPECT_TRUE(std::isfinite(s.log_prob));
}
