#pragma once

// Dense MLP engine: batched forward/backward, Adam, and the tanh-squashed
// Gaussian policy head. Samples are stored column-wise (features x batch).

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "latent_motor/error.hpp"
#include "latent_motor/rng.hpp"

namespace latent_motor {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

/// A set of learnable parameters exposed as flat contiguous blocks.
template <class P>
concept ParameterSet = requires(P& p, const P& cp) {
  { p.blocks() } -> std::same_as<std::vector<std::span<double>>>;
  { cp.blocks() } -> std::same_as<std::vector<std::span<const double>>>;
};

struct DenseLayer {
  MatrixXd weight;  // out x in
  VectorXd bias;    // out

  friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

/// Layered parameters. Hidden layers use tanh, the output layer is linear.
struct MlpParams {
  std::vector<DenseLayer> layers;

  Index input_dim() const { return layers.empty() ? 0 : layers.front().weight.cols(); }
  Index output_dim() const { return layers.empty() ? 0 : layers.back().weight.rows(); }
  std::size_t depth() const { return layers.size(); }

  std::vector<Index> dims() const {
    std::vector<Index> d;
    if (layers.empty()) return d;
    d.push_back(input_dim());
    for (const auto& l : layers) d.push_back(l.weight.rows());
    return d;
  }

  /// Throws ConfigError unless layer dimensions chain and every entry is finite.
  void validate() const {
    if (layers.empty()) throw ConfigError("mlp has no layers");
    for (std::size_t k = 0; k < layers.size(); ++k) {
      const auto& l = layers[k];
      if (l.bias.size() != l.weight.rows())
        throw ConfigError("mlp layer " + std::to_string(k) + ": bias length != weight rows");
      if (k + 1 < layers.size() && layers[k + 1].weight.cols() != l.weight.rows())
        throw ConfigError("mlp layer " + std::to_string(k + 1) + ": input dim does not chain");
      if (!l.weight.allFinite() || !l.bias.allFinite())
        throw ConfigError("mlp layer " + std::to_string(k) + ": non-finite parameter");
    }
  }

  MlpParams zeros_like() const {
    MlpParams z;
    z.layers.reserve(layers.size());
    for (const auto& l : layers)
      z.layers.push_back({MatrixXd::Zero(l.weight.rows(), l.weight.cols()), VectorXd::Zero(l.bias.size())});
    return z;
  }

  void set_zero() {
    for (auto& l : layers) {
      l.weight.setZero();
      l.bias.setZero();
    }
  }

  std::vector<std::span<double>> blocks() {
    std::vector<std::span<double>> b;
    for (auto& l : layers) {
      b.emplace_back(l.weight.data(), static_cast<std::size_t>(l.weight.size()));
      b.emplace_back(l.bias.data(), static_cast<std::size_t>(l.bias.size()));
    }
    return b;
  }
  std::vector<std::span<const double>> blocks() const {
    std::vector<std::span<const double>> b;
    for (const auto& l : layers) {
      b.emplace_back(l.weight.data(), static_cast<std::size_t>(l.weight.size()));
      b.emplace_back(l.bias.data(), static_cast<std::size_t>(l.bias.size()));
    }
    return b;
  }

  friend bool operator==(const MlpParams&, const MlpParams&) = default;
};

/// Weights and biases uniform in +-1/sqrt(fan_in).
inline MlpParams make_mlp(std::span<const Index> dims, Rng& rng) {
  if (dims.size() < 2) throw ConfigError("mlp needs at least input and output dims");
  MlpParams p;
  for (std::size_t k = 0; k + 1 < dims.size(); ++k) {
    const Index in = dims[k], out = dims[k + 1];
    if (in <= 0 || out <= 0) throw ConfigError("mlp dims must be positive");
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    DenseLayer l{MatrixXd(out, in), VectorXd(out)};
    for (Index c = 0; c < in; ++c)
      for (Index r = 0; r < out; ++r) l.weight(r, c) = rng.uniform(-bound, bound);
    for (Index r = 0; r < out; ++r) l.bias(r) = rng.uniform(-bound, bound);
    p.layers.push_back(std::move(l));
  }
  return p;
}

inline MlpParams make_mlp(std::initializer_list<Index> dims, Rng& rng) {
  return make_mlp(std::span<const Index>(dims.begin(), dims.size()), rng);
}

/// Elementwise tanh through the vectorized exp; tanh(20) already rounds to 1.
template <class Derived>
MatrixXd tanh_activation(const Eigen::MatrixBase<Derived>& z) {
  const auto e = (2.0 * z.derived().array().max(-20.0).min(20.0)).exp().eval();
  return ((e - 1.0) / (e + 1.0)).matrix();
}

/// activations[0] is the input, activations[k + 1] the output of layer k.
struct MlpCache {
  std::vector<MatrixXd> activations;
};

inline MatrixXd mlp_forward_batch(const MlpParams& params, const MatrixXd& input, MlpCache* cache = nullptr) {
  if (params.layers.empty()) throw ConfigError("mlp has no layers");
  if (input.rows() != params.input_dim())
    throw ConfigError("mlp input has " + std::to_string(input.rows()) + " rows, expected " +
                      std::to_string(params.input_dim()));
  if (cache) {
    cache->activations.clear();
    cache->activations.reserve(params.layers.size() + 1);
    cache->activations.push_back(input);
  }
  MatrixXd x = input;
  const std::size_t last = params.layers.size() - 1;
  for (std::size_t k = 0; k <= last; ++k) {
    const auto& l = params.layers[k];
    MatrixXd z = l.weight * x;
    z.colwise() += l.bias;
    if (k < last) z = tanh_activation(z);
    if (cache) cache->activations.push_back(z);
    x = std::move(z);
  }
  return x;
}

/// Reverse-mode pass for the batch stored in `cache`. Parameter gradients are
/// accumulated into `grads` (when non-null); `input_grad` (when non-null)
/// receives d loss / d input.
inline void mlp_backward_batch(const MlpParams& params, const MlpCache& cache, const MatrixXd& output_grad,
                               MlpParams* grads, MatrixXd* input_grad) {
  const std::size_t depth = params.layers.size();
  if (cache.activations.size() != depth + 1) throw InternalError("mlp cache depth does not match parameters");
  const Index batch = output_grad.cols();
  for (std::size_t k = 0; k <= depth; ++k) {
    const Index want = k == 0 ? params.input_dim() : params.layers[k - 1].weight.rows();
    if (cache.activations[k].rows() != want || cache.activations[k].cols() != batch)
      throw InternalError("mlp cache is stale or from a different batch");
  }
  if (output_grad.rows() != params.output_dim()) throw InternalError("output gradient has wrong dimension");
  if (grads && grads->dims() != params.dims()) throw InternalError("gradient buffer shape mismatch");

  MatrixXd delta = output_grad;
  for (std::size_t k = depth; k-- > 0;) {
    const auto& in = cache.activations[k];
    if (grads) {
      grads->layers[k].weight.noalias() += delta * in.transpose();
      grads->layers[k].bias += delta.rowwise().sum();
    }
    if (k == 0 && !input_grad) break;
    MatrixXd up = params.layers[k].weight.transpose() * delta;
    if (k > 0) {
      delta = (up.array() * (1.0 - in.array().square())).matrix();
    } else {
      *input_grad = std::move(up);
    }
  }
}

struct MlpForward {
  VectorXd output;
  MlpCache cache;
};

inline MlpForward mlp_forward(const MlpParams& params, const VectorXd& input) {
  MlpForward f;
  f.output = mlp_forward_batch(params, input, &f.cache);
  return f;
}

struct MlpGradients {
  MlpParams params;
  VectorXd input;
};

inline MlpGradients mlp_backward(const MlpParams& params, const MlpCache& cache, const VectorXd& output_grad) {
  MlpGradients g{params.zeros_like(), {}};
  MatrixXd in;
  mlp_backward_batch(params, cache, output_grad, &g.params, &in);
  g.input = in.col(0);
  return g;
}

// ---------------------------------------------------------------------------
// Adam

struct AdamHyper {
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  friend bool operator==(const AdamHyper&, const AdamHyper&) = default;
};

/// First/second moment accumulators, one flat vector per parameter block.
struct AdamState {
  AdamHyper hyper;
  std::int64_t step = 0;
  std::vector<VectorXd> first_moment;
  std::vector<VectorXd> second_moment;

  template <ParameterSet P>
  static AdamState for_params(const P& params, AdamHyper hyper = {}) {
    AdamState s;
    s.hyper = hyper;
    for (auto b : params.blocks()) {
      s.first_moment.push_back(VectorXd::Zero(static_cast<Index>(b.size())));
      s.second_moment.push_back(VectorXd::Zero(static_cast<Index>(b.size())));
    }
    return s;
  }

  friend bool operator==(const AdamState&, const AdamState&) = default;
};

/// One bias-corrected Adam step. A non-finite gradient entry rejects the
/// whole update (nothing is modified) with NonFiniteError.
template <ParameterSet P>
void adam_step(P& params, const P& grads, AdamState& state) {
  auto p = params.blocks();
  const auto g = grads.blocks();
  if (p.size() != g.size() || p.size() != state.first_moment.size())
    throw ConfigError("adam: parameter/gradient/state block counts differ");
  for (std::size_t b = 0; b < p.size(); ++b) {
    if (p[b].size() != g[b].size() || static_cast<Index>(p[b].size()) != state.first_moment[b].size())
      throw ConfigError("adam: block " + std::to_string(b) + " shape mismatch");
    for (std::size_t i = 0; i < g[b].size(); ++i)
      if (!std::isfinite(g[b][i]))
        throw NonFiniteError("adam: non-finite gradient in block " + std::to_string(b) + " entry " +
                             std::to_string(i));
  }
  const auto& h = state.hyper;
  ++state.step;
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));
  for (std::size_t b = 0; b < p.size(); ++b) {
    auto& m = state.first_moment[b];
    auto& v = state.second_moment[b];
    for (std::size_t i = 0; i < p[b].size(); ++i) {
      const Index j = static_cast<Index>(i);
      m[j] = h.beta1 * m[j] + (1.0 - h.beta1) * g[b][i];
      v[j] = h.beta2 * v[j] + (1.0 - h.beta2) * g[b][i] * g[b][i];
      p[b][i] -= h.learning_rate * (m[j] / c1) / (std::sqrt(v[j] / c2) + h.epsilon);
    }
  }
}

/// A single learnable scalar (used for log-temperature).
struct ScalarParam {
  double value = 0.0;

  std::vector<std::span<double>> blocks() { return {std::span<double>(&value, 1)}; }
  std::vector<std::span<const double>> blocks() const { return {std::span<const double>(&value, 1)}; }

  friend bool operator==(const ScalarParam&, const ScalarParam&) = default;
};

// ---------------------------------------------------------------------------
// Squashed Gaussian policy head

inline constexpr double kLogStdMin = -20.0;
inline constexpr double kLogStdMax = 2.0;

inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

/// log(1 - tanh(u)^2), stable for large |u|.
inline double log_one_minus_tanh_sq(double u) {
  return 2.0 * (std::numbers::ln2 - u - softplus(-2.0 * u));
}

struct GaussianPolicyOutput {
  VectorXd mean;
  VectorXd log_std;

  /// Splits a decoder output [mean ; raw log_std] and clamps the log-std.
  static GaussianPolicyOutput from_raw(const VectorXd& raw) {
    if (raw.size() % 2 != 0) throw ConfigError("policy head output must have even length");
    const Index n = raw.size() / 2;
    return {raw.head(n), raw.tail(n).cwiseMax(kLogStdMin).cwiseMin(kLogStdMax)};
  }

  Index dim() const { return mean.size(); }
};

struct PolicySample {
  VectorXd action;    // tanh(pre_tanh), strictly inside (-1, 1)
  double log_prob;    // log density of `action`, tanh correction included
  VectorXd pre_tanh;  // mean + std * noise
  VectorXd noise;
};

inline PolicySample policy_sample_with_noise(const GaussianPolicyOutput& out, const VectorXd& noise) {
  if (noise.size() != out.dim()) throw ConfigError("noise dimension mismatch");
  constexpr double kHalfLog2Pi = 0.91893853320467274178;
  constexpr double kEdge = 1.0 - 0x1.0p-52;
  PolicySample s;
  s.noise = noise;
  s.pre_tanh = out.mean + (out.log_std.array().exp() * noise.array()).matrix();
  s.action.resize(out.dim());
  s.log_prob = 0.0;
  for (Index i = 0; i < out.dim(); ++i) {
    const double u = s.pre_tanh[i];
    s.action[i] = std::clamp(std::tanh(u), -kEdge, kEdge);
    s.log_prob += -0.5 * noise[i] * noise[i] - out.log_std[i] - kHalfLog2Pi - log_one_minus_tanh_sq(u);
  }
  return s;
}

/// Reparameterized draw; `deterministic` uses zero noise (the mean action).
inline PolicySample policy_sample(const GaussianPolicyOutput& out, Rng& rng, bool deterministic = false) {
  VectorXd noise = VectorXd::Zero(out.dim());
  if (!deterministic)
    for (Index i = 0; i < noise.size(); ++i) noise[i] = rng.normal();
  return policy_sample_with_noise(out, noise);
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check

struct GradCheckReport {
  int configurations = 0;
  double max_relative_error = 0.0;
  bool passed = false;
};

/// Compares mlp_backward against central differences of ||f(x)||^2 / 2 on
/// random networks of 1-4 layers.
inline GradCheckReport gradient_check(int configurations, std::uint64_t seed, double step = 1e-5,
                                      double tolerance = 1e-4) {
  Rng rng(seed, static_cast<std::uint64_t>(Stream::kInit));
  GradCheckReport report;
  report.configurations = configurations;
  auto loss = [](const MlpParams& p, const VectorXd& x) {
    return 0.5 * mlp_forward_batch(p, x).squaredNorm();
  };
  auto rel = [](double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-3}); };
  for (int c = 0; c < configurations; ++c) {
    const int depth = 1 + static_cast<int>(rng.index(4));
    std::vector<Index> dims{1 + static_cast<Index>(rng.index(6))};
    for (int k = 0; k < depth; ++k) dims.push_back(1 + static_cast<Index>(rng.index(8)));
    MlpParams p = make_mlp(dims, rng);
    VectorXd x(dims.front());
    for (Index i = 0; i < x.size(); ++i) x[i] = rng.uniform(-2.0, 2.0);
    auto fwd = mlp_forward(p, x);
    const auto g = mlp_backward(p, fwd.cache, fwd.output);
    auto blocks = p.blocks();
    const auto gblocks = g.params.blocks();
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      for (std::size_t i = 0; i < blocks[b].size(); ++i) {
        const double saved = blocks[b][i];
        blocks[b][i] = saved + step;
        const double up = loss(p, x);
        blocks[b][i] = saved - step;
        const double down = loss(p, x);
        blocks[b][i] = saved;
        report.max_relative_error = std::max(report.max_relative_error, rel(gblocks[b][i], (up - down) / (2 * step)));
      }
    }
    for (Index i = 0; i < x.size(); ++i) {
      VectorXd xp = x, xm = x;
      xp[i] += step;
      xm[i] -= step;
      report.max_relative_error =
          std::max(report.max_relative_error, rel(g.input[i], (loss(p, xp) - loss(p, xm)) / (2 * step)));
    }
  }
  report.passed = report.max_relative_error < tolerance;
  return report;
}

}  // namespace latent_motor
