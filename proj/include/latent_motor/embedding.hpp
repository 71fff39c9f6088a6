#pragma once

// Latent task embeddings on the unit hypersphere: the learnable task
// encoder, noise injection, interpolation/extrapolation and the S^2 grid.

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "latent_motor/error.hpp"
#include "latent_motor/rng.hpp"

namespace latent_motor {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

inline constexpr double kDegenerateNorm = 1e-9;
inline constexpr double kUnitNormTolerance = 1e-9;

/// Unit-norm vector in R^d. Every instance satisfies |values| = 1 within 1e-9.
class LatentTaskEmbedding {
 public:
  /// Wraps an already-normalized vector; throws ConfigError if it is not unit norm.
  static LatentTaskEmbedding from_unit(VectorXd values) {
    if (values.size() == 0 || !values.allFinite() || std::abs(values.norm() - 1.0) > kUnitNormTolerance)
      throw ConfigError("embedding is not unit norm");
    return LatentTaskEmbedding(std::move(values));
  }

  const VectorXd& values() const { return values_; }
  Index dim() const { return values_.size(); }
  double operator[](Index i) const { return values_[i]; }

  friend bool operator==(const LatentTaskEmbedding& a, const LatentTaskEmbedding& b) {
    return a.values_ == b.values_;
  }

 private:
  explicit LatentTaskEmbedding(VectorXd v) : values_(std::move(v)) {}
  friend LatentTaskEmbedding normalize(const VectorXd& v);

  VectorXd values_;
};

/// v / |v|. Throws DegenerateEmbedding when |v| <= 1e-9.
inline LatentTaskEmbedding normalize(const VectorXd& v) {
  const double n = v.norm();
  if (!(n > kDegenerateNorm) || !std::isfinite(n))
    throw DegenerateEmbedding("cannot normalize vector of norm " + std::to_string(n));
  return LatentTaskEmbedding(v / n);
}

/// Jacobian-vector product of v -> v/|v| evaluated at v, applied to `grad`
/// (the Jacobian is symmetric, so this also serves the backward pass).
inline VectorXd normalize_backward(const VectorXd& v, const VectorXd& grad) {
  const double n = v.norm();
  const VectorXd u = v / n;
  return (grad - u * u.dot(grad)) / n;
}

/// One-hot task index -> R^d linear map. Column k is task k's raw embedding.
struct TaskEncoder {
  MatrixXd weight;  // d x N

  static TaskEncoder random(Index dim, Index num_tasks, Rng& rng) {
    if (dim <= 0 || num_tasks <= 0) throw ConfigError("task encoder dims must be positive");
    TaskEncoder e{MatrixXd(dim, num_tasks)};
    const double bound = 1.0;  // fan_in of a one-hot input is 1
    for (Index c = 0; c < num_tasks; ++c)
      for (Index r = 0; r < dim; ++r) e.weight(r, c) = rng.uniform(-bound, bound);
    return e;
  }

  Index dim() const { return weight.rows(); }
  Index num_tasks() const { return weight.cols(); }

  VectorXd raw(Index task) const {
    if (task < 0 || task >= num_tasks())
      throw ConfigError("task index " + std::to_string(task) + " out of range [0, " + std::to_string(num_tasks()) +
                        ")");
    return weight.col(task);
  }

  /// Rescales every column to unit norm.
  void renormalize() {
    for (Index c = 0; c < weight.cols(); ++c) weight.col(c) = normalize(weight.col(c)).values();
  }

  std::vector<std::span<double>> blocks() {
    return {std::span<double>(weight.data(), static_cast<std::size_t>(weight.size()))};
  }
  std::vector<std::span<const double>> blocks() const {
    return {std::span<const double>(weight.data(), static_cast<std::size_t>(weight.size()))};
  }

  friend bool operator==(const TaskEncoder&, const TaskEncoder&) = default;
};

inline LatentTaskEmbedding encode_task(const TaskEncoder& encoder, Index task) {
  return normalize(encoder.raw(task));
}

/// Embeddings index-aligned with the training tasks.
using LteSet = std::vector<LatentTaskEmbedding>;

inline LteSet lte_set(const TaskEncoder& encoder) {
  LteSet s;
  for (Index k = 0; k < encoder.num_tasks(); ++k) s.push_back(encode_task(encoder, k));
  return s;
}

/// normalize(z + n) with n ~ N(0, sigma^2 I). sigma == 0 returns z unchanged.
inline LatentTaskEmbedding inject_noise(const LatentTaskEmbedding& z, double sigma, Rng& rng) {
  if (!(sigma >= 0.0)) throw ConfigError("noise sigma must be >= 0");
  if (sigma == 0.0) return z;
  for (;;) {
    VectorXd v = z.values();
    for (Index i = 0; i < v.size(); ++i) v[i] += sigma * rng.normal();
    if (v.norm() > kDegenerateNorm) return normalize(v);
  }
}

/// beta * z_i + (1 - beta) * z_j, without projection.
inline VectorXd blend(const VectorXd& z_i, const VectorXd& z_j, double beta) {
  if (z_i.size() != z_j.size()) throw ConfigError("embedding dimensions differ");
  if (!std::isfinite(beta)) throw ConfigError("beta must be finite");
  return beta * z_i + (1.0 - beta) * z_j;
}

/// normalize(beta * z_i + (1 - beta) * z_j). beta in (0, 1) interpolates,
/// beta outside [0, 1] extrapolates.
inline LatentTaskEmbedding interpolate(const LatentTaskEmbedding& z_i, const LatentTaskEmbedding& z_j, double beta) {
  return normalize(blend(z_i.values(), z_j.values(), beta));
}

struct SpherePoint {
  double theta;  // polar angle from +z, [0, pi]
  double phi;    // azimuth, [0, 2 pi)
  LatentTaskEmbedding direction;
};

// Lattice on S^2: both poles plus (resolution - 1) latitude rings of
// 2 * (resolution + 1) points each, for 2 * resolution^2 points in total.
// Every ring shares the same azimuths, so ring[r][j] neighbours ring[r+1][j].

inline Index sphere_ring_size(Index resolution) { return 2 * (resolution + 1); }

inline std::vector<SpherePoint> sphere_grid_points(Index resolution) {
  if (resolution < 2) throw ConfigError("sphere grid resolution must be >= 2");
  auto at = [](double theta, double phi) {
    VectorXd v(3);
    v << std::sin(theta) * std::cos(phi), std::sin(theta) * std::sin(phi), std::cos(theta);
    return SpherePoint{theta, phi, normalize(v)};
  };
  std::vector<SpherePoint> pts;
  pts.reserve(static_cast<std::size_t>(2 * resolution * resolution));
  pts.push_back(at(0.0, 0.0));
  const Index ring = sphere_ring_size(resolution);
  for (Index r = 1; r < resolution; ++r) {
    const double theta = std::numbers::pi * static_cast<double>(r) / static_cast<double>(resolution);
    for (Index j = 0; j < ring; ++j)
      pts.push_back(at(theta, 2.0 * std::numbers::pi * static_cast<double>(j) / static_cast<double>(ring)));
  }
  pts.push_back(at(std::numbers::pi, 0.0));
  return pts;
}

inline std::vector<LatentTaskEmbedding> sphere_grid(Index resolution, Index dim = 3) {
  if (dim != 3) throw ConfigError("sphere grid is only defined for 3-d embeddings");
  std::vector<LatentTaskEmbedding> out;
  for (auto& p : sphere_grid_points(resolution)) out.push_back(std::move(p.direction));
  return out;
}

/// Adjacent-cell pairs (indices into sphere_grid_points): ring neighbours,
/// same-azimuth neighbours on consecutive rings, and pole-to-ring links.
inline std::vector<std::pair<Index, Index>> sphere_grid_edges(Index resolution) {
  if (resolution < 2) throw ConfigError("sphere grid resolution must be >= 2");
  const Index ring = sphere_ring_size(resolution);
  const Index rings = resolution - 1;
  const Index south = 1 + rings * ring;
  auto id = [&](Index r, Index j) { return 1 + r * ring + j; };
  std::vector<std::pair<Index, Index>> e;
  for (Index r = 0; r < rings; ++r) {
    for (Index j = 0; j < ring; ++j) {
      e.emplace_back(id(r, j), id(r, (j + 1) % ring));
      if (r + 1 < rings) e.emplace_back(id(r, j), id(r + 1, j));
    }
  }
  for (Index j = 0; j < ring; ++j) {
    e.emplace_back(0, id(0, j));
    e.emplace_back(id(rings - 1, j), south);
  }
  return e;
}

}  // namespace latent_motor
