#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <utility>
#include <vector>

#include "latent_motor/embedding.hpp"
#include "latent_motor/error.hpp"
#include "latent_motor/parallel.hpp"
#include "latent_motor/sac.hpp"

namespace latent_motor {

// ---------------------------------------------------------------------------
// PCA

struct PcaResult {
  VectorXd mean;
  MatrixXd components;   // dim x k, orthonormal columns
  VectorXd eigenvalues;  // k, descending
  MatrixXd projections;  // k x samples

  MatrixXd reconstruct() const { return (components * projections).colwise() + mean; }
};

struct SymmetricEigen {
  VectorXd values;   // descending
  MatrixXd vectors;  // columns
};

/// Cyclic Jacobi rotations on a symmetric matrix until the off-diagonal mass
/// falls below `tol` (relative to the Frobenius norm).
inline SymmetricEigen jacobi_eigen(MatrixXd a, double tol = 1e-12, int max_sweeps = 100) {
  const Index n = a.rows();
  if (a.cols() != n) throw ConfigError("jacobi_eigen needs a square matrix");
  MatrixXd v = MatrixXd::Identity(n, n);
  const double scale = std::max(a.norm(), 1e-300);
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double off = 0.0;
    for (Index p = 0; p < n; ++p)
      for (Index q = p + 1; q < n; ++q) off += 2.0 * a(p, q) * a(p, q);
    if (std::sqrt(off) <= tol * scale) break;
    for (Index p = 0; p < n; ++p) {
      for (Index q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (Index k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (Index k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (Index k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](Index i, Index j) { return a(i, i) > a(j, j); });
  SymmetricEigen out{VectorXd(n), MatrixXd(n, n)};
  for (Index i = 0; i < n; ++i) {
    const Index src = order[static_cast<std::size_t>(i)];
    out.values[i] = a(src, src);
    out.vectors.col(i) = v.col(src);
  }
  return out;
}

/// Columns of `data` are samples.
inline PcaResult pca(const MatrixXd& data, Index k) {
  const Index dim = data.rows(), n = data.cols();
  if (k < 1 || k > dim) throw ConfigError("pca needs 1 <= k <= dim");
  if (n < k + 1) throw ConfigError("pca needs at least k+1 samples");
  if (!data.allFinite()) throw NonFiniteError("pca input is not finite");
  PcaResult r;
  r.mean = data.rowwise().mean();
  const MatrixXd centered = data.colwise() - r.mean;
  const MatrixXd cov = centered * centered.transpose() / static_cast<double>(n - 1);
  const SymmetricEigen eig = jacobi_eigen(cov);
  r.components = eig.vectors.leftCols(k);
  r.eigenvalues = eig.values.head(k);
  r.projections = r.components.transpose() * centered;
  return r;
}

inline PcaResult pca(const std::vector<VectorXd>& samples, Index k) {
  if (samples.empty()) throw ConfigError("pca needs samples");
  MatrixXd m(samples.front().size(), static_cast<Index>(samples.size()));
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].size() != m.rows()) throw ConfigError("pca samples have mixed dimensions");
    m.col(static_cast<Index>(i)) = samples[i];
  }
  return pca(m, k);
}

// ---------------------------------------------------------------------------
// Periodicity

/// Biased sample autocorrelation at lags 0..max_lag.
inline std::vector<double> autocorrelation(const std::vector<double>& x, std::size_t max_lag) {
  const std::size_t n = x.size();
  std::vector<double> r(max_lag + 1, 0.0);
  if (n == 0) return r;
  const double mu = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(n);
  double denom = 0.0;
  for (double v : x) denom += (v - mu) * (v - mu);
  if (denom <= 0.0) return r;
  for (std::size_t k = 0; k <= max_lag && k < n; ++k) {
    double s = 0.0;
    for (std::size_t t = 0; t + k < n; ++t) s += (x[t] - mu) * (x[t + k] - mu);
    r[k] = s / denom;
  }
  return r;
}

/// Highest local maximum of the autocorrelation over lags 2..T/2; 0 when the
/// autocorrelation has no interior peak (e.g. a monotone decay).
inline double periodicity_score(const std::vector<double>& x) {
  const std::size_t half = x.size() / 2;
  if (half < 3) return 0.0;
  const auto r = autocorrelation(x, half + 1);
  double best = 0.0;
  for (std::size_t k = 2; k <= half; ++k)
    if (r[k] >= r[k - 1] && r[k] >= r[k + 1]) best = std::max(best, r[k]);
  return best;
}

struct LseTrajectoryAnalysis {
  MatrixXd observations;     // obs_dim x T
  MatrixXd sensory;          // lse_dim x T
  PcaResult raw_pca;
  PcaResult lse_pca;
  double raw_periodicity = 0.0;
  double lse_periodicity = 0.0;
};

/// One deterministic episode of training task `task_id`; compares the
/// periodicity of raw observations and of the sensory embeddings.
inline LseTrajectoryAnalysis lse_trajectory_analysis(const SacModel& model, int task_id, std::uint64_t seed = 0,
                                                     Index k = 2) {
  if (model.kind() != PolicyKind::kEar) throw ConfigError("sensory embeddings exist only for the embedding policy");
  if (task_id < 0 || task_id >= model.num_tasks()) throw ConfigError("task id out of range");
  EvalOptions opt;
  opt.seed = seed;
  opt.record_observations = true;
  const auto rep = evaluate(model, {task_id, std::nullopt}, model.tasks[static_cast<std::size_t>(task_id)], opt);
  const auto& obs = rep.episodes.front().observations;
  LseTrajectoryAnalysis out;
  out.observations.resize(model.obs_size(), static_cast<Index>(obs.size()));
  for (std::size_t t = 0; t < obs.size(); ++t) out.observations.col(static_cast<Index>(t)) = obs[t];
  out.sensory = model.actor.encode_states(out.observations);
  out.raw_pca = pca(out.observations, std::min<Index>(k, out.observations.rows()));
  out.lse_pca = pca(out.sensory, std::min<Index>(k, out.sensory.rows()));
  auto first = [](const PcaResult& p) {
    std::vector<double> v(static_cast<std::size_t>(p.projections.cols()));
    for (Index t = 0; t < p.projections.cols(); ++t) v[static_cast<std::size_t>(t)] = p.projections(0, t);
    return v;
  };
  out.raw_periodicity = periodicity_score(first(out.raw_pca));
  out.lse_periodicity = periodicity_score(first(out.lse_pca));
  return out;
}

// ---------------------------------------------------------------------------
// Sphere coloring

struct SphereCell {
  double theta = 0.0;
  double phi = 0.0;
  Eigen::Vector3d direction;
  double metric = 0.0;
  double mean_return = 0.0;
};

/// Evaluates the policy at every sphere_grid point; rows follow grid order.
inline std::vector<SphereCell> evaluate_sphere(const SacModel& model, const TaskSpec& task, Index resolution,
                                               int episodes = 1, std::uint64_t seed = 0, int threads = 1) {
  if (model.kind() != PolicyKind::kEar) throw ConfigError("sphere evaluation needs the embedding policy");
  if (model.actor.lte_dim() != 3) throw ConfigError("sphere evaluation is defined for 3-d embeddings only");
  const auto points = sphere_grid_points(resolution);
  std::vector<SphereCell> cells(points.size());
  parallel_for(points.size(), threads, [&](std::size_t i) {
    const auto& p = points[i];
    const auto rep = evaluate_policy(model, p.direction, task, episodes, seed);
    const VectorXd& d = p.direction.values();
    cells[i] = SphereCell{p.theta, p.phi, Eigen::Vector3d(d[0], d[1], d[2]), rep.mean_metric, rep.mean_return};
  });
  return cells;
}

/// Fraction of grid edges whose endpoint metrics differ by less than `threshold`.
inline double sphere_continuity(const std::vector<SphereCell>& cells, Index resolution, double threshold) {
  const auto edges = sphere_grid_edges(resolution);
  if (cells.size() != sphere_grid_points(resolution).size()) throw ConfigError("cell count does not match grid");
  std::size_t ok = 0;
  for (const auto& [a, b] : edges)
    if (std::abs(cells[static_cast<std::size_t>(a)].metric - cells[static_cast<std::size_t>(b)].metric) < threshold)
      ++ok;
  return edges.empty() ? 1.0 : static_cast<double>(ok) / static_cast<double>(edges.size());
}

// ---------------------------------------------------------------------------
// Interpolation

struct SweepRow {
  double beta = 0.0;
  double metric = 0.0;
  double mean_return = 0.0;
  EpisodeMetrics metrics;
  bool skipped = false;  // degenerate combination
};

/// The conditioning a model sees for beta*z_i + (1-beta)*z_j: projected back
/// to the sphere when the model was trained on normalized embeddings.
inline std::optional<VectorXd> combine_embeddings(const SacModel& model, const VectorXd& z_i, const VectorXd& z_j,
                                                  double beta) {
  if (z_i.size() != model.actor.lte_dim() || z_j.size() != model.actor.lte_dim())
    throw ConfigError("embedding dimension mismatch");
  if (!std::isfinite(beta)) throw ConfigError("beta must be finite");
  if (!model.config.normalize_lte) return blend(z_i, z_j, beta);
  try {
    return interpolate(normalize(z_i), normalize(z_j), beta).values();
  } catch (const DegenerateEmbedding&) {
    return std::nullopt;
  }
}

inline SweepRow evaluate_blend(const SacModel& model, const VectorXd& z_i, const VectorXd& z_j, double beta,
                               const TaskSpec& task, int episodes, std::uint64_t seed) {
  SweepRow row;
  row.beta = beta;
  const auto z = combine_embeddings(model, z_i, z_j, beta);
  if (!z) {
    row.skipped = true;
    return row;
  }
  const auto rep = evaluate_policy(model, *z, task, episodes, seed);
  row.metric = rep.mean_metric;
  row.mean_return = rep.mean_return;
  row.metrics = rep.mean_metrics;
  return row;
}

/// Rows in the order of `betas`; `task` only scores the return column.
inline std::vector<SweepRow> interpolation_sweep(const SacModel& model, const VectorXd& z_i, const VectorXd& z_j,
                                                 const std::vector<double>& betas, const TaskSpec& task,
                                                 int episodes = 1, std::uint64_t seed = 0, int threads = 1) {
  if (model.kind() != PolicyKind::kEar) throw ConfigError("interpolation needs the embedding policy");
  std::vector<SweepRow> rows(betas.size());
  parallel_for(betas.size(), threads,
               [&](std::size_t i) { rows[i] = evaluate_blend(model, z_i, z_j, betas[i], task, episodes, seed); });
  return rows;
}

struct BetaSearch {
  bool found = false;
  double beta = 0.0;
  double achieved = 0.0;
  int evaluations = 0;
};

/// Coarse 17-point grid over [0.1, 0.9] and then bisection on the first
/// bracketing interval. `metric` returns nullopt for unusable betas.
inline BetaSearch search_beta(const std::function<std::optional<double>(double)>& metric, double target, double tol,
                              int max_bisections = 40) {
  if (!(tol > 0.0)) throw ConfigError("search_beta tolerance must be positive");
  BetaSearch res;
  constexpr int kGrid = 17;
  std::vector<double> betas(kGrid);
  std::vector<std::optional<double>> values(kGrid);
  for (int i = 0; i < kGrid; ++i) {
    betas[i] = 0.1 + 0.8 * i / (kGrid - 1);
    values[i] = metric(betas[i]);
    ++res.evaluations;
    if (values[i] && std::abs(*values[i] - target) <= tol) {
      res.found = true;
      res.beta = betas[i];
      res.achieved = *values[i];
      return res;
    }
  }
  for (int i = 0; i + 1 < kGrid; ++i) {
    if (!values[i] || !values[i + 1]) continue;
    double lo = betas[i], hi = betas[i + 1];
    double flo = *values[i] - target;
    if (flo * (*values[i + 1] - target) > 0.0) continue;
    for (int it = 0; it < max_bisections; ++it) {
      const double mid = 0.5 * (lo + hi);
      const auto v = metric(mid);
      ++res.evaluations;
      if (!v) break;
      if (std::abs(*v - target) <= tol) {
        res.found = true;
        res.beta = mid;
        res.achieved = *v;
        return res;
      }
      if ((*v - target) * flo < 0.0) {
        hi = mid;
      } else {
        lo = mid;
        flo = *v - target;
      }
    }
    return res;  // one crossing is searched; later ones are ignored
  }
  return res;
}

inline BetaSearch search_beta(const SacModel& model, const VectorXd& z_i, const VectorXd& z_j, double target,
                              double tol, const TaskSpec& task, int episodes = 1, std::uint64_t seed = 0) {
  auto metric = [&](double beta) -> std::optional<double> {
    const SweepRow r = evaluate_blend(model, z_i, z_j, beta, task, episodes, seed);
    if (r.skipped) return std::nullopt;
    return r.metric;
  };
  return search_beta(metric, target, tol);
}

// ---------------------------------------------------------------------------
// Composition

struct Composition {
  double beta = 0.0;
  bool skipped = false;
  double horizontal_speed = 0.0;
  double mean_height = 0.0;
  EvalReport report;
};

inline Composition compose(const SacModel& model, const VectorXd& z_a, const VectorXd& z_b, double beta,
                           const TaskSpec& task, int episodes = 1, std::uint64_t seed = 0) {
  if (model.kind() != PolicyKind::kEar) throw ConfigError("composition needs the embedding policy");
  Composition c;
  c.beta = beta;
  const auto z = combine_embeddings(model, z_a, z_b, beta);
  if (!z) {
    c.skipped = true;
    return c;
  }
  c.report = evaluate_policy(model, *z, task, episodes, seed);
  c.horizontal_speed = c.report.mean_metrics.horizontal_speed;
  c.mean_height = c.report.mean_metrics.mean_height;
  return c;
}

/// Spearman rank correlation with average ranks for ties.
inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw ConfigError("spearman needs two equal-length series");
  auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  const auto rx = ranks(x), ry = ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n, my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace latent_motor
