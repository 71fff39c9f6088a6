#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <vector>

#include "latent_motor/embedding.hpp"
#include "latent_motor/error.hpp"
#include "latent_motor/parallel.hpp"
#include "latent_motor/rng.hpp"
#include "latent_motor/sac.hpp"

namespace latent_motor {

struct CemConfig {
  int elite_capacity = 5;     // m
  int samples_per_elite = 8;  // n
  int adapt_epochs = 3;
  double sample_sigma = 0.3;
  double sigma_decay = 0.9;
  int episodes_per_eval = 1;
  std::uint64_t seed = 0;

  void validate() const {
    if (elite_capacity < 1) throw ConfigError("cem elite_capacity must be >= 1");
    if (samples_per_elite < 0) throw ConfigError("cem samples_per_elite must be >= 0");
    if (adapt_epochs < 1) throw ConfigError("cem adapt_epochs must be >= 1");
    if (!(sample_sigma > 0.0) || !std::isfinite(sample_sigma)) throw ConfigError("cem sample_sigma must be > 0");
    if (!(sigma_decay > 0.0 && sigma_decay <= 1.0)) throw ConfigError("cem sigma_decay must lie in (0, 1]");
    if (episodes_per_eval < 1) throw ConfigError("cem episodes_per_eval must be >= 1");
  }
};

struct CemEpoch {
  std::vector<VectorXd> elites;       // sorted best first
  std::vector<double> elite_returns;
  double best_return = 0.0;
  double sigma = 0.0;                 // sampling width used this epoch
  int episodes = 0;                   // environment episodes spent this epoch
};

struct CemTrace {
  std::vector<CemEpoch> epochs;

  std::vector<double> best_returns() const {
    std::vector<double> out;
    for (const auto& e : epochs) out.push_back(e.best_return);
    return out;
  }
};

struct CemResult {
  LatentTaskEmbedding best;
  double best_return = 0.0;
  CemTrace trace;
};

/// Score of one candidate embedding; larger is better.
using CandidateScore = std::function<double(const LatentTaskEmbedding&)>;

/// Elitist CEM on the unit sphere. Elites re-enter every candidate pool, so
/// with a deterministic score the best return never decreases.
inline CemResult cem_search(const CandidateScore& score, Index dim, const CemConfig& config, int threads = 1) {
  config.validate();
  if (dim < 2) throw ConfigError("cem needs an embedding dimension >= 2");
  Rng rng = Rng(config.seed).split(Stream::kCem);

  std::vector<LatentTaskEmbedding> elites;
  for (int i = 0; i < config.elite_capacity;) {
    VectorXd g(dim);
    for (Index j = 0; j < dim; ++j) g[j] = rng.normal();
    if (g.norm() <= kDegenerateNorm) continue;
    elites.push_back(normalize(g));
    ++i;
  }

  CemResult res{elites.front(), 0.0, {}};
  double sigma = config.sample_sigma;
  for (int epoch = 0; epoch < config.adapt_epochs; ++epoch) {
    std::vector<LatentTaskEmbedding> pool;
    for (const auto& e : elites) {
      pool.push_back(e);
      for (int s = 0; s < config.samples_per_elite; ++s) pool.push_back(inject_noise(e, sigma, rng));
    }
    std::vector<double> returns(pool.size());
    parallel_for(pool.size(), threads, [&](std::size_t i) { returns[i] = score(pool[i]); });
    for (double r : returns)
      if (!std::isfinite(r)) throw NonFiniteError("cem candidate score is not finite");

    std::vector<std::size_t> order(pool.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return returns[a] > returns[b]; });

    const std::size_t keep = std::min<std::size_t>(static_cast<std::size_t>(config.elite_capacity), pool.size());
    CemEpoch rec;
    rec.sigma = sigma;
    rec.episodes = static_cast<int>(pool.size()) * config.episodes_per_eval;
    std::vector<LatentTaskEmbedding> next;
    for (std::size_t i = 0; i < keep; ++i) {
      next.push_back(pool[order[i]]);
      rec.elites.push_back(pool[order[i]].values());
      rec.elite_returns.push_back(returns[order[i]]);
    }
    rec.best_return = rec.elite_returns.front();
    elites = std::move(next);
    res.trace.epochs.push_back(std::move(rec));
    sigma *= config.sigma_decay;
  }
  res.best = elites.front();
  res.best_return = res.trace.epochs.back().best_return;
  return res;
}

/// Adapts an embedding-conditioned policy to an unseen task. Every candidate is
/// scored on the same evaluation seeds.
inline CemResult cem_adapt(const SacModel& model, const TaskSpec& task, const CemConfig& config, int threads = 1) {
  if (model.kind() != PolicyKind::kEar) throw ConfigError("adaptation needs the embedding policy");
  if (model.tasks.empty() || model.updates == 0) throw ConfigError("adaptation needs a trained model");
  if (task.family != model.family) throw ConfigError("adaptation task must come from the training family");
  task.validate();
  const std::uint64_t eval_seed = Rng(config.seed).split(Stream::kEval)();
  auto score = [&](const LatentTaskEmbedding& z) {
    return evaluate_policy(model, z, task, config.episodes_per_eval, eval_seed).mean_return;
  };
  return cem_search(score, model.actor.lte_dim(), config, threads);
}

struct AdaptationPoint {
  int epoch = 0;
  double mean_best_return = 0.0;
  double std_best_return = 0.0;  // population std across traces
};

/// Per-epoch aggregate of best returns across adaptation runs.
inline std::vector<AdaptationPoint> adaptation_curve(const std::vector<CemTrace>& traces) {
  if (traces.empty()) throw ConfigError("adaptation_curve needs at least one trace");
  const std::size_t len = traces.front().epochs.size();
  for (const auto& t : traces)
    if (t.epochs.size() != len) throw ConfigError("adaptation traces have different lengths");
  std::vector<AdaptationPoint> out;
  const double n = static_cast<double>(traces.size());
  for (std::size_t e = 0; e < len; ++e) {
    double mean = 0.0;
    for (const auto& t : traces) mean += t.epochs[e].best_return / n;
    double var = 0.0;
    for (const auto& t : traces) var += (t.epochs[e].best_return - mean) * (t.epochs[e].best_return - mean) / n;
    out.push_back({static_cast<int>(e), mean, std::sqrt(var)});
  }
  return out;
}

}  // namespace latent_motor
