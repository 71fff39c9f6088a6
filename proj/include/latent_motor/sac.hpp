#pragma once

// Multi-task soft actor-critic. The EAR policy is a shared state encoder
// and action decoder conditioned on per-task latent embeddings; the OHE and
// MHMT baselines swap the conditioning for a one-hot input or per-task input
// heads and reuse everything else.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <utility>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "latent_motor/embedding.hpp"
#include "latent_motor/env.hpp"
#include "latent_motor/error.hpp"
#include "latent_motor/nn.hpp"
#include "latent_motor/parallel.hpp"
#include "latent_motor/replay.hpp"
#include "latent_motor/rng.hpp"

namespace latent_motor {

using Eigen::ArrayXXd;

enum class PolicyKind { kEar, kOhe, kMhmt };

inline std::string_view to_string(PolicyKind k) {
  switch (k) {
    case PolicyKind::kEar: return "ear";
    case PolicyKind::kOhe: return "ohe";
    case PolicyKind::kMhmt: return "mhmt";
  }
  return "?";
}

inline PolicyKind policy_kind_from_string(std::string_view s) {
  if (s == "ear") return PolicyKind::kEar;
  if (s == "ohe") return PolicyKind::kOhe;
  if (s == "mhmt") return PolicyKind::kMhmt;
  throw ConfigError("unknown policy kind '" + std::string(s) + "'");
}

struct NetworkConfig {
  int hidden_width = 64;
  int lse_dim = 16;
  int lte_dim = 3;
  int encoder_layers = 2;
  int decoder_layers = 4;
  int q_layers = 4;

  void validate() const {
    if (hidden_width < 1 || lse_dim < 1 || lte_dim < 1 || encoder_layers < 1 || decoder_layers < 1 || q_layers < 1)
      throw ConfigError("network sizes must be positive");
    if (decoder_layers < 2) throw ConfigError("multi-head baseline needs at least a 2-layer decoder");
  }

  friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

struct TrainConfig {
  int pretrain_epochs = 20;
  int train_epochs = 100;
  int optimization_times = 200;
  int batch_size = 256;
  double gamma = 0.99;
  double tau = 0.005;
  double actor_lr = 3e-4;
  double critic_lr = 3e-4;
  double alpha_lr = 3e-4;
  double initial_alpha = 0.1;
  double reward_scale = 1.0;
  double noise_sigma = 0.05;
  bool inject_noise = true;      // LTE noise in the optimization path
  bool noisy_collection = true;  // LTE noise while collecting data
  bool normalize_lte = true;
  bool collect_each_epoch = true;
  std::size_t replay_capacity = 100000;
  int eval_episodes = 3;
  int eval_interval = 1;
  std::uint64_t seed = 0;
  NetworkConfig network;

  void validate() const {
    network.validate();
    if (pretrain_epochs < 0 || train_epochs < 0) throw ConfigError("epoch counts must be >= 0");
    if (pretrain_epochs == 0 && train_epochs == 0) throw ConfigError("config has zero epochs");
    if (train_epochs > 0 && pretrain_epochs == 0 && !collect_each_epoch)
      throw ConfigError("training without pretraining or ongoing collection has no data");
    if (optimization_times < 0) throw ConfigError("optimization_times must be >= 0");
    if (batch_size < 2) throw ConfigError("batch_size must be >= 2");
    if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in (0, 1]");
    if (!(tau > 0.0 && tau <= 1.0)) throw ConfigError("tau must lie in (0, 1]");
    if (!(actor_lr > 0 && critic_lr > 0 && alpha_lr > 0)) throw ConfigError("learning rates must be positive");
    if (!(initial_alpha > 0)) throw ConfigError("initial_alpha must be positive");
    if (!(reward_scale > 0) || !std::isfinite(reward_scale)) throw ConfigError("reward_scale must be positive");
    if (!(noise_sigma >= 0)) throw ConfigError("noise_sigma must be >= 0");
    if (replay_capacity == 0) throw ConfigError("replay_capacity must be positive");
    if (eval_episodes < 1) throw ConfigError("eval_episodes must be >= 1");
    if (eval_interval < 1) throw ConfigError("eval_interval must be >= 1");
  }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

inline MatrixXd one_hot(std::span<const int> ids, Index n) {
  MatrixXd m = MatrixXd::Zero(n, static_cast<Index>(ids.size()));
  for (std::size_t i = 0; i < ids.size(); ++i) m(ids[i], static_cast<Index>(i)) = 1.0;
  return m;
}

namespace detail {
inline std::vector<Index> mlp_dims(Index in, int layers, int width, Index out) {
  std::vector<Index> d{in};
  for (int k = 0; k + 1 < layers; ++k) d.push_back(width);
  d.push_back(out);
  return d;
}

template <class T>
void append(std::vector<T>& dst, std::vector<T> src) {
  dst.insert(dst.end(), src.begin(), src.end());
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Actor

/// Policy network. `decoder` outputs [mean ; log_std] of the pre-squash
/// Gaussian for every kind.
struct Actor {
  PolicyKind kind = PolicyKind::kEar;
  Index obs_dim = 0;
  Index action_dim = 0;
  Index num_tasks = 0;
  bool normalize_lte = true;
  MlpParams encoder;             // kEar: obs -> LSE
  MlpParams decoder;             // kEar: [LSE; LTE]; kOhe: [obs; one_hot]; kMhmt: trunk
  TaskEncoder task_encoder;      // kEar
  std::vector<MlpParams> heads;  // kMhmt: per-task input layer obs -> hidden

  struct Cache {
    MlpCache encoder;
    MlpCache decoder;
    std::vector<MlpCache> heads;
    std::vector<std::vector<Index>> head_columns;
  };

  static Actor make(PolicyKind kind, Index obs_dim, Index action_dim, Index num_tasks, const NetworkConfig& net,
                    bool normalize_lte, Rng& rng) {
    Actor a;
    a.kind = kind;
    a.obs_dim = obs_dim;
    a.action_dim = action_dim;
    a.num_tasks = num_tasks;
    a.normalize_lte = normalize_lte;
    const Index out = 2 * action_dim;
    switch (kind) {
      case PolicyKind::kEar:
        a.encoder = make_mlp(detail::mlp_dims(obs_dim, net.encoder_layers, net.hidden_width, net.lse_dim), rng);
        a.decoder = make_mlp(
            detail::mlp_dims(net.lse_dim + net.lte_dim, net.decoder_layers, net.hidden_width, out), rng);
        a.task_encoder = TaskEncoder::random(net.lte_dim, num_tasks, rng);
        if (normalize_lte) a.task_encoder.renormalize();
        break;
      case PolicyKind::kOhe:
        a.decoder = make_mlp(detail::mlp_dims(obs_dim + num_tasks, net.decoder_layers, net.hidden_width, out), rng);
        break;
      case PolicyKind::kMhmt:
        for (Index k = 0; k < num_tasks; ++k)
          a.heads.push_back(make_mlp({obs_dim, static_cast<Index>(net.hidden_width)}, rng));
        a.decoder =
            make_mlp(detail::mlp_dims(net.hidden_width, net.decoder_layers - 1, net.hidden_width, out), rng);
        break;
    }
    return a;
  }

  Index lte_dim() const { return kind == PolicyKind::kEar ? task_encoder.dim() : 0; }

  /// Input width of the network that consumes observations directly.
  Index policy_input_dim() const {
    switch (kind) {
      case PolicyKind::kEar: return encoder.input_dim();
      case PolicyKind::kOhe: return decoder.input_dim();
      case PolicyKind::kMhmt: return heads.front().input_dim();
    }
    return 0;
  }

  /// Task k's conditioning vector: its LTE, unnormalized when the
  /// normalization constraint is disabled.
  VectorXd lte(Index task) const {
    if (kind != PolicyKind::kEar) throw ConfigError("only the embedding policy has task embeddings");
    VectorXd v = task_encoder.raw(task);
    return normalize_lte ? normalize(v).values() : v;
  }

  MatrixXd encode_states(const MatrixXd& obs) const {
    if (kind != PolicyKind::kEar) throw ConfigError("only the embedding policy has a state encoder");
    return mlp_forward_batch(encoder, obs);
  }

  /// Raw head output for a batch. `conditioning` (lte_dim x B) is used by the
  /// embedding policy only; baselines condition on `task_ids`.
  MatrixXd forward(const MatrixXd& obs, std::span<const int> task_ids, const MatrixXd& conditioning,
                   Cache* cache) const {
    const Index b = obs.cols();
    switch (kind) {
      case PolicyKind::kEar: {
        if (conditioning.rows() != lte_dim() || conditioning.cols() != b)
          throw ConfigError("conditioning must be lte_dim x batch");
        MatrixXd lse = mlp_forward_batch(encoder, obs, cache ? &cache->encoder : nullptr);
        MatrixXd in(lse.rows() + conditioning.rows(), b);
        in << lse, conditioning;
        return mlp_forward_batch(decoder, in, cache ? &cache->decoder : nullptr);
      }
      case PolicyKind::kOhe: {
        MatrixXd in(obs.rows() + num_tasks, b);
        in << obs, one_hot(task_ids, num_tasks);
        return mlp_forward_batch(decoder, in, cache ? &cache->decoder : nullptr);
      }
      case PolicyKind::kMhmt: {
        const Index width = heads.front().output_dim();
        MatrixXd hidden(width, b);
        std::vector<std::vector<Index>> cols(static_cast<std::size_t>(num_tasks));
        for (Index i = 0; i < b; ++i) cols[static_cast<std::size_t>(task_ids[static_cast<std::size_t>(i)])].push_back(i);
        if (cache) {
          cache->heads.assign(static_cast<std::size_t>(num_tasks), {});
          cache->head_columns = cols;
        }
        for (Index k = 0; k < num_tasks; ++k) {
          const auto& c = cols[static_cast<std::size_t>(k)];
          if (c.empty()) continue;
          MatrixXd sub(obs.rows(), static_cast<Index>(c.size()));
          for (std::size_t j = 0; j < c.size(); ++j) sub.col(static_cast<Index>(j)) = obs.col(c[j]);
          MatrixXd h = mlp_forward_batch(heads[static_cast<std::size_t>(k)], sub,
                                         cache ? &cache->heads[static_cast<std::size_t>(k)] : nullptr);
          h = tanh_activation(h);  // the head is the trunk's first hidden layer
          for (std::size_t j = 0; j < c.size(); ++j) hidden.col(c[j]) = h.col(static_cast<Index>(j));
        }
        return mlp_forward_batch(decoder, hidden, cache ? &cache->decoder : nullptr);
      }
    }
    return {};
  }

  /// Accumulates parameter gradients into `grads` and returns d loss / d
  /// conditioning (lte_dim x B; empty for baselines).
  MatrixXd backward(const Cache& cache, const MatrixXd& d_out, Actor& grads) const {
    switch (kind) {
      case PolicyKind::kEar: {
        MatrixXd d_in;
        mlp_backward_batch(decoder, cache.decoder, d_out, &grads.decoder, &d_in);
        const Index m = encoder.output_dim();
        MatrixXd d_lse = d_in.topRows(m);
        mlp_backward_batch(encoder, cache.encoder, d_lse, &grads.encoder, nullptr);
        return d_in.bottomRows(d_in.rows() - m);
      }
      case PolicyKind::kOhe:
        mlp_backward_batch(decoder, cache.decoder, d_out, &grads.decoder, nullptr);
        return {};
      case PolicyKind::kMhmt: {
        MatrixXd d_hidden;
        mlp_backward_batch(decoder, cache.decoder, d_out, &grads.decoder, &d_hidden);
        const MatrixXd& hidden = cache.decoder.activations.front();
        for (Index k = 0; k < num_tasks; ++k) {
          const auto& c = cache.head_columns[static_cast<std::size_t>(k)];
          if (c.empty()) continue;
          MatrixXd sub(d_hidden.rows(), static_cast<Index>(c.size()));
          for (std::size_t j = 0; j < c.size(); ++j) {
            const Index col = c[j];
            sub.col(static_cast<Index>(j)) =
                (d_hidden.col(col).array() * (1.0 - hidden.col(col).array().square())).matrix();
          }
          mlp_backward_batch(heads[static_cast<std::size_t>(k)], cache.heads[static_cast<std::size_t>(k)], sub,
                             &grads.heads[static_cast<std::size_t>(k)], nullptr);
        }
        return {};
      }
    }
    return {};
  }

  Actor zeros_like() const {
    Actor z = *this;
    z.encoder.set_zero();
    z.decoder.set_zero();
    z.task_encoder.weight.setZero();
    for (auto& h : z.heads) h.set_zero();
    return z;
  }

  std::vector<std::span<double>> blocks() {
    std::vector<std::span<double>> b;
    detail::append(b, encoder.blocks());
    detail::append(b, decoder.blocks());
    if (kind == PolicyKind::kEar) detail::append(b, task_encoder.blocks());
    for (auto& h : heads) detail::append(b, h.blocks());
    return b;
  }
  std::vector<std::span<const double>> blocks() const {
    std::vector<std::span<const double>> b;
    detail::append(b, encoder.blocks());
    detail::append(b, decoder.blocks());
    if (kind == PolicyKind::kEar) detail::append(b, task_encoder.blocks());
    for (const auto& h : heads) detail::append(b, h.blocks());
    return b;
  }

  void validate() const {
    if (action_dim < 1 || obs_dim < 1 || num_tasks < 1) throw ConfigError("actor dims must be positive");
    decoder.validate();
    if (decoder.output_dim() != 2 * action_dim) throw ConfigError("decoder output must be 2 * action_dim");
    switch (kind) {
      case PolicyKind::kEar:
        encoder.validate();
        if (encoder.input_dim() != obs_dim) throw ConfigError("encoder input != obs_dim");
        if (task_encoder.num_tasks() != num_tasks) throw ConfigError("task encoder has wrong task count");
        if (decoder.input_dim() != encoder.output_dim() + task_encoder.dim())
          throw ConfigError("decoder input != LSE + LTE dims");
        if (!task_encoder.weight.allFinite()) throw ConfigError("task encoder has non-finite entries");
        if (normalize_lte)
          for (Index k = 0; k < num_tasks; ++k)
            if (std::abs(task_encoder.weight.col(k).norm() - 1.0) > kUnitNormTolerance)
              throw ConfigError("stored LTE " + std::to_string(k) + " is not unit norm");
        break;
      case PolicyKind::kOhe:
        if (decoder.input_dim() != obs_dim + num_tasks) throw ConfigError("one-hot policy input != obs + N");
        break;
      case PolicyKind::kMhmt:
        if (static_cast<Index>(heads.size()) != num_tasks) throw ConfigError("multi-head policy needs N heads");
        for (const auto& h : heads) {
          h.validate();
          if (h.depth() != 1 || h.input_dim() != obs_dim || h.output_dim() != decoder.input_dim())
            throw ConfigError("multi-head input layer has wrong shape");
        }
        break;
    }
  }

  friend bool operator==(const Actor&, const Actor&) = default;
};

// ---------------------------------------------------------------------------
// Batched squashed-Gaussian sampling with its backward pass

struct SquashedBatch {
  MatrixXd action;
  MatrixXd tanh_u;  // unclamped tanh(pre_tanh)
  MatrixXd noise;
  MatrixXd std;
  MatrixXd log_std_mask;  // 1 where log_std was inside the clamp
  VectorXd log_prob;
};

inline SquashedBatch squash_forward(const MatrixXd& raw, const MatrixXd& noise) {
  const Index a = raw.rows() / 2;
  const Index b = raw.cols();
  SquashedBatch s;
  s.noise = noise;
  const auto raw_ls = raw.bottomRows(a).array();
  const ArrayXXd log_std = raw_ls.max(kLogStdMin).min(kLogStdMax);
  s.log_std_mask = ((raw_ls >= kLogStdMin) && (raw_ls <= kLogStdMax)).cast<double>().matrix();
  s.std = log_std.exp().matrix();
  const MatrixXd u = raw.topRows(a) + (s.std.array() * noise.array()).matrix();
  s.tanh_u = tanh_activation(u);
  constexpr double kEdge = 1.0 - 0x1.0p-52;
  s.action = s.tanh_u.cwiseMax(-kEdge).cwiseMin(kEdge);
  constexpr double kHalfLog2Pi = 0.91893853320467274178;
  s.log_prob.resize(b);
  for (Index j = 0; j < b; ++j) {
    double lp = 0.0;
    for (Index i = 0; i < a; ++i)
      lp += -0.5 * noise(i, j) * noise(i, j) - log_std(i, j) - kHalfLog2Pi - log_one_minus_tanh_sq(u(i, j));
    s.log_prob[j] = lp;
  }
  return s;
}

/// d loss / d raw for loss with partials d_action (a x B) and d_log_prob (B).
inline MatrixXd squash_backward(const SquashedBatch& s, const MatrixXd& d_action, const VectorXd& d_log_prob) {
  const Index a = s.action.rows();
  const Index b = s.action.cols();
  MatrixXd d_raw(2 * a, b);
  for (Index j = 0; j < b; ++j) {
    for (Index i = 0; i < a; ++i) {
      const double t = s.tanh_u(i, j);
      const double du = d_action(i, j) * (1.0 - t * t) + d_log_prob[j] * 2.0 * t;
      d_raw(i, j) = du;
      d_raw(a + i, j) = (du * s.std(i, j) * s.noise(i, j) - d_log_prob[j]) * s.log_std_mask(i, j);
    }
  }
  return d_raw;
}

// ---------------------------------------------------------------------------
// Model

struct LossReport {
  double q1_loss = 0.0;
  double q2_loss = 0.0;
  double policy_loss = 0.0;
  double alpha_loss = 0.0;
  double alpha = 0.0;
  double entropy = 0.0;  // mean -log pi over the batch
  bool skipped = false;
};

struct SacModel {
  TrainConfig config;
  EnvConstants env;
  TaskFamily family = TaskFamily::kVel1D;
  std::vector<TaskSpec> tasks;

  Actor actor;
  MlpParams q1, q2, q1_target, q2_target;
  ScalarParam log_alpha;
  double target_entropy = -1.0;

  AdamState actor_opt, q1_opt, q2_opt, alpha_opt;

  Rng env_rng, policy_rng, noise_rng, replay_rng;
  std::int64_t updates = 0;
  std::int64_t nonfinite_skips = 0;
  int consecutive_nonfinite = 0;

  static SacModel create(PolicyKind kind, const std::vector<TaskSpec>& tasks, const TrainConfig& config,
                         const EnvConstants& env = {}) {
    config.validate();
    if (tasks.empty()) throw ConfigError("task set is empty");
    for (const auto& t : tasks) {
      t.validate();
      if (t.family != tasks.front().family) throw ConfigError("task set mixes families");
    }
    SacModel m;
    m.config = config;
    m.env = env;
    m.family = tasks.front().family;
    m.tasks = tasks;
    const Rng root(config.seed);
    Rng init = root.split(Stream::kInit);
    const Index n = static_cast<Index>(tasks.size());
    const Index o = obs_dim(m.family), a = action_dim(m.family);
    m.actor = Actor::make(kind, o, a, n, config.network, config.normalize_lte, init);
    const auto qdims = detail::mlp_dims(o + a + n, config.network.q_layers, config.network.hidden_width, 1);
    m.q1 = make_mlp(qdims, init);
    m.q2 = make_mlp(qdims, init);
    m.q1_target = m.q1;
    m.q2_target = m.q2;
    m.log_alpha.value = std::log(config.initial_alpha);
    m.target_entropy = -static_cast<double>(a);
    m.actor_opt = AdamState::for_params(m.actor, {config.actor_lr});
    m.q1_opt = AdamState::for_params(m.q1, {config.critic_lr});
    m.q2_opt = AdamState::for_params(m.q2, {config.critic_lr});
    m.alpha_opt = AdamState::for_params(m.log_alpha, {config.alpha_lr});
    m.env_rng = root.split(Stream::kEnv);
    m.policy_rng = root.split(Stream::kPolicy);
    m.noise_rng = root.split(Stream::kNoise);
    m.replay_rng = root.split(Stream::kReplay);
    return m;
  }

  PolicyKind kind() const { return actor.kind; }
  Index num_tasks() const { return static_cast<Index>(tasks.size()); }
  Index obs_size() const { return obs_dim(family); }
  Index action_size() const { return action_dim(family); }
  double alpha() const { return std::exp(log_alpha.value); }

  LteSet lte_set() const {
    LteSet s;
    for (Index k = 0; k < num_tasks(); ++k) s.push_back(normalize(actor.lte(k)));
    return s;
  }

  MatrixXd critic_input(const MatrixXd& obs, const MatrixXd& act, std::span<const int> ids) const {
    MatrixXd in(obs.rows() + act.rows() + num_tasks(), obs.cols());
    in << obs, act, one_hot(ids, num_tasks());
    return in;
  }

  /// Re-checks every structural invariant (used after loading).
  void validate() const {
    config.validate();
    actor.validate();
    for (const auto* q : {&q1, &q2, &q1_target, &q2_target}) {
      q->validate();
      if (q->dims() != q1.dims()) throw ConfigError("critic shapes differ");
      if (q->input_dim() != obs_size() + action_size() + num_tasks() || q->output_dim() != 1)
        throw ConfigError("critic has wrong input/output dims");
    }
    if (!std::isfinite(log_alpha.value)) throw ConfigError("log_alpha is not finite");
    if (actor.obs_dim != obs_size() || actor.action_dim != action_size() || actor.num_tasks != num_tasks())
      throw ConfigError("actor does not match task family");
    for (const auto& t : tasks) t.validate();
  }

  friend bool operator==(const SacModel&, const SacModel&) = default;
};

/// Per-column conditioning for a batch, with optional noise injection.
struct Conditioning {
  MatrixXd values;     // what the decoder sees
  MatrixXd perturbed;  // task embedding + noise, before projection
};

inline Conditioning make_conditioning(const SacModel& m, std::span<const int> ids, bool noisy, Rng& rng) {
  Conditioning c;
  const Index d = m.actor.lte_dim();
  const Index b = static_cast<Index>(ids.size());
  if (d == 0) return c;
  c.values.resize(d, b);
  c.perturbed.resize(d, b);
  const double sigma = noisy ? m.config.noise_sigma : 0.0;
  for (Index j = 0; j < b; ++j) {
    const VectorXd z = m.actor.lte(ids[static_cast<std::size_t>(j)]);
    VectorXd v = z;
    if (sigma > 0.0) {
      do {
        v = z;
        for (Index i = 0; i < d; ++i) v[i] += sigma * rng.normal();
      } while (m.config.normalize_lte && v.norm() <= kDegenerateNorm);
    }
    c.perturbed.col(j) = v;
    c.values.col(j) = (m.config.normalize_lte && sigma > 0.0) ? normalize(v).values() : v;
  }
  return c;
}

/// Chains d loss / d conditioning back to the task-encoder columns.
inline void conditioning_backward(const SacModel& m, std::span<const int> ids, const Conditioning& c,
                                  const MatrixXd& d_values, bool noisy, TaskEncoder& grads) {
  const bool projected = m.config.normalize_lte;
  const bool perturbed = noisy && m.config.noise_sigma > 0.0;
  for (Index j = 0; j < d_values.cols(); ++j) {
    const int k = ids[static_cast<std::size_t>(j)];
    VectorXd g = d_values.col(j);
    if (projected && perturbed) g = normalize_backward(c.perturbed.col(j), g);
    if (projected) g = normalize_backward(m.actor.task_encoder.weight.col(k), g);
    grads.weight.col(k) += g;
  }
}

inline MatrixXd gaussian_matrix(Index rows, Index cols, Rng& rng) {
  MatrixXd n(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) n(i, j) = rng.normal();
  return n;
}

/// Soft value targets r + gamma * (min(Q1', Q2')(s', a') - alpha log pi(a'|s')),
/// a' drawn from the current policy; bootstrap masked only at physical
/// termination.
inline VectorXd q_target(SacModel& m, const Batch& batch) {
  const auto& ids = batch.task_ids;
  const Conditioning cond = make_conditioning(m, ids, m.config.inject_noise, m.noise_rng);
  const MatrixXd raw = m.actor.forward(batch.next_states, ids, cond.values, nullptr);
  const SquashedBatch next = squash_forward(raw, gaussian_matrix(m.action_size(), batch.size(), m.policy_rng));
  const MatrixXd in = m.critic_input(batch.next_states, next.action, ids);
  const MatrixXd t1 = mlp_forward_batch(m.q1_target, in);
  const MatrixXd t2 = mlp_forward_batch(m.q2_target, in);
  const double alpha = m.alpha();
  VectorXd y(batch.size());
  for (Index j = 0; j < batch.size(); ++j) {
    const double v = std::min(t1(0, j), t2(0, j)) - alpha * next.log_prob[j];
    y[j] = m.config.reward_scale * batch.rewards[j] + m.config.gamma * batch.not_terminal[j] * v;
  }
  return y;
}

inline void soft_update(MlpParams& target, const MlpParams& live, double tau) {
  auto t = target.blocks();
  const auto l = live.blocks();
  for (std::size_t b = 0; b < t.size(); ++b)
    for (std::size_t i = 0; i < t[b].size(); ++i) t[b][i] = tau * l[b][i] + (1.0 - tau) * t[b][i];
}

inline constexpr int kMaxConsecutiveNonFinite = 10;

/// Every gradient of one SAC step, all taken at the current parameters.
struct SacGradients {
  MlpParams q1, q2;
  Actor actor;
  ScalarParam log_alpha;
  LossReport report;
  const char* nonfinite = nullptr;  // which quantity was not finite, if any
};

/// Critic regression to the soft targets, the reparameterized policy loss
/// through the (noisy) embeddings against the pre-step critics, and the
/// temperature loss. Consumes policy and noise draws; parameters are untouched.
inline SacGradients sac_gradients(SacModel& m, const Batch& batch) {
  if (batch.size() < 2) throw ConfigError("batch size must be >= 2");
  const auto& ids = batch.task_ids;
  const double bsz = static_cast<double>(batch.size());
  SacGradients g;
  LossReport& rep = g.report;
  rep.alpha = m.alpha();

  // Critics.
  const VectorXd y = q_target(m, batch);
  const MatrixXd q_in = m.critic_input(batch.states, batch.actions, ids);
  MlpCache c1, c2;
  const MatrixXd q1v = mlp_forward_batch(m.q1, q_in, &c1);
  const MatrixXd q2v = mlp_forward_batch(m.q2, q_in, &c2);
  const MatrixXd r1 = q1v - y.transpose();
  const MatrixXd r2 = q2v - y.transpose();
  rep.q1_loss = 0.5 * r1.squaredNorm() / bsz;
  rep.q2_loss = 0.5 * r2.squaredNorm() / bsz;
  if (!std::isfinite(rep.q1_loss) || !std::isfinite(rep.q2_loss)) {
    g.nonfinite = "critic loss";
    return g;
  }
  g.q1 = m.q1.zeros_like();
  g.q2 = m.q2.zeros_like();
  mlp_backward_batch(m.q1, c1, r1 / bsz, &g.q1, nullptr);
  mlp_backward_batch(m.q2, c2, r2 / bsz, &g.q2, nullptr);

  // Policy.
  const Conditioning cond = make_conditioning(m, ids, m.config.inject_noise, m.noise_rng);
  Actor::Cache ac;
  const MatrixXd raw = m.actor.forward(batch.states, ids, cond.values, &ac);
  const SquashedBatch pi = squash_forward(raw, gaussian_matrix(m.action_size(), batch.size(), m.policy_rng));
  const MatrixXd pi_in = m.critic_input(batch.states, pi.action, ids);
  MlpCache p1, p2;
  const MatrixXd pq1 = mlp_forward_batch(m.q1, pi_in, &p1);
  const MatrixXd pq2 = mlp_forward_batch(m.q2, pi_in, &p2);
  const double alpha = m.alpha();
  MatrixXd sel1(1, batch.size()), sel2(1, batch.size());
  double policy_loss = 0.0, mean_log_prob = 0.0;
  for (Index j = 0; j < batch.size(); ++j) {
    const bool first = pq1(0, j) <= pq2(0, j);
    sel1(0, j) = first ? -1.0 / bsz : 0.0;
    sel2(0, j) = first ? 0.0 : -1.0 / bsz;
    policy_loss += alpha * pi.log_prob[j] - std::min(pq1(0, j), pq2(0, j));
    mean_log_prob += pi.log_prob[j];
  }
  rep.policy_loss = policy_loss / bsz;
  mean_log_prob /= bsz;
  rep.entropy = -mean_log_prob;
  rep.alpha_loss = -alpha * (mean_log_prob + m.target_entropy);
  if (!std::isfinite(rep.policy_loss) || !std::isfinite(rep.alpha_loss)) {
    g.nonfinite = "policy loss";
    return g;
  }

  MatrixXd d_in1, d_in2;
  mlp_backward_batch(m.q1, p1, sel1, nullptr, &d_in1);
  mlp_backward_batch(m.q2, p2, sel2, nullptr, &d_in2);
  const MatrixXd d_action = (d_in1 + d_in2).middleRows(m.obs_size(), m.action_size());
  const VectorXd d_log_prob = VectorXd::Constant(batch.size(), alpha / bsz);
  const MatrixXd d_raw = squash_backward(pi, d_action, d_log_prob);
  g.actor = m.actor.zeros_like();
  const MatrixXd d_cond = m.actor.backward(ac, d_raw, g.actor);
  if (m.kind() == PolicyKind::kEar)
    conditioning_backward(m, ids, cond, d_cond, m.config.inject_noise, g.actor.task_encoder);

  // d J(alpha) / d log_alpha = alpha * E[-log pi - H_target]
  g.log_alpha.value = alpha * (-mean_log_prob - m.target_entropy);

  for (const auto* q : {&g.q1, &g.q2})
    for (auto blk : q->blocks())
      for (double v : blk)
        if (!std::isfinite(v)) g.nonfinite = "critic gradient";
  for (auto blk : std::as_const(g.actor).blocks())
    for (double v : blk)
      if (!std::isfinite(v)) g.nonfinite = "actor gradient";
  if (!std::isfinite(g.log_alpha.value)) g.nonfinite = "alpha gradient";
  return g;
}

/// One SAC step: gradients, then Adam on both critics, the actor (followed by
/// re-projecting the task embeddings) and the temperature, then Polyak
/// averaging of the critic targets. A non-finite step is skipped; too many in
/// a row abort with NonFiniteError.
inline LossReport sac_update(SacModel& m, const Batch& batch) {
  SacGradients g = sac_gradients(m, batch);
  if (g.nonfinite) {
    ++m.nonfinite_skips;
    if (++m.consecutive_nonfinite >= kMaxConsecutiveNonFinite)
      throw NonFiniteError(std::string("sac_update: ") + g.nonfinite + " non-finite for " +
                           std::to_string(kMaxConsecutiveNonFinite) + " consecutive steps");
    g.report.skipped = true;
    return g.report;
  }
  adam_step(m.q1, g.q1, m.q1_opt);
  adam_step(m.q2, g.q2, m.q2_opt);
  adam_step(m.actor, g.actor, m.actor_opt);
  if (m.kind() == PolicyKind::kEar && m.config.normalize_lte) m.actor.task_encoder.renormalize();
  adam_step(m.log_alpha, g.log_alpha, m.alpha_opt);
  soft_update(m.q1_target, m.q1, m.config.tau);
  soft_update(m.q2_target, m.q2, m.config.tau);
  m.consecutive_nonfinite = 0;
  ++m.updates;
  return g.report;
}

// ---------------------------------------------------------------------------
// Acting and evaluation

/// What the policy is conditioned on for one rollout.
struct PolicyCondition {
  int task_id = 0;  // baselines, and the default embedding for the EAR policy
  std::optional<VectorXd> embedding;  // EAR: overrides the task's own LTE
};

struct PolicyAction {
  VectorXd action;
  double log_prob = 0.0;
};

/// Single-observation action. `noisy` injects LTE noise (EAR); `rng` drives
/// both that noise and, unless `deterministic`, the action sample.
inline PolicyAction policy_forward(const SacModel& m, const VectorXd& obs, const PolicyCondition& cond, bool noisy,
                                   bool deterministic, Rng& rng) {
  if (cond.task_id < 0 || cond.task_id >= m.num_tasks()) throw ConfigError("task id out of range");
  const int ids[1] = {cond.task_id};
  MatrixXd z;
  if (m.kind() == PolicyKind::kEar) {
    VectorXd base = cond.embedding ? *cond.embedding : m.actor.lte(cond.task_id);
    if (base.size() != m.actor.lte_dim()) throw ConfigError("embedding dimension mismatch");
    if (noisy && m.config.noise_sigma > 0.0) {
      if (m.config.normalize_lte) {
        base = inject_noise(normalize(base), m.config.noise_sigma, rng).values();
      } else {
        for (Index i = 0; i < base.size(); ++i) base[i] += m.config.noise_sigma * rng.normal();
      }
    }
    z = base;
  }
  const VectorXd raw = m.actor.forward(obs, ids, z, nullptr).col(0);
  const auto head = GaussianPolicyOutput::from_raw(raw);
  const auto s = policy_sample(head, rng, deterministic);
  return {s.action, s.log_prob};
}

struct EpisodeTrace {
  double total_return = 0.0;
  EpisodeMetrics metrics;
  std::vector<VectorXd> observations;  // filled when requested, includes the initial observation
};

struct EvalReport {
  double mean_return = 0.0;
  double mean_metric = 0.0;  // family's primary metric
  EpisodeMetrics mean_metrics;
  std::vector<EpisodeTrace> episodes;

  double return_variance() const {
    if (episodes.empty()) return 0.0;
    double v = 0.0;
    for (const auto& e : episodes) v += (e.total_return - mean_return) * (e.total_return - mean_return);
    return v / static_cast<double>(episodes.size());
  }
};

struct EvalOptions {
  int episodes = 1;
  std::uint64_t seed = 0;
  bool record_observations = false;
  double embedding_jitter = 0.0;  // per-episode LTE perturbation (robustness probes)
};

/// Deterministic-policy rollouts. Episode e resets from its own stream, so a
/// report depends only on (model, condition, task, options).
inline EvalReport evaluate(const SacModel& m, const PolicyCondition& cond, const TaskSpec& task,
                           const EvalOptions& opt) {
  if (opt.episodes < 1) throw ConfigError("evaluation needs at least one episode");
  if (task.family != m.family) throw ConfigError("task family does not match the model");
  EvalReport rep;
  const Rng base = Rng(opt.seed).split(Stream::kEval);
  for (int e = 0; e < opt.episodes; ++e) {
    Rng rng = base.split(static_cast<std::uint64_t>(e));
    PolicyCondition c = cond;
    if (opt.embedding_jitter > 0.0 && m.kind() == PolicyKind::kEar) {
      VectorXd z = c.embedding ? *c.embedding : m.actor.lte(c.task_id);
      if (m.config.normalize_lte) {
        z = inject_noise(normalize(z), opt.embedding_jitter, rng).values();
      } else {
        for (Index i = 0; i < z.size(); ++i) z[i] += opt.embedding_jitter * rng.normal();
      }
      c.embedding = z;
    }
    PointMassEnv env(task, m.env);
    env.reset(rng);
    MetricAccumulator acc(task, m.env.max_episode_frames);
    EpisodeTrace tr;
    if (opt.record_observations) tr.observations.push_back(env.observation());
    for (;;) {
      const auto a = policy_forward(m, env.observation(), c, false, true, rng);
      const StepResult r = env.step(a.action);
      tr.total_return += r.reward;
      acc.add(r.next_state);
      if (opt.record_observations) tr.observations.push_back(env.observation());
      if (r.done) break;
    }
    tr.metrics = acc.finish();
    rep.episodes.push_back(std::move(tr));
  }
  const double n = static_cast<double>(rep.episodes.size());
  for (const auto& e : rep.episodes) {
    rep.mean_return += e.total_return / n;
    rep.mean_metric += e.metrics.primary(task) / n;
    rep.mean_metrics.mean_velocity += e.metrics.mean_velocity / n;
    rep.mean_metrics.tracking_error += e.metrics.tracking_error / n;
    rep.mean_metrics.projected_speed += e.metrics.projected_speed / n;
    rep.mean_metrics.perpendicular_speed += e.metrics.perpendicular_speed / n;
    rep.mean_metrics.horizontal_speed += e.metrics.horizontal_speed / n;
    rep.mean_metrics.mean_height += e.metrics.mean_height / n;
  }
  // Heading of the pooled mean velocity.
  if (task.family == TaskFamily::kDir2D) {
    double sx = 0, sy = 0;
    for (const auto& e : rep.episodes) {
      const double r = e.metrics.direction_degrees * std::numbers::pi / 180.0;
      sx += std::cos(r);
      sy += std::sin(r);
    }
    double d = std::atan2(sy, sx) * 180.0 / std::numbers::pi;
    rep.mean_metrics.direction_degrees = d < 0 ? d + 360.0 : d;
    rep.mean_metric = rep.mean_metrics.direction_degrees;
  }
  return rep;
}

/// Evaluates the EAR policy conditioned on an arbitrary embedding.
inline EvalReport evaluate_policy(const SacModel& m, const VectorXd& embedding, const TaskSpec& task, int episodes,
                                  std::uint64_t seed = 0) {
  if (m.kind() != PolicyKind::kEar) throw ConfigError("embedding evaluation needs the embedding policy");
  return evaluate(m, {0, embedding}, task, {episodes, seed});
}

inline EvalReport evaluate_policy(const SacModel& m, const LatentTaskEmbedding& lte, const TaskSpec& task,
                                  int episodes, std::uint64_t seed = 0) {
  return evaluate_policy(m, lte.values(), task, episodes, seed);
}

/// Evaluates training task k with the model's own conditioning.
inline EvalReport evaluate_task(const SacModel& m, int task_id, int episodes, std::uint64_t seed = 0) {
  if (task_id < 0 || task_id >= m.num_tasks()) throw ConfigError("task id out of range");
  return evaluate(m, {task_id, std::nullopt}, m.tasks[static_cast<std::size_t>(task_id)], {episodes, seed});
}

// ---------------------------------------------------------------------------
// Training loop

struct EpochRecord {
  int epoch = 0;
  std::vector<double> mean_return;  // per task
  std::vector<double> metric;       // per task, primary metric
  LossReport losses;                // mean over the epoch's updates
};

struct TrainingResult {
  SacModel model;
  std::vector<EpochRecord> curve;
  std::size_t buffer_size = 0;
  std::size_t transitions_collected = 0;
};

/// One stochastic episode per task, stepped in lockstep, appended to `buffer`.
inline void collect_round(SacModel& m, ReplayBuffer& buffer, bool noisy) {
  const Index n = m.num_tasks();
  std::vector<PointMassEnv> envs;
  for (const auto& t : m.tasks) envs.emplace_back(t, m.env);
  for (auto& e : envs) e.reset(m.env_rng);
  std::vector<int> ids(static_cast<std::size_t>(n));
  for (Index k = 0; k < n; ++k) ids[static_cast<std::size_t>(k)] = static_cast<int>(k);
  for (bool done = false; !done;) {
    MatrixXd obs(m.obs_size(), n);
    for (Index k = 0; k < n; ++k) obs.col(k) = envs[static_cast<std::size_t>(k)].observation();
    const Conditioning cond = make_conditioning(m, ids, noisy, m.noise_rng);
    const MatrixXd raw = m.actor.forward(obs, ids, cond.values, nullptr);
    const SquashedBatch s = squash_forward(raw, gaussian_matrix(m.action_size(), n, m.policy_rng));
    for (Index k = 0; k < n; ++k) {
      auto& env = envs[static_cast<std::size_t>(k)];
      const StepResult r = env.step(s.action.col(k));
      buffer.add({obs.col(k), s.action.col(k), r.reward, env.observation(), r.done && !r.truncated, r.truncated,
                  static_cast<int>(k)});
      done = r.done;
    }
  }
}

using EpochCallback = std::function<void(const EpochRecord&)>;

inline TrainingResult train(PolicyKind kind, const TrainConfig& config, const std::vector<TaskSpec>& tasks,
                            const EnvConstants& env = {}, const EpochCallback& on_epoch = {}) {
  TrainingResult res{SacModel::create(kind, tasks, config, env), {}, 0, 0};
  SacModel& m = res.model;
  ReplayBuffer buffer(config.replay_capacity);
  for (int e = 0; e < config.pretrain_epochs; ++e) collect_round(m, buffer, config.noisy_collection);
  const std::uint64_t eval_seed = config.seed ^ 0xE7A1ULL;
  for (int epoch = 0; epoch < config.train_epochs; ++epoch) {
    if (config.collect_each_epoch) collect_round(m, buffer, config.noisy_collection);
    EpochRecord rec;
    rec.epoch = epoch;
    int counted = 0;
    for (int it = 0; it < config.optimization_times; ++it) {
      const Batch batch = buffer.sample(static_cast<std::size_t>(config.batch_size), m.replay_rng);
      const LossReport l = sac_update(m, batch);
      if (l.skipped) continue;
      ++counted;
      rec.losses.q1_loss += l.q1_loss;
      rec.losses.q2_loss += l.q2_loss;
      rec.losses.policy_loss += l.policy_loss;
      rec.losses.alpha_loss += l.alpha_loss;
      rec.losses.entropy += l.entropy;
    }
    if (counted > 0) {
      const double c = counted;
      rec.losses.q1_loss /= c;
      rec.losses.q2_loss /= c;
      rec.losses.policy_loss /= c;
      rec.losses.alpha_loss /= c;
      rec.losses.entropy /= c;
    }
    rec.losses.alpha = m.alpha();
    if ((epoch + 1) % config.eval_interval == 0 || epoch + 1 == config.train_epochs) {
      for (int k = 0; k < m.num_tasks(); ++k) {
        const EvalReport r = evaluate_task(m, k, config.eval_episodes, eval_seed);
        rec.mean_return.push_back(r.mean_return);
        rec.metric.push_back(r.mean_metric);
      }
    }
    if (on_epoch) on_epoch(rec);
    res.curve.push_back(std::move(rec));
  }
  res.buffer_size = buffer.size();
  res.transitions_collected = buffer.total_added();
  return res;
}

inline TrainingResult train_multitask(const TrainConfig& config, const std::vector<TaskSpec>& tasks,
                                      const EnvConstants& env = {}, const EpochCallback& on_epoch = {}) {
  return train(PolicyKind::kEar, config, tasks, env, on_epoch);
}

inline TrainingResult train_baseline(PolicyKind kind, const TrainConfig& config, const std::vector<TaskSpec>& tasks,
                                     const EnvConstants& env = {}, const EpochCallback& on_epoch = {}) {
  if (kind == PolicyKind::kEar) throw ConfigError("baseline kind must be ohe or mhmt");
  return train(kind, config, tasks, env, on_epoch);
}

/// Mean deterministic return over all training tasks.
inline double mean_task_return(const SacModel& m, int episodes, std::uint64_t seed = 0) {
  double s = 0.0;
  for (int k = 0; k < m.num_tasks(); ++k) s += evaluate_task(m, k, episodes, seed).mean_return;
  return s / static_cast<double>(m.num_tasks());
}

}  // namespace latent_motor
