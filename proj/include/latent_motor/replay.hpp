#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <string>
#include <vector>

#include "latent_motor/error.hpp"
#include "latent_motor/rng.hpp"

namespace latent_motor {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

struct Transition {
  VectorXd state;
  VectorXd action;
  double reward = 0.0;
  VectorXd next_state;
  bool terminal = false;  // physical termination; masks the bootstrap
  bool truncated = false; // time limit; bootstraps through
  int task_id = 0;
};

/// Column-stacked minibatch.
struct Batch {
  MatrixXd states;       // obs_dim x B
  MatrixXd actions;      // act_dim x B
  VectorXd rewards;      // B
  MatrixXd next_states;  // obs_dim x B
  VectorXd not_terminal; // B, 0 where the bootstrap is masked
  std::vector<int> task_ids;

  Index size() const { return rewards.size(); }
};

/// FIFO ring buffer with uniform sampling over the current contents.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity = 100000) : capacity_(capacity) {
    if (capacity == 0) throw ConfigError("replay capacity must be positive");
    data_.reserve(std::min<std::size_t>(capacity, 1 << 16));
  }

  void add(Transition t) {
    if (!t.state.allFinite() || !t.action.allFinite() || !t.next_state.allFinite() || !std::isfinite(t.reward))
      throw NonFiniteError("refusing non-finite transition");
    if (data_.size() < capacity_) {
      data_.push_back(std::move(t));
    } else {
      data_[head_] = std::move(t);
      head_ = (head_ + 1) % capacity_;
    }
    ++total_added_;
  }

  std::size_t size() const { return data_.size(); }
  std::size_t capacity() const { return capacity_; }
  std::size_t total_added() const { return total_added_; }
  bool empty() const { return data_.empty(); }

  /// Oldest-first access.
  const Transition& at(std::size_t i) const { return data_[(head_ + i) % data_.size()]; }

  std::size_t sample_index(Rng& rng) const { return static_cast<std::size_t>(rng.index(data_.size())); }

  Batch sample(std::size_t batch_size, Rng& rng) const {
    if (data_.empty()) throw ConfigError("cannot sample from an empty replay buffer");
    const auto& first = data_.front();
    const Index b = static_cast<Index>(batch_size);
    Batch batch{MatrixXd(first.state.size(), b), MatrixXd(first.action.size(), b), VectorXd(b),
                MatrixXd(first.state.size(), b), VectorXd(b), std::vector<int>(batch_size)};
    for (Index i = 0; i < b; ++i) {
      const Transition& t = data_[sample_index(rng)];
      batch.states.col(i) = t.state;
      batch.actions.col(i) = t.action;
      batch.rewards[i] = t.reward;
      batch.next_states.col(i) = t.next_state;
      batch.not_terminal[i] = t.terminal ? 0.0 : 1.0;
      batch.task_ids[static_cast<std::size_t>(i)] = t.task_id;
    }
    return batch;
  }

 private:
  std::size_t capacity_;
  std::vector<Transition> data_;
  std::size_t head_ = 0;  // oldest element once full
  std::size_t total_added_ = 0;
};

}  // namespace latent_motor
