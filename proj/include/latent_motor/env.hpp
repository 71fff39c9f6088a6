#pragma once

// Point-mass analogs of the velocity, direction and run/jump locomotion
// benchmarks. Actions are thrust commands in [-1, 1]^dim.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <string_view>
#include <vector>

#include "latent_motor/error.hpp"
#include "latent_motor/rng.hpp"

namespace latent_motor {

using Eigen::Index;
using Eigen::Vector2d;
using Eigen::VectorXd;

enum class TaskFamily { kVel1D, kDir2D, kRunJump };
enum class Modality { kRun, kJump };

inline std::string_view to_string(TaskFamily f) {
  switch (f) {
    case TaskFamily::kVel1D: return "vel1d";
    case TaskFamily::kDir2D: return "dir2d";
    case TaskFamily::kRunJump: return "runjump";
  }
  return "?";
}

inline TaskFamily family_from_string(std::string_view s) {
  if (s == "vel1d") return TaskFamily::kVel1D;
  if (s == "dir2d") return TaskFamily::kDir2D;
  if (s == "runjump") return TaskFamily::kRunJump;
  throw ConfigError("unknown task family '" + std::string(s) + "'");
}

struct EnvConstants {
  double dt = 0.05;
  double force_per_mass = 2.0;
  double drag = 0.5;
  double gravity = 9.8;
  double jump_speed = 5.0;  // take-off speed per unit vertical action, applied only on the ground
  double reset_velocity = 0.05;
  int max_episode_frames = 200;

  friend bool operator==(const EnvConstants&, const EnvConstants&) = default;
};

struct TaskSpec {
  TaskFamily family = TaskFamily::kVel1D;
  double target_velocity = 0.0;        // Vel1D, RunJump run tasks
  Vector2d direction{1.0, 0.0};        // Dir2D, unit norm
  Modality modality = Modality::kRun;  // RunJump only
  double modality_weight = 0.0;        // RunJump jump tasks: weight on height
  double ctrl_cost = 1e-3;

  void validate() const {
    if (!(ctrl_cost >= 0.0) || !std::isfinite(ctrl_cost)) throw ConfigError("ctrl_cost must be finite and >= 0");
    switch (family) {
      case TaskFamily::kVel1D:
        if (!std::isfinite(target_velocity)) throw ConfigError("target velocity must be finite");
        break;
      case TaskFamily::kDir2D:
        if (!direction.allFinite() || std::abs(direction.norm() - 1.0) > 1e-9)
          throw ConfigError("direction must be a unit 2-vector");
        break;
      case TaskFamily::kRunJump:
        if (!std::isfinite(target_velocity)) throw ConfigError("target velocity must be finite");
        if (!(modality_weight >= 0.0) || !std::isfinite(modality_weight))
          throw ConfigError("modality weight must be finite and >= 0");
        break;
    }
  }

  double direction_degrees() const {
    double d = std::atan2(direction.y(), direction.x()) * 180.0 / std::numbers::pi;
    return d < 0 ? d + 360.0 : d;
  }

  friend bool operator==(const TaskSpec&, const TaskSpec&) = default;
};

inline TaskSpec vel_task(double v, double ctrl_cost = 1e-3) {
  return {TaskFamily::kVel1D, v, {1.0, 0.0}, Modality::kRun, 0.0, ctrl_cost};
}
inline TaskSpec dir_task(double degrees, double ctrl_cost = 1e-3) {
  const double r = degrees * std::numbers::pi / 180.0;
  return {TaskFamily::kDir2D, 0.0, {std::cos(r), std::sin(r)}, Modality::kRun, 0.0, ctrl_cost};
}
inline TaskSpec run_task(double v, double ctrl_cost = 1e-3) {
  return {TaskFamily::kRunJump, v, {1.0, 0.0}, Modality::kRun, 0.0, ctrl_cost};
}
inline TaskSpec jump_task(double weight, double ctrl_cost = 1e-3) {
  return {TaskFamily::kRunJump, 0.0, {1.0, 0.0}, Modality::kJump, weight, ctrl_cost};
}

inline Index action_dim(TaskFamily f) { return f == TaskFamily::kVel1D ? 1 : 2; }
inline Index obs_dim(TaskFamily f) {
  switch (f) {
    case TaskFamily::kVel1D: return 1;
    case TaskFamily::kDir2D: return 2;
    case TaskFamily::kRunJump: return 3;
  }
  return 0;
}

/// Position and velocity; RunJump uses (x, height).
struct EnvState {
  VectorXd position;
  VectorXd velocity;
  int step_count = 0;

  friend bool operator==(const EnvState& a, const EnvState& b) {
    return a.position == b.position && a.velocity == b.velocity && a.step_count == b.step_count;
  }
};

/// Vel1D: [v]; Dir2D: [vx, vy]; RunJump: [vx, height, vy].
inline VectorXd observe(const EnvState& s, TaskFamily f) {
  if (f == TaskFamily::kRunJump) {
    VectorXd o(3);
    o << s.velocity[0], s.position[1], s.velocity[1];
    return o;
  }
  return s.velocity;
}

struct StepResult {
  EnvState next_state;
  double reward = 0.0;
  bool done = false;
  bool truncated = false;
  bool action_clipped = false;
};

inline EnvState env_reset(const TaskSpec& task, Rng& rng, const EnvConstants& c = {}) {
  task.validate();
  const Index n = action_dim(task.family);
  EnvState s{VectorXd::Zero(n), VectorXd::Zero(n), 0};
  if (task.family != TaskFamily::kRunJump)
    for (Index i = 0; i < n; ++i) s.velocity[i] = rng.uniform(-c.reset_velocity, c.reset_velocity);
  return s;
}

/// Reward of a transition, given the post-step state.
inline double task_reward(const TaskSpec& task, const EnvState& next, const VectorXd& action) {
  const double ctrl = task.ctrl_cost * action.squaredNorm();
  switch (task.family) {
    case TaskFamily::kVel1D:
      return -std::abs(next.velocity[0] - task.target_velocity) - ctrl;
    case TaskFamily::kDir2D: {
      const Vector2d v = next.velocity.head<2>();
      const Vector2d perp(-task.direction.y(), task.direction.x());
      return v.dot(task.direction) - std::abs(v.dot(perp)) - ctrl;
    }
    case TaskFamily::kRunJump:
      if (task.modality == Modality::kJump) return task.modality_weight * next.position[1] - ctrl;
      return -std::abs(next.velocity[0] - task.target_velocity) - ctrl;
  }
  return 0.0;
}

/// Semi-implicit Euler step of the thrust/drag point mass. RunJump adds
/// gravity, a ground-only vertical take-off impulse and inelastic contact.
inline StepResult env_step(const EnvState& state, const VectorXd& action, const TaskSpec& task,
                           const EnvConstants& c = {}) {
  const Index n = action_dim(task.family);
  if (action.size() != n) throw ConfigError("action has wrong dimension for task family");
  if (state.velocity.size() != n || state.position.size() != n) throw ConfigError("state dimension mismatch");
  StepResult r;
  VectorXd a = action.cwiseMax(-1.0).cwiseMin(1.0);
  r.action_clipped = !(a == action);
  EnvState& s = r.next_state;
  s = state;
  if (task.family == TaskFamily::kRunJump) {
    const bool grounded = state.position[1] <= 0.0;
    s.velocity[0] += (a[0] * c.force_per_mass - c.drag * state.velocity[0]) * c.dt;
    s.velocity[1] += (-c.gravity - c.drag * state.velocity[1]) * c.dt;
    if (grounded) s.velocity[1] += std::max(a[1], 0.0) * c.jump_speed;
    s.position += s.velocity * c.dt;
    if (s.position[1] <= 0.0) {
      s.position[1] = 0.0;
      s.velocity[1] = 0.0;
    }
  } else {
    s.velocity += (a * c.force_per_mass - c.drag * state.velocity) * c.dt;
    s.position += s.velocity * c.dt;
  }
  s.step_count = state.step_count + 1;
  r.reward = task_reward(task, s, a);
  r.truncated = s.step_count >= c.max_episode_frames;
  r.done = r.truncated;
  return r;
}

/// Stateful wrapper that counts clipped actions.
class PointMassEnv {
 public:
  PointMassEnv(TaskSpec task, EnvConstants constants = {}) : task_(task), constants_(constants) { task_.validate(); }

  const EnvState& reset(Rng& rng) {
    state_ = env_reset(task_, rng, constants_);
    return state_;
  }

  StepResult step(const VectorXd& action) {
    StepResult r = env_step(state_, action, task_, constants_);
    if (r.action_clipped) ++clip_warnings_;
    state_ = r.next_state;
    return r;
  }

  VectorXd observation() const { return observe(state_, task_.family); }
  const EnvState& state() const { return state_; }
  const TaskSpec& task() const { return task_; }
  long clip_warnings() const { return clip_warnings_; }

 private:
  TaskSpec task_;
  EnvConstants constants_;
  EnvState state_;
  long clip_warnings_ = 0;
};

struct TaskSetSpec {
  int count = 0;  // 0 -> family default
  double lo = 0.5;
  double hi = 2.5;
  int jump_count = 2;
  double jump_weight_lo = 1.0;
  double jump_weight_hi = 2.0;
  double ctrl_cost = 1e-3;

  static TaskSetSpec defaults(TaskFamily f) {
    TaskSetSpec s;
    switch (f) {
      case TaskFamily::kVel1D: s.count = 5; s.lo = 0.5; s.hi = 2.5; break;
      case TaskFamily::kDir2D: s.count = 8; s.lo = 0.0; s.hi = 360.0; break;
      case TaskFamily::kRunJump: s.count = 4; s.lo = 0.5; s.hi = 2.0; break;
    }
    return s;
  }

  friend bool operator==(const TaskSetSpec&, const TaskSetSpec&) = default;
};

inline std::vector<double> linspace(double lo, double hi, int k) {
  std::vector<double> v;
  for (int i = 0; i < k; ++i) v.push_back(k == 1 ? lo : lo + (hi - lo) * i / (k - 1));
  return v;
}

/// Vel1D: `count` velocities evenly spaced over [lo, hi]. Dir2D: `count`
/// directions evenly spaced over [0, 360). RunJump: `count` run velocities
/// over [lo, hi] followed by `jump_count` jump weights.
inline std::vector<TaskSpec> make_task_set(TaskFamily family, const TaskSetSpec& spec) {
  if (spec.count < 2) throw ConfigError("task set needs at least 2 tasks");
  std::vector<TaskSpec> tasks;
  switch (family) {
    case TaskFamily::kVel1D:
      for (double v : linspace(spec.lo, spec.hi, spec.count)) tasks.push_back(vel_task(v, spec.ctrl_cost));
      break;
    case TaskFamily::kDir2D:
      for (int i = 0; i < spec.count; ++i) tasks.push_back(dir_task(360.0 * i / spec.count, spec.ctrl_cost));
      break;
    case TaskFamily::kRunJump:
      if (spec.jump_count < 1) throw ConfigError("run/jump task set needs at least one jump task");
      for (double v : linspace(spec.lo, spec.hi, spec.count)) tasks.push_back(run_task(v, spec.ctrl_cost));
      for (double w : linspace(spec.jump_weight_lo, spec.jump_weight_hi, spec.jump_count))
        tasks.push_back(jump_task(w, spec.ctrl_cost));
      break;
  }
  for (const auto& t : tasks) t.validate();
  return tasks;
}

inline std::vector<TaskSpec> make_task_set(TaskFamily family) {
  return make_task_set(family, TaskSetSpec::defaults(family));
}

// ---------------------------------------------------------------------------
// Per-episode behaviour metrics, averaged over the second half of the episode
// (after the start-up transient).

struct EpisodeMetrics {
  double mean_velocity = 0.0;       // Vel1D / RunJump: mean v_x
  double tracking_error = 0.0;      // mean |v_x - v*|
  double projected_speed = 0.0;     // Dir2D: mean v . u
  double perpendicular_speed = 0.0; // Dir2D: mean |v . u_perp|
  double direction_degrees = 0.0;   // Dir2D: heading of the mean velocity
  double horizontal_speed = 0.0;    // RunJump: mean |v_x|
  double mean_height = 0.0;         // RunJump

  /// The family's headline metric: velocity, heading, or height for jump tasks.
  double primary(const TaskSpec& t) const {
    switch (t.family) {
      case TaskFamily::kVel1D: return mean_velocity;
      case TaskFamily::kDir2D: return direction_degrees;
      case TaskFamily::kRunJump: return t.modality == Modality::kJump ? mean_height : mean_velocity;
    }
    return 0.0;
  }
};

class MetricAccumulator {
 public:
  MetricAccumulator(const TaskSpec& task, int episode_frames) : task_(task), start_(episode_frames / 2) {}

  void add(const EnvState& s) {
    if (s.step_count <= start_) return;
    ++n_;
    const double vx = s.velocity[0];
    vx_ += vx;
    err_ += std::abs(vx - task_.target_velocity);
    hspeed_ += std::abs(vx);
    if (task_.family == TaskFamily::kDir2D) {
      const Vector2d v = s.velocity.head<2>();
      const Vector2d perp(-task_.direction.y(), task_.direction.x());
      proj_ += v.dot(task_.direction);
      perp_ += std::abs(v.dot(perp));
      vy_ += v.y();
    }
    if (task_.family == TaskFamily::kRunJump) height_ += s.position[1];
  }

  EpisodeMetrics finish() const {
    EpisodeMetrics m;
    if (n_ == 0) return m;
    const double n = static_cast<double>(n_);
    m.mean_velocity = vx_ / n;
    m.tracking_error = err_ / n;
    m.projected_speed = proj_ / n;
    m.perpendicular_speed = perp_ / n;
    double d = std::atan2(vy_ / n, vx_ / n) * 180.0 / std::numbers::pi;
    m.direction_degrees = d < 0 ? d + 360.0 : d;
    m.horizontal_speed = hspeed_ / n;
    m.mean_height = height_ / n;
    return m;
  }

 private:
  TaskSpec task_;
  int start_;
  long n_ = 0;
  double vx_ = 0, vy_ = 0, err_ = 0, proj_ = 0, perp_ = 0, hspeed_ = 0, height_ = 0;
};

}  // namespace latent_motor
