#pragma once

// JSON experiment configuration. Every object rejects keys it does not know.

#include <cstdint>
#include <fstream>
#include <initializer_list>
#include <sstream>
#include <string>

#include "json.hpp"

#include "latent_motor/adaptation.hpp"
#include "latent_motor/env.hpp"
#include "latent_motor/error.hpp"
#include "latent_motor/sac.hpp"

namespace latent_motor {

using Json = nlohmann::json;

namespace detail {

inline void require_object(const Json& j, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
}

inline void check_keys(const Json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  require_object(j, where);
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

template <class T>
void read(const Json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(where + "." + key + ": wrong type");
  }
}

}  // namespace detail

struct AnalysisOptions {
  int sphere_resolution = 8;
  int sweep_points = 11;
  int eval_episodes = 1;
  double search_tolerance = 0.1;
  int composition_grid = 9;

  void validate() const {
    if (sphere_resolution < 2) throw ConfigError("analysis.sphere_resolution must be >= 2");
    if (sweep_points < 2) throw ConfigError("analysis.sweep_points must be >= 2");
    if (eval_episodes < 1) throw ConfigError("analysis.eval_episodes must be >= 1");
    if (!(search_tolerance > 0)) throw ConfigError("analysis.search_tolerance must be positive");
    if (composition_grid < 2) throw ConfigError("analysis.composition_grid must be >= 2");
  }

  friend bool operator==(const AnalysisOptions&, const AnalysisOptions&) = default;
};

struct ExperimentConfig {
  TaskFamily family = TaskFamily::kVel1D;
  TaskSetSpec task_set = TaskSetSpec::defaults(TaskFamily::kVel1D);
  EnvConstants env;
  TrainConfig train;
  CemConfig cem;
  AnalysisOptions analysis;
  std::string output_dir = "runs";
  std::uint64_t seed = 0;

  void validate() const {
    train.validate();
    cem.validate();
    analysis.validate();
    if (!(env.dt > 0) || !(env.force_per_mass > 0) || !(env.drag >= 0) || !(env.gravity >= 0) ||
        !(env.jump_speed >= 0) || !(env.reset_velocity >= 0) || env.max_episode_frames < 2)
      throw ConfigError("env constants out of range");
    (void)make_task_set(family, task_set);
  }

  std::vector<TaskSpec> tasks() const { return make_task_set(family, task_set); }

  /// Training config with the experiment seed applied.
  TrainConfig train_config() const {
    TrainConfig c = train;
    c.seed = seed;
    return c;
  }
};

inline Json to_json(const NetworkConfig& n) {
  return {{"hidden_width", n.hidden_width}, {"lse_dim", n.lse_dim},       {"lte_dim", n.lte_dim},
          {"encoder_layers", n.encoder_layers}, {"decoder_layers", n.decoder_layers}, {"q_layers", n.q_layers}};
}

inline NetworkConfig network_from_json(const Json& j) {
  const std::string w = "train.network";
  detail::check_keys(j, w, {"hidden_width", "lse_dim", "lte_dim", "encoder_layers", "decoder_layers", "q_layers"});
  NetworkConfig n;
  detail::read(j, "hidden_width", n.hidden_width, w);
  detail::read(j, "lse_dim", n.lse_dim, w);
  detail::read(j, "lte_dim", n.lte_dim, w);
  detail::read(j, "encoder_layers", n.encoder_layers, w);
  detail::read(j, "decoder_layers", n.decoder_layers, w);
  detail::read(j, "q_layers", n.q_layers, w);
  return n;
}

inline Json to_json(const TrainConfig& c) {
  return {{"pretrain_epochs", c.pretrain_epochs},
          {"train_epochs", c.train_epochs},
          {"optimization_times", c.optimization_times},
          {"batch_size", c.batch_size},
          {"gamma", c.gamma},
          {"tau", c.tau},
          {"actor_lr", c.actor_lr},
          {"critic_lr", c.critic_lr},
          {"alpha_lr", c.alpha_lr},
          {"initial_alpha", c.initial_alpha},
          {"reward_scale", c.reward_scale},
          {"noise_sigma", c.noise_sigma},
          {"inject_noise", c.inject_noise},
          {"noisy_collection", c.noisy_collection},
          {"normalize_lte", c.normalize_lte},
          {"collect_each_epoch", c.collect_each_epoch},
          {"replay_capacity", c.replay_capacity},
          {"eval_episodes", c.eval_episodes},
          {"eval_interval", c.eval_interval},
          {"seed", c.seed},
          {"network", to_json(c.network)}};
}

inline TrainConfig train_from_json(const Json& j) {
  const std::string w = "train";
  detail::check_keys(j, w,
                     {"pretrain_epochs", "train_epochs", "optimization_times", "batch_size", "gamma", "tau",
                      "actor_lr", "critic_lr", "alpha_lr", "initial_alpha", "reward_scale", "noise_sigma",
                      "inject_noise", "noisy_collection", "normalize_lte", "collect_each_epoch", "replay_capacity",
                      "eval_episodes", "eval_interval", "seed", "network"});
  TrainConfig c;
  detail::read(j, "pretrain_epochs", c.pretrain_epochs, w);
  detail::read(j, "train_epochs", c.train_epochs, w);
  detail::read(j, "optimization_times", c.optimization_times, w);
  detail::read(j, "batch_size", c.batch_size, w);
  detail::read(j, "gamma", c.gamma, w);
  detail::read(j, "tau", c.tau, w);
  detail::read(j, "actor_lr", c.actor_lr, w);
  detail::read(j, "critic_lr", c.critic_lr, w);
  detail::read(j, "alpha_lr", c.alpha_lr, w);
  detail::read(j, "initial_alpha", c.initial_alpha, w);
  detail::read(j, "reward_scale", c.reward_scale, w);
  detail::read(j, "noise_sigma", c.noise_sigma, w);
  detail::read(j, "inject_noise", c.inject_noise, w);
  detail::read(j, "noisy_collection", c.noisy_collection, w);
  detail::read(j, "normalize_lte", c.normalize_lte, w);
  detail::read(j, "collect_each_epoch", c.collect_each_epoch, w);
  detail::read(j, "replay_capacity", c.replay_capacity, w);
  detail::read(j, "eval_episodes", c.eval_episodes, w);
  detail::read(j, "eval_interval", c.eval_interval, w);
  detail::read(j, "seed", c.seed, w);
  if (j.contains("network")) c.network = network_from_json(j.at("network"));
  return c;
}

inline Json to_json(const EnvConstants& e) {
  return {{"dt", e.dt},
          {"force_per_mass", e.force_per_mass},
          {"drag", e.drag},
          {"gravity", e.gravity},
          {"jump_speed", e.jump_speed},
          {"reset_velocity", e.reset_velocity},
          {"max_episode_frames", e.max_episode_frames}};
}

inline EnvConstants env_from_json(const Json& j) {
  const std::string w = "env";
  detail::check_keys(j, w,
                     {"dt", "force_per_mass", "drag", "gravity", "jump_speed", "reset_velocity", "max_episode_frames"});
  EnvConstants e;
  detail::read(j, "dt", e.dt, w);
  detail::read(j, "force_per_mass", e.force_per_mass, w);
  detail::read(j, "drag", e.drag, w);
  detail::read(j, "gravity", e.gravity, w);
  detail::read(j, "jump_speed", e.jump_speed, w);
  detail::read(j, "reset_velocity", e.reset_velocity, w);
  detail::read(j, "max_episode_frames", e.max_episode_frames, w);
  return e;
}

inline Json to_json(const TaskSetSpec& s) {
  return {{"count", s.count},
          {"lo", s.lo},
          {"hi", s.hi},
          {"jump_count", s.jump_count},
          {"jump_weight_lo", s.jump_weight_lo},
          {"jump_weight_hi", s.jump_weight_hi},
          {"ctrl_cost", s.ctrl_cost}};
}

inline TaskSetSpec task_set_from_json(const Json& j, TaskFamily family) {
  const std::string w = "task_set";
  detail::check_keys(j, w, {"count", "lo", "hi", "jump_count", "jump_weight_lo", "jump_weight_hi", "ctrl_cost"});
  TaskSetSpec s = TaskSetSpec::defaults(family);
  detail::read(j, "count", s.count, w);
  detail::read(j, "lo", s.lo, w);
  detail::read(j, "hi", s.hi, w);
  detail::read(j, "jump_count", s.jump_count, w);
  detail::read(j, "jump_weight_lo", s.jump_weight_lo, w);
  detail::read(j, "jump_weight_hi", s.jump_weight_hi, w);
  detail::read(j, "ctrl_cost", s.ctrl_cost, w);
  return s;
}

inline Json to_json(const CemConfig& c) {
  return {{"elite_capacity", c.elite_capacity}, {"samples_per_elite", c.samples_per_elite},
          {"adapt_epochs", c.adapt_epochs},     {"sample_sigma", c.sample_sigma},
          {"sigma_decay", c.sigma_decay},       {"episodes_per_eval", c.episodes_per_eval},
          {"seed", c.seed}};
}

inline CemConfig cem_from_json(const Json& j) {
  const std::string w = "cem";
  detail::check_keys(j, w,
                     {"elite_capacity", "samples_per_elite", "adapt_epochs", "sample_sigma", "sigma_decay",
                      "episodes_per_eval", "seed"});
  CemConfig c;
  detail::read(j, "elite_capacity", c.elite_capacity, w);
  detail::read(j, "samples_per_elite", c.samples_per_elite, w);
  detail::read(j, "adapt_epochs", c.adapt_epochs, w);
  detail::read(j, "sample_sigma", c.sample_sigma, w);
  detail::read(j, "sigma_decay", c.sigma_decay, w);
  detail::read(j, "episodes_per_eval", c.episodes_per_eval, w);
  detail::read(j, "seed", c.seed, w);
  return c;
}

inline Json to_json(const AnalysisOptions& a) {
  return {{"sphere_resolution", a.sphere_resolution}, {"sweep_points", a.sweep_points},
          {"eval_episodes", a.eval_episodes},         {"search_tolerance", a.search_tolerance},
          {"composition_grid", a.composition_grid}};
}

inline AnalysisOptions analysis_from_json(const Json& j) {
  const std::string w = "analysis";
  detail::check_keys(j, w,
                     {"sphere_resolution", "sweep_points", "eval_episodes", "search_tolerance", "composition_grid"});
  AnalysisOptions a;
  detail::read(j, "sphere_resolution", a.sphere_resolution, w);
  detail::read(j, "sweep_points", a.sweep_points, w);
  detail::read(j, "eval_episodes", a.eval_episodes, w);
  detail::read(j, "search_tolerance", a.search_tolerance, w);
  detail::read(j, "composition_grid", a.composition_grid, w);
  return a;
}

inline Json to_json(const ExperimentConfig& c) {
  return {{"family", std::string(to_string(c.family))},
          {"task_set", to_json(c.task_set)},
          {"env", to_json(c.env)},
          {"train", to_json(c.train)},
          {"cem", to_json(c.cem)},
          {"analysis", to_json(c.analysis)},
          {"output_dir", c.output_dir},
          {"seed", c.seed}};
}

inline ExperimentConfig experiment_from_json(const Json& j) {
  detail::check_keys(j, "config", {"family", "task_set", "env", "train", "cem", "analysis", "output_dir", "seed"});
  ExperimentConfig c;
  std::string family = "vel1d";
  detail::read(j, "family", family, "config");
  c.family = family_from_string(family);
  c.task_set = j.contains("task_set") ? task_set_from_json(j.at("task_set"), c.family) : TaskSetSpec::defaults(c.family);
  if (j.contains("env")) c.env = env_from_json(j.at("env"));
  if (j.contains("train")) c.train = train_from_json(j.at("train"));
  if (j.contains("cem")) c.cem = cem_from_json(j.at("cem"));
  if (j.contains("analysis")) c.analysis = analysis_from_json(j.at("analysis"));
  detail::read(j, "output_dir", c.output_dir, "config");
  detail::read(j, "seed", c.seed, "config");
  c.validate();
  return c;
}

/// Parses JSON text; syntax errors carry the byte offset.
inline Json parse_json(const std::string& text) {
  try {
    return Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(e.what(), e.byte);
  }
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write '" + path + "'");
  out << text;
  if (!out) throw ConfigError("write failed for '" + path + "'");
}

inline ExperimentConfig load_experiment(const std::string& path) { return experiment_from_json(parse_json(read_file(path))); }

}  // namespace latent_motor
