#pragma once

// Checkpoints are JSON documents. Every parameter, optimizer moment and
// real-valued scalar is stored as a C99 hexadecimal float string so a
// save/load cycle is bit-exact.

#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <string>
#include <vector>

#include "json.hpp"

#include "latent_motor/config.hpp"
#include "latent_motor/error.hpp"
#include "latent_motor/sac.hpp"

namespace latent_motor {

inline constexpr int kCheckpointFormatVersion = 1;

namespace detail {

inline std::string hex_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

inline double parse_hex_double(const Json& j) {
  if (!j.is_string()) throw ConfigError("checkpoint: expected a hex-float string");
  const std::string& s = j.get_ref<const std::string&>();
  errno = 0;
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size() || errno == ERANGE)
    throw ConfigError("checkpoint: malformed number '" + s + "'");
  return v;
}

inline Json hex_array(std::span<const double> xs) {
  Json a = Json::array();
  for (double x : xs) a.push_back(hex_double(x));
  return a;
}

inline void fill_hex_array(const Json& j, std::span<double> out) {
  if (!j.is_array() || j.size() != out.size()) throw ConfigError("checkpoint: array length mismatch");
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = parse_hex_double(j[i]);
}

/// Row-major matrix.
inline Json matrix_json(const MatrixXd& m) {
  Json data = Json::array();
  for (Index r = 0; r < m.rows(); ++r)
    for (Index c = 0; c < m.cols(); ++c) data.push_back(hex_double(m(r, c)));
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", data}};
}

inline MatrixXd matrix_from_json(const Json& j) {
  check_keys(j, "matrix", {"rows", "cols", "data"});
  const Index rows = j.at("rows").get<Index>(), cols = j.at("cols").get<Index>();
  if (rows < 0 || cols < 0) throw ConfigError("checkpoint: negative matrix shape");
  const Json& data = j.at("data");
  if (!data.is_array() || data.size() != static_cast<std::size_t>(rows * cols))
    throw ConfigError("checkpoint: matrix data length does not match its shape");
  MatrixXd m(rows, cols);
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) m(r, c) = parse_hex_double(data[static_cast<std::size_t>(r * cols + c)]);
  return m;
}

inline Json mlp_json(const MlpParams& p) {
  Json layers = Json::array();
  for (const auto& l : p.layers) layers.push_back({{"weight", matrix_json(l.weight)}, {"bias", hex_array(
      std::span<const double>(l.bias.data(), static_cast<std::size_t>(l.bias.size())))}});
  return layers;
}

inline MlpParams mlp_from_json(const Json& j) {
  if (!j.is_array()) throw ConfigError("checkpoint: mlp must be an array of layers");
  MlpParams p;
  for (const auto& l : j) {
    check_keys(l, "layer", {"weight", "bias"});
    DenseLayer d{matrix_from_json(l.at("weight")), VectorXd(static_cast<Index>(l.at("bias").size()))};
    fill_hex_array(l.at("bias"), std::span<double>(d.bias.data(), static_cast<std::size_t>(d.bias.size())));
    p.layers.push_back(std::move(d));
  }
  return p;
}

inline Json adam_json(const AdamState& s) {
  Json m1 = Json::array(), m2 = Json::array();
  for (const auto& v : s.first_moment) m1.push_back(hex_array({v.data(), static_cast<std::size_t>(v.size())}));
  for (const auto& v : s.second_moment) m2.push_back(hex_array({v.data(), static_cast<std::size_t>(v.size())}));
  return {{"lr", hex_double(s.hyper.learning_rate)},
          {"beta1", hex_double(s.hyper.beta1)},
          {"beta2", hex_double(s.hyper.beta2)},
          {"eps", hex_double(s.hyper.epsilon)},
          {"step", s.step},
          {"first_moment", m1},
          {"second_moment", m2}};
}

/// Moments must match the block layout of `params`.
template <ParameterSet P>
AdamState adam_from_json(const Json& j, const P& params) {
  check_keys(j, "adam", {"lr", "beta1", "beta2", "eps", "step", "first_moment", "second_moment"});
  AdamState s = AdamState::for_params(params);
  s.hyper.learning_rate = parse_hex_double(j.at("lr"));
  s.hyper.beta1 = parse_hex_double(j.at("beta1"));
  s.hyper.beta2 = parse_hex_double(j.at("beta2"));
  s.hyper.epsilon = parse_hex_double(j.at("eps"));
  s.step = j.at("step").get<std::int64_t>();
  const Json& m1 = j.at("first_moment");
  const Json& m2 = j.at("second_moment");
  if (!m1.is_array() || !m2.is_array() || m1.size() != s.first_moment.size() || m2.size() != s.second_moment.size())
    throw ConfigError("checkpoint: optimizer state does not match the network layout");
  for (std::size_t b = 0; b < s.first_moment.size(); ++b) {
    auto& v1 = s.first_moment[b];
    auto& v2 = s.second_moment[b];
    fill_hex_array(m1[b], {v1.data(), static_cast<std::size_t>(v1.size())});
    fill_hex_array(m2[b], {v2.data(), static_cast<std::size_t>(v2.size())});
  }
  return s;
}

inline Json rng_json(const Rng& r) { return {{"seed", r.seed()}, {"stream", r.stream()}, {"counter", r.counter()}}; }

inline Rng rng_from_json(const Json& j) {
  check_keys(j, "rng", {"seed", "stream", "counter"});
  return Rng(j.at("seed").get<std::uint64_t>(), j.at("stream").get<std::uint64_t>(),
             j.at("counter").get<std::uint64_t>());
}

inline Json task_json(const TaskSpec& t) {
  return {{"family", std::string(to_string(t.family))},
          {"target_velocity", hex_double(t.target_velocity)},
          {"direction", {hex_double(t.direction.x()), hex_double(t.direction.y())}},
          {"modality", t.modality == Modality::kJump ? "jump" : "run"},
          {"modality_weight", hex_double(t.modality_weight)},
          {"ctrl_cost", hex_double(t.ctrl_cost)}};
}

inline TaskSpec task_from_json(const Json& j) {
  check_keys(j, "task", {"family", "target_velocity", "direction", "modality", "modality_weight", "ctrl_cost"});
  TaskSpec t;
  t.family = family_from_string(j.at("family").get<std::string>());
  t.target_velocity = parse_hex_double(j.at("target_velocity"));
  const Json& d = j.at("direction");
  if (!d.is_array() || d.size() != 2) throw ConfigError("checkpoint: task direction must have 2 entries");
  t.direction = {parse_hex_double(d[0]), parse_hex_double(d[1])};
  const std::string mod = j.at("modality").get<std::string>();
  if (mod != "run" && mod != "jump") throw ConfigError("checkpoint: unknown modality '" + mod + "'");
  t.modality = mod == "jump" ? Modality::kJump : Modality::kRun;
  t.modality_weight = parse_hex_double(j.at("modality_weight"));
  t.ctrl_cost = parse_hex_double(j.at("ctrl_cost"));
  return t;
}

/// Config doubles are stored as hex as well; the readable form lives in the
/// run manifest.
inline Json exact_config_json(const TrainConfig& c) {
  Json j = to_json(c);
  for (const char* k : {"gamma", "tau", "actor_lr", "critic_lr", "alpha_lr", "initial_alpha", "reward_scale",
                        "noise_sigma"})
    j[k] = hex_double(j[k].get<double>());
  return j;
}

inline TrainConfig exact_config_from_json(Json j) {
  for (const char* k : {"gamma", "tau", "actor_lr", "critic_lr", "alpha_lr", "initial_alpha", "reward_scale",
                        "noise_sigma"})
    if (j.contains(k)) j[k] = parse_hex_double(j[k]);
  return train_from_json(j);
}

inline Json exact_env_json(const EnvConstants& e) {
  Json j = to_json(e);
  for (const char* k : {"dt", "force_per_mass", "drag", "gravity", "jump_speed", "reset_velocity"})
    j[k] = hex_double(j[k].get<double>());
  return j;
}

inline EnvConstants exact_env_from_json(Json j) {
  for (const char* k : {"dt", "force_per_mass", "drag", "gravity", "jump_speed", "reset_velocity"})
    if (j.contains(k)) j[k] = parse_hex_double(j[k]);
  return env_from_json(j);
}

}  // namespace detail

inline Json checkpoint_json(const SacModel& m) {
  using namespace detail;
  Json tasks = Json::array();
  for (const auto& t : m.tasks) tasks.push_back(task_json(t));
  Json heads = Json::array();
  for (const auto& h : m.actor.heads) heads.push_back(mlp_json(h));
  Json actor = {{"kind", std::string(to_string(m.actor.kind))},
                {"obs_dim", m.actor.obs_dim},
                {"action_dim", m.actor.action_dim},
                {"num_tasks", m.actor.num_tasks},
                {"normalize_lte", m.actor.normalize_lte},
                {"encoder", mlp_json(m.actor.encoder)},
                {"decoder", mlp_json(m.actor.decoder)},
                {"task_encoder", matrix_json(m.actor.task_encoder.weight)},
                {"heads", heads}};
  Json ltes = Json::array();
  if (m.kind() == PolicyKind::kEar)
    for (Index k = 0; k < m.num_tasks(); ++k) {
      const VectorXd z = m.actor.lte(k);
      ltes.push_back(hex_array({z.data(), static_cast<std::size_t>(z.size())}));
    }
  return {{"format_version", kCheckpointFormatVersion},
          {"config", exact_config_json(m.config)},
          {"env", exact_env_json(m.env)},
          {"family", std::string(to_string(m.family))},
          {"tasks", tasks},
          {"actor", actor},
          {"lte_set", ltes},
          {"q1", mlp_json(m.q1)},
          {"q2", mlp_json(m.q2)},
          {"q1_target", mlp_json(m.q1_target)},
          {"q2_target", mlp_json(m.q2_target)},
          {"log_alpha", hex_double(m.log_alpha.value)},
          {"target_entropy", hex_double(m.target_entropy)},
          {"optimizers",
           {{"actor", adam_json(m.actor_opt)},
            {"q1", adam_json(m.q1_opt)},
            {"q2", adam_json(m.q2_opt)},
            {"alpha", adam_json(m.alpha_opt)}}},
          {"rng",
           {{"env", rng_json(m.env_rng)},
            {"policy", rng_json(m.policy_rng)},
            {"noise", rng_json(m.noise_rng)},
            {"replay", rng_json(m.replay_rng)}}},
          {"updates", m.updates},
          {"nonfinite_skips", m.nonfinite_skips},
          {"consecutive_nonfinite", m.consecutive_nonfinite}};
}

/// Rebuilds a model and re-validates it: shapes chain, LTEs are unit norm
/// when normalization is on, and the stored LTE set agrees with the encoder.
inline SacModel model_from_json(const Json& j) {
  using namespace detail;
  try {
    check_keys(j, "checkpoint",
               {"format_version", "config", "env", "family", "tasks", "actor", "lte_set", "q1", "q2", "q1_target",
                "q2_target", "log_alpha", "target_entropy", "optimizers", "rng", "updates", "nonfinite_skips",
                "consecutive_nonfinite"});
    const int version = j.at("format_version").get<int>();
    if (version != kCheckpointFormatVersion)
      throw ConfigError("checkpoint format version " + std::to_string(version) + " is not supported (expected " +
                        std::to_string(kCheckpointFormatVersion) + ")");
    SacModel m;
    m.config = exact_config_from_json(j.at("config"));
    m.config.validate();
    m.env = exact_env_from_json(j.at("env"));
    m.family = family_from_string(j.at("family").get<std::string>());
    for (const auto& t : j.at("tasks")) {
      m.tasks.push_back(task_from_json(t));
      m.tasks.back().validate();
      if (m.tasks.back().family != m.family) throw ConfigError("checkpoint: task family mismatch");
    }
    if (m.tasks.empty()) throw ConfigError("checkpoint: empty task set");

    const Json& a = j.at("actor");
    check_keys(a, "actor",
               {"kind", "obs_dim", "action_dim", "num_tasks", "normalize_lte", "encoder", "decoder", "task_encoder",
                "heads"});
    m.actor.kind = policy_kind_from_string(a.at("kind").get<std::string>());
    m.actor.obs_dim = a.at("obs_dim").get<Index>();
    m.actor.action_dim = a.at("action_dim").get<Index>();
    m.actor.num_tasks = a.at("num_tasks").get<Index>();
    m.actor.normalize_lte = a.at("normalize_lte").get<bool>();
    m.actor.encoder = mlp_from_json(a.at("encoder"));
    m.actor.decoder = mlp_from_json(a.at("decoder"));
    m.actor.task_encoder.weight = matrix_from_json(a.at("task_encoder"));
    for (const auto& h : a.at("heads")) m.actor.heads.push_back(mlp_from_json(h));

    m.q1 = mlp_from_json(j.at("q1"));
    m.q2 = mlp_from_json(j.at("q2"));
    m.q1_target = mlp_from_json(j.at("q1_target"));
    m.q2_target = mlp_from_json(j.at("q2_target"));
    m.log_alpha.value = parse_hex_double(j.at("log_alpha"));
    m.target_entropy = parse_hex_double(j.at("target_entropy"));

    // Shapes must be right before the optimizer layouts can be checked.
    m.validate();

    const Json& o = j.at("optimizers");
    check_keys(o, "optimizers", {"actor", "q1", "q2", "alpha"});
    m.actor_opt = adam_from_json(o.at("actor"), m.actor);
    m.q1_opt = adam_from_json(o.at("q1"), m.q1);
    m.q2_opt = adam_from_json(o.at("q2"), m.q2);
    m.alpha_opt = adam_from_json(o.at("alpha"), m.log_alpha);

    const Json& r = j.at("rng");
    check_keys(r, "rng", {"env", "policy", "noise", "replay"});
    m.env_rng = rng_from_json(r.at("env"));
    m.policy_rng = rng_from_json(r.at("policy"));
    m.noise_rng = rng_from_json(r.at("noise"));
    m.replay_rng = rng_from_json(r.at("replay"));
    m.updates = j.at("updates").get<std::int64_t>();
    m.nonfinite_skips = j.at("nonfinite_skips").get<std::int64_t>();
    m.consecutive_nonfinite = j.at("consecutive_nonfinite").get<int>();

    const Json& ltes = j.at("lte_set");
    if (m.kind() == PolicyKind::kEar) {
      if (!ltes.is_array() || ltes.size() != m.tasks.size()) throw ConfigError("checkpoint: LTE set size mismatch");
      for (Index k = 0; k < m.num_tasks(); ++k) {
        VectorXd z(m.actor.lte_dim());
        fill_hex_array(ltes[static_cast<std::size_t>(k)], {z.data(), static_cast<std::size_t>(z.size())});
        if (z != m.actor.lte(k)) throw ConfigError("checkpoint: stored LTE disagrees with the task encoder");
      }
    } else if (!ltes.empty()) {
      throw ConfigError("checkpoint: baseline policies carry no LTE set");
    }
    m.validate();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("checkpoint: malformed structure: ") + e.what());
  }
}

inline std::string checkpoint_text(const SacModel& m) { return checkpoint_json(m).dump(1) + "\n"; }

inline void save_checkpoint(const SacModel& m, const std::string& path) { write_file(path, checkpoint_text(m)); }

/// Syntax errors raise ParseError with a byte offset; structural or invariant
/// violations raise ConfigError. Nothing is returned on failure.
inline SacModel load_checkpoint_text(const std::string& text) { return model_from_json(parse_json(text)); }

inline SacModel load_checkpoint(const std::string& path) { return load_checkpoint_text(read_file(path)); }

}  // namespace latent_motor
