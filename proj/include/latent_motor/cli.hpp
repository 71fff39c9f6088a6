#pragma once

// Command-line front end. Every subcommand writes its artifacts plus a
// manifest.json into the run directory (--out).

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "latent_motor/adaptation.hpp"
#include "latent_motor/analysis.hpp"
#include "latent_motor/checkpoint.hpp"
#include "latent_motor/config.hpp"
#include "latent_motor/nn.hpp"
#include "latent_motor/sac.hpp"

namespace latent_motor {

inline constexpr const char* kVersion = "0.1.0";

inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Shortest-exact doubles keep CSVs byte-stable across runs.
inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// CSV with a header line. Cells holding a comma, quote or newline are quoted.
class CsvWriter {
 public:
  explicit CsvWriter(std::vector<std::string> header) : columns_(header.size()) { row(header); }

  void row(const std::vector<std::string>& cells) {
    if (cells.size() != columns_) throw InternalError("csv row has the wrong number of cells");
    for (std::size_t i = 0; i < cells.size(); ++i) text_ << (i ? "," : "") << quote(cells[i]);
    text_ << '\n';
  }

  std::string str() const { return text_.str(); }

 private:
  static std::string quote(const std::string& c) {
    if (c.find_first_of(",\"\n") == std::string::npos) return c;
    std::string q = "\"";
    for (char ch : c) q += ch == '"' ? std::string("\"\"") : std::string(1, ch);
    return q + "\"";
  }

  std::size_t columns_;
  std::ostringstream text_;
};

namespace detail {

struct RunContext {
  std::string command;
  std::vector<std::string> argv;
  ExperimentConfig config;
  std::filesystem::path out;
  int threads = 1;
  std::string input_checkpoint_hash;   // empty when no checkpoint was read
  std::string output_checkpoint_hash;  // empty when none was written

  std::string config_hash() const { return hex64(fnv1a64(to_json(config).dump())); }

  Json sidecar() const {
    return {{"command", command},
            {"config", to_json(config)},
            {"config_hash", config_hash()},
            {"checkpoint_hash", input_checkpoint_hash.empty() ? output_checkpoint_hash : input_checkpoint_hash}};
  }

  void write_csv(const std::string& name, const CsvWriter& csv) const {
    write_file((out / name).string(), csv.str());
    write_file((out / (name + ".json")).string(), sidecar().dump(2) + "\n");
  }

  void write_manifest() const {
    Json m = {{"command", command},
              {"argv", argv},
              {"config", to_json(config)},
              {"config_hash", config_hash()},
              {"seed", config.seed},
              {"threads", threads},
              {"version", kVersion},
              {"checkpoint_format_version", kCheckpointFormatVersion}};
    if (!input_checkpoint_hash.empty()) m["input_checkpoint_hash"] = input_checkpoint_hash;
    if (!output_checkpoint_hash.empty()) m["checkpoint_hash"] = output_checkpoint_hash;
    write_file((out / "manifest.json").string(), m.dump(2) + "\n");
  }
};

/// Unseen-task spec for a family: velocity for Vel1D and RunJump, heading in
/// degrees for Dir2D.
inline TaskSpec task_for_target(TaskFamily family, double target, double ctrl_cost) {
  switch (family) {
    case TaskFamily::kVel1D: return vel_task(target, ctrl_cost);
    case TaskFamily::kDir2D: return dir_task(target, ctrl_cost);
    case TaskFamily::kRunJump: return run_task(target, ctrl_cost);
  }
  throw InternalError("unknown family");
}

inline std::vector<double> parse_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) throw ConfigError("empty entry in list '" + s + "'");
    std::size_t used = 0;
    double v = 0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      throw ConfigError("cannot parse list entry '" + item + "'");
    }
    if (used != item.size() || !std::isfinite(v)) throw ConfigError("cannot parse list entry '" + item + "'");
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError("empty value list");
  return out;
}

inline std::vector<std::string> vec_cells(const VectorXd& v) {
  std::vector<std::string> c;
  for (Index i = 0; i < v.size(); ++i) c.push_back(fmt_double(v[i]));
  return c;
}

inline std::vector<std::string> z_header(Index d) {
  std::vector<std::string> h;
  for (Index i = 0; i < d; ++i) h.push_back("z" + std::to_string(i));
  return h;
}

inline void check_task_index(const SacModel& m, int k, const char* flag) {
  if (k < 0 || k >= m.num_tasks())
    throw ConfigError(std::string(flag) + " must lie in [0, " + std::to_string(m.num_tasks()) + ")");
}

}  // namespace detail

/// Parses argv and runs one subcommand. Returns 0 on success, 1 on a runtime
/// failure (one `error: ...` line on `err`), 2 on a usage error.
inline int cli_dispatch(const std::vector<std::string>& args, std::ostream& out = std::cout,
                        std::ostream& err = std::cerr) {
  using namespace detail;
  CLI::App app{"Multi-task SAC with latent task embeddings on point-mass tasks", "latent_motor"};
  app.require_subcommand(1, 1);
  app.set_version_flag("--version", kVersion);

  std::string config_path, out_dir, checkpoint_path, kind_name = "ohe", beta_list = "1,0.75,0.5,0.25,0";
  std::optional<std::uint64_t> seed_flag;
  int threads = 1, task_i = 0, task_j = 1, task_a = -1, task_b = -1, resolution = 0, configs = 100, task_id = 0;
  double target = 0.0, tol = 0.0;
  std::optional<int> episodes_flag;

  auto common = [&](CLI::App* sub, bool needs_checkpoint) {
    sub->add_option("--config", config_path, "experiment config (JSON)");
    sub->add_option("--seed", seed_flag, "seed; overrides LATENT_MOTOR_SEED and the config");
    sub->add_option("--threads", threads, "evaluation threads (1 = deterministic reference mode)")
        ->check(CLI::PositiveNumber);
    sub->add_option("--out", out_dir, "run directory");
    auto* c = sub->add_option("--checkpoint", checkpoint_path, "model checkpoint");
    if (needs_checkpoint) c->required();
  };

  auto* train_cmd = app.add_subcommand("train", "train the embedding policy");
  common(train_cmd, false);
  auto* baseline = app.add_subcommand("train-baseline", "train a one-hot or multi-head baseline");
  common(baseline, false);
  baseline->add_option("--kind", kind_name, "ohe | mhmt")->check(CLI::IsMember({"ohe", "mhmt"}));
  auto* eval = app.add_subcommand("eval", "evaluate every training task");
  common(eval, true);
  eval->add_option("--episodes", episodes_flag, "episodes per task")->check(CLI::PositiveNumber);
  auto* adapt = app.add_subcommand("adapt", "CEM search for an unseen task");
  common(adapt, true);
  adapt->add_option("--target", target, "unseen target (velocity, or heading in degrees)")->required();
  auto* interp = app.add_subcommand("interp", "interpolation sweep between two training tasks");
  common(interp, true);
  interp->add_option("--task-i", task_i, "task whose weight is beta");
  interp->add_option("--task-j", task_j, "task whose weight is 1 - beta");
  interp->add_option("--beta-list", beta_list, "comma-separated betas");
  auto* search = app.add_subcommand("search-beta", "find beta reaching a target metric");
  common(search, true);
  search->add_option("--task-i", task_i);
  search->add_option("--task-j", task_j);
  search->add_option("--target", target, "target metric")->required();
  search->add_option("--tol", tol, "tolerance (defaults to analysis.search_tolerance)");
  auto* compose_cmd = app.add_subcommand("compose", "blend two modalities over a beta grid");
  common(compose_cmd, true);
  compose_cmd->add_option("--task-a", task_a, "first task (default: first run task)");
  compose_cmd->add_option("--task-b", task_b, "second task (default: first jump task)");
  auto* sphere = app.add_subcommand("sphere", "evaluate the policy over a sphere grid of embeddings");
  common(sphere, true);
  sphere->add_option("--resolution", resolution, "grid resolution (defaults to analysis.sphere_resolution)");
  sphere->add_option("--task", task_id, "task whose reward scores the return column");
  auto* lse = app.add_subcommand("lse-viz", "PCA of raw states and sensory embeddings along one episode");
  common(lse, true);
  lse->add_option("--task", task_id);
  auto* grad = app.add_subcommand("grad-check", "finite-difference check of the network gradients");
  common(grad, false);
  grad->add_option("--configs", configs, "random network configurations")->check(CLI::PositiveNumber);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  if (!reversed.empty()) reversed.pop_back();  // program name
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return 0;
    }
    err << "usage error: " << e.what() << "\n" << app.help();
    return 2;
  }

  try {
    CLI::App* sub = app.get_subcommands().front();
    RunContext ctx;
    ctx.command = sub->get_name();
    ctx.argv = args;
    ctx.threads = threads;
    if (!config_path.empty()) ctx.config = load_experiment(config_path);
    if (const char* env_seed = std::getenv("LATENT_MOTOR_SEED")) {
      try {
        std::size_t used = 0;
        ctx.config.seed = std::stoull(env_seed, &used);
        if (env_seed[used] != '\0') throw std::invalid_argument("trailing characters");
      } catch (const std::exception&) {
        throw ConfigError(std::string("LATENT_MOTOR_SEED is not an unsigned integer: '") + env_seed + "'");
      }
    }
    if (seed_flag) ctx.config.seed = *seed_flag;
    ctx.config.validate();
    ctx.out = out_dir.empty() ? std::filesystem::path(ctx.config.output_dir) / ctx.command : std::filesystem::path(out_dir);
    std::filesystem::create_directories(ctx.out);
    const ExperimentConfig& cfg = ctx.config;
    const AnalysisOptions& an = cfg.analysis;
    const int episodes = episodes_flag.value_or(an.eval_episodes);

    std::optional<SacModel> loaded;
    if (!checkpoint_path.empty()) {
      const std::string text = read_file(checkpoint_path);
      ctx.input_checkpoint_hash = hex64(fnv1a64(text));
      loaded = load_checkpoint_text(text);
    }
    const std::uint64_t eval_seed = Rng(cfg.seed).split(Stream::kEval)();

    if (sub == train_cmd || sub == baseline) {
      const PolicyKind kind = sub == train_cmd ? PolicyKind::kEar : policy_kind_from_string(kind_name);
      CsvWriter curve({"epoch", "task_id", "mean_return", "metric", "q1_loss", "q2_loss", "policy_loss",
                       "alpha_loss", "alpha", "entropy"});
      auto res = train(kind, cfg.train_config(), cfg.tasks(), cfg.env, [&](const EpochRecord& r) {
        for (std::size_t k = 0; k < r.mean_return.size(); ++k)
          curve.row({std::to_string(r.epoch), std::to_string(k), fmt_double(r.mean_return[k]), fmt_double(r.metric[k]),
                     fmt_double(r.losses.q1_loss), fmt_double(r.losses.q2_loss), fmt_double(r.losses.policy_loss),
                     fmt_double(r.losses.alpha_loss), fmt_double(r.losses.alpha), fmt_double(r.losses.entropy)});
      });
      const std::string text = checkpoint_text(res.model);
      ctx.output_checkpoint_hash = hex64(fnv1a64(text));
      write_file((ctx.out / "model.ckpt.json").string(), text);
      write_file((ctx.out / "config.json").string(), to_json(cfg).dump(2) + "\n");
      ctx.write_csv("curve.csv", curve);
      out << "trained " << to_string(kind) << " on " << cfg.tasks().size() << " tasks; mean return "
          << fmt_double(mean_task_return(res.model, episodes, eval_seed)) << "\n";
    } else if (sub == eval) {
      const SacModel& m = *loaded;
      CsvWriter csv({"task_id", "mean_return", "metric", "return_variance", "mean_velocity", "tracking_error",
                     "projected_speed", "perpendicular_speed", "direction_degrees", "horizontal_speed", "mean_height"});
      std::vector<EvalReport> reps(static_cast<std::size_t>(m.num_tasks()));
      parallel_for(reps.size(), threads,
                   [&](std::size_t k) { reps[k] = evaluate_task(m, static_cast<int>(k), episodes, eval_seed); });
      for (std::size_t k = 0; k < reps.size(); ++k) {
        const auto& r = reps[k];
        const auto& x = r.mean_metrics;
        csv.row({std::to_string(k), fmt_double(r.mean_return), fmt_double(r.mean_metric),
                 fmt_double(r.return_variance()), fmt_double(x.mean_velocity), fmt_double(x.tracking_error),
                 fmt_double(x.projected_speed), fmt_double(x.perpendicular_speed), fmt_double(x.direction_degrees),
                 fmt_double(x.horizontal_speed), fmt_double(x.mean_height)});
      }
      ctx.write_csv("eval.csv", csv);
    } else if (sub == adapt) {
      const SacModel& m = *loaded;
      CemConfig cem = cfg.cem;
      cem.seed = cfg.seed;
      const TaskSpec task = task_for_target(m.family, target, cfg.task_set.ctrl_cost);
      const CemResult res = cem_adapt(m, task, cem, threads);
      auto header = std::vector<std::string>{"epoch", "rank"};
      for (auto& h : z_header(m.actor.lte_dim())) header.push_back(h);
      for (const char* h : {"return", "best_return", "sigma", "episodes"}) header.push_back(h);
      CsvWriter csv(header);
      for (std::size_t e = 0; e < res.trace.epochs.size(); ++e) {
        const auto& ep = res.trace.epochs[e];
        for (std::size_t r = 0; r < ep.elites.size(); ++r) {
          std::vector<std::string> row{std::to_string(e), std::to_string(r)};
          for (auto& c : vec_cells(ep.elites[r])) row.push_back(c);
          row.push_back(fmt_double(ep.elite_returns[r]));
          row.push_back(fmt_double(ep.best_return));
          row.push_back(fmt_double(ep.sigma));
          row.push_back(std::to_string(ep.episodes));
          csv.row(row);
        }
      }
      ctx.write_csv("cem_trace.csv", csv);
      Json best = {{"target", target}, {"best_return", res.best_return}, {"lte", Json::array()}};
      for (Index i = 0; i < res.best.dim(); ++i) best["lte"].push_back(res.best[i]);
      write_file((ctx.out / "best_lte.json").string(), best.dump(2) + "\n");
      out << "best return " << fmt_double(res.best_return) << "\n";
    } else if (sub == interp) {
      const SacModel& m = *loaded;
      check_task_index(m, task_i, "--task-i");
      check_task_index(m, task_j, "--task-j");
      const auto betas = parse_list(beta_list);
      const auto rows = interpolation_sweep(m, m.actor.lte(task_i), m.actor.lte(task_j), betas,
                                            m.tasks[static_cast<std::size_t>(task_i)], episodes, eval_seed, threads);
      CsvWriter csv({"beta", "metric", "mean_return", "skipped"});
      for (const auto& r : rows)
        csv.row({fmt_double(r.beta), fmt_double(r.metric), fmt_double(r.mean_return), r.skipped ? "1" : "0"});
      ctx.write_csv("interp.csv", csv);
    } else if (sub == search) {
      const SacModel& m = *loaded;
      check_task_index(m, task_i, "--task-i");
      check_task_index(m, task_j, "--task-j");
      const double t = tol > 0 ? tol : an.search_tolerance;
      const BetaSearch r = search_beta(m, m.actor.lte(task_i), m.actor.lte(task_j), target, t,
                                       m.tasks[static_cast<std::size_t>(task_i)], episodes, eval_seed);
      CsvWriter csv({"target", "tolerance", "found", "beta", "achieved", "evaluations"});
      csv.row({fmt_double(target), fmt_double(t), r.found ? "1" : "0", fmt_double(r.beta), fmt_double(r.achieved),
               std::to_string(r.evaluations)});
      ctx.write_csv("search_beta.csv", csv);
      out << (r.found ? "found beta " + fmt_double(r.beta) : std::string("not found")) << "\n";
    } else if (sub == compose_cmd) {
      const SacModel& m = *loaded;
      int a = task_a, b = task_b;
      for (int k = 0; k < m.num_tasks() && (a < 0 || b < 0); ++k) {
        const bool jump = m.tasks[static_cast<std::size_t>(k)].modality == Modality::kJump;
        if (a < 0 && !jump) a = k;
        if (b < 0 && jump) b = k;
      }
      if (a < 0 || b < 0) throw ConfigError("compose needs a run task and a jump task");
      check_task_index(m, a, "--task-a");
      check_task_index(m, b, "--task-b");
      const auto betas = linspace(0.1, 0.9, an.composition_grid);
      std::vector<Composition> rows(betas.size());
      const TaskSpec& ref = m.tasks[static_cast<std::size_t>(a)];
      parallel_for(betas.size(), threads, [&](std::size_t i) {
        rows[i] = compose(m, m.actor.lte(a), m.actor.lte(b), betas[i], ref, episodes, eval_seed);
      });
      CsvWriter csv({"beta", "horizontal_speed", "mean_height", "mean_return", "skipped"});
      for (const auto& r : rows)
        csv.row({fmt_double(r.beta), fmt_double(r.horizontal_speed), fmt_double(r.mean_height),
                 fmt_double(r.report.mean_return), r.skipped ? "1" : "0"});
      ctx.write_csv("compose.csv", csv);
    } else if (sub == sphere) {
      const SacModel& m = *loaded;
      check_task_index(m, task_id, "--task");
      const Index res = resolution > 0 ? resolution : an.sphere_resolution;
      const auto cells =
          evaluate_sphere(m, m.tasks[static_cast<std::size_t>(task_id)], res, episodes, eval_seed, threads);
      CsvWriter csv({"index", "theta", "phi", "x", "y", "z", "metric", "mean_return"});
      for (std::size_t i = 0; i < cells.size(); ++i) {
        const auto& c = cells[i];
        csv.row({std::to_string(i), fmt_double(c.theta), fmt_double(c.phi), fmt_double(c.direction.x()),
                 fmt_double(c.direction.y()), fmt_double(c.direction.z()), fmt_double(c.metric),
                 fmt_double(c.mean_return)});
      }
      ctx.write_csv("sphere.csv", csv);
    } else if (sub == lse) {
      const SacModel& m = *loaded;
      check_task_index(m, task_id, "--task");
      const auto r = lse_trajectory_analysis(m, task_id, eval_seed);
      std::vector<std::string> header{"t"};
      for (Index c = 0; c < r.raw_pca.projections.rows(); ++c) header.push_back("raw_pc" + std::to_string(c + 1));
      for (Index c = 0; c < r.lse_pca.projections.rows(); ++c) header.push_back("lse_pc" + std::to_string(c + 1));
      CsvWriter csv(header);
      for (Index t = 0; t < r.raw_pca.projections.cols(); ++t) {
        std::vector<std::string> row{std::to_string(t)};
        for (Index c = 0; c < r.raw_pca.projections.rows(); ++c) row.push_back(fmt_double(r.raw_pca.projections(c, t)));
        for (Index c = 0; c < r.lse_pca.projections.rows(); ++c) row.push_back(fmt_double(r.lse_pca.projections(c, t)));
        csv.row(row);
      }
      ctx.write_csv("lse.csv", csv);
      Json scores = {{"raw_periodicity", r.raw_periodicity}, {"lse_periodicity", r.lse_periodicity}};
      write_file((ctx.out / "periodicity.json").string(), scores.dump(2) + "\n");
    } else if (sub == grad) {
      const GradCheckReport r = gradient_check(configs, cfg.seed);
      Json j = {{"configurations", r.configurations}, {"max_relative_error", r.max_relative_error},
                {"passed", r.passed}};
      write_file((ctx.out / "grad_check.json").string(), j.dump(2) + "\n");
      out << (r.passed ? "passed" : "FAILED") << " max_relative_error " << fmt_double(r.max_relative_error) << "\n";
      ctx.write_manifest();
      return r.passed ? 0 : 1;
    }
    ctx.write_manifest();
    return 0;
  } catch (const ParseError& e) {
    err << "error: parse: " << e.what() << "\n";
  } catch (const ConfigError& e) {
    err << "error: config: " << e.what() << "\n";
  } catch (const DegenerateEmbedding& e) {
    err << "error: degenerate: " << e.what() << "\n";
  } catch (const NonFiniteError& e) {
    err << "error: nonfinite: " << e.what() << "\n";
  } catch (const std::exception& e) {
    err << "error: runtime: " << e.what() << "\n";
  }
  return 1;
}

inline int cli_dispatch(int argc, char** argv) {
  return cli_dispatch(std::vector<std::string>(argv, argv + argc));
}

}  // namespace latent_motor
