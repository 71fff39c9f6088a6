#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <sstream>

#include "latent_motor/cli.hpp"

using namespace latent_motor;
namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code;
  std::string out, err;
};

CliRun run(std::vector<std::string> args) {
  args.insert(args.begin(), "latent_motor");
  std::ostringstream out, err;
  const int code = cli_dispatch(args, out, err);
  return {code, out.str(), err.str()};
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = fs::temp_directory_path() /
          ("latent_motor_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir);
    fs::create_directories(dir);
    ExperimentConfig c;
    c.family = TaskFamily::kDir2D;
    c.task_set = TaskSetSpec::defaults(TaskFamily::kDir2D);
    c.task_set.count = 3;
    c.train.network.hidden_width = 12;
    c.train.network.lse_dim = 4;
    c.train.pretrain_epochs = 1;
    c.train.train_epochs = 2;
    c.train.optimization_times = 3;
    c.train.batch_size = 16;
    c.train.eval_episodes = 1;
    c.cem.elite_capacity = 2;
    c.cem.samples_per_elite = 2;
    c.cem.adapt_epochs = 2;
    c.analysis.sphere_resolution = 2;
    c.analysis.composition_grid = 3;
    c.seed = 4;
    config = (dir / "config.json").string();
    write_file(config, to_json(c).dump(2));
    unsetenv("LATENT_MOTOR_SEED");
  }
  void TearDown() override {
    unsetenv("LATENT_MOTOR_SEED");
    fs::remove_all(dir);
  }

  std::string trained(const std::string& name = "train") {
    const auto out = (dir / name).string();
    const auto r = run({"train", "--config", config, "--out", out});
    EXPECT_EQ(r.code, 0) << r.err;
    return (fs::path(out) / "model.ckpt.json").string();
  }

  static std::vector<std::string> lines(const std::string& path) {
    std::istringstream in(read_file(path));
    std::vector<std::string> v;
    for (std::string l; std::getline(in, l);) v.push_back(l);
    return v;
  }

  fs::path dir;
  std::string config;
};

}  // namespace

TEST(CliHelpers, Fnv1aKnownVectors) {
  EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cULL);
  EXPECT_EQ(hex64(0xabcULL), "0000000000000abc");
}

TEST(CliHelpers, ParseListAndCsvQuoting) {
  EXPECT_EQ(detail::parse_list("1, 0.5,0"), (std::vector<double>{1, 0.5, 0}));
  EXPECT_THROW(detail::parse_list("1,,2"), ConfigError);
  EXPECT_THROW(detail::parse_list("x"), ConfigError);
  CsvWriter w({"a", "b"});
  w.row({"1", "x,y"});
  EXPECT_EQ(w.str(), "a,b\n1,\"x,y\"\n");
}

TEST_F(CliTest, UsageErrorsExitTwo) {
  EXPECT_EQ(run({}).code, 2);
  EXPECT_EQ(run({"fly"}).code, 2);
  EXPECT_EQ(run({"eval"}).code, 2);  // --checkpoint is required
  EXPECT_EQ(run({"train", "--threads", "0"}).code, 2);
  EXPECT_EQ(run({"train-baseline", "--kind", "ear"}).code, 2);
  EXPECT_EQ(run({"--help"}).code, 0);
}

TEST_F(CliTest, RuntimeErrorsExitOne) {
  auto r = run({"train", "--config", (dir / "missing.json").string(), "--out", (dir / "x").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("error: config:"), std::string::npos);
  write_file((dir / "bad.json").string(), "{\"seed\": ");
  r = run({"train", "--config", (dir / "bad.json").string(), "--out", (dir / "x").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("error: parse:"), std::string::npos);
  setenv("LATENT_MOTOR_SEED", "12abc", 1);
  EXPECT_EQ(run({"grad-check", "--configs", "1", "--out", (dir / "g").string()}).code, 1);
}

TEST_F(CliTest, GradCheckPasses) {
  const auto out = dir / "grad";
  const auto r = run({"grad-check", "--configs", "10", "--out", out.string()});
  EXPECT_EQ(r.code, 0) << r.err;
  const Json j = parse_json(read_file((out / "grad_check.json").string()));
  EXPECT_TRUE(j.at("passed").get<bool>());
  EXPECT_EQ(j.at("configurations").get<int>(), 10);
}

TEST_F(CliTest, TrainIsDeterministicAndRecorded) {
  const auto a = trained("a"), b = trained("b");
  EXPECT_EQ(read_file(a), read_file(b));
  const Json manifest = parse_json(read_file((dir / "a" / "manifest.json").string()));
  EXPECT_EQ(manifest.at("seed").get<std::uint64_t>(), 4u);
  EXPECT_EQ(manifest.at("checkpoint_hash").get<std::string>(), hex64(fnv1a64(read_file(a))));
  EXPECT_EQ(manifest.at("version").get<std::string>(), kVersion);
  EXPECT_TRUE(fs::exists(dir / "a" / "curve.csv.json"));
  const auto curve = lines((dir / "a" / "curve.csv").string());
  EXPECT_EQ(curve.size(), 1u + 2u * 3u);
  EXPECT_NO_THROW(load_checkpoint(a));
}

TEST_F(CliTest, SeedPrecedence) {
  setenv("LATENT_MOTOR_SEED", "11", 1);
  auto r = run({"grad-check", "--configs", "1", "--config", config, "--out", (dir / "env").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(parse_json(read_file((dir / "env" / "manifest.json").string())).at("seed").get<int>(), 11);
  r = run({"grad-check", "--configs", "1", "--config", config, "--seed", "13", "--out", (dir / "flag").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(parse_json(read_file((dir / "flag" / "manifest.json").string())).at("seed").get<int>(), 13);
}

TEST_F(CliTest, AnalysisCommandsWriteOutputs) {
  const auto ckpt = trained();
  const auto o = [&](const char* n) { return (dir / n).string(); };
  EXPECT_EQ(run({"eval", "--checkpoint", ckpt, "--config", config, "--out", o("eval")}).code, 0);
  EXPECT_EQ(lines(o("eval/eval.csv")).size(), 4u);
  const auto interp = run({"interp", "--checkpoint", ckpt, "--config", config, "--task-i", "0", "--task-j", "2",
                           "--beta-list", "1,0.5,0", "--out", o("interp")});
  EXPECT_EQ(interp.code, 0) << interp.err;
  const auto rows = lines(o("interp/interp.csv"));
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0], "beta,metric,mean_return,skipped");
  EXPECT_EQ(rows[1].substr(0, 2), "1,");
  EXPECT_EQ(run({"adapt", "--checkpoint", ckpt, "--config", config, "--target", "45", "--out", o("adapt")}).code, 0);
  EXPECT_TRUE(fs::exists(o("adapt/best_lte.json")));
  EXPECT_EQ(lines(o("adapt/cem_trace.csv")).size(), 1u + 2u * 2u);
  EXPECT_EQ(run({"search-beta", "--checkpoint", ckpt, "--config", config, "--target", "60", "--out", o("sb")}).code, 0);
  EXPECT_EQ(lines(o("sb/search_beta.csv")).size(), 2u);
  EXPECT_EQ(run({"sphere", "--checkpoint", ckpt, "--config", config, "--threads", "2", "--out", o("sphere")}).code, 0);
  EXPECT_EQ(lines(o("sphere/sphere.csv")).size(), 9u);
  EXPECT_EQ(run({"lse-viz", "--checkpoint", ckpt, "--config", config, "--task", "1", "--out", o("lse")}).code, 0);
  EXPECT_EQ(lines(o("lse/lse.csv")).size(), 202u);
  EXPECT_TRUE(fs::exists(o("lse/periodicity.json")));
  const Json m = parse_json(read_file(o("lse/manifest.json")));
  EXPECT_EQ(m.at("input_checkpoint_hash").get<std::string>(), hex64(fnv1a64(read_file(ckpt))));
}

TEST_F(CliTest, BadTaskIndexAndCompositionFamily) {
  const auto ckpt = trained();
  auto r = run({"interp", "--checkpoint", ckpt, "--task-i", "7", "--out", (dir / "i").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("--task-i"), std::string::npos);
  r = run({"compose", "--checkpoint", ckpt, "--out", (dir / "c").string()});
  EXPECT_EQ(r.code, 1);
}

TEST_F(CliTest, TruncatedCheckpointIsAParseError) {
  const auto ckpt = trained();
  const std::string text = read_file(ckpt);
  write_file(ckpt, text.substr(0, 100));
  const auto r = run({"eval", "--checkpoint", ckpt, "--out", (dir / "e").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("error: parse:"), std::string::npos);
}

TEST_F(CliTest, BaselineTraining) {
  const auto r = run({"train-baseline", "--kind", "mhmt", "--config", config, "--out", (dir / "m").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(load_checkpoint((dir / "m" / "model.ckpt.json").string()).kind(), PolicyKind::kMhmt);
  // Adaptation needs the embedding policy.
  EXPECT_EQ(run({"adapt", "--checkpoint", (dir / "m" / "model.ckpt.json").string(), "--target", "10", "--out",
                 (dir / "a").string()})
                .code,
            1);
}
