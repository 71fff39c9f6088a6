#include <gtest/gtest.h>

#include <atomic>

#include "latent_motor/adaptation.hpp"
#include "test_util.hpp"

using namespace latent_motor;
using namespace latent_motor::testing_util;

namespace {
double up_score(const LatentTaskEmbedding& z) { return z[2]; }  // z . e3, maximized at the north pole
}  // namespace

TEST(CemSearch, ConvergesOnSyntheticScore) {
  CemConfig c;
  c.elite_capacity = 4;
  c.samples_per_elite = 8;
  c.adapt_epochs = 10;
  c.seed = 2;
  const auto r = cem_search(up_score, 3, c);
  EXPECT_GE(r.best_return, 0.99);
  EXPECT_NEAR(r.best.values().norm(), 1.0, 1e-12);
  EXPECT_DOUBLE_EQ(r.best_return, r.best[2]);
}

TEST(CemSearch, BestReturnNeverDecreases) {
  CemConfig c;
  c.adapt_epochs = 8;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    c.seed = seed;
    const auto b = cem_search(up_score, 3, c).trace.best_returns();
    for (std::size_t i = 1; i < b.size(); ++i) EXPECT_GE(b[i], b[i - 1]);
  }
}

TEST(CemSearch, NoSamplesKeepsInitialElites) {
  CemConfig c;
  c.samples_per_elite = 0;
  c.adapt_epochs = 4;
  const auto r = cem_search(up_score, 3, c);
  for (const auto& e : r.trace.epochs) {
    EXPECT_EQ(e.elites, r.trace.epochs.front().elites);
    EXPECT_EQ(e.episodes, c.elite_capacity);
  }
}

TEST(CemSearch, VanishingSigmaIsAFixedPoint) {
  CemConfig c;
  c.sample_sigma = 1e-14;
  c.adapt_epochs = 5;
  const auto r = cem_search(up_score, 3, c);
  const auto b = r.trace.best_returns();
  for (double v : b) EXPECT_NEAR(v, b.front(), 1e-12);
}

TEST(CemSearch, SortedElitesAndDecayingSigma) {
  CemConfig c;
  c.adapt_epochs = 4;
  c.sample_sigma = 0.5;
  c.sigma_decay = 0.5;
  const auto r = cem_search(up_score, 3, c);
  for (std::size_t e = 0; e < r.trace.epochs.size(); ++e) {
    const auto& ep = r.trace.epochs[e];
    EXPECT_DOUBLE_EQ(ep.sigma, 0.5 * std::pow(0.5, static_cast<double>(e)));
    ASSERT_EQ(ep.elites.size(), 5u);
    for (std::size_t i = 1; i < ep.elite_returns.size(); ++i) EXPECT_GE(ep.elite_returns[i - 1], ep.elite_returns[i]);
    for (std::size_t i = 0; i < ep.elites.size(); ++i) EXPECT_DOUBLE_EQ(ep.elite_returns[i], ep.elites[i][2]);
  }
}

TEST(CemSearch, EvaluationBudget) {
  CemConfig c;
  c.elite_capacity = 3;
  c.samples_per_elite = 4;
  c.adapt_epochs = 6;
  c.episodes_per_eval = 2;
  std::atomic<int> calls{0};
  const auto r = cem_search([&](const LatentTaskEmbedding& z) { ++calls; return z[0]; }, 3, c);
  EXPECT_EQ(calls.load(), 6 * 3 * (4 + 1));
  for (const auto& e : r.trace.epochs) EXPECT_EQ(e.episodes, 3 * 5 * 2);
}

TEST(CemSearch, ThreadCountDoesNotChangeResult) {
  CemConfig c;
  c.adapt_epochs = 3;
  const auto a = cem_search(up_score, 3, c, 1);
  const auto b = cem_search(up_score, 3, c, 3);
  EXPECT_EQ(a.best, b.best);
  EXPECT_EQ(a.trace.best_returns(), b.trace.best_returns());
}

TEST(CemSearch, Validation) {
  CemConfig c;
  c.elite_capacity = 0;
  EXPECT_THROW(cem_search(up_score, 3, c), ConfigError);
  c = {};
  c.sigma_decay = 1.5;
  EXPECT_THROW(cem_search(up_score, 3, c), ConfigError);
  EXPECT_THROW(cem_search(up_score, 1, CemConfig{}), ConfigError);
  EXPECT_THROW(cem_search([](const LatentTaskEmbedding&) { return std::nan(""); }, 3, CemConfig{}), NonFiniteError);
}

TEST(CemAdapt, PreconditionsOnTheModel) {
  const auto tasks = dir_tasks();
  const auto untrained = SacModel::create(PolicyKind::kEar, tasks, tiny_config());
  EXPECT_THROW(cem_adapt(untrained, dir_task(30), CemConfig{}), ConfigError);
  const auto ohe = tiny_trained(PolicyKind::kOhe, tasks);
  EXPECT_THROW(cem_adapt(ohe, dir_task(30), CemConfig{}), ConfigError);
  const auto ear = tiny_trained(PolicyKind::kEar, tasks);
  EXPECT_THROW(cem_adapt(ear, vel_task(1.0), CemConfig{}), ConfigError);
}

TEST(CemAdapt, ScoresAreEvaluationReturns) {
  const auto m = tiny_trained(PolicyKind::kEar, dir_tasks());
  CemConfig c;
  c.elite_capacity = 2;
  c.samples_per_elite = 2;
  c.adapt_epochs = 2;
  c.seed = 4;
  const TaskSpec task = dir_task(30);
  const auto r = cem_adapt(m, task, c);
  const std::uint64_t s = Rng(c.seed).split(Stream::kEval)();
  EXPECT_DOUBLE_EQ(r.best_return, evaluate_policy(m, r.best, task, 1, s).mean_return);
  const auto again = cem_adapt(m, task, c, 2);
  EXPECT_EQ(again.best, r.best);
}

TEST(AdaptationCurve, MeanAndPopulationStd) {
  CemTrace a, b;
  for (double v : {1.0, 2.0}) a.epochs.push_back(CemEpoch{{}, {}, v, 0, 0});
  for (double v : {3.0, 2.0}) b.epochs.push_back(CemEpoch{{}, {}, v, 0, 0});
  const auto c = adaptation_curve({a, b});
  ASSERT_EQ(c.size(), 2u);
  EXPECT_DOUBLE_EQ(c[0].mean_best_return, 2.0);
  EXPECT_DOUBLE_EQ(c[0].std_best_return, 1.0);
  EXPECT_DOUBLE_EQ(c[1].std_best_return, 0.0);
  b.epochs.pop_back();
  EXPECT_THROW(adaptation_curve({a, b}), ConfigError);
  EXPECT_THROW(adaptation_curve({}), ConfigError);
}
