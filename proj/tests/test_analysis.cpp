#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>

#include <cmath>
#include <numbers>

#include "latent_motor/analysis.hpp"
#include "test_util.hpp"

using namespace latent_motor;
using namespace latent_motor::testing_util;

namespace {
MatrixXd mixed_gaussian(Index dim, Index n, std::uint64_t seed) {
  Rng rng(seed);
  MatrixXd mix(dim, dim);
  for (Index i = 0; i < mix.size(); ++i) mix.data()[i] = rng.normal();
  MatrixXd raw(dim, n);
  for (Index i = 0; i < raw.size(); ++i) raw.data()[i] = rng.normal();
  return mix * raw;
}
}  // namespace

TEST(JacobiEigen, MatchesEigenSolver) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    const MatrixXd x = mixed_gaussian(6, 40, s);
    const MatrixXd a = x * x.transpose();
    const auto ours = jacobi_eigen(a);
    Eigen::SelfAdjointEigenSolver<MatrixXd> ref(a);
    const VectorXd want = ref.eigenvalues().reverse();
    for (Index i = 0; i < 6; ++i) EXPECT_NEAR(ours.values[i], want[i], 1e-9 * want[0]);
    EXPECT_LT((a * ours.vectors - ours.vectors * ours.values.asDiagonal()).norm(), 1e-9 * a.norm());
  }
}

TEST(Pca, OrthonormalComponentsDescendingVariance) {
  const auto r = pca(mixed_gaussian(5, 60, 1), 3);
  EXPECT_LT((r.components.transpose() * r.components - MatrixXd::Identity(3, 3)).norm(), 1e-10);
  EXPECT_GE(r.eigenvalues[0], r.eigenvalues[1]);
  EXPECT_GE(r.eigenvalues[1], r.eigenvalues[2]);
  // Projection variance equals the eigenvalue.
  for (Index c = 0; c < 3; ++c)
    EXPECT_NEAR(r.projections.row(c).squaredNorm() / 59.0, r.eigenvalues[c], 1e-9 * r.eigenvalues[0]);
}

TEST(Pca, PointsOnALine) {
  Eigen::Vector3d dir(1, 2, 2);
  dir /= 3.0;
  MatrixXd x(3, 10);
  for (Index t = 0; t < 10; ++t) x.col(t) = Eigen::Vector3d(1, -1, 0.5) + (t - 4.0) * dir;
  const auto r = pca(x, 2);
  EXPECT_NEAR(std::abs(r.components.col(0).dot(dir)), 1.0, 1e-12);
  EXPECT_NEAR(r.eigenvalues[1], 0.0, 1e-12);
  EXPECT_NEAR(r.eigenvalues[0], 82.5 / 9.0, 1e-10);  // sample variance of t - 4, t = 0..9
}

TEST(Pca, FullRankReconstructsExactly) {
  const MatrixXd x = mixed_gaussian(4, 20, 3);
  EXPECT_LT((pca(x, 4).reconstruct() - x).norm(), 1e-10 * x.norm());
}

TEST(Pca, Guards) {
  EXPECT_THROW(pca(MatrixXd::Zero(3, 10), 4), ConfigError);
  EXPECT_THROW(pca(MatrixXd::Zero(3, 2), 2), ConfigError);
  MatrixXd bad = MatrixXd::Zero(2, 5);
  bad(0, 0) = std::nan("");
  EXPECT_THROW(pca(bad, 1), NonFiniteError);
}

TEST(Autocorrelation, LagZeroIsOneAndConstantIsZero) {
  const std::vector<double> x{1, 3, 2, 5, 4};
  EXPECT_DOUBLE_EQ(autocorrelation(x, 2)[0], 1.0);
  for (double r : autocorrelation(std::vector<double>(10, 2.0), 4)) EXPECT_EQ(r, 0.0);
}

TEST(Periodicity, PureSine) {
  for (double period : {8.0, 10.0, 16.0}) {
    std::vector<double> x(200);
    for (std::size_t t = 0; t < x.size(); ++t) x[t] = std::sin(2 * std::numbers::pi * t / period);
    EXPECT_GT(periodicity_score(x), 0.9) << period;
  }
}

TEST(Periodicity, WhiteNoise) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    Rng rng(s);
    std::vector<double> x(200);
    for (double& v : x) v = rng.normal();
    EXPECT_LT(periodicity_score(x), 0.3) << s;
  }
}

TEST(Periodicity, MonotoneRampHasNoPeak) {
  std::vector<double> x(100);
  for (std::size_t t = 0; t < x.size(); ++t) x[t] = static_cast<double>(t);
  EXPECT_EQ(periodicity_score(x), 0.0);
}

TEST(Spearman, Values) {
  EXPECT_DOUBLE_EQ(spearman({1, 2, 3, 4}, {10, 20, 35, 100}), 1.0);
  EXPECT_DOUBLE_EQ(spearman({1, 2, 3, 4}, {4, 3, 2, 1}), -1.0);
  EXPECT_NEAR(spearman({1, 2, 2, 3, 5}, {2, 1, 4, 3, 5}), 0.6668859288553503, 1e-12);  // scipy.stats.spearmanr
  EXPECT_THROW(spearman({1}, {1}), ConfigError);
}

TEST(SearchBeta, GridHit) {
  const auto r = search_beta([](double b) -> std::optional<double> { return 2 * b; }, 1.0, 1e-3);
  EXPECT_TRUE(r.found);
  EXPECT_DOUBLE_EQ(r.beta, 0.5);
  EXPECT_EQ(r.evaluations, 9);
}

TEST(SearchBeta, BisectionBetweenGridPoints) {
  const auto r = search_beta([](double b) -> std::optional<double> { return 2 * b; }, 0.77, 1e-6);
  EXPECT_TRUE(r.found);
  EXPECT_NEAR(r.beta, 0.385, 1e-6);
  EXPECT_NEAR(r.achieved, 0.77, 1e-6);
}

TEST(SearchBeta, DecreasingMetric) {
  const auto r = search_beta([](double b) -> std::optional<double> { return 3 - 2 * b; }, 2.1, 1e-4);
  EXPECT_TRUE(r.found);
  EXPECT_NEAR(r.beta, 0.45, 1e-4);
}

TEST(SearchBeta, UnreachableTarget) {
  const auto r = search_beta([](double b) -> std::optional<double> { return 2 * b; }, 5.0, 0.01);
  EXPECT_FALSE(r.found);
  EXPECT_EQ(r.evaluations, 17);
}

TEST(SearchBeta, SkipsUnusableBetas) {
  auto f = [](double b) -> std::optional<double> {
    if (b < 0.45) return std::nullopt;
    return b;
  };
  const auto r = search_beta(f, 0.8123, 1e-5);
  EXPECT_TRUE(r.found);
  EXPECT_THROW(search_beta(f, 0.5, 0.0), ConfigError);
}

TEST(CombineEmbeddings, AntipodalIsSkippedOnlyWhenNormalized) {
  VectorXd up(3), down(3);
  up << 0, 0, 1;
  down << 0, 0, -1;
  auto m = SacModel::create(PolicyKind::kEar, dir_tasks(), tiny_config());
  EXPECT_FALSE(combine_embeddings(m, up, down, 0.5).has_value());
  const auto row = evaluate_blend(m, up, down, 0.5, m.tasks[0], 1, 0);
  EXPECT_TRUE(row.skipped);
  m.config.normalize_lte = false;
  m.actor.normalize_lte = false;
  const auto raw = combine_embeddings(m, up, down, 0.5);
  ASSERT_TRUE(raw.has_value());
  EXPECT_EQ(*raw, VectorXd::Zero(3));
}

TEST(CombineEmbeddings, EndpointsReproduceTaskBehaviour) {
  const auto m = tiny_trained(PolicyKind::kEar, dir_tasks());
  const auto rows = interpolation_sweep(m, m.actor.lte(0), m.actor.lte(1), {1.0, 0.0}, m.tasks[0], 1, 5);
  EXPECT_NEAR(rows[0].mean_return, evaluate_task(m, 0, 1, 5).mean_return, 1e-9);
  EXPECT_NEAR(rows[1].mean_return, evaluate_policy(m, m.actor.lte(1), m.tasks[0], 1, 5).mean_return, 1e-9);
}

TEST(InterpolationSweep, ThreadsDoNotChangeRows) {
  const auto m = tiny_trained(PolicyKind::kEar, dir_tasks());
  const std::vector<double> betas{1, 0.75, 0.5, 0.25, 0};
  const auto a = interpolation_sweep(m, m.actor.lte(0), m.actor.lte(2), betas, m.tasks[0], 1, 1, 1);
  const auto b = interpolation_sweep(m, m.actor.lte(0), m.actor.lte(2), betas, m.tasks[0], 1, 1, 3);
  for (std::size_t i = 0; i < betas.size(); ++i) {
    EXPECT_EQ(a[i].beta, betas[i]);
    EXPECT_EQ(a[i].metric, b[i].metric);
  }
}

TEST(Sphere, CellsCoverTheGrid) {
  const auto m = SacModel::create(PolicyKind::kEar, dir_tasks(), tiny_config());
  const auto cells = evaluate_sphere(m, m.tasks[0], 3, 1, 0, 2);
  ASSERT_EQ(cells.size(), 18u);
  for (const auto& c : cells) EXPECT_NEAR(c.direction.norm(), 1.0, 1e-12);
  const double cont = sphere_continuity(cells, 3, 1e9);
  EXPECT_EQ(cont, 1.0);
  EXPECT_THROW(sphere_continuity(cells, 4, 1.0), ConfigError);
}

TEST(Sphere, ContinuityCountsEdges) {
  const Index r = 4;
  const auto pts = sphere_grid_points(r);
  std::vector<SphereCell> cells(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) cells[i].metric = pts[i].direction[2];  // smooth in height
  EXPECT_EQ(sphere_continuity(cells, r, 1.0), 1.0);
  for (std::size_t i = 0; i < pts.size(); ++i) cells[i].metric = (i % 2) ? 10.0 : 0.0;
  EXPECT_LT(sphere_continuity(cells, r, 1.0), 0.9);
}

TEST(Sphere, RequiresThreeDimensionalEmbeddings) {
  TrainConfig c = tiny_config();
  c.network.lte_dim = 4;
  const auto m = SacModel::create(PolicyKind::kEar, dir_tasks(), c);
  EXPECT_THROW(evaluate_sphere(m, m.tasks[0], 2), ConfigError);
}

TEST(LseTrajectory, ShapesAndScores) {
  const auto m = tiny_trained(PolicyKind::kEar, dir_tasks());
  const auto r = lse_trajectory_analysis(m, 1, 3);
  EXPECT_EQ(r.observations.cols(), 201);
  EXPECT_EQ(r.sensory.rows(), 4);
  EXPECT_EQ(r.raw_pca.projections.rows(), 2);
  EXPECT_EQ(r.lse_pca.projections.rows(), 2);
  EXPECT_GE(r.raw_periodicity, 0.0);
  EXPECT_LE(r.lse_periodicity, 1.0);
  const auto ohe = SacModel::create(PolicyKind::kOhe, dir_tasks(), tiny_config());
  EXPECT_THROW(lse_trajectory_analysis(ohe, 0), ConfigError);
}

TEST(Compose, ReportsRunAndJumpMetrics) {
  const auto tasks = make_task_set(TaskFamily::kRunJump);
  const auto m = SacModel::create(PolicyKind::kEar, tasks, tiny_config());
  const auto c = compose(m, m.actor.lte(0), m.actor.lte(4), 0.5, tasks[0], 1, 0);
  EXPECT_FALSE(c.skipped);
  EXPECT_GE(c.mean_height, 0.0);
  EXPECT_EQ(c.horizontal_speed, c.report.mean_metrics.horizontal_speed);
}
