#include "support.hpp"

#include "lhm/evalkit.hpp"
#include "lhm/sweep.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

using namespace lhm;
using namespace lhm::eval;

namespace {

// O(S^2) reference for the same estimator.
double crps_bruteforce(const std::vector<double>& xs, double y) {
  double a = 0.0, b = 0.0;
  for (double x : xs) a += std::abs(x - y);
  for (double x : xs)
    for (double z : xs) b += std::abs(x - z);
  const double n = static_cast<double>(xs.size());
  return a / n - 0.5 * b / (n * n);
}

ForecastBundle random_bundle(Rng& rng, int Q, int D, int S) {
  ForecastBundle b;
  b.y = standard_normal(rng, Q, D);
  b.mean = standard_normal(rng, Q, D);
  b.mask = (standard_normal(rng, Q, D).array() > -0.5).cast<double>().matrix();
  b.mask(0, 0) = 1.0;
  for (int q = 0; q < Q; ++q) b.samples.push_back(standard_normal(rng, D, S));
  return b;
}

std::size_t count_lines(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  std::string line;
  while (std::getline(in, line)) ++n;
  return n;
}

sweep::SweepConfig tiny_sweep() {
  sweep::SweepConfig sc;
  sc.methods = {"expert", "node"};
  sc.N0 = {5};
  sc.M = {1};
  sc.sigma = {0.2};
  sc.t0 = {5.0, 10.0};
  sc.base = {5, 1, 0.2, 5.0};
  sc.seeds = {0, 1};
  sc.bootstrap = 50;
  sc.experiment.evaluation.n_val = 4;
  sc.experiment.evaluation.n_test = 6;
  sc.experiment.evaluation.predict_samples = 4;
  sc.experiment.training.max_epochs = 2;
  sc.experiment.training.final_loss_samples = 1;
  return sc;
}

}  // namespace

TEST(Rmse, Examples) {
  ForecastBundle b;
  b.y = Mat::Zero(1, 2);
  b.mask = Mat::Ones(1, 2);
  b.mean = Mat(1, 2);
  b.mean << 0.0, 2.0;
  EXPECT_NEAR(rmse(b), 1.414214, 1e-6);
  b.mean = b.y;
  EXPECT_EQ(rmse(b), 0.0);
  b.mean = b.y.array() + 1.0;
  EXPECT_DOUBLE_EQ(rmse(b), 1.0);
  b.mask.setZero();
  EXPECT_THROW(rmse(b), ad::ContractError);
}

TEST(Rmse, MaskedEntriesAreIgnored) {
  ForecastBundle b;
  b.y = Mat::Zero(2, 2);
  b.mean = Mat::Constant(2, 2, 3.0);
  b.mean(1, 1) = 1e9;
  b.mask = Mat::Ones(2, 2);
  b.mask(1, 1) = 0.0;
  EXPECT_DOUBLE_EQ(rmse(b), 3.0);
}

TEST(Crps, HandValues) {
  EXPECT_DOUBLE_EQ(crps_samples({0.0, 2.0}, 1.0), 0.5);
  EXPECT_EQ(crps_samples({1.5, 1.5, 1.5}, 1.5), 0.0);
  EXPECT_THROW(crps_samples({1.0}, 1.0), ad::ContractError);
}

TEST(Crps, GaussianClosedForm) {
  Rng rng = make_stream({90});
  const Mat x = standard_normal(rng, 100000, 1);
  const std::vector<double> xs(x.data(), x.data() + x.size());
  const double oracle = 2.0 / std::sqrt(2 * std::numbers::pi) - 1.0 / std::sqrt(std::numbers::pi);
  EXPECT_NEAR(oracle, 0.2337, 1e-4);
  EXPECT_NEAR(crps_samples(xs, 0.0), 0.2337, 0.003);
}

TEST(Crps, SortedEstimatorMatchesPairwiseDefinition) {
  Rng rng = make_stream({91});
  for (int k = 0; k < 50; ++k) {
    const int S = 2 + k % 17;
    const Mat x = standard_normal(rng, S, 1);
    const double y = standard_normal(rng, 1, 1)(0, 0);
    const std::vector<double> xs(x.data(), x.data() + x.size());
    EXPECT_NEAR(crps_samples(xs, y), crps_bruteforce(xs, y), 1e-12);
  }
}

TEST(Crps, PointMassEqualsMeanAbsoluteError) {
  Rng rng = make_stream({92});
  auto b = random_bundle(rng, 4, 3, 5);
  for (int q = 0; q < 4; ++q) b.samples[static_cast<std::size_t>(q)] = b.mean.row(q).transpose().replicate(1, 5);
  double mae = 0.0, n = 0.0;
  for (Eigen::Index i = 0; i < b.y.size(); ++i)
    if (b.mask.data()[i] > 0.5) {
      mae += std::abs(b.mean.data()[i] - b.y.data()[i]);
      n += 1.0;
    }
  EXPECT_NEAR(crps(b), mae / n, 1e-12);
}

TEST(Crps, RequiresTwoSamples) {
  Rng rng = make_stream({93});
  const auto b = random_bundle(rng, 2, 2, 1);
  EXPECT_THROW(crps(b), ad::ContractError);
}

TEST(Metrics, InvariantToSampleOrderAndJointDimensionPermutation) {
  Rng rng = make_stream({94});
  const auto b = random_bundle(rng, 3, 4, 9);
  auto shuffled = b;
  for (auto& s : shuffled.samples) s = s.rowwise().reverse().eval();
  EXPECT_NEAR(crps(shuffled), crps(b), 1e-12);
  Eigen::PermutationMatrix<Eigen::Dynamic> perm(4);
  perm.indices() << 2, 0, 3, 1;
  auto permuted = b;
  permuted.y = b.y * perm;
  permuted.mean = b.mean * perm;
  permuted.mask = b.mask * perm;
  for (auto& s : permuted.samples) s = (perm.transpose() * s).eval();
  EXPECT_NEAR(rmse(permuted), rmse(b), 1e-12);
  EXPECT_NEAR(crps(permuted), crps(b), 1e-12);
}

TEST(Crps, MinimizedNearTheObservation) {
  Rng rng = make_stream({95});
  const Mat x = 0.7 * standard_normal(rng, 4000, 1);
  const double y = 1.3;
  double best = 1e9, best_shift = 0.0;
  for (double shift = -1.0; shift <= 3.0; shift += 0.05) {
    std::vector<double> xs(x.data(), x.data() + x.size());
    for (auto& v : xs) v += shift;
    const double c = crps_samples(xs, y);
    if (c < best) {
      best = c;
      best_shift = shift;
    }
  }
  EXPECT_NEAR(best_shift, y, 0.1);
}

TEST(Bootstrap, IntervalShrinksWithMoreSeeds) {
  Rng rng = make_stream({96});
  std::vector<double> w3, w9;
  for (int axis_point = 0; axis_point < 15; ++axis_point) {
    const Mat v = standard_normal(rng, 9, 1);
    const std::vector<double> nine(v.data(), v.data() + 9);
    const std::vector<double> three(v.data(), v.data() + 3);
    const auto a = bootstrap_median(three, 1000, static_cast<std::uint64_t>(axis_point));
    const auto b = bootstrap_median(nine, 1000, static_cast<std::uint64_t>(axis_point));
    EXPECT_LE(a.lo, a.median);
    EXPECT_GE(a.hi, a.median);
    w3.push_back(a.hi - a.lo);
    w9.push_back(b.hi - b.lo);
  }
  EXPECT_LT(median(w9), median(w3));
}

TEST(Bootstrap, MedianAndQuantileHelpers) {
  EXPECT_EQ(median({3.0, 1.0, 2.0}), 2.0);
  EXPECT_EQ(median({4.0, 1.0, 2.0, 3.0}), 2.5);
  EXPECT_DOUBLE_EQ(quantile({0.0, 10.0}, 0.25), 2.5);
  EXPECT_THROW(median({}), ad::ContractError);
}

TEST(Evaluate, SkipsRecordsWithoutHistoryOrFuture) {
  const baselines::LatentPredictor p("expert", inference::make_variational_model(baselines::expert_spec(3), 0, 0, 1),
                                     ode::SolverConfig::fixed_rk4());
  Rng rng = make_stream({97});
  std::vector<TrajectoryRecord> recs = {lhm::testing::toy_record(rng, "a", 3, 8), lhm::testing::toy_record(rng, "b", 3, 4)};
  recs[1].times = {6.0, 7.0, 8.0, 9.0};  // no history before t0 = 5
  const auto e = evaluate(p, recs, 5.0, 4, 0);
  EXPECT_EQ(e.records, 1u);
  EXPECT_EQ(e.entries, static_cast<std::size_t>(future_after(recs[0], 5.0).mask.sum()));
  EXPECT_TRUE(std::isfinite(e.crps));
}

TEST(Sweep, DefaultAxesAndPoints) {
  const sweep::SweepConfig sc;
  EXPECT_EQ(sc.N0, (std::vector<int>{10, 100, 500, 1000}));
  EXPECT_EQ(sc.M, (std::vector<int>{2, 4, 8}));
  EXPECT_EQ(sc.sigma, (std::vector<double>{0.2, 0.4, 0.8}));
  EXPECT_EQ(sc.t0, (std::vector<double>{2.0, 5.0, 10.0}));
  EXPECT_EQ(sc.points().size(), 10u);
  EXPECT_THROW(sweep::SweepConfig::from_json(json{{"methods", {"gru"}}}), ConfigError);
  EXPECT_THROW(sweep::SweepConfig::from_json(json{{"axes", 1}}), ConfigError);
}

TEST(Sweep, RowCountIsTheCartesianProduct) {
  const auto sc = tiny_sweep();
  const auto dir = std::filesystem::temp_directory_path() / "lhm_sweep_rows";
  std::filesystem::remove_all(dir);
  const auto rows = sweep::run_sweep(sc, dir, 1);
  const std::size_t expected = sc.methods.size() * sc.points().size() * sc.seeds.size();
  EXPECT_EQ(rows.size(), expected);
  EXPECT_EQ(count_lines(dir / "results.csv"), expected + 1);
  for (const auto& r : rows) EXPECT_EQ(r.status, "ok") << r.method;
  EXPECT_GT(count_lines(dir / "aggregate.csv"), 1u);
  std::ifstream in(dir / "results.csv");
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header + "\n", sweep::kResultsHeader);
  std::filesystem::remove_all(dir);
}

TEST(Sweep, FailedRunsBecomeErrorRows) {
  auto sc = tiny_sweep();
  sc.methods = {"expert", "residual"};
  sc.experiment.training.solver = ode::SolverConfig{};
  sc.experiment.training.solver.max_steps = 1;  // every solve diverges
  const auto dir = std::filesystem::temp_directory_path() / "lhm_sweep_fail";
  std::filesystem::remove_all(dir);
  const auto rows = sweep::run_sweep(sc, dir, 2);
  EXPECT_EQ(rows.size(), sc.methods.size() * sc.points().size() * sc.seeds.size());
  for (const auto& r : rows) EXPECT_TRUE(r.status.starts_with("error")) << r.status;
  EXPECT_EQ(count_lines(dir / "aggregate.csv"), 1u);
  std::filesystem::remove_all(dir);
}
