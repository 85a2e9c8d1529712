#include "support.hpp"

#include "lhm/baselines.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <functional>

using namespace lhm;
using namespace lhm::baselines;

namespace {

// Deterministic forecaster x_d(t) = fn(t, d); every sample equals the mean.
class FixedPredictor final : public Predictor {
 public:
  explicit FixedPredictor(std::function<double(double, int)> fn) : fn_(std::move(fn)) {}
  [[nodiscard]] std::string kind() const override { return "fixed"; }
  [[nodiscard]] Forecast predict(const TrajectoryRecord& r, double, std::span<const double> query, int S,
                                 std::uint64_t) const override {
    Forecast f;
    f.times.assign(query.begin(), query.end());
    f.mean = Mat(static_cast<Eigen::Index>(query.size()), r.dims());
    for (std::size_t q = 0; q < query.size(); ++q) {
      for (Eigen::Index d = 0; d < r.dims(); ++d) f.mean(static_cast<Eigen::Index>(q), d) = fn_(query[q], static_cast<int>(d));
      const Mat col = f.mean.row(static_cast<Eigen::Index>(q)).transpose();
      f.emission.push_back(col.replicate(1, S));
      f.measurement.push_back(col.replicate(1, S));
    }
    return f;
  }
  [[nodiscard]] json to_json() const override { return json{{"kind", "fixed"}}; }

 private:
  std::function<double(double, int)> fn_;
};

double truth(double t, int d) { return std::sin(0.3 * t + d) + 0.1 * d; }

std::vector<TrajectoryRecord> noiseless_records(int n, int D) {
  std::vector<TrajectoryRecord> out;
  for (int i = 0; i < n; ++i) {
    TrajectoryRecord r;
    r.id = "v" + std::to_string(i);
    for (int t = 1; t <= 14; ++t) r.times.push_back(t);
    r.y = Mat(14, D);
    r.mask = Mat::Ones(14, D);
    for (int t = 0; t < 14; ++t)
      for (int d = 0; d < D; ++d) r.y(t, d) = truth(t + 1, d) + 0.01 * i;
    if (i % 2) r.mask(9, 1) = 0;
    out.push_back(r);
  }
  return out;
}

inference::TrainConfig quick(int epochs, std::uint64_t seed = 1) {
  inference::TrainConfig c;
  c.max_epochs = epochs;
  c.batch_size = 5;
  c.final_loss_samples = 2;
  c.patience = epochs;
  c.seed = seed;
  return c;
}

}  // namespace

TEST(Ensemble, LeastSquaresHandValues) {
  const auto w = least_squares_weights({0.0}, {2.0}, {1.0});
  EXPECT_NEAR(w.w_node, 0.0, 1e-12);
  EXPECT_NEAR(w.w_expert, 0.5, 1e-12);
  const std::vector<double> y = {1.0, -2.0, 0.5, 3.0};
  const auto same = least_squares_weights(y, y, y);
  EXPECT_NEAR(same.w_node, 0.5, 1e-12);
  EXPECT_NEAR(same.w_expert, 0.5, 1e-12);
  const auto exact = least_squares_weights({0.3, 1.0, -4.0, 2.0}, y, y);
  EXPECT_NEAR(exact.w_node, 0.0, 1e-12);
  EXPECT_NEAR(exact.w_expert, 1.0, 1e-12);
  const auto empty = least_squares_weights({}, {}, {});
  EXPECT_EQ(empty.w_node, 0.5);
  EXPECT_EQ(empty.w_expert, 0.5);
}

TEST(Ensemble, PerfectExpertGetsAllTheWeight) {
  const FixedPredictor expert(truth);
  const FixedPredictor node([](double t, int d) { return 0.5 * t - d; });
  auto val = noiseless_records(6, 3);
  for (auto& r : val)
    for (int t = 0; t < 14; ++t)
      for (int d = 0; d < 3; ++d) r.y(t, d) = truth(t + 1, d);
  const auto w = fit_day_weights(node, expert, val, 5.0, 4, 0);
  ASSERT_EQ(w.size(), 9u);  // days 6..14
  EXPECT_EQ(w.begin()->first, 6);
  for (const auto& [day, dw] : w) {
    EXPECT_LT(std::abs(dw.w_node), 1e-6) << day;
    EXPECT_LT(std::abs(dw.w_expert - 1.0), 1e-6) << day;
  }
}

TEST(Ensemble, ValidationErrorDominatesBothComponents) {
  const FixedPredictor expert([](double t, int d) { return truth(t, d) + 0.3 * std::cos(t * d); });
  const FixedPredictor node([](double t, int d) { return 0.7 * truth(t, d) + 0.05 * t; });
  const auto val = noiseless_records(6, 3);
  const auto w = fit_day_weights(node, expert, val, 4.0, 2, 0);
  auto sse = [&](auto weight) {
    double s = 0.0;
    for (const auto& r : val) {
      const auto fut = future_after(r, 4.0);
      const auto fn = node.predict(r, 4.0, fut.times, 1, 0);
      const auto fe = expert.predict(r, 4.0, fut.times, 1, 0);
      for (Eigen::Index q = 0; q < fn.mean.rows(); ++q)
        for (Eigen::Index d = 0; d < 3; ++d) {
          if (fut.mask(q, d) < 0.5) continue;
          const auto dw = weight(fut.times[static_cast<std::size_t>(q)]);
          const double e = dw.w_node * fn.mean(q, d) + dw.w_expert * fe.mean(q, d) - fut.y(q, d);
          s += e * e;
        }
    }
    return s;
  };
  const double ens = sse([&](double t) { return w.at(forecast_day(t)); });
  const double only_node = sse([](double) { return DayWeights{1.0, 0.0}; });
  const double only_expert = sse([](double) { return DayWeights{0.0, 1.0}; });
  EXPECT_LE(ens, std::min(only_node, only_expert) + 1e-9);
}

TEST(Ensemble, MissingDayFallsBackToEqualWeights) {
  auto vm = inference::make_variational_model(node_spec(2, 2), 0, 0, 1);
  auto ve = inference::make_variational_model(expert_spec(2), 0, 0, 1);
  const EnsemblePredictor e(LatentPredictor("node", vm, ode::SolverConfig::fixed_rk4()),
                            LatentPredictor("expert", ve, ode::SolverConfig::fixed_rk4()),
                            {{7, DayWeights{2.0, -1.0}}}, 5.0);
  EXPECT_EQ(e.weights_at(6.5).w_node, 2.0);
  EXPECT_EQ(e.weights_at(8.0).w_node, 0.5);
  EXPECT_EQ(e.weights_at(8.0).w_expert, 0.5);
}

TEST(Ensemble, ForecastIsTheWeightedCombination) {
  const LatentPredictor node("node", inference::make_variational_model(node_spec(3, 4), 0, 0, 2),
                             ode::SolverConfig::fixed_rk4());
  const LatentPredictor expert("expert", inference::make_variational_model(expert_spec(3), 0, 0, 3),
                               ode::SolverConfig::fixed_rk4());
  const EnsemblePredictor e(node, expert, {{6, {0.25, 0.75}}, {7, {1.5, -0.5}}}, 5.0);
  Rng rng = make_stream({80});
  const auto r = lhm::testing::toy_record(rng, "a", 3, 10, 2.0, 1.0);
  const std::vector<double> q = {6.0, 7.0, 8.0};
  const auto f = e.predict(r, 5.0, q, 6, 4);
  const auto fn = node.predict(r, 5.0, q, 6, 4);
  const auto fe = expert.predict(r, 5.0, q, 6, 4);
  const std::vector<DayWeights> w = {{0.25, 0.75}, {1.5, -0.5}, {0.5, 0.5}};
  for (std::size_t i = 0; i < q.size(); ++i) {
    const auto ii = static_cast<Eigen::Index>(i);
    EXPECT_LT((f.mean.row(ii) - (w[i].w_node * fn.mean.row(ii) + w[i].w_expert * fe.mean.row(ii))).cwiseAbs().maxCoeff(),
              1e-12);
  }
}

TEST(Residual, RecordsInheritTheMask) {
  const LatentPredictor expert("expert", inference::make_variational_model(expert_spec(4), 0, 0, 4),
                               ode::SolverConfig::fixed_rk4());
  Rng rng = make_stream({81});
  const auto r = lhm::testing::toy_record(rng, "a", 4, 8, 3.0, 2.0);
  const auto rr = residual_record(expert, r, 0);
  EXPECT_EQ(rr.mask, r.mask);
  EXPECT_EQ(rr.times, r.times);
  for (Eigen::Index i = 0; i < r.mask.size(); ++i)
    if (r.mask.data()[i] < 0.5) {
      EXPECT_EQ(rr.y.data()[i], 0.0);
    }
  const auto f = expert.reconstruct(r, make_control(r), r.times, kReconstructionSamples, 0);
  for (Eigen::Index t = 0; t < r.y.rows(); ++t)
    for (Eigen::Index d = 0; d < 4; ++d)
      if (r.mask(t, d) > 0.5) {
        EXPECT_DOUBLE_EQ(rr.y(t, d), r.y(t, d) - f.mean(t, d));
      }
}

TEST(Residual, ForecastIsExpertPlusResidual) {
  const LatentPredictor expert("expert", inference::make_variational_model(expert_spec(3), 0, 0, 5),
                               ode::SolverConfig::fixed_rk4());
  const LatentPredictor node("node", inference::make_variational_model(node_spec(3, 5), 0, 0, 6),
                             ode::SolverConfig::fixed_rk4());
  const ResidualPredictor res(expert, node);
  Rng rng = make_stream({82});
  const auto r = lhm::testing::toy_record(rng, "a", 3, 10, 2.0, 1.0);
  const std::vector<double> q = {6.0, 8.0, 10.0};
  const auto f = res.predict(r, 5.0, q, 5, 7);

  const auto hist = history_until(r, 5.0);
  std::vector<double> times = hist.times;
  times.insert(times.end(), q.begin(), q.end());
  const auto fe = expert.reconstruct(hist, make_control(r), times, 5, 7);
  auto rh = hist;
  for (Eigen::Index t = 0; t < rh.y.rows(); ++t)
    for (Eigen::Index d = 0; d < 3; ++d) rh.y(t, d) = rh.mask(t, d) > 0.5 ? hist.y(t, d) - fe.mean(t, d) : 0.0;
  const auto fr = node.predict(rh, 5.0, q, 5, 7);
  const std::size_t H = hist.size();
  for (std::size_t i = 0; i < q.size(); ++i) {
    EXPECT_EQ(f.emission[i], fe.emission[H + i] + fr.emission[i]);
    EXPECT_LT((f.mean.row(static_cast<Eigen::Index>(i)) -
               (fe.mean.row(static_cast<Eigen::Index>(H + i)) + fr.mean.row(static_cast<Eigen::Index>(i))))
                  .cwiseAbs()
                  .maxCoeff(),
              1e-12);
  }
  EXPECT_THROW(res.predict(r, 5.0, std::vector<double>{4.0}, 2, 0), ad::ContractError);
}

TEST(Residual, ZeroResidualsLearnAZeroForecast) {
  // Expert perfect: the residual NODE sees only zeros on a noiseless toy.
  std::vector<TrajectoryRecord> zeros;
  for (int i = 0; i < 10; ++i) {
    TrajectoryRecord r;
    r.id = "z" + std::to_string(i);
    for (int t = 1; t <= 8; ++t) r.times.push_back(t);
    r.y = Mat::Zero(8, 3);
    r.mask = Mat::Ones(8, 3);
    r.treatments = {{1.0 + 0.5 * i, 2.0}};
    zeros.push_back(r);
  }
  const auto node = fit_latent("node", node_spec(3, 5), 0, 0, zeros, zeros, quick(150));
  double sq = 0.0;
  std::size_t n = 0;
  for (const auto& r : zeros) {
    const auto f = node.predict(r, 3.0, std::vector<double>{4, 5, 6, 7, 8}, 20, 0);
    sq += f.mean.squaredNorm();
    n += static_cast<std::size_t>(f.mean.size());
  }
  EXPECT_LT(std::sqrt(sq / static_cast<double>(n)), 0.05);
}

TEST(Specs, LatentCounts) {
  EXPECT_EQ(expert_spec(20).latent_dim(), 5);
  EXPECT_EQ(lhm_spec(20, 2).latent_dim(), 7);
  EXPECT_EQ(node_spec(20, 7).latent_dim(), 7);
  EXPECT_FALSE(node_spec(20, 7).has_expert);
}

TEST(Node, ZeroDynamicsGiveConstantLatents) {
  auto vm = inference::make_variational_model(node_spec(3, 4), 0, 0, 7);
  for (auto& e : vm.params.entries())
    if (e.name.starts_with(model::kDynPrefix)) e.value.setZero();
  const auto p = ad::bind(vm.params);
  const auto bm = model::bind(vm.model, p);
  const Mat z0 = Mat::Constant(4, 2, 0.3);
  const auto c = make_control({{2.0, 1.0}}, {});
  const std::vector<double> times = {1.0, 3.0, 9.0};
  for (const auto& z : model::solve_latent(bm, z0, c, times, ode::SolverConfig::fixed_rk4())) EXPECT_EQ(z, z0);
}

TEST(Serialization, PredictorsRoundTrip) {
  const LatentPredictor node("node", inference::make_variational_model(node_spec(3, 4), 0, 0, 8),
                             ode::SolverConfig::fixed_rk4());
  const LatentPredictor expert("expert", inference::make_variational_model(expert_spec(3), 0, 0, 9),
                               ode::SolverConfig::fixed_rk4());
  const LatentPredictor lhm("lhm", inference::make_variational_model(lhm_spec(3, 1), 2, 0, 10),
                            ode::SolverConfig::fixed_rk4());
  const ResidualPredictor res(expert, node);
  const EnsemblePredictor ens(node, expert, {{6, {0.2, 0.9}}}, 5.0);
  Rng rng = make_stream({83});
  const auto r = lhm::testing::toy_record(rng, "a", 3, 9, 2.0, 1.0);
  const std::vector<double> q = {6.0, 9.0};
  for (const Predictor* p : std::initializer_list<const Predictor*>{&node, &expert, &lhm, &res, &ens}) {
    const auto back = predictor_from_json(json::parse(p->to_json().dump()));
    EXPECT_EQ(back->kind(), p->kind());
    EXPECT_EQ(back->predict(r, 5.0, q, 4, 1).mean, p->predict(r, 5.0, q, 4, 1).mean) << p->kind();
  }
  EXPECT_THROW(predictor_from_json(json{{"kind", "gru"}}), std::invalid_argument);
}
