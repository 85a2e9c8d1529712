#pragma once

// Forecasting methods behind one predict() contract: the hybrid model and
// its NODE / Expert special cases, Expert + residual NODE, and a per-day
// least-squares ensemble of NODE and Expert.

#include "lhm/data.hpp"
#include "lhm/inference.hpp"
#include "lhm/model.hpp"

#include <Eigen/QR>

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace lhm::baselines {

using ad::Mat;
using inference::Forecast;
using inference::TrainConfig;
using inference::TrainResult;
using inference::VariationalModel;

class Predictor {
 public:
  virtual ~Predictor() = default;
  [[nodiscard]] virtual std::string kind() const = 0;
  // Same semantics as inference::predict: history up to t0 only, query > t0.
  [[nodiscard]] virtual Forecast predict(const TrajectoryRecord& r, double t0, std::span<const double> query, int S,
                                         std::uint64_t seed) const = 0;
  [[nodiscard]] virtual json to_json() const = 0;
};

// ---- model specs --------------------------------------------------------------

inline model::ModelSpec lhm_spec(int D, int M, int controls = 1,
                                 pharmaco::PriorSetting prior = pharmaco::PriorSetting::simulation) {
  model::ModelSpec s;
  s.has_expert = true;
  s.latent = M;
  s.dims = D;
  s.controls = controls;
  s.prior = prior;
  return s;
}

// Z defaults to E + M.
inline model::ModelSpec node_spec(int D, int Z, int controls = 1) {
  model::ModelSpec s;
  s.has_expert = false;
  s.latent = Z;
  s.dims = D;
  s.controls = controls;
  return s;
}

inline model::ModelSpec expert_spec(int D, int controls = 1,
                                    pharmaco::PriorSetting prior = pharmaco::PriorSetting::simulation) {
  return lhm_spec(D, 0, controls, prior);
}

// ---- latent ODE predictors (lhm / node / expert) ----------------------------------

class LatentPredictor final : public Predictor {
 public:
  LatentPredictor(std::string kind, VariationalModel vm, ode::SolverConfig solver)
      : kind_(std::move(kind)), vm_(std::move(vm)), solver_(solver) {}

  [[nodiscard]] std::string kind() const override { return kind_; }
  [[nodiscard]] const VariationalModel& model() const { return vm_; }
  [[nodiscard]] const ode::SolverConfig& solver() const { return solver_; }

  [[nodiscard]] Forecast predict(const TrajectoryRecord& r, double t0, std::span<const double> query, int S,
                                 std::uint64_t seed) const override {
    return inference::predict(vm_, r, t0, query, S, seed, solver_);
  }

  // Emissions at arbitrary times (including history times) given `history`.
  [[nodiscard]] Forecast reconstruct(const TrajectoryRecord& history, const TreatmentControl& c,
                                     std::span<const double> times, int S, std::uint64_t seed) const {
    Rng rng = make_stream({seed, tag(Purpose::predict), inference::id_hash(history.id), 1});
    return inference::posterior_predictive(vm_, history, c, times, S, rng, solver_);
  }

  [[nodiscard]] json to_json() const override {
    return json{{"kind", kind_},
                {"solver", {{"method", ode::method_name(solver_.method)},
                            {"rtol", solver_.rtol},
                            {"atol", solver_.atol},
                            {"substeps", solver_.substeps},
                            {"max_step", solver_.max_step},
                            {"max_steps", solver_.max_steps}}},
                {"model", vm_.to_json()}};
  }

  static LatentPredictor from_json(const json& j) {
    ode::SolverConfig s;
    const auto& sj = j.at("solver");
    s.method = ode::parse_method(sj.at("method").get<std::string>());
    s.rtol = sj.at("rtol").get<double>();
    s.atol = sj.at("atol").get<double>();
    s.substeps = sj.at("substeps").get<int>();
    s.max_step = sj.value("max_step", s.max_step);
    s.max_steps = sj.at("max_steps").get<std::size_t>();
    return LatentPredictor(j.at("kind").get<std::string>(), VariationalModel::from_json(j.at("model")), s);
  }

 private:
  std::string kind_;
  VariationalModel vm_;
  ode::SolverConfig solver_;
};

struct Fitted {
  std::unique_ptr<Predictor> predictor;
  std::vector<TrainResult> results;  // one per trained component
};

inline LatentPredictor fit_latent(const std::string& kind, const model::ModelSpec& spec, int flows,
                                  int encoder_hidden, const std::vector<TrajectoryRecord>& train,
                                  const std::vector<TrajectoryRecord>& val, const TrainConfig& cfg,
                                  TrainResult* result = nullptr, const inference::TrainHooks& hooks = {}) {
  auto vm = inference::make_variational_model(spec, flows, encoder_hidden, cfg.seed);
  auto r = inference::train(vm, train, val, cfg, hooks);
  if (result) *result = std::move(r);
  return LatentPredictor(kind, std::move(vm), cfg.solver);
}

inline LatentPredictor fit_lhm(int M, int D, int flows, const std::vector<TrajectoryRecord>& train,
                               const std::vector<TrajectoryRecord>& val, const TrainConfig& cfg,
                               TrainResult* result = nullptr) {
  return fit_latent("lhm", lhm_spec(D, M), flows, 0, train, val, cfg, result);
}

inline LatentPredictor fit_node(int Z, int D, const std::vector<TrajectoryRecord>& train,
                                const std::vector<TrajectoryRecord>& val, const TrainConfig& cfg,
                                TrainResult* result = nullptr) {
  return fit_latent("node", node_spec(D, Z), 0, 0, train, val, cfg, result);
}

inline LatentPredictor fit_expert(int D, const std::vector<TrajectoryRecord>& train,
                                  const std::vector<TrajectoryRecord>& val, const TrainConfig& cfg,
                                  TrainResult* result = nullptr) {
  return fit_latent("expert", expert_spec(D), 0, 0, train, val, cfg, result);
}

// ---- residual -----------------------------------------------------------------------

inline constexpr int kReconstructionSamples = 32;

// r(t) = y(t) - mean Expert reconstruction at the record's own times, with
// the mask carried over unchanged.
inline TrajectoryRecord residual_record(const LatentPredictor& expert, const TrajectoryRecord& r,
                                        std::uint64_t seed) {
  TrajectoryRecord out = r;
  if (r.size() == 0) return out;
  const auto c = make_control(r);
  const auto f = expert.reconstruct(r, c, std::span<const double>(r.times), kReconstructionSamples, seed);
  for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(r.size()); ++i)
    for (Eigen::Index d = 0; d < r.dims(); ++d)
      out.y(i, d) = r.mask(i, d) > 0.5 ? r.y(i, d) - f.mean(i, d) : 0.0;
  return out;
}

class ResidualPredictor final : public Predictor {
 public:
  ResidualPredictor(LatentPredictor expert, LatentPredictor node) : expert_(std::move(expert)), node_(std::move(node)) {}

  [[nodiscard]] std::string kind() const override { return "residual"; }
  [[nodiscard]] const LatentPredictor& expert() const { return expert_; }
  [[nodiscard]] const LatentPredictor& node() const { return node_; }

  // Expert forecast plus residual forecast, sample by sample. The residual
  // history is y minus the Expert reconstruction from the same history.
  [[nodiscard]] Forecast predict(const TrajectoryRecord& r, double t0, std::span<const double> query, int S,
                                 std::uint64_t seed) const override {
    for (double t : query)
      if (!(t > t0)) throw ad::ContractError("predict: query time is not after t0");
    const auto history = history_until(r, t0);
    if (history.size() == 0) throw ad::ContractError("predict: record '" + r.id + "' has no history before t0");
    const auto c = make_control(r);
    std::vector<double> times = history.times;
    times.insert(times.end(), query.begin(), query.end());
    const auto fe = expert_.reconstruct(history, c, std::span<const double>(times), S, seed);
    const std::size_t H = history.size();

    TrajectoryRecord rh = history;
    for (std::size_t i = 0; i < H; ++i)
      for (Eigen::Index d = 0; d < rh.dims(); ++d) {
        const auto ii = static_cast<Eigen::Index>(i);
        rh.y(ii, d) = rh.mask(ii, d) > 0.5 ? history.y(ii, d) - fe.mean(ii, d) : 0.0;
      }
    const auto fr = node_.predict(rh, t0, query, S, seed);

    Forecast f;
    f.times.assign(query.begin(), query.end());
    f.mean = fe.mean.bottomRows(static_cast<Eigen::Index>(query.size())) + fr.mean;
    for (std::size_t q = 0; q < query.size(); ++q) {
      f.emission.push_back(fe.emission[H + q] + fr.emission[q]);
      f.measurement.push_back(fe.emission[H + q] + fr.measurement[q]);
    }
    f.redraws = fe.redraws + fr.redraws;
    return f;
  }

  [[nodiscard]] json to_json() const override {
    return json{{"kind", "residual"}, {"expert", expert_.to_json()}, {"node", node_.to_json()}};
  }

 private:
  LatentPredictor expert_;
  LatentPredictor node_;
};

inline ResidualPredictor fit_residual(const LatentPredictor& expert, int Z, const std::vector<TrajectoryRecord>& train,
                                      const std::vector<TrajectoryRecord>& val, const TrainConfig& cfg,
                                      TrainResult* result = nullptr) {
  std::vector<TrajectoryRecord> rt, rv;
  for (const auto& r : train) rt.push_back(residual_record(expert, r, cfg.seed));
  for (const auto& r : val) rv.push_back(residual_record(expert, r, cfg.seed));
  const int D = expert.model().model.dims;
  auto node = fit_latent("node", node_spec(D, Z), 0, 0, rt, rv, cfg, result);
  return ResidualPredictor(expert, std::move(node));
}

// ---- ensemble -------------------------------------------------------------------------

struct DayWeights {
  double w_node = 0.5;
  double w_expert = 0.5;
};

// Minimum-norm least squares for y ~ w1 a + w2 b.
inline DayWeights least_squares_weights(const std::vector<double>& a, const std::vector<double>& b,
                                        const std::vector<double>& y) {
  if (a.empty()) return {};
  const auto n = static_cast<Eigen::Index>(a.size());
  Mat X(n, 2);
  Eigen::VectorXd Y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    X(i, 0) = a[static_cast<std::size_t>(i)];
    X(i, 1) = b[static_cast<std::size_t>(i)];
    Y(i) = y[static_cast<std::size_t>(i)];
  }
  Eigen::CompleteOrthogonalDecomposition<Mat> cod(X);
  cod.setThreshold(1e-12);
  const Eigen::VectorXd w = cod.solve(Y);
  return {w(0), w(1)};
}

inline int forecast_day(double t) { return static_cast<int>(std::ceil(t - 1e-9)); }

class EnsemblePredictor final : public Predictor {
 public:
  EnsemblePredictor(LatentPredictor node, LatentPredictor expert, std::map<int, DayWeights> weights, double t0)
      : node_(std::move(node)), expert_(std::move(expert)), weights_(std::move(weights)), t0_(t0) {}

  [[nodiscard]] std::string kind() const override { return "ensemble"; }
  [[nodiscard]] const std::map<int, DayWeights>& weights() const { return weights_; }

  [[nodiscard]] DayWeights weights_at(double t) const {
    auto it = weights_.find(forecast_day(t));
    return it == weights_.end() ? DayWeights{} : it->second;
  }

  // Weighted emissions; measurement noise is taken from whichever component
  // carries the larger absolute weight on that day.
  [[nodiscard]] Forecast predict(const TrajectoryRecord& r, double t0, std::span<const double> query, int S,
                                 std::uint64_t seed) const override {
    const auto fn = node_.predict(r, t0, query, S, seed);
    const auto fe = expert_.predict(r, t0, query, S, seed);
    Forecast f;
    f.times.assign(query.begin(), query.end());
    f.mean = Mat(fn.mean.rows(), fn.mean.cols());
    for (std::size_t q = 0; q < query.size(); ++q) {
      const auto w = weights_at(query[q]);
      const auto qi = static_cast<Eigen::Index>(q);
      f.mean.row(qi) = w.w_node * fn.mean.row(qi) + w.w_expert * fe.mean.row(qi);
      const Mat em = w.w_node * fn.emission[q] + w.w_expert * fe.emission[q];
      const Mat noise = std::abs(w.w_node) > std::abs(w.w_expert) ? Mat(fn.measurement[q] - fn.emission[q])
                                                                   : Mat(fe.measurement[q] - fe.emission[q]);
      f.emission.push_back(em);
      f.measurement.push_back(em + noise);
    }
    f.redraws = fn.redraws + fe.redraws;
    return f;
  }

  [[nodiscard]] json to_json() const override {
    json w = json::array();
    for (const auto& [day, dw] : weights_) w.push_back({{"day", day}, {"w_node", dw.w_node}, {"w_expert", dw.w_expert}});
    return json{{"kind", "ensemble"}, {"t0", t0_}, {"weights", w}, {"node", node_.to_json()}, {"expert", expert_.to_json()}};
  }

 private:
  LatentPredictor node_;
  LatentPredictor expert_;
  std::map<int, DayWeights> weights_;
  double t0_;
};

// Per-day weights from validation forecasts after t0, pooled over dimensions.
inline std::map<int, DayWeights> fit_day_weights(const Predictor& node, const Predictor& expert,
                                                 const std::vector<TrajectoryRecord>& val, double t0, int S,
                                                 std::uint64_t seed) {
  std::map<int, std::vector<double>> a, b, y;
  for (const auto& r : val) {
    const auto fut = future_after(r, t0);
    if (fut.size() == 0 || history_until(r, t0).size() == 0) continue;
    const auto fn = node.predict(r, t0, std::span<const double>(fut.times), S, seed);
    const auto fe = expert.predict(r, t0, std::span<const double>(fut.times), S, seed);
    for (std::size_t q = 0; q < fut.size(); ++q) {
      const int day = forecast_day(fut.times[q]);
      const auto qi = static_cast<Eigen::Index>(q);
      for (Eigen::Index d = 0; d < fut.dims(); ++d) {
        if (fut.mask(qi, d) <= 0.5) continue;
        a[day].push_back(fn.mean(qi, d));
        b[day].push_back(fe.mean(qi, d));
        y[day].push_back(fut.y(qi, d));
      }
    }
  }
  std::map<int, DayWeights> w;
  for (const auto& [day, ys] : y) w[day] = least_squares_weights(a[day], b[day], ys);
  return w;
}

inline EnsemblePredictor fit_ensemble(const LatentPredictor& node, const LatentPredictor& expert,
                                      const std::vector<TrajectoryRecord>& val, double t0, int S, std::uint64_t seed) {
  return EnsemblePredictor(node, expert, fit_day_weights(node, expert, val, t0, S, seed), t0);
}

// ---- loading ----------------------------------------------------------------------------

inline std::unique_ptr<Predictor> predictor_from_json(const json& j) {
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "lhm" || kind == "node" || kind == "expert")
    return std::make_unique<LatentPredictor>(LatentPredictor::from_json(j));
  if (kind == "residual")
    return std::make_unique<ResidualPredictor>(LatentPredictor::from_json(j.at("expert")),
                                               LatentPredictor::from_json(j.at("node")));
  if (kind == "ensemble") {
    std::map<int, DayWeights> w;
    for (const auto& e : j.at("weights"))
      w[e.at("day").get<int>()] = {e.at("w_node").get<double>(), e.at("w_expert").get<double>()};
    return std::make_unique<EnsemblePredictor>(LatentPredictor::from_json(j.at("node")),
                                               LatentPredictor::from_json(j.at("expert")), std::move(w),
                                               j.at("t0").get<double>());
  }
  throw std::invalid_argument("unknown predictor kind '" + kind + "'");
}

}  // namespace lhm::baselines
