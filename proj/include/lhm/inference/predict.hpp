#pragma once

// Posterior-predictive forecasting from an encoded history.

#include "lhm/inference/elbo.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace lhm::inference {

// Q query times, D dimensions, S samples.
struct Forecast {
  std::vector<double> times;
  Mat mean;                      // Q x D, mean of emissions
  std::vector<Mat> emission;     // Q entries of D x S (epistemic samples)
  std::vector<Mat> measurement;  // Q entries of D x S, emission plus noise
  int redraws = 0;

  [[nodiscard]] Eigen::Index samples() const { return emission.empty() ? 0 : emission.front().cols(); }
  [[nodiscard]] double sample(std::size_t s, std::size_t q, std::size_t d) const {
    return measurement[q](static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(s));
  }
};

inline std::uint64_t id_hash(const std::string& id) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : id) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

inline constexpr int kMaxRedraws = 50;

// Emitted trajectories at `times` (any times >= 0) for S initial states drawn
// from the posterior encoded from `history`. Diverging draws are replaced.
inline Forecast posterior_predictive(const VariationalModel& vm, const TrajectoryRecord& history,
                                     const TreatmentControl& control, std::span<const double> times, int S, Rng& rng,
                                     const ode::SolverConfig& cfg) {
  if (S < 1) throw ad::ContractError("predict: need at least one sample");
  const auto p = ad::bind(vm.params);
  const auto bm = model::bind(vm.model, p);
  const auto q = encode(vm.encoder, p, history, control);
  const int L = vm.latent_dim();
  const Eigen::Index D = vm.model.dims;

  Mat eps = standard_normal(rng, L, S);
  Forecast f;
  f.times.assign(times.begin(), times.end());
  const auto Q = times.size();
  f.emission.assign(Q, Mat(D, S));

  auto run = [&](const Mat& e) {
    const auto d = draw_posterior(q, e, vm.expert_dim());
    const auto zs = model::solve_latent(bm, d.z0, control, times, cfg);
    return model::emit_trajectory(bm, zs, control, times);
  };
  try {
    const auto xs = run(eps);
    for (std::size_t i = 0; i < Q; ++i) f.emission[i] = xs[i];
  } catch (const ode::DivergenceError&) {
    for (Eigen::Index s = 0; s < S; ++s) {
      Mat e = eps.col(s);
      for (int attempt = 0;; ++attempt) {
        try {
          const auto xs = run(e);
          for (std::size_t i = 0; i < Q; ++i) f.emission[i].col(s) = xs[i];
          break;
        } catch (const ode::DivergenceError&) {
          if (attempt >= kMaxRedraws) throw;
          ++f.redraws;
          e = standard_normal(rng, L, 1);
        }
      }
    }
  }

  const Mat& ls = p(model::kLogSigma);
  Vec sigma(D);
  for (Eigen::Index d = 0; d < D; ++d) sigma(d) = std::exp(ls.size() == 1 ? ls(0, 0) : ls(d, 0));
  f.mean = Mat(static_cast<Eigen::Index>(Q), D);
  f.measurement.reserve(Q);
  for (std::size_t i = 0; i < Q; ++i) {
    f.mean.row(static_cast<Eigen::Index>(i)) = f.emission[i].rowwise().mean().transpose();
    const Mat noise = standard_normal(rng, D, S);
    f.measurement.push_back(f.emission[i] + (noise.array().colwise() * sigma.array()).matrix());
  }
  return f;
}

// Forecast at query times after t0 using only measurements up to t0. The
// treatment plan (past and future) is taken from the record.
inline Forecast predict(const VariationalModel& vm, const TrajectoryRecord& record, double t0,
                        std::span<const double> query, int S, std::uint64_t seed,
                        const ode::SolverConfig& cfg = ode::SolverConfig::fixed_rk4(4)) {
  for (double t : query)
    if (!(t > t0)) throw ad::ContractError("predict: query time " + std::to_string(t) + " is not after t0");
  const auto history = history_until(record, t0);
  if (history.size() == 0) throw ad::ContractError("predict: record '" + record.id + "' has no history before t0");
  Rng rng = make_stream({seed, tag(Purpose::predict), id_hash(record.id)});
  return posterior_predictive(vm, history, make_control(record), query, S, rng, cfg);
}

}  // namespace lhm::inference
