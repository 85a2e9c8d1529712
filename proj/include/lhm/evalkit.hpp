#pragma once

// Forecast metrics (RMSE, sample CRPS) and test-set evaluation.

#include "lhm/baselines.hpp"
#include "lhm/data.hpp"
#include "lhm/inference/predict.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

namespace lhm::eval {

using ad::Mat;

// Forecast at Q query times against measurements y (Q x D) with mask.
struct ForecastBundle {
  Mat mean;                  // Q x D
  std::vector<Mat> samples;  // Q entries of D x S (noise-inclusive)
  Mat y;                     // Q x D
  Mat mask;                  // Q x D

  void validate() const {
    if (mean.rows() != y.rows() || mean.cols() != y.cols() || mask.rows() != y.rows() || mask.cols() != y.cols())
      throw ad::ContractError("forecast bundle: mean/y/mask shapes differ");
    if (!samples.empty() && static_cast<Eigen::Index>(samples.size()) != y.rows())
      throw ad::ContractError("forecast bundle: one sample block per query time required");
  }
};

// CRPS estimate for one scalar: mean|X - y| - 1/2 mean_{j,k}|X_j - X_k|,
// with the pair sum over all ordered pairs (j = k included). O(S log S).
inline double crps_samples(std::vector<double> xs, double y) {
  const auto S = xs.size();
  if (S < 2) throw ad::ContractError("crps: need at least two samples");
  std::sort(xs.begin(), xs.end());
  double abs_err = 0.0, pair = 0.0;
  for (std::size_t i = 0; i < S; ++i) {
    abs_err += std::abs(xs[i] - y);
    pair += (2.0 * static_cast<double>(i + 1) - static_cast<double>(S) - 1.0) * xs[i];
  }
  const double n = static_cast<double>(S);
  return abs_err / n - pair / (n * n);
}

// Running sums over observed entries, so many records can be pooled.
struct MetricSums {
  double sq = 0.0;
  double crps = 0.0;
  std::size_t n = 0;
  std::size_t n_crps = 0;

  void add(const ForecastBundle& b, bool with_crps = true) {
    b.validate();
    for (Eigen::Index q = 0; q < b.y.rows(); ++q)
      for (Eigen::Index d = 0; d < b.y.cols(); ++d) {
        if (b.mask(q, d) <= 0.5) continue;
        const double e = b.mean(q, d) - b.y(q, d);
        sq += e * e;
        ++n;
        if (with_crps) {
          const Mat& s = b.samples.at(static_cast<std::size_t>(q));
          std::vector<double> xs(static_cast<std::size_t>(s.cols()));
          for (Eigen::Index j = 0; j < s.cols(); ++j) xs[static_cast<std::size_t>(j)] = s(d, j);
          crps += crps_samples(std::move(xs), b.y(q, d));
          ++n_crps;
        }
      }
  }

  [[nodiscard]] double rmse() const {
    if (n == 0) throw ad::ContractError("rmse: no observed entries");
    return std::sqrt(sq / static_cast<double>(n));
  }
  [[nodiscard]] double mean_crps() const {
    if (n_crps == 0) throw ad::ContractError("crps: no observed entries");
    return crps / static_cast<double>(n_crps);
  }
};

inline double rmse(const ForecastBundle& b) {
  MetricSums m;
  m.add(b, false);
  return m.rmse();
}

inline double crps(const ForecastBundle& b) {
  for (const auto& s : b.samples)
    if (s.cols() < 2) throw ad::ContractError("crps: need at least two samples");
  MetricSums m;
  m.add(b, true);
  return m.mean_crps();
}

inline ForecastBundle bundle(const inference::Forecast& f, const TrajectoryRecord& future) {
  ForecastBundle b;
  b.mean = f.mean;
  b.samples = f.measurement;
  b.y = future.y;
  b.mask = future.mask;
  return b;
}

struct Evaluation {
  double rmse = 0.0;
  double crps = 0.0;
  std::size_t entries = 0;
  std::size_t records = 0;
};

// Forecasts every record's measurements after t0 from its history.
inline Evaluation evaluate(const baselines::Predictor& p, const std::vector<TrajectoryRecord>& test, double t0, int S,
                           std::uint64_t seed) {
  MetricSums m;
  Evaluation e;
  for (const auto& r : test) {
    const auto fut = future_after(r, t0);
    if (fut.size() == 0 || history_until(r, t0).size() == 0) continue;
    const auto f = p.predict(r, t0, std::span<const double>(fut.times), S, seed);
    m.add(bundle(f, fut), S >= 2);
    ++e.records;
  }
  e.entries = m.n;
  e.rmse = m.rmse();
  e.crps = S >= 2 ? m.mean_crps() : std::nan("");
  return e;
}

// Median posterior Sigma trace over records encoded from history up to t0.
inline double median_posterior_trace(const inference::VariationalModel& vm, const std::vector<TrajectoryRecord>& recs,
                                     double t0) {
  const auto p = ad::bind(vm.params);
  std::vector<double> tr;
  for (const auto& r : recs) {
    const auto h = history_until(r, t0);
    if (h.size() == 0) continue;
    const auto q = inference::encode(vm.encoder, p, h, make_control(r));
    tr.push_back(q.logvar.array().exp().sum());
  }
  if (tr.empty()) throw ad::ContractError("median_posterior_trace: no records with history");
  std::sort(tr.begin(), tr.end());
  const auto n = tr.size();
  return n % 2 ? tr[n / 2] : 0.5 * (tr[n / 2 - 1] + tr[n / 2]);
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw ad::ContractError("median of empty set");
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline double quantile(std::vector<double> v, double q) {
  if (v.empty()) throw ad::ContractError("quantile of empty set");
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

struct Interval {
  double median = 0.0, lo = 0.0, hi = 0.0;
};

// Median with a 95% percentile-bootstrap interval over the given values.
inline Interval bootstrap_median(const std::vector<double>& v, int resamples, std::uint64_t seed) {
  Interval out;
  out.median = median(v);
  Rng rng = make_stream({seed, tag(Purpose::bootstrap), v.size()});
  std::vector<double> meds;
  meds.reserve(static_cast<std::size_t>(resamples));
  std::vector<double> draw(v.size());
  for (int b = 0; b < resamples; ++b) {
    for (auto& x : draw) x = v[static_cast<std::size_t>(rng() % v.size())];
    meds.push_back(median(draw));
  }
  out.lo = quantile(meds, 0.025);
  out.hi = quantile(meds, 0.975);
  return out;
}

}  // namespace lhm::eval
