#pragma once

// Synthetic benchmark: expert pharmaco dynamics coupled to M hidden latents
// with tanh(W1 z^m + W2 z^e) dynamics, linear emission x = W3 z + W4 a,
// Gaussian noise, and daily measurements with random dropout.

#include "lhm/data.hpp"
#include "lhm/diffcore.hpp"
#include "lhm/odesolve.hpp"
#include "lhm/pharmaco.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

namespace lhm::synth {

using ad::Mat;
using ad::Vec;

struct GeneratorConfig {
  int D = 20;
  int M = -1;  // -1: D / 10
  double sigma = 0.2;
  double missing = 0.5;
  int n_records = 1200;
  int horizon = 14;  // daily grid 1..T
  double history_floor_t0 = 2.0;
  double max_dose = 10.0;
  std::uint64_t seed = 0;

  [[nodiscard]] int latent() const { return M >= 0 ? M : D / 10; }

  void validate() const {
    if (D < 1) throw std::invalid_argument("generator: D must be positive");
    if (M < 0 && D % 10 != 0) throw std::invalid_argument("generator: D must be a multiple of 10 when M = D/10");
    if (!(sigma > 0.0)) throw std::invalid_argument("generator: sigma must be positive");
    if (missing < 0.0 || missing >= 1.0) throw std::invalid_argument("generator: missing probability outside [0, 1)");
    if (n_records < 1 || horizon < 1) throw std::invalid_argument("generator: n_records and horizon must be positive");
    if (history_floor_t0 < 1.0) throw std::invalid_argument("generator: history floor needs at least day 1");
  }

  [[nodiscard]] json to_json() const {
    return json{{"D", D},
                {"M", latent()},
                {"sigma", sigma},
                {"missing", missing},
                {"n_records", n_records},
                {"horizon", horizon},
                {"history_floor_t0", history_floor_t0},
                {"max_dose", max_dose},
                {"seed", seed}};
  }
  static GeneratorConfig from_json(const json& j) {
    GeneratorConfig c;
    c.D = j.value("D", c.D);
    c.M = j.value("M", c.M);
    c.sigma = j.value("sigma", c.sigma);
    c.missing = j.value("missing", c.missing);
    c.n_records = j.value("n_records", c.n_records);
    c.horizon = j.value("horizon", c.horizon);
    c.history_floor_t0 = j.value("history_floor_t0", c.history_floor_t0);
    c.max_dose = j.value("max_dose", c.max_dose);
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
  }
};

struct GroundTruth {
  Mat W1, W2, W3, W4;
  pharmaco::ExpertCoefficients coefficients = pharmaco::ExpertCoefficients::simulation_truth();
  int resample_count = 0;
};

struct TruthTrajectory {
  std::string id;
  std::vector<double> times;  // full daily grid
  Mat z;                      // T x (E + M), expert block first
  Mat x;                      // T x D noiseless emission
  Vec z0;
  pharmaco::Bolus dose;
};

struct Dataset {
  std::vector<TrajectoryRecord> records;
  std::vector<TruthTrajectory> truth;
  GroundTruth ground_truth;
  GeneratorConfig config;
  std::size_t floor_redraws = 0;
  double raw_missing_fraction = 0.0;  // before the keep-one floor
};

inline json matrix_json(const Mat& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    std::vector<double> v(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index c = 0; c < m.cols(); ++c) v[static_cast<std::size_t>(c)] = m(r, c);
    rows.push_back(v);
  }
  return rows;
}

inline Mat matrix_from_json(const json& j, Eigen::Index cols_if_empty = 0) {
  const auto R = static_cast<Eigen::Index>(j.size());
  const Eigen::Index C = R > 0 ? static_cast<Eigen::Index>(j.at(0).size()) : cols_if_empty;
  Mat m(R, C);
  for (Eigen::Index r = 0; r < R; ++r)
    for (Eigen::Index c = 0; c < C; ++c) m(r, c) = j.at(static_cast<std::size_t>(r)).at(static_cast<std::size_t>(c)).get<double>();
  return m;
}

// z' for the truth system over the full state [z1..z5 | z^m] with the plasma
// concentration z3 supplied by the closed form.
inline Vec truth_rhs(const GroundTruth& g, const Vec& z_full) {
  const auto& k = g.coefficients;
  pharmaco::ExpertState s{z_full(0), z_full(1), z_full(2), z_full(3), z_full(4)};
  const auto d = pharmaco::expert_rhs(s, s.z3, k);
  const Eigen::Index M = z_full.size() - pharmaco::kExpertDim;
  Vec out(z_full.size());
  out << d[0], d[1], d[2], d[3], d[4];
  if (M > 0) {
    const Vec zm = z_full.tail(M);
    const Vec ze = z_full.head(pharmaco::kExpertDim);
    out.tail(M) = (g.W1 * zm + g.W2 * ze).array().tanh().matrix();
  }
  return out;
}

inline double truth_plasma(const GroundTruth& g, double z3_0, const std::vector<pharmaco::Bolus>& doses, double t) {
  return z3_0 * std::exp(-g.coefficients.k_3 * t) +
         pharmaco::plasma_concentration(std::span<const pharmaco::Bolus>(doses), g.coefficients.k_3, t);
}

// Integrates the truth system from z0 (full state) over `times`, starting at
// t_start. Returns one full state per output time (rows).
inline Mat integrate_truth(const GroundTruth& g, const Vec& z0, const std::vector<pharmaco::Bolus>& doses,
                           const std::vector<double>& times, double t_start = 0.0,
                           const ode::SolverConfig& cfg = {}) {
  const Eigen::Index n = z0.size();
  const Eigen::Index M = n - pharmaco::kExpertDim;
  // integrated: [z1 z2 z4 z5 | z^m]; z3 from the closed form with its value at t_start
  const double z3s = z0(2);
  const double k3 = g.coefficients.k_3;
  auto plasma = [&](double t, std::size_t active) {
    double z = z3s * std::exp(-k3 * (t - t_start));
    for (std::size_t i = 0; i < active; ++i)
      if (doses[i].time > t_start) z += doses[i].dose * std::exp(k3 * (doses[i].time - t));
    return z;
  };
  std::vector<double> bps;
  for (const auto& d : doses) bps.push_back(d.time);
  bps.erase(std::unique(bps.begin(), bps.end()), bps.end());
  auto active_in = [&](std::size_t seg) {
    // boluses whose time <= the start of regime `seg`
    if (seg == 0) return std::size_t{0};
    const double b = bps[seg - 1];
    std::size_t a = 0;
    while (a < doses.size() && doses[a].time <= b) ++a;
    return a;
  };
  auto full = [&](const Mat& x, double z3) {
    Vec f(n);
    f << x(0, 0), x(1, 0), z3, x(2, 0), x(3, 0);
    if (M > 0) f.tail(M) = x.block(4, 0, M, 1);
    return f;
  };
  auto rhs = [&](double t, const Mat& x, std::size_t seg) -> Mat {
    const Vec d = truth_rhs(g, full(x, plasma(t, active_in(seg))));
    Mat out(n - 1, 1);
    out << d(0), d(1), d(3), d(4);
    if (M > 0) out.block(4, 0, M, 1) = d.tail(M);
    return out;
  };
  Mat x0(n - 1, 1);
  x0 << z0(0), z0(1), z0(3), z0(4);
  if (M > 0) x0.block(4, 0, M, 1) = z0.tail(M);
  const auto xs = ode::integrate(rhs, x0, std::span<const double>(bps), std::span<const double>(times), cfg, t_start);
  Mat out(static_cast<Eigen::Index>(times.size()), n);
  for (std::size_t i = 0; i < times.size(); ++i) {
    std::size_t seg = static_cast<std::size_t>(std::upper_bound(bps.begin(), bps.end(), times[i]) - bps.begin());
    out.row(static_cast<Eigen::Index>(i)) = full(xs[i], plasma(times[i], active_in(seg))).transpose();
  }
  return out;
}

inline GroundTruth sample_ground_truth(const GeneratorConfig& cfg, int attempt) {
  const int M = cfg.latent();
  const int E = pharmaco::kExpertDim;
  Rng rng = make_stream({cfg.seed, tag(Purpose::generator_matrices), static_cast<std::uint64_t>(attempt)});
  GroundTruth g;
  std::normal_distribution<double> n01(0.0, 1.0);
  std::bernoulli_distribution keep(0.5);
  auto gauss = [&](Eigen::Index r, Eigen::Index c) {
    Mat m(r, c);
    for (Eigen::Index j = 0; j < c; ++j)
      for (Eigen::Index i = 0; i < r; ++i) m(i, j) = n01(rng);
    return m;
  };
  auto masked = [&](Eigen::Index r, Eigen::Index c) {
    Mat m = gauss(r, c);
    for (Eigen::Index j = 0; j < c; ++j)
      for (Eigen::Index i = 0; i < r; ++i)
        if (!keep(rng)) m(i, j) = 0.0;
    return m;
  };
  g.W3 = masked(cfg.D, M + E);
  g.W4 = masked(cfg.D, 1);
  g.W1 = gauss(M, M);
  g.W2 = gauss(M, E);
  g.resample_count = attempt;
  return g;
}

inline constexpr int kMaxGeneratorAttempts = 100;

inline Dataset generate_dataset(const GeneratorConfig& cfg) {
  cfg.validate();
  const int M = cfg.latent();
  const int E = pharmaco::kExpertDim;
  const int T = cfg.horizon;
  std::vector<double> grid(static_cast<std::size_t>(T));
  std::iota(grid.begin(), grid.end(), 1.0);

  for (int attempt = 0; attempt < kMaxGeneratorAttempts; ++attempt) {
    Dataset ds;
    ds.config = cfg;
    ds.ground_truth = sample_ground_truth(cfg, attempt);
    const auto& g = ds.ground_truth;
    std::size_t dropped = 0;
    bool diverged = false;
    for (int i = 0; i < cfg.n_records && !diverged; ++i) {
      Rng rng = make_stream({cfg.seed, tag(Purpose::generator_record), static_cast<std::uint64_t>(i)});
      std::exponential_distribution<double> ex(100.0);
      Vec z0(E + M);
      for (int j = 0; j < E + M; ++j) {
        double v = 0.0;
        do v = ex(rng);
        while (!(v > 0.0));
        z0(j) = v;
      }
      std::uniform_real_distribution<double> ud(0.0, cfg.max_dose), us(0.0, static_cast<double>(T));
      const pharmaco::Bolus dose{us(rng), ud(rng)};
      // the expert's z3(0) is part of the state; boluses add to it
      const std::vector<pharmaco::Bolus> doses{{dose.time, dose.dose}};

      TruthTrajectory tr;
      tr.id = "r" + std::to_string(i);
      tr.times = grid;
      tr.z0 = z0;
      tr.dose = dose;
      try {
        tr.z = integrate_truth(g, z0, doses, grid);
      } catch (const ode::DivergenceError&) {
        diverged = true;
        break;
      }
      if (!tr.z.allFinite() || tr.z.cwiseAbs().maxCoeff() > 1e6) {
        diverged = true;
        break;
      }
      tr.x = Mat(T, cfg.D);
      for (int t = 0; t < T; ++t) {
        const double a = pharmaco::plasma_concentration(std::span<const pharmaco::Bolus>(doses), g.coefficients.k_3,
                                                        grid[static_cast<std::size_t>(t)]);
        tr.x.row(t) = (g.W3 * tr.z.row(t).transpose() + g.W4 * a).transpose();
      }
      const Mat noise = standard_normal(rng, T, cfg.D);
      std::bernoulli_distribution drop(cfg.missing);
      std::vector<bool> keep(static_cast<std::size_t>(T));
      for (int t = 0; t < T; ++t) {
        keep[static_cast<std::size_t>(t)] = !drop(rng);
        if (!keep[static_cast<std::size_t>(t)]) ++dropped;
      }
      auto has_history = [&] {
        for (int t = 0; t < T; ++t)
          if (keep[static_cast<std::size_t>(t)] && grid[static_cast<std::size_t>(t)] <= cfg.history_floor_t0) return true;
        return false;
      };
      while (!has_history()) {
        ++ds.floor_redraws;
        for (int t = 0; t < T; ++t) keep[static_cast<std::size_t>(t)] = !drop(rng);
      }

      TrajectoryRecord r;
      r.id = tr.id;
      r.time_unit = "days";
      r.treatments = doses;
      std::vector<int> kept;
      for (int t = 0; t < T; ++t)
        if (keep[static_cast<std::size_t>(t)]) kept.push_back(t);
      const auto K = static_cast<Eigen::Index>(kept.size());
      r.y = Mat(K, cfg.D);
      r.mask = Mat::Ones(K, cfg.D);
      for (Eigen::Index k = 0; k < K; ++k) {
        const int t = kept[static_cast<std::size_t>(k)];
        r.times.push_back(grid[static_cast<std::size_t>(t)]);
        r.y.row(k) = tr.x.row(t) + cfg.sigma * noise.row(t);
      }
      ds.records.push_back(std::move(r));
      ds.truth.push_back(std::move(tr));
    }
    if (diverged) continue;
    ds.raw_missing_fraction = static_cast<double>(dropped) / static_cast<double>(cfg.n_records * T);
    return ds;
  }
  throw std::runtime_error("generator: truth dynamics diverged for " + std::to_string(kMaxGeneratorAttempts) +
                           " W1/W2 draws");
}

inline json ground_truth_json(const Dataset& ds) {
  const auto& g = ds.ground_truth;
  const auto vals = pharmaco::learnable_values(g.coefficients);
  json coeffs = json::object();
  for (std::size_t i = 0; i < vals.size(); ++i) coeffs[pharmaco::learnable_names()[i]] = vals[i];
  coeffs["h_P"] = g.coefficients.h_P;
  coeffs["h_C"] = g.coefficients.h_C;
  return json{{"config", ds.config.to_json()},
              {"W1", matrix_json(g.W1)},
              {"W2", matrix_json(g.W2)},
              {"W3", matrix_json(g.W3)},
              {"W4", matrix_json(g.W4)},
              {"coefficients", coeffs},
              {"resample_count", g.resample_count},
              {"history_floor_redraws", ds.floor_redraws},
              {"raw_missing_fraction", ds.raw_missing_fraction}};
}

inline json truth_json(const TruthTrajectory& t) {
  return json{{"id", t.id},
              {"times", t.times},
              {"z", matrix_json(t.z)},
              {"x", matrix_json(t.x)},
              {"z0", std::vector<double>(t.z0.data(), t.z0.data() + t.z0.size())},
              {"dose", {{"time", t.dose.time}, {"dose", t.dose.dose}}}};
}

struct Split {
  std::vector<TrajectoryRecord> train, val, test;
};

// Seeded permutation, then consecutive blocks of the requested sizes.
inline Split split_dataset(const std::vector<TrajectoryRecord>& recs, std::size_t n_train, std::size_t n_val,
                           std::size_t n_test, std::uint64_t seed) {
  if (n_train + n_val + n_test > recs.size())
    throw ad::ContractError("split_dataset: need " + std::to_string(n_train + n_val + n_test) + " records, have " +
                            std::to_string(recs.size()));
  std::vector<std::size_t> idx(recs.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng = make_stream({seed, tag(Purpose::split)});
  shuffle_indices(idx, rng);
  Split s;
  for (std::size_t k = 0; k < n_train + n_val + n_test; ++k) {
    const auto& r = recs[idx[k]];
    if (k < n_train)
      s.train.push_back(r);
    else if (k < n_train + n_val)
      s.val.push_back(r);
    else
      s.test.push_back(r);
  }
  return s;
}

}  // namespace lhm::synth
