#pragma once

// One-axis-at-a-time sweeps over (N0, M, sigma, t0) with a results table and
// seed-bootstrap aggregates.

#include "lhm/evalkit.hpp"
#include "lhm/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>
#include <tuple>
#include <vector>

namespace lhm::sweep {

struct Point {
  int N0 = 100;
  int M = 2;
  double sigma = 0.2;
  double t0 = 2.0;

  friend bool operator==(const Point&, const Point&) = default;
  friend auto operator<=>(const Point&, const Point&) = default;
};

struct SweepConfig {
  std::vector<std::string> methods = {"lhm", "node", "expert", "residual", "ensemble"};
  std::vector<int> N0 = {10, 100, 500, 1000};
  std::vector<int> M = {2, 4, 8};
  std::vector<double> sigma = {0.2, 0.4, 0.8};
  std::vector<double> t0 = {2.0, 5.0, 10.0};
  Point base;
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  int bootstrap = 1000;
  ExperimentConfig experiment;  // everything else (training, model sizes)

  [[nodiscard]] json to_json() const {
    return json{{"methods", methods},
                {"N0", N0},
                {"M", M},
                {"sigma", sigma},
                {"t0", t0},
                {"base", {{"N0", base.N0}, {"M", base.M}, {"sigma", base.sigma}, {"t0", base.t0}}},
                {"seeds", seeds},
                {"bootstrap", bootstrap},
                {"experiment", experiment.to_json()}};
  }

  static SweepConfig from_json(const json& j) {
    try {
      reject_unknown_keys(j, {"methods", "N0", "M", "sigma", "t0", "base", "seeds", "bootstrap", "experiment"}, "sweep");
      SweepConfig c;
      c.methods = j.value("methods", c.methods);
      c.N0 = j.value("N0", c.N0);
      c.M = j.value("M", c.M);
      c.sigma = j.value("sigma", c.sigma);
      c.t0 = j.value("t0", c.t0);
      if (j.contains("base")) {
        const auto& b = j.at("base");
        reject_unknown_keys(b, {"N0", "M", "sigma", "t0"}, "sweep.base");
        c.base.N0 = b.value("N0", c.base.N0);
        c.base.M = b.value("M", c.base.M);
        c.base.sigma = b.value("sigma", c.base.sigma);
        c.base.t0 = b.value("t0", c.base.t0);
      }
      c.seeds = j.value("seeds", c.seeds);
      c.bootstrap = j.value("bootstrap", c.bootstrap);
      c.experiment = ExperimentConfig::from_json(j.value("experiment", json::object()));
      for (const auto& m : c.methods)
        if (!method_names().contains(m)) throw ConfigError("sweep: unknown method '" + m + "'");
      if (c.seeds.empty() || c.methods.empty()) throw ConfigError("sweep: need at least one seed and one method");
      if (c.bootstrap < 1) throw ConfigError("sweep: bootstrap must be >= 1");
      return c;
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw ConfigError(std::string("sweep config: ") + e.what());
    }
  }

  // Base point plus each axis varied alone, deduplicated, in axis order.
  [[nodiscard]] std::vector<Point> points() const {
    std::vector<Point> pts{base};
    auto push = [&](Point p) {
      if (std::find(pts.begin(), pts.end(), p) == pts.end()) pts.push_back(p);
    };
    for (int v : N0) push({v, base.M, base.sigma, base.t0});
    for (int v : M) push({base.N0, v, base.sigma, base.t0});
    for (double v : sigma) push({base.N0, base.M, v, base.t0});
    for (double v : t0) push({base.N0, base.M, base.sigma, v});
    return pts;
  }
};

struct Row {
  std::string method;
  Point point;
  std::uint64_t seed = 0;
  double rmse = 0.0;
  double crps = 0.0;
  std::string status = "ok";
  double wall_seconds = 0.0;
};

inline std::string csv_safe(std::string s) {
  for (auto& ch : s)
    if (ch == ',' || ch == '\n' || ch == '\r' || ch == '"') ch = ' ';
  return s;
}

inline std::string format_row(const Row& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%s,%d,%d,%.17g,%.17g,%llu,%.17g,%.17g,%s,%.3f\n", r.method.c_str(), r.point.N0,
                r.point.M, r.point.sigma, r.point.t0, static_cast<unsigned long long>(r.seed), r.rmse, r.crps,
                csv_safe(r.status).c_str(), r.wall_seconds);
  return buf;
}

inline constexpr const char* kResultsHeader = "method,N0,M,sigma,t0,seed,rmse,crps,status,wall_seconds\n";
inline constexpr const char* kAggregateHeader = "method,axis,axis_value,metric,median,lo95,hi95\n";

// Experiment for one training group: D = 10 M, N0 training records.
inline ExperimentConfig group_config(const SweepConfig& sc, int N0, int M, double sigma, std::uint64_t seed) {
  ExperimentConfig c = sc.experiment;
  c.seed = seed;
  c.generator.D = 10 * M;
  c.generator.M = M;
  c.generator.sigma = sigma;
  c.generator.seed = seed;
  c.evaluation.n_train = N0;
  c.generator.n_records = N0 + c.evaluation.n_val + c.evaluation.n_test;
  c.model.M = M;
  c.model.Z = -1;
  c.training.seed = seed;
  return c;
}

// Trains every model the requested methods need once per
// (N0, M, sigma, seed) and evaluates them at each t0 of the group.
inline std::vector<Row> run_group(const SweepConfig& sc, int N0, int M, double sigma, std::uint64_t seed,
                                  const std::vector<double>& t0s, std::ostream* progress) {
  std::vector<Row> rows;
  const auto cfg = group_config(sc, N0, M, sigma, seed);
  auto need = [&](const std::string& m) { return std::find(sc.methods.begin(), sc.methods.end(), m) != sc.methods.end(); };
  auto fail_all = [&](const std::string& why) {
    for (const auto& m : sc.methods)
      for (double t0 : t0s) rows.push_back({m, {N0, M, sigma, t0}, seed, std::nan(""), std::nan(""), "error: " + why, 0.0});
  };
  synth::Split split;
  try {
    const auto ds = synth::generate_dataset(cfg.generator);
    split = synth::split_dataset(ds.records, static_cast<std::size_t>(N0), static_cast<std::size_t>(cfg.evaluation.n_val),
                                 static_cast<std::size_t>(cfg.evaluation.n_test), seed);
  } catch (const std::exception& e) {
    fail_all(e.what());
    return rows;
  }

  std::map<std::string, std::unique_ptr<baselines::LatentPredictor>> fitted;
  std::map<std::string, double> fit_seconds;
  std::map<std::string, std::string> failed;
  auto fit = [&](const std::string& m) {
    if (fitted.contains(m) || failed.contains(m)) return;
    const auto t = std::chrono::steady_clock::now();
    try {
      inference::TrainResult res;
      fitted[m] = std::make_unique<baselines::LatentPredictor>(fit_single(cfg, m, split.train, split.val, &res));
    } catch (const std::exception& e) {
      failed[m] = e.what();
    }
    fit_seconds[m] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
    if (progress) *progress << "  fitted " << m << " N0=" << N0 << " M=" << M << " sigma=" << sigma << " seed=" << seed << '\n';
  };
  if (need("lhm")) fit("lhm");
  if (need("node") || need("ensemble")) fit("node");
  if (need("expert") || need("residual") || need("ensemble")) fit("expert");

  std::unique_ptr<baselines::ResidualPredictor> residual;
  std::string residual_error;
  double residual_seconds = 0.0;
  if (need("residual")) {
    const auto t = std::chrono::steady_clock::now();
    if (failed.contains("expert")) {
      residual_error = "expert component failed: " + failed["expert"];
    } else {
      try {
        residual = std::make_unique<baselines::ResidualPredictor>(
            baselines::fit_residual(*fitted["expert"], cfg.node_Z(), split.train, split.val, cfg.training));
      } catch (const std::exception& e) {
        residual_error = e.what();
      }
    }
    residual_seconds = fit_seconds["expert"] +
                       std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
  }

  const int S = cfg.evaluation.predict_samples;
  for (double t0 : t0s) {
    for (const auto& m : sc.methods) {
      Row r{m, {N0, M, sigma, t0}, seed, std::nan(""), std::nan(""), "ok", 0.0};
      const auto t = std::chrono::steady_clock::now();
      try {
        std::unique_ptr<baselines::EnsemblePredictor> ens;
        const baselines::Predictor* p = nullptr;
        if (m == "residual") {
          if (!residual) throw std::runtime_error(residual_error);
          p = residual.get();
          r.wall_seconds += residual_seconds;
        } else if (m == "ensemble") {
          if (failed.contains("node") || failed.contains("expert")) throw std::runtime_error("component failed");
          ens = std::make_unique<baselines::EnsemblePredictor>(
              baselines::fit_ensemble(*fitted["node"], *fitted["expert"], split.val, t0, S, seed));
          p = ens.get();
          r.wall_seconds += fit_seconds["node"] + fit_seconds["expert"];
        } else {
          if (failed.contains(m)) throw std::runtime_error(failed[m]);
          p = fitted[m].get();
          r.wall_seconds += fit_seconds[m];
        }
        const auto ev = eval::evaluate(*p, split.test, t0, S, seed);
        r.rmse = ev.rmse;
        r.crps = ev.crps;
      } catch (const std::exception& e) {
        r.status = std::string("error: ") + e.what();
      }
      r.wall_seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
      rows.push_back(r);
    }
  }
  return rows;
}

struct AggregateRow {
  std::string method, axis;
  double axis_value = 0.0;
  std::string metric;
  eval::Interval ci;
};

inline std::vector<AggregateRow> aggregate(const SweepConfig& sc, const std::vector<Row>& rows) {
  std::vector<AggregateRow> out;
  struct Axis {
    const char* name;
    std::vector<double> values;
    std::function<bool(const Point&, double)> on;
  };
  const Point b = sc.base;
  std::vector<Axis> axes;
  axes.push_back({"N0", {sc.N0.begin(), sc.N0.end()}, [b](const Point& p, double v) {
                    return p.N0 == static_cast<int>(v) && p.M == b.M && p.sigma == b.sigma && p.t0 == b.t0;
                  }});
  axes.push_back({"M", {sc.M.begin(), sc.M.end()}, [b](const Point& p, double v) {
                    return p.M == static_cast<int>(v) && p.N0 == b.N0 && p.sigma == b.sigma && p.t0 == b.t0;
                  }});
  axes.push_back({"sigma", sc.sigma, [b](const Point& p, double v) {
                    return p.sigma == v && p.N0 == b.N0 && p.M == b.M && p.t0 == b.t0;
                  }});
  axes.push_back({"t0", sc.t0, [b](const Point& p, double v) {
                    return p.t0 == v && p.N0 == b.N0 && p.M == b.M && p.sigma == b.sigma;
                  }});
  for (const auto& m : sc.methods)
    for (const auto& ax : axes)
      for (double v : ax.values)
        for (const char* metric : {"rmse", "crps"}) {
          std::vector<double> vals;
          for (const auto& r : rows) {
            if (r.method != m || r.status != "ok" || !ax.on(r.point, v)) continue;
            const double x = std::string(metric) == "rmse" ? r.rmse : r.crps;
            if (std::isfinite(x)) vals.push_back(x);
          }
          if (vals.empty()) continue;
          out.push_back({m, ax.name, v, metric, eval::bootstrap_median(vals, sc.bootstrap, sc.experiment.seed)});
        }
  return out;
}

inline void write_aggregate(const std::filesystem::path& path, const std::vector<AggregateRow>& agg) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open '" + path.string() + "' for writing");
  out << kAggregateHeader;
  char buf[512];
  for (const auto& a : agg) {
    std::snprintf(buf, sizeof buf, "%s,%s,%.17g,%s,%.17g,%.17g,%.17g\n", a.method.c_str(), a.axis.c_str(), a.axis_value,
                  a.metric.c_str(), a.ci.median, a.ci.lo, a.ci.hi);
    out << buf;
  }
}

// Runs all (group, seed) tasks on `jobs` worker threads. Rows are appended
// to results.csv as they complete; the returned rows are in canonical order.
inline std::vector<Row> run_sweep(const SweepConfig& sc, const std::filesystem::path& out_dir, int jobs,
                                  std::ostream* progress = nullptr) {
  std::filesystem::create_directories(out_dir);
  write_json(out_dir / "config.json", sc.to_json());

  using Key = std::tuple<int, int, double, std::uint64_t>;
  std::map<Key, std::vector<double>> groups;
  for (const auto& p : sc.points())
    for (auto s : sc.seeds) groups[{p.N0, p.M, p.sigma, s}].push_back(p.t0);
  std::vector<std::pair<Key, std::vector<double>>> tasks(groups.begin(), groups.end());

  std::ofstream results(out_dir / "results.csv", std::ios::binary);
  if (!results) throw DataError("cannot write results.csv in '" + out_dir.string() + "'");
  results << kResultsHeader << std::flush;
  std::mutex mu;
  std::vector<std::vector<Row>> done(tasks.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= tasks.size()) return;
      const auto& [key, t0s] = tasks[i];
      const auto& [N0, M, sigma, seed] = key;
      auto rows = run_group(sc, N0, M, sigma, seed, t0s, nullptr);
      std::lock_guard<std::mutex> lock(mu);
      for (const auto& r : rows) results << format_row(r);
      results.flush();
      if (progress) *progress << "group " << (i + 1) << "/" << tasks.size() << " done\n";
      done[i] = std::move(rows);
    }
  };
  const int n = std::max(1, std::min<int>(jobs, static_cast<int>(tasks.size())));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int k = 0; k < n; ++k) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  std::vector<Row> all;
  for (auto& d : done) all.insert(all.end(), d.begin(), d.end());
  std::sort(all.begin(), all.end(), [](const Row& a, const Row& b) {
    return std::tie(a.method, a.point, a.seed) < std::tie(b.method, b.point, b.seed);
  });
  write_aggregate(out_dir / "aggregate.csv", aggregate(sc, all));
  return all;
}

}  // namespace lhm::sweep
