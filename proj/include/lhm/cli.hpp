#pragma once

// `lhm` command-line tool: generate, train, predict, evaluate, sweep.
// Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.

#include "lhm/baselines.hpp"
#include "lhm/evalkit.hpp"
#include "lhm/experiment.hpp"
#include "lhm/sweep.hpp"
#include "lhm/synthgen.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

namespace lhm::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitRuntime = 3;

inline json load_json_config(const std::string& path) {
  try {
    return read_json(path);
  } catch (const DataError& e) {
    throw ConfigError(e.what());
  }
}

// Sibling file "<stem>.<suffix>" next to an output file.
inline fs::path sibling(const fs::path& out, const std::string& suffix) {
  fs::path p = out;
  p.replace_extension();
  return p.string() + "." + suffix;
}

inline void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

inline ExperimentConfig data_config(const fs::path& data_dir, const std::string& override_path) {
  if (!override_path.empty()) return ExperimentConfig::from_json(load_json_config(override_path));
  const auto p = data_dir / "config.json";
  if (!fs::exists(p)) throw ConfigError("no --config given and '" + p.string() + "' does not exist");
  return ExperimentConfig::from_json(load_json_config(p.string()));
}

inline int cmd_generate(const std::string& config_path, const fs::path& out, std::ostream& log) {
  const auto cfg = ExperimentConfig::from_json(load_json_config(config_path));
  const auto ds = synth::generate_dataset(cfg.generator);
  const auto& ev = cfg.evaluation;
  const auto split = synth::split_dataset(ds.records, static_cast<std::size_t>(ev.n_train),
                                          static_cast<std::size_t>(ev.n_val), static_cast<std::size_t>(ev.n_test),
                                          cfg.seed);
  fs::create_directories(out);
  write_records(out / "train.jsonl", split.train);
  write_records(out / "val.jsonl", split.val);
  write_records(out / "test.jsonl", split.test);
  std::vector<json> truth;
  for (const auto& t : ds.truth) truth.push_back(synth::truth_json(t));
  write_jsonl(out / "truth.jsonl", truth);
  write_json(out / "generator.json", synth::ground_truth_json(ds));
  write_json(out / "config.json", cfg.to_json());
  log << "generated " << ds.records.size() << " records (" << split.train.size() << " train, " << split.val.size()
      << " val, " << split.test.size() << " test) in " << out.string() << '\n';
  return kExitOk;
}

struct TrainArgs {
  std::string data, method = "lhm", out, config, expert_model, node_model;
  std::optional<int> flows, max_epochs;
  std::optional<double> t0;
};

inline baselines::LatentPredictor load_latent(const std::string& path, const std::string& want) {
  const auto j = read_json(path);
  const auto kind = j.at("kind").get<std::string>();
  if (kind != want) throw ConfigError("'" + path + "' holds a " + kind + " model, expected " + want);
  return baselines::LatentPredictor::from_json(j);
}

inline int cmd_train(const TrainArgs& a, std::ostream& log) {
  auto cfg = data_config(a.data, a.config);
  cfg.model.method = a.method;
  if (a.flows) {
    if (*a.flows < 0) throw ConfigError("--flows must be >= 0");
    cfg.model.flows = *a.flows;
  }
  if (a.max_epochs) {
    if (*a.max_epochs < 1) throw ConfigError("--max-epochs must be >= 1");
    cfg.training.max_epochs = *a.max_epochs;
  }
  if (a.t0) cfg.evaluation.t0 = *a.t0;
  if ((a.method == "residual" || a.method == "ensemble") && a.expert_model.empty())
    throw ConfigError(a.method + " needs --expert-model");
  if (a.method == "ensemble" && a.node_model.empty()) throw ConfigError("ensemble needs --node-model");

  const fs::path data(a.data);
  const auto train = read_records(data / "train.jsonl");
  const auto val = read_records(data / "val.jsonl");
  std::unique_ptr<baselines::Predictor> pred;
  inference::TrainResult res;
  bool trained = true;
  if (a.method == "residual") {
    const auto expert = load_latent(a.expert_model, "expert");
    pred = std::make_unique<baselines::ResidualPredictor>(
        baselines::fit_residual(expert, cfg.node_Z(), train, val, cfg.training, &res));
  } else if (a.method == "ensemble") {
    const auto expert = load_latent(a.expert_model, "expert");
    const auto node = load_latent(a.node_model, "node");
    pred = std::make_unique<baselines::EnsemblePredictor>(
        baselines::fit_ensemble(node, expert, val, cfg.evaluation.t0, cfg.evaluation.predict_samples, cfg.seed));
    trained = false;
  } else {
    pred = std::make_unique<baselines::LatentPredictor>(fit_single(cfg, a.method, train, val, &res));
  }

  json j = pred->to_json();
  j["config"] = cfg.to_json();
  if (trained) {
    j["fit"] = {{"epochs", res.log.size()},
                {"best_epoch", res.best_epoch},
                {"best_val_loss", res.best_val_loss},
                {"initial_train_loss", res.initial_train_loss},
                {"final_train_loss", res.final_train_loss},
                {"stop_reason", res.stop_reason}};
  }
  const fs::path out(a.out);
  ensure_parent(out);
  write_json(out, j);
  write_json(sibling(out, "config.json"), cfg.to_json());
  if (trained) {
    std::ofstream csv(sibling(out, "log.csv"), std::ios::binary);
    inference::write_training_log(csv, res);
    log << "trained " << a.method << ": " << res.log.size() << " epochs, best epoch " << res.best_epoch
        << ", validation loss " << res.best_val_loss << '\n';
  } else {
    log << "fitted ensemble weights on " << val.size() << " validation records\n";
  }
  return kExitOk;
}

inline json vec_json(const Eigen::Ref<const Eigen::RowVectorXd>& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

inline int cmd_predict(const std::string& model_path, const fs::path& data, double t0, const fs::path& out,
                       std::optional<int> samples, const std::string& split, std::ostream& log) {
  const auto mj = read_json(model_path);
  const auto cfg = mj.contains("config") ? ExperimentConfig::from_json(mj.at("config")) : ExperimentConfig{};
  const int S = samples ? *samples : cfg.evaluation.predict_samples;
  if (S < 1) throw ConfigError("--samples must be >= 1");
  const auto pred = baselines::predictor_from_json(mj);
  const auto recs = read_records(data / (split + ".jsonl"));
  std::vector<json> rows;
  std::size_t skipped = 0;
  for (const auto& r : recs) {
    const auto fut = future_after(r, t0);
    if (fut.size() == 0 || history_until(r, t0).size() == 0) {
      ++skipped;
      continue;
    }
    const auto f = pred->predict(r, t0, std::span<const double>(fut.times), S, cfg.seed);
    for (std::size_t q = 0; q < fut.size(); ++q) {
      json samp = json::array();
      const Mat& m = f.measurement[q];
      for (Eigen::Index s = 0; s < m.cols(); ++s) {
        const Eigen::RowVectorXd col = m.col(s).transpose();
        samp.push_back(vec_json(col));
      }
      const Eigen::RowVectorXd mean = f.mean.row(static_cast<Eigen::Index>(q));
      rows.push_back({{"id", r.id}, {"t", fut.times[q]}, {"mean", vec_json(mean)}, {"samples", samp}});
    }
  }
  ensure_parent(out);
  write_jsonl(out, rows);
  json pc = cfg.to_json();
  pc["predict"] = {{"model", model_path}, {"t0", t0}, {"samples", S}, {"split", split}};
  write_json(sibling(out, "config.json"), pc);
  log << "wrote " << rows.size() << " forecast rows (" << skipped << " records without history or future)\n";
  return kExitOk;
}

inline int cmd_evaluate(const fs::path& forecasts, const fs::path& data, const fs::path& out, const std::string& split,
                        std::ostream& log) {
  const auto recs = read_records(data / (split + ".jsonl"));
  std::map<std::string, const TrajectoryRecord*> by_id;
  for (const auto& r : recs) by_id[r.id] = &r;
  eval::MetricSums m;
  std::size_t rows = 0;
  bool with_crps = true;
  for (const auto& row : read_jsonl(forecasts)) {
    const auto id = row.at("id").get<std::string>();
    const double t = row.at("t").get<double>();
    auto it = by_id.find(id);
    if (it == by_id.end()) throw DataError("forecast for unknown record '" + id + "'");
    const auto& r = *it->second;
    const auto k = std::find(r.times.begin(), r.times.end(), t);
    if (k == r.times.end()) throw DataError("record '" + id + "' has no measurement at t = " + std::to_string(t));
    const auto i = static_cast<Eigen::Index>(k - r.times.begin());
    const auto D = r.dims();
    eval::ForecastBundle b;
    const auto mean = row.at("mean").get<std::vector<double>>();
    if (static_cast<Eigen::Index>(mean.size()) != D) throw DataError("forecast dimension mismatch for '" + id + "'");
    b.mean = Eigen::Map<const Eigen::RowVectorXd>(mean.data(), D);
    b.y = r.y.row(i);
    b.mask = r.mask.row(i);
    const auto& samp = row.at("samples");
    Mat s(D, static_cast<Eigen::Index>(samp.size()));
    for (std::size_t j = 0; j < samp.size(); ++j) {
      const auto v = samp[j].get<std::vector<double>>();
      if (static_cast<Eigen::Index>(v.size()) != D) throw DataError("sample dimension mismatch for '" + id + "'");
      s.col(static_cast<Eigen::Index>(j)) = Eigen::Map<const Eigen::VectorXd>(v.data(), D);
    }
    if (s.cols() < 2) with_crps = false;
    b.samples = {s};
    m.add(b, with_crps);
    ++rows;
  }
  json j{{"rmse", m.rmse()},
         {"crps", with_crps ? json(m.mean_crps()) : json(nullptr)},
         {"entries", m.n},
         {"forecast_rows", rows},
         {"crps_estimator", "nrg"},
         {"crps_samples", "noise-inclusive"}};
  ensure_parent(out);
  write_json(out, j);
  write_json(sibling(out, "config.json"),
             json{{"forecasts", forecasts.string()}, {"data", data.string()}, {"split", split}});
  log << "rmse " << m.rmse();
  if (with_crps) log << " crps " << m.mean_crps();
  log << " over " << m.n << " entries\n";
  return kExitOk;
}

inline int cmd_sweep(const std::string& config_path, const fs::path& out, int jobs, std::ostream& log) {
  const auto sc = sweep::SweepConfig::from_json(load_json_config(config_path));
  const auto rows = sweep::run_sweep(sc, out, jobs, &log);
  std::size_t ok = 0;
  for (const auto& r : rows) ok += r.status == "ok";
  log << "sweep finished: " << ok << "/" << rows.size() << " runs ok\n";
  return kExitOk;
}

// Parses argv and runs one subcommand; never throws.
inline int dispatch(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Hybrid expert / neural latent ODE modeling toolkit", "lhm"};
  app.require_subcommand(1);

  std::string config, out_path, data, model, forecasts, split = "test";
  TrainArgs ta;
  double t0 = 0.0;
  std::optional<int> samples;
  int jobs = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));

  auto* gen = app.add_subcommand("generate", "simulate a synthetic dataset");
  gen->add_option("--config", config, "experiment config JSON")->required();
  gen->add_option("--out", out_path, "output directory")->required();

  auto* tr = app.add_subcommand("train", "fit a forecasting method");
  tr->add_option("--data", ta.data, "dataset directory")->required();
  tr->add_option("--method", ta.method, "lhm | node | expert | residual | ensemble")
      ->required()
      ->check(CLI::IsMember({"lhm", "node", "expert", "residual", "ensemble"}));
  tr->add_option("--out", ta.out, "model JSON path")->required();
  tr->add_option("--flows", ta.flows, "planar flows in the variational family (lhm)");
  tr->add_option("--config", ta.config, "experiment config (default: DATA/config.json)");
  tr->add_option("--expert-model", ta.expert_model, "trained expert model (residual, ensemble)");
  tr->add_option("--node-model", ta.node_model, "trained NODE model (ensemble)");
  tr->add_option("--t0", ta.t0, "history length for ensemble weights");
  tr->add_option("--max-epochs", ta.max_epochs, "override training.max_epochs");

  auto* pr = app.add_subcommand("predict", "forecast after t0 from the observed history");
  pr->add_option("--model", model, "model JSON")->required();
  pr->add_option("--data", data, "dataset directory")->required();
  pr->add_option("--t0", t0, "end of the observed history")->required();
  pr->add_option("--out", out_path, "forecasts JSON-lines path")->required();
  pr->add_option("--samples", samples, "predictive samples (default: evaluation.predict_samples)");
  pr->add_option("--split", split, "which split to forecast")->check(CLI::IsMember({"train", "val", "test"}));

  auto* ev = app.add_subcommand("evaluate", "score forecasts with RMSE and CRPS");
  ev->add_option("--forecasts", forecasts, "forecasts JSON-lines")->required();
  ev->add_option("--data", data, "dataset directory")->required();
  ev->add_option("--out", out_path, "metrics JSON path")->required();
  ev->add_option("--split", split, "which split the forecasts cover")->check(CLI::IsMember({"train", "val", "test"}));

  auto* sw = app.add_subcommand("sweep", "run a benchmark sweep");
  sw->add_option("--config", config, "sweep config JSON")->required();
  sw->add_option("--out", out_path, "results directory")->required();
  sw->add_option("--jobs", jobs, "worker threads")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, err, err);
    err << app.help();
    return kExitConfig;
  }

  try {
    if (gen->parsed()) return cmd_generate(config, out_path, err);
    if (tr->parsed()) return cmd_train(ta, err);
    if (pr->parsed()) {
      if (!(t0 > 0.0)) throw ConfigError("--t0 must be positive");
      return cmd_predict(model, data, t0, out_path, samples, split, err);
    }
    if (ev->parsed()) return cmd_evaluate(forecasts, data, out_path, split, err);
    if (sw->parsed()) return cmd_sweep(config, out_path, jobs, err);
  } catch (const ConfigError& e) {
    err << "lhm: configuration error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "lhm: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitConfig;
}

}  // namespace lhm::cli
