#pragma once

// Serializable experiment configuration and method fitting shared by the
// command-line tool and the sweep runner. Every default is the simulation
// setting, so an empty JSON object is a complete configuration.

#include "lhm/baselines.hpp"
#include "lhm/inference.hpp"
#include "lhm/synthgen.hpp"

#include <cstdint>
#include <memory>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace lhm {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline void reject_unknown_keys(const json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
  for (const auto& [k, v] : j.items())
    if (!known.contains(k)) throw ConfigError(where + ": unknown key '" + k + "'");
}

inline const std::set<std::string>& method_names() {
  static const std::set<std::string> m = {"lhm", "node", "expert", "residual", "ensemble"};
  return m;
}

struct ModelConfig {
  std::string method = "lhm";
  int M = -1;  // -1: the generator's M
  int Z = -1;  // NODE latent count; -1: E + M
  int flows = 0;
  int encoder_hidden = 0;   // 0: 2D
  int dynamics_hidden = 0;  // 0: 2(E + M)
  int emission_hidden = 0;  // 0: 2D
  std::string emission = "mlp";
  bool shared_sigma = false;
  double init_sigma = 0.5;
  std::string prior = "simulation";

  [[nodiscard]] json to_json() const {
    return json{{"method", method},
                {"M", M},
                {"Z", Z},
                {"flows", flows},
                {"encoder_hidden", encoder_hidden},
                {"dynamics_hidden", dynamics_hidden},
                {"emission_hidden", emission_hidden},
                {"emission", emission},
                {"shared_sigma", shared_sigma},
                {"init_sigma", init_sigma},
                {"prior", prior}};
  }
  static ModelConfig from_json(const json& j) {
    reject_unknown_keys(j, {"method", "M", "Z", "flows", "encoder_hidden", "dynamics_hidden", "emission_hidden",
                            "emission", "shared_sigma", "init_sigma", "prior"},
                        "model");
    ModelConfig c;
    c.method = j.value("method", c.method);
    c.M = j.value("M", c.M);
    c.Z = j.value("Z", c.Z);
    c.flows = j.value("flows", c.flows);
    c.encoder_hidden = j.value("encoder_hidden", c.encoder_hidden);
    c.dynamics_hidden = j.value("dynamics_hidden", c.dynamics_hidden);
    c.emission_hidden = j.value("emission_hidden", c.emission_hidden);
    c.emission = j.value("emission", c.emission);
    c.shared_sigma = j.value("shared_sigma", c.shared_sigma);
    c.init_sigma = j.value("init_sigma", c.init_sigma);
    c.prior = j.value("prior", c.prior);
    if (!method_names().contains(c.method)) throw ConfigError("model: unknown method '" + c.method + "'");
    if (c.flows < 0) throw ConfigError("model: flows must be >= 0");
    model::parse_emission(c.emission);
    pharmaco::parse_setting(c.prior);
    return c;
  }
};

struct EvalConfig {
  double t0 = 2.0;
  int n_train = 100;
  int n_val = 100;
  int n_test = 1000;
  int predict_samples = 100;

  [[nodiscard]] json to_json() const {
    return json{{"t0", t0},
                {"n_train", n_train},
                {"n_val", n_val},
                {"n_test", n_test},
                {"predict_samples", predict_samples},
                {"metrics", {"rmse", "crps"}},
                {"crps_estimator", "nrg"},
                {"crps_samples", "noise-inclusive"}};
  }
  static EvalConfig from_json(const json& j) {
    reject_unknown_keys(j, {"t0", "n_train", "n_val", "n_test", "predict_samples", "metrics", "crps_estimator",
                            "crps_samples"},
                        "evaluation");
    EvalConfig c;
    c.t0 = j.value("t0", c.t0);
    c.n_train = j.value("n_train", c.n_train);
    c.n_val = j.value("n_val", c.n_val);
    c.n_test = j.value("n_test", c.n_test);
    c.predict_samples = j.value("predict_samples", c.predict_samples);
    if (c.n_train < 1 || c.n_val < 1 || c.n_test < 1) throw ConfigError("evaluation: split sizes must be positive");
    if (c.predict_samples < 2) throw ConfigError("evaluation: predict_samples must be >= 2 for CRPS");
    if (!(c.t0 > 0.0)) throw ConfigError("evaluation: t0 must be positive");
    return c;
  }
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  synth::GeneratorConfig generator;
  ModelConfig model;
  inference::TrainConfig training;
  EvalConfig evaluation;

  [[nodiscard]] json to_json() const {
    return json{{"seed", seed},
                {"generator", generator.to_json()},
                {"model", model.to_json()},
                {"training", training.to_json()},
                {"evaluation", evaluation.to_json()}};
  }

  // Missing fields take defaults; the generator and training seeds default
  // to the top-level seed and the generator size to the sum of the splits.
  static ExperimentConfig from_json(const json& j) {
    try {
      reject_unknown_keys(j, {"seed", "generator", "model", "training", "evaluation"}, "config");
      ExperimentConfig c;
      c.seed = j.value("seed", c.seed);
      c.evaluation = EvalConfig::from_json(j.value("evaluation", json::object()));
      json g = j.value("generator", json::object());
      reject_unknown_keys(g, {"D", "M", "sigma", "missing", "n_records", "horizon", "history_floor_t0", "max_dose", "seed"},
                          "generator");
      if (!g.contains("seed")) g["seed"] = c.seed;
      if (!g.contains("n_records"))
        g["n_records"] = c.evaluation.n_train + c.evaluation.n_val + c.evaluation.n_test;
      c.generator = synth::GeneratorConfig::from_json(g);
      if (c.generator.n_records < c.evaluation.n_train + c.evaluation.n_val + c.evaluation.n_test)
        throw ConfigError("generator.n_records is smaller than n_train + n_val + n_test");
      c.model = ModelConfig::from_json(j.value("model", json::object()));
      json t = j.value("training", json::object());
      reject_unknown_keys(t, {"learning_rate", "batch_size", "patience", "max_epochs", "elbo_samples", "predict_samples",
                              "final_loss_samples", "beta1", "beta2", "adam_eps", "solver", "seed", "workers"},
                          "training");
      if (!t.contains("seed")) t["seed"] = c.seed;
      c.training = inference::TrainConfig::from_json(t);
      return c;
    } catch (const ConfigError&) {
      throw;
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    } catch (const json::exception& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
  }

  [[nodiscard]] int latent_M() const { return model.M >= 0 ? model.M : generator.latent(); }
  [[nodiscard]] int node_Z() const { return model.Z > 0 ? model.Z : pharmaco::kExpertDim + latent_M(); }
};

inline model::ModelSpec spec_for(const ExperimentConfig& c, const std::string& method) {
  model::ModelSpec s;
  const int D = c.generator.D;
  if (method == "lhm") {
    s = baselines::lhm_spec(D, c.latent_M());
  } else if (method == "expert") {
    s = baselines::expert_spec(D);
  } else if (method == "node") {
    s = baselines::node_spec(D, c.node_Z());
  } else {
    throw ConfigError("no single model spec for method '" + method + "'");
  }
  s.dynamics_hidden = c.model.dynamics_hidden;
  s.emission_hidden = c.model.emission_hidden;
  s.emission = model::parse_emission(c.model.emission);
  s.shared_sigma = c.model.shared_sigma;
  s.init_sigma = c.model.init_sigma;
  if (s.has_expert) s.prior = pharmaco::parse_setting(c.model.prior);
  return s;
}

inline baselines::LatentPredictor fit_single(const ExperimentConfig& c, const std::string& method,
                                             const std::vector<TrajectoryRecord>& train,
                                             const std::vector<TrajectoryRecord>& val, inference::TrainResult* result,
                                             const inference::TrainHooks& hooks = {}) {
  const int flows = method == "lhm" ? c.model.flows : 0;
  return baselines::fit_latent(method, spec_for(c, method), flows, c.model.encoder_hidden, train, val, c.training,
                               result, hooks);
}

}  // namespace lhm
