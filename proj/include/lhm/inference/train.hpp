#pragma once

// Minibatch ADAM on the negative ELBO with validation-based early stopping.

#include "lhm/inference/elbo.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>
#include <ostream>
#include <thread>
#include <vector>

namespace lhm::inference {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  double learning_rate = 0.01;
  int batch_size = 50;  // effective size min(batch_size, N0)
  int patience = 10;
  int max_epochs = 400;
  int elbo_samples = 1;
  int predict_samples = 100;
  int final_loss_samples = 8;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  ode::SolverConfig solver = ode::SolverConfig::fixed_rk4(4);
  std::uint64_t seed = 0;
  int workers = 1;

  void validate() const {
    if (!(learning_rate > 0.0) || batch_size < 1 || patience < 1 || max_epochs < 1 || elbo_samples < 1 ||
        predict_samples < 1 || final_loss_samples < 1 || workers < 1)
      throw std::invalid_argument("train config: all sizes and rates must be positive");
    solver.validate();
  }

  [[nodiscard]] json to_json() const {
    return json{{"learning_rate", learning_rate},
                {"batch_size", batch_size},
                {"patience", patience},
                {"max_epochs", max_epochs},
                {"elbo_samples", elbo_samples},
                {"predict_samples", predict_samples},
                {"final_loss_samples", final_loss_samples},
                {"beta1", beta1},
                {"beta2", beta2},
                {"adam_eps", adam_eps},
                {"solver", {{"method", ode::method_name(solver.method)},
                            {"rtol", solver.rtol},
                            {"atol", solver.atol},
                            {"substeps", solver.substeps},
                            {"max_step", solver.max_step},
                            {"max_steps", solver.max_steps}}},
                {"seed", seed},
                {"workers", workers}};
  }
  static TrainConfig from_json(const json& j) {
    TrainConfig c;
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.patience = j.value("patience", c.patience);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.elbo_samples = j.value("elbo_samples", c.elbo_samples);
    c.predict_samples = j.value("predict_samples", c.predict_samples);
    c.final_loss_samples = j.value("final_loss_samples", c.final_loss_samples);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    if (j.contains("solver")) {
      const auto& s = j.at("solver");
      c.solver.method = ode::parse_method(s.value("method", std::string("rk4")));
      c.solver.rtol = s.value("rtol", c.solver.rtol);
      c.solver.atol = s.value("atol", c.solver.atol);
      c.solver.substeps = s.value("substeps", c.solver.substeps);
      c.solver.max_step = s.value("max_step", c.solver.max_step);
      c.solver.max_steps = s.value("max_steps", c.solver.max_steps);
    }
    c.seed = j.value("seed", c.seed);
    c.workers = j.value("workers", c.workers);
    c.validate();
    return c;
  }
};

class Adam {
 public:
  Adam(const ad::ParamSet& p, double lr, double b1, double b2, double eps) : lr_(lr), b1_(b1), b2_(b2), eps_(eps) {
    for (const auto& e : p.entries()) {
      m_.push_back(Mat::Zero(e.value.rows(), e.value.cols()));
      v_.push_back(Mat::Zero(e.value.rows(), e.value.cols()));
    }
  }

  void step(ad::ParamSet& p, const ad::GradMap& g) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, t_);
    const double c2 = 1.0 - std::pow(b2_, t_);
    auto& entries = p.entries();
    for (std::size_t i = 0; i < entries.size(); ++i) {
      m_[i] = b1_ * m_[i] + (1.0 - b1_) * g[i];
      v_[i] = b2_ * v_[i] + (1.0 - b2_) * g[i].cwiseProduct(g[i]);
      entries[i].value.array() -= lr_ * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
    }
  }

 private:
  double lr_, b1_, b2_, eps_;
  int t_ = 0;
  std::vector<Mat> m_, v_;
};

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double wall_seconds = 0.0;
  int diverged = 0;
};

struct TrainResult {
  std::vector<EpochLog> log;
  int best_epoch = 0;
  double best_val_loss = 0.0;
  double initial_train_loss = 0.0;
  double final_train_loss = 0.0;
  std::string stop_reason;
};

struct TrainHooks {
  // Replaces the validation loss for an epoch (used to exercise stopping).
  std::function<double(int epoch, double computed)> validation_override;
  std::ostream* progress = nullptr;
};

inline void write_training_log(std::ostream& out, const TrainResult& r) {
  out << "epoch,train_loss,val_loss,wall_seconds\n";
  char buf[256];
  for (const auto& e : r.log) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.3f\n", e.epoch, e.train_loss, e.val_loss, e.wall_seconds);
    out << buf;
  }
}

namespace detail {

struct RecordGrad {
  ad::GradMap grad;
  double loss = 0.0;
  int diverged = 0;
  bool ok = false;
};

inline RecordGrad record_gradient(const VariationalModel& vm, ad::Tape& tape, const TrajectoryRecord& r,
                                  const TreatmentControl& c, const Mat& eps, double weight,
                                  const ode::SolverConfig& cfg) {
  RecordGrad out;
  const auto S = eps.cols();
  out.grad = ad::GradMap(vm.params);
  double loss = 0.0;
  for (Eigen::Index s = 0; s < S; ++s) {
    tape.clear();
    const auto b = ad::bind(vm.params, tape);
    const auto t = record_elbo(vm, b, r, c, Mat(eps.col(s)), cfg);
    out.diverged += t.diverged;
    loss -= t.elbo.scalar() / static_cast<double>(S);
    try {
      const auto obj = ad::scale(-weight / static_cast<double>(S), t.elbo);
      out.grad += ad::grad(obj, b);
    } catch (const ad::NumericError&) {
      ++out.diverged;
      out.grad = ad::GradMap(vm.params);
      out.loss = loss;
      return out;
    }
  }
  out.loss = loss;
  out.ok = out.grad.all_finite();
  return out;
}

}  // namespace detail

// Trains vm in place; on return vm.params holds the best-validation snapshot.
inline TrainResult train(VariationalModel& vm, const std::vector<TrajectoryRecord>& train_set,
                         const std::vector<TrajectoryRecord>& val_set, const TrainConfig& cfg,
                         const TrainHooks& hooks = {}) {
  cfg.validate();
  if (train_set.empty() || val_set.empty()) throw std::invalid_argument("train: empty training or validation set");
  const auto tc = make_controls(train_set);
  const auto vc = make_controls(val_set);
  const auto N = train_set.size();
  const std::size_t B = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), N);
  const int L = vm.latent_dim();
  const std::size_t workers = static_cast<std::size_t>(std::max(1, cfg.workers));
  const auto t_begin = std::chrono::steady_clock::now();

  TrainResult res;
  res.initial_train_loss = evaluate_loss(vm, train_set, tc, cfg.final_loss_samples, cfg.seed, 1, cfg.solver);
  Adam opt(vm.params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps);
  ad::ParamSet best = vm.params;
  bool have_best = false;
  int since_best = 0;
  std::vector<std::size_t> order(N);
  std::vector<ad::Tape> tapes(workers);

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng = make_stream({cfg.seed, tag(Purpose::train_epoch), static_cast<std::uint64_t>(epoch)});
    shuffle_indices(order, shuffle_rng);

    double epoch_loss = 0.0;
    int epoch_div = 0;
    std::size_t epoch_samples = 0;
    for (std::size_t start = 0; start < N; start += B) {
      const std::size_t end = std::min(N, start + B);
      const std::size_t n = end - start;
      std::vector<detail::RecordGrad> parts(n);
      auto work = [&](std::size_t w) {
        for (std::size_t k = w; k < n; k += workers) {
          const std::size_t idx = order[start + k];
          Rng rng = make_stream({cfg.seed, tag(Purpose::train_sample), idx, static_cast<std::uint64_t>(epoch)});
          const Mat eps = standard_normal(rng, L, cfg.elbo_samples);
          parts[k] = detail::record_gradient(vm, tapes[w], train_set[idx], tc[idx], eps, 1.0 / static_cast<double>(n),
                                             cfg.solver);
        }
      };
      if (workers == 1) {
        work(0);
      } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w);
        for (auto& t : pool) t.join();
      }
      ad::GradMap g(vm.params);
      for (const auto& p : parts) {
        epoch_loss += p.loss;
        epoch_div += p.diverged;
        epoch_samples += static_cast<std::size_t>(cfg.elbo_samples);
        if (p.ok) g += p.grad;
      }
      opt.step(vm.params, g);
    }
    if (epoch_div >= static_cast<int>(epoch_samples))
      throw TrainingError("epoch " + std::to_string(epoch) + ": every sample diverged in the ODE solver");

    double val = evaluate_loss(vm, val_set, vc, 1, cfg.seed, 0, cfg.solver);
    if (hooks.validation_override) val = hooks.validation_override(epoch, val);
    EpochLog e;
    e.epoch = epoch;
    e.train_loss = epoch_loss / static_cast<double>(N);
    e.val_loss = val;
    e.diverged = epoch_div;
    e.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_begin).count();
    res.log.push_back(e);
    if (hooks.progress)
      *hooks.progress << "epoch " << epoch << " train " << e.train_loss << " val " << val << '\n';

    if (!have_best || val < res.best_val_loss) {
      have_best = true;
      res.best_val_loss = val;
      res.best_epoch = epoch;
      best = vm.params;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      res.stop_reason = "early_stopping";
      break;
    }
  }
  if (res.stop_reason.empty()) res.stop_reason = "max_epochs";
  vm.params = best;
  res.final_train_loss = evaluate_loss(vm, train_set, tc, cfg.final_loss_samples, cfg.seed, 1, cfg.solver);
  return res;
}

}  // namespace lhm::inference
