#pragma once

// Variational latent ODE model (generative model + encoder) and its
// per-record evidence lower bound.

#include "lhm/data.hpp"
#include "lhm/diffcore.hpp"
#include "lhm/inference/encoder.hpp"
#include "lhm/model.hpp"
#include "lhm/odesolve.hpp"
#include "lhm/pharmaco.hpp"

#include <cstdint>
#include <type_traits>
#include <vector>

namespace lhm::inference {

struct VariationalModel {
  model::ModelSpec model;
  EncoderSpec encoder;
  ad::ParamSet params;  // model groups plus "enc.*"

  [[nodiscard]] int latent_dim() const { return model.latent_dim(); }
  [[nodiscard]] int expert_dim() const { return model.expert_dim(); }

  [[nodiscard]] json to_json() const {
    ad::ParamSet enc;
    for (const auto& e : params.entries())
      if (e.name.starts_with(kEncPrefix)) enc.add(e.name.substr(4), e.value, e.shape);
    return json{{"model_spec", model.to_json()},
                {"encoder_spec", encoder.to_json()},
                {"model_params", model::model_params_to_json(model, params)},
                {"encoder_params", enc.to_json()}};
  }

  static VariationalModel from_json(const json& j) {
    VariationalModel m;
    m.model = model::ModelSpec::from_json(j.at("model_spec"));
    m.encoder = EncoderSpec::from_json(j.at("encoder_spec"));
    m.params = model::model_params_from_json(j.at("model_params"));
    m.params.absorb("enc", ad::ParamSet::from_json(j.at("encoder_params")));
    return m;
  }
};

// Posterior-mean initialization of the encoder head: expert components start
// at the prior mean (through softplus), learned latents at 0.
inline Vec initial_mu_bias(const model::ModelSpec& s) {
  Vec b = Vec::Zero(s.latent_dim());
  if (s.has_expert) {
    const auto r = pharmaco::prior_rates(s.prior);
    for (int j = 0; j < pharmaco::kExpertDim; ++j) b(j) = ad::softplus_inverse(1.0 / r[static_cast<std::size_t>(j)]);
  }
  return b;
}

inline VariationalModel make_variational_model(const model::ModelSpec& spec, int flows, int encoder_hidden,
                                               std::uint64_t seed) {
  spec.validate();
  VariationalModel m;
  m.model = spec;
  m.encoder.latent_dim = spec.latent_dim();
  m.encoder.dims = spec.dims;
  m.encoder.controls = spec.controls;
  m.encoder.hidden = encoder_hidden;
  m.encoder.flows = flows;
  Rng rng = make_stream({seed, tag(Purpose::init)});
  m.params = model::init_model_params(spec, rng);
  const auto enc = init_encoder_params(m.encoder, rng, initial_mu_bias(spec));
  for (const auto& e : enc.entries()) m.params.add(e.name, e.value, e.shape);
  return m;
}

template <class T>
struct ElboTerms {
  T elbo;     // 1 x 1, mean over samples
  T loglik;   // 1 x S
  T kl;       // 1 x S; log q - log p0 per sample
  int diverged = 0;
};

namespace detail {

template <class T>
T sample_loglik(const model::Bound<T>& bm, const T& z0, const TrajectoryRecord& r, const TreatmentControl& c,
                const ode::SolverConfig& cfg) {
  using namespace ad;
  const auto zs = model::solve_latent(bm, z0, c, std::span<const double>(r.times), cfg);
  const auto xs = model::emit_trajectory(bm, zs, c, std::span<const double>(r.times));
  std::optional<T> ll;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const Mat y = r.y.row(static_cast<Eigen::Index>(i)).transpose();
    const Mat m = r.mask.row(static_cast<Eigen::Index>(i)).transpose();
    const T li = model::log_likelihood_row(y, m, xs[i], bm.log_sigma);
    ll = ll ? add(*ll, li) : li;
  }
  return *ll;
}

}  // namespace detail

// ELBO of one record with S = eps.cols() reparameterized samples. On the tape
// backend S must be 1. A sample whose trajectory diverges contributes the
// sentinel in place of its log-likelihood.
template <class T>
ElboTerms<T> record_elbo(const VariationalModel& vm, const ad::Bound<T>& p, const TrajectoryRecord& r,
                         const TreatmentControl& c, const Mat& eps, const ode::SolverConfig& cfg) {
  using namespace ad;
  if (eps.rows() != vm.latent_dim() || eps.cols() < 1) throw ContractError("record_elbo: noise shape");
  if constexpr (std::is_same_v<T, Var>) {
    if (eps.cols() != 1) throw ContractError("record_elbo: tape backend takes one sample per call");
  }
  const auto bm = model::bind(vm.model, p);
  const auto q = encode(vm.encoder, p, r, c);
  const auto d = draw_posterior(q, eps, vm.expert_dim());
  const T lp0 = prior_logpdf(d.z0, vm.expert_dim(), vm.model.prior);
  const T kl = sub(d.log_q, lp0);
  const auto S = eps.cols();

  ElboTerms<T> out;
  out.kl = kl;
  try {
    out.loglik = detail::sample_loglik(bm, d.z0, r, c, cfg);
  } catch (const ode::DivergenceError&) {
    if constexpr (std::is_same_v<T, Var>) {
      out.loglik = lift(kl, Mat::Constant(1, 1, pharmaco::kLogDensitySentinel));
      out.diverged = 1;
    } else {
      Mat ll(1, S);
      for (Eigen::Index s = 0; s < S; ++s) {
        try {
          ll(0, s) = detail::sample_loglik(bm, Mat(d.z0.col(s)), r, c, cfg)(0, 0);
        } catch (const ode::DivergenceError&) {
          ll(0, s) = pharmaco::kLogDensitySentinel;
          ++out.diverged;
        }
      }
      out.loglik = ll;
    }
  }
  out.elbo = scale(1.0 / static_cast<double>(S), sum(sub(out.loglik, kl)));
  return out;
}

// Mean negative ELBO over records on the plain backend with noise drawn from
// fixed per-record streams (seed, purpose, salt, record index).
inline double evaluate_loss(const VariationalModel& vm, const std::vector<TrajectoryRecord>& recs,
                            const std::vector<TreatmentControl>& controls, int samples, std::uint64_t seed,
                            std::uint64_t salt, const ode::SolverConfig& cfg, int* diverged = nullptr) {
  const auto p = ad::bind(vm.params);
  double total = 0.0;
  int div = 0;
  for (std::size_t i = 0; i < recs.size(); ++i) {
    Rng rng = make_stream({seed, tag(Purpose::validation), salt, i});
    const Mat eps = standard_normal(rng, vm.latent_dim(), samples);
    const auto t = record_elbo(vm, p, recs[i], controls[i], eps, cfg);
    total -= t.elbo(0, 0);
    div += t.diverged;
  }
  if (diverged) *diverged = div;
  return total / static_cast<double>(std::max<std::size_t>(recs.size(), 1));
}

inline std::vector<TreatmentControl> make_controls(const std::vector<TrajectoryRecord>& recs) {
  std::vector<TreatmentControl> c;
  c.reserve(recs.size());
  for (const auto& r : recs) c.push_back(make_control(r));
  return c;
}

}  // namespace lhm::inference
