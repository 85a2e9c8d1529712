#pragma once

// The hybrid latent model: expert variables z^e (pharmaco), machine-learned
// latents z^m with neural dynamics, and a neural emission to the D observed
// physiological variables with Gaussian measurement noise.
//
// Full latent vectors are ordered [z1 z2 z3 z4 z5 | z^m]. The integrated
// state leaves out z3, which comes from the closed-form plasma forcing:
// [z1 z2 z4 z5 | z^m]. Without an expert block both are just z^m.

#include "lhm/data.hpp"
#include "lhm/diffcore.hpp"
#include "lhm/odesolve.hpp"
#include "lhm/pharmaco.hpp"

#include <cmath>
#include <numbers>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace lhm::model {

using ad::Mat;
using ad::Vec;

enum class EmissionKind { mlp, linear };

inline const char* emission_name(EmissionKind k) { return k == EmissionKind::mlp ? "mlp" : "linear"; }
inline EmissionKind parse_emission(const std::string& s) {
  if (s == "mlp") return EmissionKind::mlp;
  if (s == "linear") return EmissionKind::linear;
  throw std::invalid_argument("unknown emission kind '" + s + "'");
}

struct ModelSpec {
  bool has_expert = true;
  int latent = 2;         // M, or Z for a pure neural ODE
  int dims = 20;          // D
  int controls = 1;       // A
  int dynamics_hidden = 0;  // 0: 2 * (E + M)
  int emission_hidden = 0;  // 0: 2 * D
  EmissionKind emission = EmissionKind::mlp;
  bool shared_sigma = false;
  double init_sigma = 0.5;
  double h_P = 2.0;
  double h_C = 2.0;
  pharmaco::PriorSetting prior = pharmaco::PriorSetting::simulation;
  pharmaco::ExpertCoefficients expert_init = pharmaco::ExpertCoefficients::all(std::numbers::ln2);
  std::string time_unit = "days";

  [[nodiscard]] int expert_dim() const { return has_expert ? pharmaco::kExpertDim : 0; }
  [[nodiscard]] int latent_dim() const { return expert_dim() + latent; }
  [[nodiscard]] int state_dim() const { return (has_expert ? 4 : 0) + latent; }
  [[nodiscard]] int dyn_hidden() const { return dynamics_hidden > 0 ? dynamics_hidden : 2 * latent_dim(); }
  [[nodiscard]] int emit_hidden() const { return emission_hidden > 0 ? emission_hidden : 2 * dims; }

  void validate() const {
    if (latent < 0 || dims < 1 || controls < 0) throw std::invalid_argument("model spec: invalid dimensions");
    if (latent_dim() < 1) throw std::invalid_argument("model spec: no latent variables");
    if (!(init_sigma > 0.0)) throw std::invalid_argument("model spec: init_sigma must be positive");
    if (h_P < 1.0 || h_C < 1.0) throw std::invalid_argument("model spec: Hill exponents must be >= 1");
  }

  [[nodiscard]] json to_json() const {
    return json{{"has_expert", has_expert},
                {"latent", latent},
                {"dims", dims},
                {"controls", controls},
                {"dynamics_hidden", dyn_hidden()},
                {"emission_hidden", emit_hidden()},
                {"emission", emission_name(emission)},
                {"shared_sigma", shared_sigma},
                {"init_sigma", init_sigma},
                {"h_P", h_P},
                {"h_C", h_C},
                {"prior", pharmaco::setting_name(prior)},
                {"time_unit", time_unit}};
  }
  static ModelSpec from_json(const json& j) {
    ModelSpec s;
    s.has_expert = j.value("has_expert", s.has_expert);
    s.latent = j.value("latent", s.latent);
    s.dims = j.value("dims", s.dims);
    s.controls = j.value("controls", s.controls);
    s.dynamics_hidden = j.value("dynamics_hidden", 0);
    s.emission_hidden = j.value("emission_hidden", 0);
    s.emission = parse_emission(j.value("emission", std::string("mlp")));
    s.shared_sigma = j.value("shared_sigma", s.shared_sigma);
    s.init_sigma = j.value("init_sigma", s.init_sigma);
    s.h_P = j.value("h_P", s.h_P);
    s.h_C = j.value("h_C", s.h_C);
    s.prior = pharmaco::parse_setting(j.value("prior", std::string("simulation")));
    s.time_unit = j.value("time_unit", s.time_unit);
    return s;
  }
};

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization.
inline Mat uniform_init(Rng& rng, Eigen::Index rows, Eigen::Index cols, Eigen::Index fan_in) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<Eigen::Index>(fan_in, 1)));
  std::uniform_real_distribution<double> u(-bound, bound);
  Mat m(rows, cols);
  for (Eigen::Index c = 0; c < cols; ++c)
    for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = u(rng);
  return m;
}

// Parameter groups, by name prefix.
inline constexpr const char* kExpertPrefix = "expert.";
inline constexpr const char* kDynPrefix = "dyn.";
inline constexpr const char* kEmitPrefix = "emit.";
inline constexpr const char* kLogSigma = "log_sigma";

inline ad::ParamSet init_model_params(const ModelSpec& s, Rng& rng) {
  s.validate();
  ad::ParamSet p;
  if (s.has_expert) p.absorb("expert", pharmaco::make_expert_params(s.expert_init));
  const int L = s.latent_dim();
  const int A = s.controls;
  if (s.latent > 0) {
    const int in = L + A;
    const int h = s.dyn_hidden();
    p.add_matrix("dyn.w1", uniform_init(rng, h, in, in));
    p.add_vector("dyn.b1", uniform_init(rng, h, 1, in));
    p.add_matrix("dyn.w2", uniform_init(rng, s.latent, h, h));
    p.add_vector("dyn.b2", uniform_init(rng, s.latent, 1, h));
  }
  const int in = L + A;
  if (s.emission == EmissionKind::mlp) {
    const int h = s.emit_hidden();
    p.add_matrix("emit.w1", uniform_init(rng, h, in, in));
    p.add_vector("emit.b1", uniform_init(rng, h, 1, in));
    p.add_matrix("emit.w2", uniform_init(rng, s.dims, h, h));
    p.add_vector("emit.b2", uniform_init(rng, s.dims, 1, h));
  } else {
    p.add_matrix("emit.w", uniform_init(rng, s.dims, in, in));
    p.add_vector("emit.b", uniform_init(rng, s.dims, 1, in));
  }
  const double ls = std::log(s.init_sigma);
  if (s.shared_sigma) {
    p.add_vector(kLogSigma, Vec::Constant(1, ls));
  } else {
    p.add_vector(kLogSigma, Vec::Constant(s.dims, ls));
  }
  return p;
}

// Model parameters materialized on a backend, with expert coefficients
// already mapped to the positive domain.
template <class T>
struct Bound {
  const ModelSpec* spec = nullptr;
  std::optional<pharmaco::Coeffs<T>> k;
  std::optional<T> dyn_w1, dyn_b1, dyn_w2, dyn_b2;
  std::optional<T> emit_w1, emit_b1, emit_w2, emit_b2;
  T log_sigma;
};

template <class T>
Bound<T> bind(const ModelSpec& s, const ad::Bound<T>& p) {
  Bound<T> b;
  b.spec = &s;
  if (s.has_expert) b.k = pharmaco::map_coefficients(p, kExpertPrefix, s.h_P, s.h_C);
  if (s.latent > 0) {
    b.dyn_w1 = p("dyn.w1");
    b.dyn_b1 = p("dyn.b1");
    b.dyn_w2 = p("dyn.w2");
    b.dyn_b2 = p("dyn.b2");
  }
  if (s.emission == EmissionKind::mlp) {
    b.emit_w1 = p("emit.w1");
    b.emit_b1 = p("emit.b1");
    b.emit_w2 = p("emit.w2");
    b.emit_b2 = p("emit.b2");
  } else {
    b.emit_w1 = p("emit.w");
    b.emit_b1 = p("emit.b");
  }
  b.log_sigma = p(kLogSigma);
  return b;
}

template <class T>
T mlp2(const T& x, const T& w1, const T& b1, const T& w2, const T& b2) {
  return ad::affine(w2, ad::tanh(ad::affine(w1, x, b1)), b2);
}

// dz/dt for a full latent vector z = [z^e | z^m] (rows) under control a.
// The z3 row of the result is -k3 z3 (bolus inputs excluded).
template <class T>
T joint_rhs(const Bound<T>& m, const T& z, const T& a) {
  using namespace ad;
  const ModelSpec& s = *m.spec;
  if (value_of(z).rows() != s.latent_dim() || value_of(a).rows() != s.controls)
    throw ContractError("joint_rhs: dimension mismatch");
  std::vector<T> parts;
  parts.reserve(6);
  T ze;
  if (s.has_expert) {
    const T z1 = row(z, 0), z2 = row(z, 1), z3 = row(z, 2), z4 = row(z, 3), z5 = row(z, 4);
    auto d = pharmaco::expert_rhs(z1, z2, z3, z4, z5, *m.k);
    parts.insert(parts.end(), {d.dz1, d.dz2, d.dz3, d.dz4, d.dz5});
    ze = rows(z, 0, 5);
  }
  if (s.latent > 0) {
    const T zm = rows(z, s.expert_dim(), s.latent);
    const T in = s.has_expert ? stack({zm, ze, a}) : stack({zm, a});
    parts.push_back(mlp2(in, *m.dyn_w1, *m.dyn_b1, *m.dyn_w2, *m.dyn_b2));
  }
  return stack(std::span<const T>(parts));
}

// x = g(z^e, z^m, a).
template <class T>
T emit(const Bound<T>& m, const T& z, const T& a) {
  using namespace ad;
  const ModelSpec& s = *m.spec;
  if (value_of(z).rows() != s.latent_dim() || value_of(a).rows() != s.controls)
    throw ContractError("emit: dimension mismatch");
  const T in = s.controls > 0 ? stack({z, a}) : z;
  if (s.emission == EmissionKind::mlp) return mlp2(in, *m.emit_w1, *m.emit_b1, *m.emit_w2, *m.emit_b2);
  return affine(*m.emit_w1, in, *m.emit_b1);
}

inline constexpr double kHalfLog2Pi = 0.91893853320467274178;

// Gaussian log density of one measurement vector y (D x 1) with mask against
// emitted x (D x S); returns 1 x S. Unobserved entries contribute 0.
template <class T>
T log_likelihood_row(const Mat& y, const Mat& mask, const T& x, const T& log_sigma) {
  using namespace ad;
  const Eigen::Index S = value_of(x).cols();
  const Mat ones = Mat::Ones(1, S);
  const T ls = S > 1 && value_of(log_sigma).rows() > 1 ? matmul(log_sigma, lift(x, ones)) : log_sigma;
  const T r = mul(sub(lift(x, y * ones), x), exp(neg(ls)));
  const T term = shift(add(scale(0.5, square(r)), ls), kHalfLog2Pi);
  return neg(colsum(mul(lift(x, mask * ones), term)));
}

// Plain form over timesteps x D arrays with per-dimension (or scalar) log sigma.
inline double log_likelihood(const Mat& y, const Mat& mask, const Mat& x, const Vec& log_sigma) {
  if (y.rows() != x.rows() || y.cols() != x.cols() || mask.rows() != y.rows() || mask.cols() != y.cols())
    throw ad::ContractError("log_likelihood: shape mismatch");
  double ll = 0.0;
  for (Eigen::Index t = 0; t < y.rows(); ++t)
    for (Eigen::Index d = 0; d < y.cols(); ++d) {
      if (mask(t, d) <= 0.5) continue;
      const double ls = log_sigma.size() == 1 ? log_sigma(0) : log_sigma(d);
      const double r = (y(t, d) - x(t, d)) / std::exp(ls);
      ll += -kHalfLog2Pi - ls - 0.5 * r * r;
    }
  return ll;
}

// ---- trajectories -----------------------------------------------------------

// Integrated state from a full latent vector (drops z3).
template <class T>
T integrated_state(const ModelSpec& s, const T& z0) {
  using namespace ad;
  if (!s.has_expert) return z0;
  if (s.latent == 0) return stack({rows(z0, 0, 2), rows(z0, 3, 2)});
  return stack({rows(z0, 0, 2), rows(z0, 3, 2 + s.latent)});
}

// Full latent vector from an integrated state and the current z3.
template <class T>
T full_state(const ModelSpec& s, const T& x, const T& z3) {
  using namespace ad;
  if (!s.has_expert) return x;
  if (s.latent == 0) return stack({rows(x, 0, 2), z3, rows(x, 2, 2)});
  return stack({rows(x, 0, 2), z3, rows(x, 2, 2 + s.latent)});
}

// Plasma concentration at t (regime `seg`), including z3(0) decay.
template <class T>
T plasma(const Bound<T>& m, const T& z3_0, const TreatmentControl& c, std::size_t seg, double t) {
  return pharmaco::plasma_forcing(z3_0, m.k->k_3, std::span<const pharmaco::Bolus>(c.boluses),
                                  c.active.at(seg), t);
}

// Latent trajectory from a full initial latent block (rows = latent_dim,
// columns = samples) at the requested times; returns full latent vectors.
template <class T>
std::vector<T> solve_latent(const Bound<T>& m, const T& z0, const TreatmentControl& c,
                            std::span<const double> times, const ode::SolverConfig& cfg) {
  using namespace ad;
  const ModelSpec& s = *m.spec;
  std::optional<T> z3_0;
  if (s.has_expert) z3_0 = row(z0, 2);
  std::vector<T> controls;
  controls.reserve(c.signal.segment_values.size());
  for (const auto& v : c.signal.segment_values) controls.push_back(lift(z0, Mat(v)));

  auto rhs = [&](double t, const T& x, std::size_t seg) -> T {
    const T& a = controls.at(seg);
    if (!s.has_expert) return joint_rhs(m, x, a);
    const T z3 = plasma(m, *z3_0, c, seg, t);
    const T d = joint_rhs(m, full_state(s, x, z3), a);
    return integrated_state(s, d);
  };
  const T x0 = integrated_state(s, z0);
  const auto xs = ode::integrate(rhs, x0, std::span<const double>(c.signal.breakpoints), times, cfg);
  std::vector<T> out;
  out.reserve(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (!s.has_expert) {
      out.push_back(xs[i]);
      continue;
    }
    // right-continuous: a bolus at exactly t is already in plasma
    const std::size_t seg = c.signal.segment(times[i]);
    out.push_back(full_state(s, xs[i], plasma(m, *z3_0, c, seg, times[i])));
  }
  return out;
}

// Emissions at the given times for the full latent trajectory.
template <class T>
std::vector<T> emit_trajectory(const Bound<T>& m, const std::vector<T>& zs, const TreatmentControl& c,
                               std::span<const double> times) {
  std::vector<T> xs;
  xs.reserve(zs.size());
  for (std::size_t i = 0; i < zs.size(); ++i)
    xs.push_back(emit(m, zs[i], ad::lift(zs[i], Mat(c.signal.value(times[i])))));
  return xs;
}

// ---- serialization ------------------------------------------------------------

// {expert, latent_dynamics, emission, log_sigma, meta}; unconstrained values.
inline json model_params_to_json(const ModelSpec& s, const ad::ParamSet& p) {
  ad::ParamSet ex, dyn, em, ls;
  for (const auto& e : p.entries()) {
    auto strip = [&](const std::string& pre) { return e.name.substr(pre.size()); };
    if (e.name.starts_with(kExpertPrefix)) {
      ex.add(strip(kExpertPrefix), e.value, e.shape);
    } else if (e.name.starts_with(kDynPrefix)) {
      dyn.add(strip(kDynPrefix), e.value, e.shape);
    } else if (e.name.starts_with(kEmitPrefix)) {
      em.add(strip(kEmitPrefix), e.value, e.shape);
    } else if (e.name == kLogSigma) {
      ls.add(kLogSigma, e.value, e.shape);
    }
  }
  json j;
  j["expert"] = ex.to_json();
  if (s.has_expert) {
    const auto c = pharmaco::mapped_coefficients(p, kExpertPrefix, s.h_P, s.h_C);
    const auto vals = pharmaco::learnable_values(c);
    json mapped = json::object();
    for (std::size_t i = 0; i < vals.size(); ++i) mapped[pharmaco::learnable_names()[i]] = vals[i];
    mapped["h_P"] = s.h_P;
    mapped["h_C"] = s.h_C;
    j["expert_mapped"] = mapped;
  }
  j["latent_dynamics"] = dyn.to_json();
  j["emission"] = em.to_json();
  j["log_sigma"] = ls.to_json()[kLogSigma];
  j["meta"] = {{"E", s.expert_dim()}, {"M", s.latent}, {"D", s.dims}, {"A", s.controls}, {"time_unit", s.time_unit}};
  return j;
}

inline ad::ParamSet model_params_from_json(const json& j) {
  ad::ParamSet p;
  p.absorb("expert", ad::ParamSet::from_json(j.at("expert")));
  p.absorb("dyn", ad::ParamSet::from_json(j.at("latent_dynamics")));
  p.absorb("emit", ad::ParamSet::from_json(j.at("emission")));
  json ls;
  ls[kLogSigma] = j.at("log_sigma");
  const auto lsp = ad::ParamSet::from_json(ls);
  for (const auto& e : lsp.entries()) p.add(e.name, e.value, e.shape);
  return p;
}

}  // namespace lhm::model
