#pragma once

// Dexamethasone / COVID-19 expert model: innate immune response (z1), lung
// tissue drug concentration (z2), plasma drug concentration (z3), viral load
// (z4) and adaptive immune response (z5).
//
// z3 is never integrated: it is the closed-form bolus superposition
//   z3(t) = z3(0) exp(-k3 t) + sum_i d_i [t >= t_i] exp(k3 (t_i - t)),
// and z2 is integrated against it.

#include "lhm/diffcore.hpp"

#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <type_traits>
#include <string>
#include <vector>

namespace lhm::pharmaco {

using ad::Mat;
using ad::Vec;

inline constexpr int kExpertDim = 5;

struct ExpertState {
  double z1 = 0, z2 = 0, z3 = 0, z4 = 0, z5 = 0;

  [[nodiscard]] Vec to_vec() const {
    Vec v(5);
    v << z1, z2, z3, z4, z5;
    return v;
  }
  static ExpertState from_vec(const Vec& v) {
    if (v.size() != kExpertDim) throw std::invalid_argument("ExpertState needs 5 components");
    return {v(0), v(1), v(2), v(3), v(4)};
  }
};

struct Bolus {
  double time = 0;
  double dose = 0;
};

// Positive coefficients of the expert ODE.
struct ExpertCoefficients {
  double k_IR = 1, k_PF = 1, k_O = 1, E_max = 1, EC_50 = 1, h_P = 2, k_Dex = 1, k_DP = 1, k_IIR = 1, k_DC = 1,
         h_C = 2, k_1 = 1, k_2 = 1, k_3 = 1;

  // Coefficients used to simulate the synthetic benchmark.
  static ExpertCoefficients simulation_truth() { return {}; }
  static ExpertCoefficients all(double v, double hill = 2.0) {
    ExpertCoefficients c;
    c.k_IR = c.k_PF = c.k_O = c.E_max = c.EC_50 = c.k_Dex = c.k_DP = c.k_IIR = c.k_DC = c.k_1 = c.k_2 = c.k_3 = v;
    c.h_P = c.h_C = hill;
    return c;
  }
};

// Names of the learnable coefficients, in storage order. Hill exponents are
// held fixed and are not part of the parameter set.
inline const std::array<std::string, 12>& learnable_names() {
  static const std::array<std::string, 12> names = {"k_IR", "k_PF",  "k_O",  "E_max", "EC_50", "k_Dex",
                                                    "k_DP", "k_IIR", "k_DC", "k_1",   "k_2",   "k_3"};
  return names;
}

inline std::array<double, 12> learnable_values(const ExpertCoefficients& c) {
  return {c.k_IR, c.k_PF, c.k_O, c.E_max, c.EC_50, c.k_Dex, c.k_DP, c.k_IIR, c.k_DC, c.k_1, c.k_2, c.k_3};
}

// Unconstrained parameter set: each coefficient is softplus(raw).
inline ad::ParamSet make_expert_params(const ExpertCoefficients& init) {
  ad::ParamSet p;
  const auto vals = learnable_values(init);
  for (std::size_t i = 0; i < vals.size(); ++i) {
    if (!(vals[i] > 0.0)) throw std::invalid_argument("expert coefficient '" + learnable_names()[i] + "' must be positive");
    p.add_scalar(learnable_names()[i], ad::softplus_inverse(vals[i]));
  }
  return p;
}

inline ExpertCoefficients mapped_coefficients(const ad::ParamSet& p, const std::string& prefix = "",
                                              double h_P = 2.0, double h_C = 2.0) {
  auto g = [&](const char* n) { return ad::softplus(p.get(prefix + n)(0, 0)); };
  ExpertCoefficients c;
  c.k_IR = g("k_IR");
  c.k_PF = g("k_PF");
  c.k_O = g("k_O");
  c.E_max = g("E_max");
  c.EC_50 = g("EC_50");
  c.k_Dex = g("k_Dex");
  c.k_DP = g("k_DP");
  c.k_IIR = g("k_IIR");
  c.k_DC = g("k_DC");
  c.k_1 = g("k_1");
  c.k_2 = g("k_2");
  c.k_3 = g("k_3");
  c.h_P = h_P;
  c.h_C = h_C;
  return c;
}

// Coefficients on a backend (each a 1x1 value).
template <class T>
struct Coeffs {
  T k_IR, k_PF, k_O, E_max, EC_50, k_Dex, k_DP, k_IIR, k_DC, k_1, k_2, k_3;
  double h_P = 2.0, h_C = 2.0;
};

// From bound unconstrained parameters (softplus applied once per pass).
template <class T>
Coeffs<T> map_coefficients(const ad::Bound<T>& b, const std::string& prefix, double h_P, double h_C) {
  auto g = [&](const char* n) { return ad::softplus(b(prefix + n)); };
  return Coeffs<T>{g("k_IR"), g("k_PF"), g("k_O"), g("E_max"), g("EC_50"), g("k_Dex"),
                   g("k_DP"), g("k_IIR"), g("k_DC"), g("k_1"), g("k_2"), g("k_3"), h_P, h_C};
}

inline Coeffs<Mat> constant_coefficients(const ExpertCoefficients& c) {
  auto s = [](double v) { return Mat::Constant(1, 1, v); };
  return Coeffs<Mat>{s(c.k_IR), s(c.k_PF), s(c.k_O), s(c.E_max), s(c.EC_50), s(c.k_Dex), s(c.k_DP),
                     s(c.k_IIR), s(c.k_DC), s(c.k_1), s(c.k_2), s(c.k_3), c.h_P, c.h_C};
}

// Number of right-hand-side evaluations that saw a negative z1 or z5 and
// clamped it to zero inside a power term.
inline std::atomic<std::uint64_t>& clamp_counter() {
  static std::atomic<std::uint64_t> n{0};
  return n;
}

template <class T>
struct Derivatives {
  T dz1, dz2, dz3, dz4, dz5;
};

// Time derivatives of the five expert variables given the current plasma
// concentration z3 (dz3 excludes bolus inputs, which the closed form adds).
template <class T>
Derivatives<T> expert_rhs(const T& z1, const T& z2, const T& z3, const T& z4, const T& z5, const Coeffs<T>& k) {
  using namespace ad;
  if (value_of(z1).minCoeff() < 0.0 || value_of(z5).minCoeff() < 0.0) clamp_counter().fetch_add(1, std::memory_order_relaxed);
  const T z1p = pow_const(relu(z1), k.h_P);
  const T ec = pow_const(k.EC_50, k.h_P);
  const T hill = div(mul(k.E_max, z1p), add(ec, z1p));
  const T z1z4 = mul(z1, z4);
  const T dz1 = add(sub(add(mul(k.k_IR, z4), mul(k.k_PF, z1z4)), mul(k.k_O, z1)), sub(hill, mul(k.k_Dex, mul(z1, z2))));
  const T z5p = pow_const(relu(z5), k.h_C);
  const T dz4 = sub(sub(mul(k.k_DP, z4), mul(k.k_IIR, z1z4)), mul(k.k_DC, mul(z4, z5p)));
  const T dz5 = mul(k.k_1, z1);
  const T dz2 = sub(mul(k.k_3, z3), mul(k.k_2, z2));
  const T dz3 = neg(mul(k.k_3, z3));
  return {dz1, dz2, dz3, dz4, dz5};
}

inline std::array<double, 5> expert_rhs(const ExpertState& z, double z3_forced, const ExpertCoefficients& c) {
  auto s = [](double v) { return Mat::Constant(1, 1, v); };
  const auto d = expert_rhs<Mat>(s(z.z1), s(z.z2), s(z3_forced), s(z.z4), s(z.z5), constant_coefficients(c));
  return {d.dz1(0, 0), d.dz2(0, 0), d.dz3(0, 0), d.dz4(0, 0), d.dz5(0, 0)};
}

// Closed-form superposition of boluses: sum_i d_i [t >= t_i] exp(k3 (t_i - t)).
inline double plasma_concentration(std::span<const Bolus> schedule, double k3, double t) {
  double z = 0.0;
  for (const auto& b : schedule)
    if (t >= b.time) z += b.dose * std::exp(k3 * (b.time - t));
  return z;
}

// Backend form with z3(0) decay; `active` counts the boluses in force
// (those whose time is <= the start of the current control regime).
template <class T>
T plasma_forcing(const T& z3_0, const T& k3, std::span<const Bolus> schedule, std::size_t active, double t) {
  using namespace ad;
  T z = mul(z3_0, exp(scale(-t, k3)));
  for (std::size_t i = 0; i < active && i < schedule.size(); ++i) {
    const auto& b = schedule[i];
    z = add(z, scale(b.dose, exp(scale(b.time - t, k3))));
  }
  return z;
}

// ---- informative priors over z^e(0) ---------------------------------------

enum class PriorSetting { simulation, clinical };

inline const char* setting_name(PriorSetting s) { return s == PriorSetting::simulation ? "simulation" : "clinical"; }
inline PriorSetting parse_setting(const std::string& s) {
  if (s == "simulation") return PriorSetting::simulation;
  if (s == "clinical") return PriorSetting::clinical;
  throw std::invalid_argument("unknown prior setting '" + s + "'");
}

// Exponential rates per component (z1..z5).
inline std::array<double, 5> prior_rates(PriorSetting s) {
  if (s == PriorSetting::simulation) return {100.0, 100.0, 100.0, 100.0, 100.0};
  return {0.1, 100.0, 100.0, 0.1, 0.1};
}

inline constexpr double kLogDensitySentinel = -1e10;

inline double exponential_quantile(double u, double rate) { return -std::log1p(-u) / rate; }

inline ExpertState sample_expert_prior(Rng& rng, PriorSetting s) {
  const auto r = prior_rates(s);
  std::array<double, 5> z{};
  for (int j = 0; j < 5; ++j) {
    double v = 0.0;
    // zero has probability 2^-53 per draw; redraw to keep the support open
    do {
      v = std::exponential_distribution<double>(r[static_cast<std::size_t>(j)])(rng);
    } while (!(v > 0.0));
    z[static_cast<std::size_t>(j)] = v;
  }
  return {z[0], z[1], z[2], z[3], z[4]};
}

inline double expert_prior_logpdf(const ExpertState& z, PriorSetting s) {
  const auto r = prior_rates(s);
  const std::array<double, 5> v = {z.z1, z.z2, z.z3, z.z4, z.z5};
  double lp = 0.0;
  for (std::size_t j = 0; j < 5; ++j) {
    if (!(v[j] > 0.0)) return kLogDensitySentinel;
    lp += std::log(r[j]) - r[j] * v[j];
  }
  return lp;
}

// Backend form over a 5 x S block of expert initial states (row order z1..z5);
// returns 1 x S. Columns with a non-positive entry get the sentinel.
template <class T>
T expert_prior_logpdf(const T& ze, PriorSetting s) {
  using namespace ad;
  const Mat& v = value_of(ze);
  if (v.rows() != kExpertDim) throw ContractError("expert_prior_logpdf: expects 5 rows");
  const auto r = prior_rates(s);
  const Eigen::Index S = v.cols();
  Mat rate(5, S), logr(5, S);
  for (int j = 0; j < 5; ++j) {
    rate.row(j).setConstant(r[static_cast<std::size_t>(j)]);
    logr.row(j).setConstant(std::log(r[static_cast<std::size_t>(j)]));
  }
  const T lp = colsum(sub(lift(ze, logr), mul(lift(ze, rate), ze)));
  const Mat bad = (v.array() <= 0.0).colwise().any().cast<double>().matrix();
  if (bad.sum() == 0.0) return lp;
  const Mat keep = Mat::Ones(1, S) - bad;
  return add(mul(lp, lift(ze, keep)), lift(ze, Mat(kLogDensitySentinel * bad)));
}

}  // namespace lhm::pharmaco
