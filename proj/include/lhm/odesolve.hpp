#pragma once

// Explicit Runge-Kutta integration of controlled systems dz/dt = f(t, z, seg)
// where `seg` indexes the piecewise-constant control regime. Steps never
// straddle a breakpoint; the regime index handed to f is the one in force on
// the open interval being integrated, so left limits at a breakpoint are
// evaluated with the old regime.
//
// The solver is generic over the state backend: ad::Var (recorded, so the
// result is differentiable through every step) or ad::Mat (columns are
// independent trajectories sharing one step sequence).

#include "lhm/diffcore.hpp"

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace lhm::ode {

using ad::Mat;
using ad::Vec;

enum class Method { dopri5, rk4 };

inline const char* method_name(Method m) { return m == Method::dopri5 ? "dopri5" : "rk4"; }
inline Method parse_method(const std::string& s) {
  if (s == "dopri5") return Method::dopri5;
  if (s == "rk4") return Method::rk4;
  throw std::invalid_argument("unknown solver method '" + s + "'");
}

struct SolverConfig {
  Method method = Method::dopri5;
  double rtol = 1e-7;
  double atol = 1e-8;
  int substeps = 4;
  double max_step = 0.25;  // rk4 only; <= 0 disables the cap
  // dopri5 only: interpolate outputs inside steps (cubic Hermite) instead of
  // stepping onto every output time.
  bool dense_output = false;
  std::size_t max_steps = 200000;
  double divergence_threshold = 1e12;

  static SolverConfig fixed_rk4(int substeps = 4, double max_step = 0.25) {
    SolverConfig c;
    c.method = Method::rk4;
    c.substeps = substeps;
    c.max_step = max_step;
    return c;
  }

  void validate() const {
    if (!(rtol > 0.0) || !(atol > 0.0)) throw std::invalid_argument("solver tolerances must be positive");
    if (substeps < 1) throw std::invalid_argument("solver substeps must be >= 1");
    if (max_steps == 0) throw std::invalid_argument("solver max_steps must be >= 1");
  }
};

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, double last_good_time)
      : std::runtime_error(what), last_good_time_(last_good_time) {}
  [[nodiscard]] double last_good_time() const { return last_good_time_; }

 private:
  double last_good_time_;
};

// Breakpoints plus piecewise-constant channel values. Lookup is
// right-continuous: at a breakpoint the new value is already in force.
struct ControlSignal {
  std::vector<double> breakpoints;   // strictly increasing
  std::vector<Vec> segment_values;   // breakpoints.size() + 1 entries

  [[nodiscard]] std::size_t segment(double t) const {
    return static_cast<std::size_t>(std::upper_bound(breakpoints.begin(), breakpoints.end(), t) -
                                    breakpoints.begin());
  }
  [[nodiscard]] const Vec& value(double t) const { return segment_values.at(segment(t)); }
  [[nodiscard]] const Vec& value_in_segment(std::size_t seg) const { return segment_values.at(seg); }
  [[nodiscard]] Eigen::Index channels() const {
    return segment_values.empty() ? 0 : segment_values.front().size();
  }

  void validate() const {
    for (std::size_t i = 1; i < breakpoints.size(); ++i)
      if (!(breakpoints[i] > breakpoints[i - 1])) throw std::invalid_argument("breakpoints must be strictly increasing");
    if (segment_values.size() != breakpoints.size() + 1)
      throw std::invalid_argument("control needs one value per segment");
  }
};

namespace detail {

inline double error_norm(const Mat& err, const Mat& y0, const Mat& y1, double rtol, double atol) {
  if (err.size() == 0) return 0.0;
  const auto sc = (atol + rtol * y0.array().abs().max(y1.array().abs()));
  return std::sqrt((err.array() / sc).square().mean());
}

inline double max_column_norm(const Mat& m) {
  if (m.size() == 0) return 0.0;
  return m.colwise().norm().maxCoeff();
}

inline void check_state(const Mat& v, double threshold, double t_good) {
  if (!v.allFinite() || max_column_norm(v) > threshold) {
    throw DivergenceError("state diverged (norm above " + std::to_string(threshold) + " or non-finite)", t_good);
  }
}

// Segment index in force on (a, b): breakpoints <= a.
inline std::size_t regime_at(std::span<const double> bps, double a) {
  return static_cast<std::size_t>(std::upper_bound(bps.begin(), bps.end(), a) - bps.begin());
}

struct Dopri5 {
  static constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
  static constexpr double a21 = 1.0 / 5;
  static constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
  static constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
  static constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561, a54 = -212.0 / 729;
  static constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                          a65 = -5103.0 / 18656;
  static constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192, b5 = -2187.0 / 6784,
                          b6 = 11.0 / 84;
  static constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920, e5 = -17253.0 / 339200,
                          e6 = 22.0 / 525, e7 = -1.0 / 40;
};

}  // namespace detail

// Integrates from t_start over the sorted output_times (each >= t_start) and
// returns the state at every output time.
template <class T, class Rhs>
std::vector<T> integrate(Rhs&& rhs, const T& z0, std::span<const double> breakpoints,
                         std::span<const double> output_times, const SolverConfig& cfg, double t_start = 0.0) {
  using ad::lincomb;
  cfg.validate();
  if (!ad::value_of(z0).allFinite()) throw std::invalid_argument("integrate: non-finite initial state");
  for (std::size_t i = 0; i < output_times.size(); ++i) {
    if (output_times[i] < t_start) throw std::invalid_argument("integrate: output time before start");
    if (i > 0 && output_times[i] < output_times[i - 1]) throw std::invalid_argument("integrate: output times unsorted");
  }

  std::vector<T> out;
  out.reserve(output_times.size());
  if (output_times.empty()) return out;
  const double t_end = output_times.back();

  // Hard knots: breakpoints inside (t_start, t_end), plus output times
  // unless dopri5 dense output is requested.
  std::vector<double> knots;
  for (double b : breakpoints)
    if (b > t_start && b < t_end) knots.push_back(b);
  if (cfg.method == Method::rk4 || !cfg.dense_output)
    for (double t : output_times)
      if (t > t_start) knots.push_back(t);
  knots.push_back(t_end);
  std::sort(knots.begin(), knots.end());
  knots.erase(std::unique(knots.begin(), knots.end()), knots.end());

  std::size_t next_out = 0;
  while (next_out < output_times.size() && output_times[next_out] == t_start) {
    out.push_back(z0);
    ++next_out;
  }

  T z = z0;
  double t = t_start;
  std::size_t steps = 0;

  if (cfg.method == Method::rk4) {
    for (double b : knots) {
      const std::size_t seg = detail::regime_at(breakpoints, t);
      // At least `substeps` steps per knot interval, more if the interval
      // is longer than substeps * max_step.
      int n = cfg.substeps;
      if (cfg.max_step > 0.0) n = std::max(n, static_cast<int>(std::ceil((b - t) / cfg.max_step - 1e-9)));
      const double h = (b - t) / n;
      for (int s = 0; s < n; ++s) {
        const double ts = t + s * h;
        const T k1 = rhs(ts, z, seg);
        const T y2 = lincomb({&z, &k1}, {1.0, 0.5 * h});
        const T k2 = rhs(ts + 0.5 * h, y2, seg);
        const T y3 = lincomb({&z, &k2}, {1.0, 0.5 * h});
        const T k3 = rhs(ts + 0.5 * h, y3, seg);
        const T y4 = lincomb({&z, &k3}, {1.0, h});
        const T k4 = rhs(ts + h, y4, seg);
        z = lincomb({&z, &k1, &k2, &k3, &k4}, {1.0, h / 6.0, h / 3.0, h / 3.0, h / 6.0});
        detail::check_state(ad::value_of(z), cfg.divergence_threshold, ts);
      }
      t = b;
      while (next_out < output_times.size() && output_times[next_out] == t) {
        out.push_back(z);
        ++next_out;
      }
    }
    return out;
  }

  using C = detail::Dopri5;
  double h = 0.0;
  for (double b : knots) {
    const std::size_t seg = detail::regime_at(breakpoints, t);
    T f0 = rhs(t, z, seg);
    if (h <= 0.0) {
      // Hairer-Norsett-Wanner starting step.
      const Mat& y = ad::value_of(z);
      const Mat& fv = ad::value_of(f0);
      const auto sc = (cfg.atol + cfg.rtol * y.array().abs());
      const double d0 = std::sqrt((y.array() / sc).square().mean());
      const double d1 = std::sqrt((fv.array() / sc).square().mean());
      double h0 = (d0 < 1e-5 || d1 < 1e-5) ? 1e-6 : 0.01 * d0 / d1;
      h0 = std::min(h0, b - t);
      const Mat y1 = y + h0 * fv;
      const T f1 = rhs(t + h0, ad::lift(z, y1), seg);
      const double d2 = std::sqrt(((ad::value_of(f1) - fv).array() / sc).square().mean()) / h0;
      const double h1 = std::max(d1, d2) <= 1e-15 ? std::max(1e-6, h0 * 1e-3)
                                                  : std::pow(0.01 / std::max(d1, d2), 1.0 / 5.0);
      h = std::min(100.0 * h0, h1);
    }
    while (t < b) {
      if (++steps > cfg.max_steps)
        throw DivergenceError("step budget of " + std::to_string(cfg.max_steps) + " exceeded", t);
      bool last = false;
      double hs = h;
      if (t + hs >= b || (b - (t + hs)) < 1e-12 * std::max(1.0, std::abs(b))) {
        hs = b - t;
        last = true;
      }
      const T y2 = lincomb({&z, &f0}, {1.0, hs * C::a21});
      const T k2 = rhs(t + C::c2 * hs, y2, seg);
      const T y3 = lincomb({&z, &f0, &k2}, {1.0, hs * C::a31, hs * C::a32});
      const T k3 = rhs(t + C::c3 * hs, y3, seg);
      const T y4 = lincomb({&z, &f0, &k2, &k3}, {1.0, hs * C::a41, hs * C::a42, hs * C::a43});
      const T k4 = rhs(t + C::c4 * hs, y4, seg);
      const T y5 = lincomb({&z, &f0, &k2, &k3, &k4}, {1.0, hs * C::a51, hs * C::a52, hs * C::a53, hs * C::a54});
      const T k5 = rhs(t + C::c5 * hs, y5, seg);
      const T y6 = lincomb({&z, &f0, &k2, &k3, &k4, &k5},
                           {1.0, hs * C::a61, hs * C::a62, hs * C::a63, hs * C::a64, hs * C::a65});
      const T k6 = rhs(t + hs, y6, seg);
      const T y7 = lincomb({&z, &f0, &k3, &k4, &k5, &k6},
                           {1.0, hs * C::b1, hs * C::b3, hs * C::b4, hs * C::b5, hs * C::b6});
      const double t_new = last ? b : t + hs;
      const Mat& y7v = ad::value_of(y7);
      if (!y7v.allFinite()) {
        h = 0.25 * hs;
        if (h < 1e-14 * std::max(1.0, std::abs(t))) throw DivergenceError("non-finite state, step size underflow", t);
        continue;
      }
      const T k7 = rhs(t_new, y7, seg);
      const Mat err = hs * (C::e1 * ad::value_of(f0) + C::e3 * ad::value_of(k3) + C::e4 * ad::value_of(k4) +
                            C::e5 * ad::value_of(k5) + C::e6 * ad::value_of(k6) + C::e7 * ad::value_of(k7));
      const double en = detail::error_norm(err, ad::value_of(z), y7v, cfg.rtol, cfg.atol);
      if (en <= 1.0) {
        // Dense output on (t, t_new] via cubic Hermite with endpoint slopes.
        while (next_out < output_times.size() && output_times[next_out] <= t_new) {
          const double to = output_times[next_out];
          if (to == t_new) {
            out.push_back(y7);
          } else {
            const double th = (to - t) / hs;
            const double th2 = th * th, th3 = th2 * th;
            const double h00 = 2 * th3 - 3 * th2 + 1, h10 = th3 - 2 * th2 + th;
            const double h01 = -2 * th3 + 3 * th2, h11 = th3 - th2;
            out.push_back(lincomb({&z, &f0, &y7, &k7}, {h00, hs * h10, h01, hs * h11}));
          }
          ++next_out;
        }
        z = y7;
        f0 = k7;
        t = t_new;
        detail::check_state(y7v, cfg.divergence_threshold, t);
        const double fac = en == 0.0 ? 10.0 : std::clamp(0.9 * std::pow(en, -0.2), 0.2, 10.0);
        if (!last || fac * hs < h) h = fac * hs;
      } else {
        h = hs * std::clamp(0.9 * std::pow(en, -0.2), 0.2, 1.0);
        if (h < 1e-14 * std::max(1.0, std::abs(t))) throw DivergenceError("step size underflow", t);
      }
    }
  }
  return out;
}

}  // namespace lhm::ode
