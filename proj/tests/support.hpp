#pragma once

#include "lhm/diffcore.hpp"
#include "lhm/data.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace lhm::testing {

using ad::Mat;
using ad::Vec;

struct FdResult {
  double max_rel = 0.0;
  std::string worst;  // "name[i]"
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;
};

// Compares tape gradients of f against central differences. f is a generic
// callable taking ad::Bound<Var> or ad::Bound<Mat> and returning a 1x1 value.
// Components with max(|analytic|, |numeric|) below abs_floor count as exact.
template <class F>
FdResult check_gradients(const ad::ParamSet& params, F&& f, double h = 1e-5, double abs_floor = 1e-7) {
  ad::Tape tape;
  const auto bound = ad::bind(params, tape);
  const ad::Var loss = f(bound);
  const auto g = ad::grad(loss, bound);

  FdResult res;
  ad::ParamSet p = params;
  for (std::size_t k = 0; k < p.size(); ++k) {
    Mat& v = p.entries()[k].value;
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      const double x = v.data()[i];
      v.data()[i] = x + h;
      const double fp = ad::value_of(f(ad::bind(p)))(0, 0);
      v.data()[i] = x - h;
      const double fm = ad::value_of(f(ad::bind(p)))(0, 0);
      v.data()[i] = x;
      const double num = (fp - fm) / (2.0 * h);
      const double ana = g[k].data()[i];
      const double scale = std::max(std::abs(ana), std::abs(num));
      const double rel = scale < abs_floor ? 0.0 : std::abs(ana - num) / scale;
      ++res.checked;
      if (rel > res.max_rel) {
        res.max_rel = rel;
        res.worst = p.entries()[k].name + "[" + std::to_string(i) + "]";
        res.analytic = ana;
        res.numeric = num;
      }
    }
  }
  return res;
}

inline std::string describe(const FdResult& r) {
  return "max rel err " + std::to_string(r.max_rel) + " at " + r.worst + " (analytic " + std::to_string(r.analytic) +
         ", numeric " + std::to_string(r.numeric) + ", " + std::to_string(r.checked) + " components)";
}

inline Mat random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  return scale * standard_normal(rng, r, c);
}

// Small record on a daily grid with a random missingness pattern.
inline TrajectoryRecord toy_record(Rng& rng, const std::string& id, int D, int days, double dose_time = 1.5,
                                   double dose = 2.0) {
  TrajectoryRecord r;
  r.id = id;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 1; t <= days; ++t) r.times.push_back(t);
  r.y = standard_normal(rng, days, D);
  r.mask = Mat::Ones(days, D);
  for (Eigen::Index i = 1; i < r.mask.size(); i += 3)
    if (u(rng) < 0.5) r.mask.data()[i] = 0.0;
  r.y = r.y.cwiseProduct(r.mask);
  if (dose > 0.0) r.treatments.push_back({dose_time, dose});
  return r;
}

}  // namespace lhm::testing
