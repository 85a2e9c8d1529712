#pragma once

// Forward-only backend over Eigen matrices with the same free-function
// vocabulary as the tape backend. Columns are independent samples, which
// lets prediction push many initial states through one integration.
// Broadcasting follows the usual rule: each extent equal, or one of them 1.

#include "lhm/diffcore/tape.hpp"

#include <initializer_list>
#include <span>
#include <string>

namespace lhm::ad {

namespace detail {

inline Eigen::Index bdim(Eigen::Index x, Eigen::Index y, const char* op) {
  if (x == y || y == 1) return x;
  if (x == 1) return y;
  throw ContractError(std::string(op) + ": incompatible broadcast extents " + std::to_string(x) + " and " +
                      std::to_string(y));
}

inline Eigen::ArrayXXd expand(const Mat& m, Eigen::Index r, Eigen::Index c) {
  if (m.rows() == r && m.cols() == c) return m.array();
  if (m.size() == 1) return Eigen::ArrayXXd::Constant(r, c, m(0, 0));
  return m.array().replicate(r / m.rows(), c / m.cols());
}

template <class F>
Mat zip(const Mat& a, const Mat& b, const char* op, F f) {
  if (a.rows() == b.rows() && a.cols() == b.cols()) return f(a.array(), b.array()).matrix();
  const auto r = bdim(a.rows(), b.rows(), op);
  const auto c = bdim(a.cols(), b.cols(), op);
  return f(expand(a, r, c), expand(b, r, c)).matrix();
}

}  // namespace detail

inline Mat add(const Mat& a, const Mat& b) {
  return detail::zip(a, b, "add", [](const auto& x, const auto& y) { return x + y; });
}
inline Mat sub(const Mat& a, const Mat& b) {
  return detail::zip(a, b, "sub", [](const auto& x, const auto& y) { return x - y; });
}
inline Mat mul(const Mat& a, const Mat& b) {
  return detail::zip(a, b, "mul", [](const auto& x, const auto& y) { return x * y; });
}
inline Mat div(const Mat& a, const Mat& b) {
  return detail::zip(a, b, "div", [](const auto& x, const auto& y) { return x / y; });
}
inline Mat neg(const Mat& a) { return -a; }
inline Mat scale(double s, const Mat& a) { return s * a; }
inline Mat shift(const Mat& a, double s) { return (a.array() + s).matrix(); }
inline Mat matmul(const Mat& a, const Mat& b) {
  if (a.cols() != b.rows()) throw ContractError("matmul: inner dimensions differ");
  return a * b;
}
inline Mat affine(const Mat& w, const Mat& x, const Mat& bias) {
  if (w.cols() != x.rows()) throw ContractError("affine: inner dimensions differ");
  if (bias.rows() != w.rows()) throw ContractError("affine: bias shape mismatch");
  Mat out = w * x;
  if (bias.cols() == out.cols()) {
    out += bias;
  } else if (bias.cols() == 1) {
    out.colwise() += bias.col(0);
  } else {
    throw ContractError("affine: bias shape mismatch");
  }
  return out;
}
inline Mat tanh(const Mat& a) { return a.array().tanh().matrix(); }
inline Mat sigmoid(const Mat& a) { return a.unaryExpr([](double x) { return logistic(x); }); }
inline Mat exp(const Mat& a) { return a.array().exp().matrix(); }
inline Mat log(const Mat& a) { return a.array().log().matrix(); }
inline Mat softplus(const Mat& a) { return a.unaryExpr([](double x) { return softplus(x); }); }
inline Mat log_sigmoid(const Mat& a) { return a.unaryExpr([](double x) { return log_logistic(x); }); }
inline Mat relu(const Mat& a) { return a.cwiseMax(0.0); }
inline Mat square(const Mat& a) { return a.array().square().matrix(); }
inline Mat pow_const(const Mat& a, double p) { return a.array().pow(p).matrix(); }
inline Mat sum(const Mat& a) { return Mat::Constant(1, 1, a.sum()); }

inline Mat rows(const Mat& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw ContractError("rows: slice out of range");
  return a.middleRows(start, count);
}
inline Mat row(const Mat& a, Eigen::Index i) { return rows(a, i, 1); }

inline Mat stack(std::span<const Mat> parts) {
  if (parts.empty()) throw ContractError("stack: no operands");
  Eigen::Index total = 0;
  Eigen::Index cols = 1;
  for (const auto& p : parts) {
    total += p.rows();
    cols = std::max(cols, p.cols());
  }
  Mat v(total, cols);
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    if (p.cols() == cols) {
      v.middleRows(r, p.rows()) = p;
    } else if (p.cols() == 1) {
      v.middleRows(r, p.rows()) = p.col(0).replicate(1, cols);
    } else {
      throw ContractError("stack: column counts differ");
    }
    r += p.rows();
  }
  return v;
}
inline Mat stack(std::initializer_list<Mat> parts) { return stack(std::span<const Mat>(parts.begin(), parts.size())); }

inline const Mat& value_of(const Mat& m) { return m; }
inline Mat lift(const Mat&, Mat m) { return m; }

// Column-wise reduction over rows.
inline Mat colsum(const Mat& a) { return a.colwise().sum(); }
inline Var colsum(const Var& a) {
  if (a.cols() == 1) return sum(a);
  return matmul(a.tape()->constant(Mat::Ones(1, a.rows())), a);
}

// ---- pointer-list linear combinations shared by the solvers ---------------

inline Mat lincomb(std::span<const Mat* const> parts, std::span<const double> coeffs) {
  if (parts.empty() || parts.size() != coeffs.size()) throw ContractError("lincomb: operand/coefficient mismatch");
  Mat v = coeffs[0] * *parts[0];
  for (std::size_t k = 1; k < parts.size(); ++k) {
    if (coeffs[k] != 0.0) v.noalias() += coeffs[k] * *parts[k];
  }
  return v;
}
inline Mat lincomb(std::initializer_list<const Mat*> parts, std::initializer_list<double> coeffs) {
  return lincomb(std::span<const Mat* const>(parts.begin(), parts.size()),
                 std::span<const double>(coeffs.begin(), coeffs.size()));
}

inline Var lincomb(std::span<const Var* const> parts, std::span<const double> coeffs) {
  std::vector<Var> vs;
  std::vector<double> cs;
  vs.reserve(parts.size());
  cs.reserve(parts.size());
  for (std::size_t k = 0; k < parts.size(); ++k) {
    if (coeffs[k] == 0.0 && k > 0) continue;
    vs.push_back(*parts[k]);
    cs.push_back(coeffs[k]);
  }
  return lincomb(std::span<const Var>(vs), std::span<const double>(cs));
}
inline Var lincomb(std::initializer_list<const Var*> parts, std::initializer_list<double> coeffs) {
  return lincomb(std::span<const Var* const>(parts.begin(), parts.size()),
                 std::span<const double>(coeffs.begin(), coeffs.size()));
}

// Elementwise op vocabulary usable from backend-generic code.
template <class T>
concept Backend = requires(const T& x) {
  { value_of(x) } -> std::convertible_to<const Mat&>;
};

}  // namespace lhm::ad
