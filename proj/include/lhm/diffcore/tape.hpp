#pragma once

// Define-by-run reverse-mode differentiation over dense 64-bit arrays.
//
// A Tape owns every intermediate value produced during one forward pass.
// Var is a cheap handle (tape pointer + node index). Binary elementwise ops
// accept operands of identical shape, or a 1x1 operand that broadcasts.

#include <Eigen/Dense>

#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace lhm::ad {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class OpKind : std::uint8_t {
  leaf,
  constant,
  add,
  sub,
  mul,
  div,
  neg,
  scale,
  shift,
  matmul,
  affine,
  tanh,
  sigmoid,
  exp,
  log,
  softplus,
  log_sigmoid,
  relu,
  square,
  pow_const,
  sum,
  rows,
  stack,
  lincomb,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::leaf: return "leaf";
    case OpKind::constant: return "constant";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::div: return "div";
    case OpKind::neg: return "neg";
    case OpKind::scale: return "scale";
    case OpKind::shift: return "shift";
    case OpKind::matmul: return "matmul";
    case OpKind::affine: return "affine";
    case OpKind::tanh: return "tanh";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::exp: return "exp";
    case OpKind::log: return "log";
    case OpKind::softplus: return "softplus";
    case OpKind::log_sigmoid: return "log_sigmoid";
    case OpKind::relu: return "relu";
    case OpKind::square: return "square";
    case OpKind::pow_const: return "pow_const";
    case OpKind::sum: return "sum";
    case OpKind::rows: return "rows";
    case OpKind::stack: return "stack";
    case OpKind::lincomb: return "lincomb";
  }
  return "?";
}

// Numerically stable scalar helpers shared by both backends.
inline double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}
inline double logistic(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
inline double log_logistic(double x) { return -softplus(-x); }
inline double softplus_inverse(double y) {
  return y > 30.0 ? y : std::log(std::expm1(y));
}

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::int32_t id) : tape_(tape), id_(id) {}

  [[nodiscard]] Tape* tape() const { return tape_; }
  [[nodiscard]] std::int32_t id() const { return id_; }
  [[nodiscard]] bool valid() const { return tape_ != nullptr; }
  [[nodiscard]] const Mat& value() const;
  [[nodiscard]] Eigen::Index rows() const { return value().rows(); }
  [[nodiscard]] Eigen::Index cols() const { return value().cols(); }
  [[nodiscard]] double scalar() const { return value()(0, 0); }

 private:
  Tape* tape_ = nullptr;
  std::int32_t id_ = -1;
};

class Tape {
 public:
  struct Node {
    Mat value;
    Mat adjoint;
    OpKind kind = OpKind::constant;
    std::int32_t a = -1;
    std::int32_t b = -1;
    std::int32_t c = -1;
    double s = 0.0;
    std::int32_t i0 = 0;
    std::int32_t i1 = 0;
  };

  Tape() { nodes_.reserve(4096); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Mat v) { return push(Node{std::move(v), {}, OpKind::leaf}); }
  Var constant(Mat v) { return push(Node{std::move(v), {}, OpKind::constant}); }
  Var scalar_constant(double v) { return constant(Mat::Constant(1, 1, v)); }

  Var push(Node&& n) {
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<std::int32_t>(nodes_.size() - 1));
  }

  [[nodiscard]] const Node& node(std::int32_t id) const { return nodes_[static_cast<std::size_t>(id)]; }
  [[nodiscard]] std::size_t size() const { return nodes_.size(); }

  // Extra operand storage for variadic ops (stack, lincomb).
  std::int32_t store_args(std::span<const Var> args, std::span<const double> coeffs) {
    const auto off = static_cast<std::int32_t>(args_.size());
    for (const auto& v : args) {
      if (v.tape() != this) throw ContractError("operand recorded on a different tape");
      args_.push_back(v.id());
    }
    if (!coeffs.empty() && coeffs.size() != args.size()) throw ContractError("lincomb: one coefficient per operand");
    // Kept parallel to args_ so lincomb can index both with one offset.
    if (coeffs.empty()) coeffs_.resize(args_.size(), 0.0);
    else coeffs_.insert(coeffs_.end(), coeffs.begin(), coeffs.end());
    return off;
  }

  // Reverse sweep from a scalar output; adjoints of leaves become readable
  // through adjoint().
  void backward(const Var& loss) {
    if (loss.tape() != this) throw ContractError("loss recorded on a different tape");
    const Mat& lv = loss.value();
    if (lv.rows() != 1 || lv.cols() != 1) {
      throw ContractError("backward requires a scalar loss, got shape [" + std::to_string(lv.rows()) + "," +
                          std::to_string(lv.cols()) + "]");
    }
    for (auto& n : nodes_) n.adjoint.resize(0, 0);
    nodes_[static_cast<std::size_t>(loss.id())].adjoint = Mat::Ones(1, 1);
    for (std::int32_t i = loss.id(); i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.adjoint.size() == 0) continue;
      if (!n.adjoint.allFinite()) {
        throw NumericError(std::string("non-finite adjoint during backward at op '") + op_name(n.kind) +
                           "' (node " + std::to_string(i) + ")");
      }
      propagate(i);
    }
  }

  // Adjoint of a node after backward(); zeros of matching shape when the
  // node did not influence the loss.
  [[nodiscard]] Mat adjoint(const Var& v) const {
    const Node& n = node(v.id());
    if (n.adjoint.size() == 0) return Mat::Zero(n.value.rows(), n.value.cols());
    return n.adjoint;
  }

  void clear() {
    nodes_.clear();
    args_.clear();
    coeffs_.clear();
  }

 private:
  void accumulate(std::int32_t id, const Mat& g) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.kind == OpKind::constant) return;
    if (n.value.rows() == 1 && n.value.cols() == 1 && g.size() != 1) {
      accumulate_scalar(id, g.sum());
      return;
    }
    if (n.adjoint.size() == 0) {
      n.adjoint = g;
    } else {
      n.adjoint += g;
    }
  }

  void accumulate_scalar(std::int32_t id, double g) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.kind == OpKind::constant) return;
    if (n.adjoint.size() == 0) {
      n.adjoint = Mat::Constant(1, 1, g);
    } else {
      n.adjoint(0, 0) += g;
    }
  }

  // Operand value as seen by broadcasting against shape of result.
  static Eigen::ArrayXXd bcast(const Mat& v, Eigen::Index r, Eigen::Index c) {
    if (v.rows() == r && v.cols() == c) return v.array();
    return Eigen::ArrayXXd::Constant(r, c, v(0, 0));
  }

  void propagate(std::int32_t i) {
    // Copy: accumulate() may touch other nodes but never reallocates.
    const Node& n = nodes_[static_cast<std::size_t>(i)];
    const Mat& g = n.adjoint;
    const auto r = g.rows();
    const auto c = g.cols();
    switch (n.kind) {
      case OpKind::leaf:
      case OpKind::constant:
        break;
      case OpKind::add:
        accumulate(n.a, g);
        accumulate(n.b, g);
        break;
      case OpKind::sub:
        accumulate(n.a, g);
        accumulate(n.b, -g);
        break;
      case OpKind::mul: {
        const Mat ga = (g.array() * bcast(node(n.b).value, r, c)).matrix();
        const Mat gb = (g.array() * bcast(node(n.a).value, r, c)).matrix();
        accumulate(n.a, ga);
        accumulate(n.b, gb);
        break;
      }
      case OpKind::div: {
        const auto bv = bcast(node(n.b).value, r, c);
        const Mat ga = (g.array() / bv).matrix();
        const Mat gb = (-g.array() * n.value.array() / bv).matrix();
        accumulate(n.a, ga);
        accumulate(n.b, gb);
        break;
      }
      case OpKind::neg:
        accumulate(n.a, -g);
        break;
      case OpKind::scale:
        accumulate(n.a, n.s * g);
        break;
      case OpKind::shift:
        accumulate(n.a, g);
        break;
      case OpKind::matmul: {
        const Mat ga = g * node(n.b).value.transpose();
        const Mat gb = node(n.a).value.transpose() * g;
        accumulate(n.a, ga);
        accumulate(n.b, gb);
        break;
      }
      case OpKind::affine: {
        const Mat ga = g * node(n.b).value.transpose();
        const Mat gb = node(n.a).value.transpose() * g;
        accumulate(n.a, ga);
        accumulate(n.b, gb);
        if (node(n.c).value.cols() == g.cols()) {
          accumulate(n.c, g);
        } else {
          accumulate(n.c, g.rowwise().sum());
        }
        break;
      }
      case OpKind::tanh: {
        const Mat ga = (g.array() * (1.0 - n.value.array().square())).matrix();
        accumulate(n.a, ga);
        break;
      }
      case OpKind::sigmoid: {
        const Mat ga = (g.array() * n.value.array() * (1.0 - n.value.array())).matrix();
        accumulate(n.a, ga);
        break;
      }
      case OpKind::exp: {
        const Mat ga = (g.array() * n.value.array()).matrix();
        accumulate(n.a, ga);
        break;
      }
      case OpKind::log: {
        const Mat ga = (g.array() / node(n.a).value.array()).matrix();
        accumulate(n.a, ga);
        break;
      }
      case OpKind::softplus: {
        const Mat ga = (g.array() * node(n.a).value.array().unaryExpr([](double x) { return logistic(x); })).matrix();
        accumulate(n.a, ga);
        break;
      }
      case OpKind::log_sigmoid: {
        const Mat ga =
            (g.array() * node(n.a).value.array().unaryExpr([](double x) { return logistic(-x); })).matrix();
        accumulate(n.a, ga);
        break;
      }
      case OpKind::relu: {
        const Mat ga = (g.array() * (node(n.a).value.array() > 0.0).cast<double>()).matrix();
        accumulate(n.a, ga);
        break;
      }
      case OpKind::square: {
        const Mat ga = (2.0 * g.array() * node(n.a).value.array()).matrix();
        accumulate(n.a, ga);
        break;
      }
      case OpKind::pow_const: {
        const double p = n.s;
        const Mat ga = (g.array() * node(n.a).value.array().unaryExpr([p](double x) {
                          if (x == 0.0) return p == 1.0 ? 1.0 : 0.0;
                          return p * std::pow(x, p - 1.0);
                        })).matrix();
        accumulate(n.a, ga);
        break;
      }
      case OpKind::sum: {
        const Node& src = node(n.a);
        accumulate(n.a, Mat::Constant(src.value.rows(), src.value.cols(), g(0, 0)));
        break;
      }
      case OpKind::rows: {
        const Node& src = node(n.a);
        Mat ga = Mat::Zero(src.value.rows(), src.value.cols());
        ga.middleRows(n.i0, n.i1) = g;
        accumulate(n.a, ga);
        break;
      }
      case OpKind::stack: {
        Eigen::Index row = 0;
        for (std::int32_t k = 0; k < n.i1; ++k) {
          const std::int32_t id = args_[static_cast<std::size_t>(n.i0 + k)];
          const auto h = node(id).value.rows();
          accumulate(id, g.middleRows(row, h));
          row += h;
        }
        break;
      }
      case OpKind::lincomb: {
        for (std::int32_t k = 0; k < n.i1; ++k) {
          const auto idx = static_cast<std::size_t>(n.i0 + k);
          accumulate(args_[idx], coeffs_[idx] * g);
        }
        break;
      }
    }
  }

  std::vector<Node> nodes_;
  std::vector<std::int32_t> args_;
  std::vector<double> coeffs_;
};

inline const Mat& Var::value() const { return tape_->node(id_).value; }

namespace detail {

inline Tape& same_tape(const Var& a, const Var& b) {
  if (a.tape() == nullptr || a.tape() != b.tape()) throw ContractError("operands recorded on different tapes");
  return *a.tape();
}

inline void check_broadcast(const Mat& a, const Mat& b, const char* op) {
  const bool same = a.rows() == b.rows() && a.cols() == b.cols();
  if (same || a.size() == 1 || b.size() == 1) return;
  throw ContractError(std::string(op) + ": shape mismatch [" + std::to_string(a.rows()) + "," +
                      std::to_string(a.cols()) + "] vs [" + std::to_string(b.rows()) + "," +
                      std::to_string(b.cols()) + "]");
}

template <class F>
Mat broadcast_apply(const Mat& a, const Mat& b, F f) {
  if (a.rows() == b.rows() && a.cols() == b.cols()) return f(a.array(), b.array()).matrix();
  if (b.size() == 1) return f(a.array(), Eigen::ArrayXXd::Constant(a.rows(), a.cols(), b(0, 0))).matrix();
  return f(Eigen::ArrayXXd::Constant(b.rows(), b.cols(), a(0, 0)), b.array()).matrix();
}

inline Var unary(const Var& a, OpKind k, Mat v, double s = 0.0) {
  Tape::Node n;
  n.value = std::move(v);
  n.kind = k;
  n.a = a.id();
  n.s = s;
  return a.tape()->push(std::move(n));
}

inline Var binary(const Var& a, const Var& b, OpKind k, Mat v) {
  Tape& t = same_tape(a, b);
  Tape::Node n;
  n.value = std::move(v);
  n.kind = k;
  n.a = a.id();
  n.b = b.id();
  return t.push(std::move(n));
}

}  // namespace detail

// ---- Var operations -------------------------------------------------------

inline Var add(const Var& a, const Var& b) {
  detail::check_broadcast(a.value(), b.value(), "add");
  return detail::binary(a, b, OpKind::add,
                        detail::broadcast_apply(a.value(), b.value(), [](const auto& x, const auto& y) { return x + y; }));
}
inline Var sub(const Var& a, const Var& b) {
  detail::check_broadcast(a.value(), b.value(), "sub");
  return detail::binary(a, b, OpKind::sub,
                        detail::broadcast_apply(a.value(), b.value(), [](const auto& x, const auto& y) { return x - y; }));
}
inline Var mul(const Var& a, const Var& b) {
  detail::check_broadcast(a.value(), b.value(), "mul");
  return detail::binary(a, b, OpKind::mul,
                        detail::broadcast_apply(a.value(), b.value(), [](const auto& x, const auto& y) { return x * y; }));
}
inline Var div(const Var& a, const Var& b) {
  detail::check_broadcast(a.value(), b.value(), "div");
  return detail::binary(a, b, OpKind::div,
                        detail::broadcast_apply(a.value(), b.value(), [](const auto& x, const auto& y) { return x / y; }));
}
inline Var neg(const Var& a) { return detail::unary(a, OpKind::neg, -a.value()); }
inline Var scale(double s, const Var& a) { return detail::unary(a, OpKind::scale, s * a.value(), s); }
inline Var shift(const Var& a, double s) {
  return detail::unary(a, OpKind::shift, (a.value().array() + s).matrix(), s);
}

inline Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw ContractError("matmul: inner dimensions differ");
  return detail::binary(a, b, OpKind::matmul, a.value() * b.value());
}

// w * x + bias, bias shaped like the product.
inline Var affine(const Var& w, const Var& x, const Var& bias) {
  if (w.cols() != x.rows()) throw ContractError("affine: inner dimensions differ");
  if (bias.rows() != w.rows() || (bias.cols() != x.cols() && bias.cols() != 1))
    throw ContractError("affine: bias shape mismatch");
  Tape& t = detail::same_tape(w, x);
  detail::same_tape(w, bias);
  Tape::Node n;
  n.value = w.value() * x.value();
  if (bias.cols() == x.cols()) {
    n.value += bias.value();
  } else {
    n.value.colwise() += bias.value().col(0);
  }
  n.kind = OpKind::affine;
  n.a = w.id();
  n.b = x.id();
  n.c = bias.id();
  return t.push(std::move(n));
}

inline Var tanh(const Var& a) { return detail::unary(a, OpKind::tanh, a.value().array().tanh().matrix()); }
inline Var sigmoid(const Var& a) {
  return detail::unary(a, OpKind::sigmoid, a.value().unaryExpr([](double x) { return logistic(x); }));
}
inline Var exp(const Var& a) { return detail::unary(a, OpKind::exp, a.value().array().exp().matrix()); }
inline Var log(const Var& a) { return detail::unary(a, OpKind::log, a.value().array().log().matrix()); }
inline Var softplus(const Var& a) {
  return detail::unary(a, OpKind::softplus, a.value().unaryExpr([](double x) { return softplus(x); }));
}
inline Var log_sigmoid(const Var& a) {
  return detail::unary(a, OpKind::log_sigmoid, a.value().unaryExpr([](double x) { return log_logistic(x); }));
}
inline Var relu(const Var& a) { return detail::unary(a, OpKind::relu, a.value().cwiseMax(0.0)); }
inline Var square(const Var& a) { return detail::unary(a, OpKind::square, a.value().array().square().matrix()); }
// Elementwise x^p for x >= 0.
inline Var pow_const(const Var& a, double p) {
  return detail::unary(a, OpKind::pow_const, a.value().array().pow(p).matrix(), p);
}
inline Var sum(const Var& a) { return detail::unary(a, OpKind::sum, Mat::Constant(1, 1, a.value().sum())); }

inline Var rows(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw ContractError("rows: slice out of range");
  Tape::Node n;
  n.value = a.value().middleRows(start, count);
  n.kind = OpKind::rows;
  n.a = a.id();
  n.i0 = static_cast<std::int32_t>(start);
  n.i1 = static_cast<std::int32_t>(count);
  return a.tape()->push(std::move(n));
}
inline Var row(const Var& a, Eigen::Index i) { return rows(a, i, 1); }

inline Var stack(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("stack: no operands");
  Tape& t = *parts[0].tape();
  Eigen::Index total = 0;
  const auto cols = parts[0].cols();
  for (const auto& p : parts) {
    if (p.cols() != cols) throw ContractError("stack: column counts differ");
    total += p.rows();
  }
  Mat v(total, cols);
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    v.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  Tape::Node n;
  n.value = std::move(v);
  n.kind = OpKind::stack;
  n.i0 = t.store_args(parts, {});
  n.i1 = static_cast<std::int32_t>(parts.size());
  return t.push(std::move(n));
}
inline Var stack(std::initializer_list<Var> parts) { return stack(std::span<const Var>(parts.begin(), parts.size())); }

// sum_k coeffs[k] * parts[k]; all parts share one shape.
inline Var lincomb(std::span<const Var> parts, std::span<const double> coeffs) {
  if (parts.empty() || parts.size() != coeffs.size()) throw ContractError("lincomb: operand/coefficient mismatch");
  Tape& t = *parts[0].tape();
  Mat v = coeffs[0] * parts[0].value();
  for (std::size_t k = 1; k < parts.size(); ++k) {
    if (parts[k].rows() != v.rows() || parts[k].cols() != v.cols()) throw ContractError("lincomb: shape mismatch");
    v.noalias() += coeffs[k] * parts[k].value();
  }
  Tape::Node n;
  n.value = std::move(v);
  n.kind = OpKind::lincomb;
  n.i0 = t.store_args(parts, coeffs);
  n.i1 = static_cast<std::int32_t>(parts.size());
  return t.push(std::move(n));
}

inline const Mat& value_of(const Var& v) { return v.value(); }
inline Var lift(const Var& like, Mat m) { return like.tape()->constant(std::move(m)); }

}  // namespace lhm::ad
