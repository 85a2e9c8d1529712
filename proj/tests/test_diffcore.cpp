#include "support.hpp"

#include <gtest/gtest.h>

#include <numbers>

using namespace lhm;
using namespace lhm::ad;
using lhm::testing::check_gradients;
using lhm::testing::describe;

namespace {

ParamSet mlp_params(Rng& rng, int in, int hidden, int out) {
  ParamSet p;
  p.add_matrix("w1", lhm::testing::random_matrix(rng, hidden, in, 0.7));
  p.add_vector("b1", lhm::testing::random_matrix(rng, hidden, 1, 0.3));
  p.add_matrix("w2", lhm::testing::random_matrix(rng, out, hidden, 0.7));
  p.add_vector("b2", lhm::testing::random_matrix(rng, out, 1, 0.3));
  return p;
}

}  // namespace

TEST(Grad, SquareAtThree) {
  Tape t;
  const Var x = t.leaf(Mat::Constant(1, 1, 3.0));
  const Var loss = square(x);
  t.backward(loss);
  EXPECT_DOUBLE_EQ(t.adjoint(x)(0, 0), 6.0);
}

TEST(Grad, TanhAtZero) {
  Tape t;
  const Var x = t.leaf(Mat::Zero(1, 1));
  t.backward(tanh(x));
  EXPECT_DOUBLE_EQ(t.adjoint(x)(0, 0), 1.0);
}

TEST(Grad, NonScalarLossIsContractError) {
  Tape t;
  const Var x = t.leaf(Mat::Zero(2, 1));
  EXPECT_THROW(t.backward(x), ContractError);
}

TEST(Grad, NanDuringBackwardNamesTheOp) {
  Tape t;
  const Var x = t.leaf(Mat::Zero(1, 1));
  const Var y = log(x);  // -inf forward, inf adjoint
  try {
    t.backward(sum(mul(y, y)));
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("log"), std::string::npos) << e.what();
  }
}

TEST(Grad, UnusedParameterHasZeroGradient) {
  ParamSet p;
  p.add_scalar("used", 2.0);
  p.add_vector("unused", Vec::Ones(3));
  Tape t;
  const auto b = bind(p, t);
  const auto g = grad(square(b("used")), b);
  EXPECT_DOUBLE_EQ(g.at("used")(0, 0), 4.0);
  EXPECT_EQ(g.at("unused"), Mat::Zero(3, 1));
}

TEST(Grad, BranchAccumulationIsAdditive) {
  // f(x) = sum(tanh(Wx)) consumed k times equals k times the single adjoint.
  Rng rng = make_stream({11});
  ParamSet p;
  p.add_matrix("w", standard_normal(rng, 3, 4));
  p.add_vector("x", standard_normal(rng, 4, 1));
  Tape t1;
  const auto b1 = bind(p, t1);
  const auto g1 = grad(sum(tanh(matmul(b1("w"), b1("x")))), b1);
  for (int k : {2, 3, 5}) {
    Tape t;
    const auto b = bind(p, t);
    const Var shared = sum(tanh(matmul(b("w"), b("x"))));
    Var acc = shared;
    for (int i = 1; i < k; ++i) acc = add(acc, shared);
    const auto g = grad(acc, b);
    for (std::size_t i = 0; i < g.size(); ++i) EXPECT_TRUE(g[i].isApprox(k * g1[i], 1e-14)) << "k=" << k;
  }
}

TEST(Grad, TwoLayerTanhMlpMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng = make_stream({seed, 1});
    const ParamSet p = mlp_params(rng, 5, 8, 3);
    const Mat x = standard_normal(rng, 5, 4);
    const Mat y = standard_normal(rng, 3, 4);
    auto f = [&](const auto& b) {
      const auto xin = lift(b("w1"), x);
      const auto out = affine(b("w2"), tanh(affine(b("w1"), xin, b("b1"))), b("b2"));
      return sum(square(sub(out, lift(out, y))));
    };
    const auto r = check_gradients(p, f);
    EXPECT_LT(r.max_rel, 1e-4) << "seed " << seed << ": " << describe(r);
  }
}

TEST(Grad, ComposedExpressionsOnHundredSeeds) {
  // every op in the vocabulary, composed through both broadcasting forms
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng = make_stream({seed, 2});
    ParamSet p;
    p.add_matrix("a", standard_normal(rng, 3, 2));
    p.add_matrix("b", standard_normal(rng, 3, 2));
    p.add_scalar("s", standard_normal(rng, 1, 1)(0, 0));
    p.add_matrix("w", standard_normal(rng, 2, 3));
    p.add_vector("c", standard_normal(rng, 2, 1));
    auto f = [&](const auto& q) {
      const auto& a = q("a");
      const auto& b = q("b");
      const auto e1 = mul(sigmoid(a), softplus(b));
      const auto e2 = div(exp(scale(0.3, a)), shift(square(b), 1.0));
      const auto e3 = add(log_sigmoid(sub(a, b)), mul(q("s"), tanh(b)));
      const auto e4 = pow_const(shift(softplus(a), 0.5), 2.5);
      const auto e5 = log(shift(exp(neg(square(a))), 0.1));
      const auto st = stack({e1, rows(e2, 0, 2), row(e3, 2)});
      const auto lc = lincomb({&e4, &e5}, {0.7, -1.3});
      const auto m = affine(q("w"), add(lc, e1), q("c"));
      return add(sum(mul(st, st)), add(sum(colsum(m)), sum(relu(shift(a, 0.05)))));
    };
    const auto r = check_gradients(p, f);
    EXPECT_LT(r.max_rel, 1e-4) << "seed " << seed << ": " << describe(r);
  }
}

TEST(Grad, LstmCellMatchesFiniteDifferences) {
  constexpr int H = 4, I = 3;
  Rng rng = make_stream({3});
  ParamSet p;
  p.add_matrix("wx", 0.5 * standard_normal(rng, 4 * H, I));
  p.add_matrix("wh", 0.5 * standard_normal(rng, 4 * H, H));
  p.add_vector("b", 0.1 * standard_normal(rng, 4 * H, 1));
  const Mat xs = standard_normal(rng, I, 5);
  auto f = [&](const auto& q) {
    using T = std::decay_t<decltype(q("b"))>;
    std::optional<T> hh, cc;
    for (Eigen::Index k = 0; k < xs.cols(); ++k) {
      T g = affine(q("wx"), lift(q("b"), Mat(xs.col(k))), q("b"));
      if (hh) g = add(g, matmul(q("wh"), *hh));
      const T i = sigmoid(rows(g, 0, H)), fg = sigmoid(rows(g, H, H));
      const T gg = tanh(rows(g, 2 * H, H)), o = sigmoid(rows(g, 3 * H, H));
      cc = cc ? add(mul(fg, *cc), mul(i, gg)) : mul(i, gg);
      hh = mul(o, tanh(*cc));
    }
    return sum(square(*hh));
  };
  const auto r = check_gradients(p, f);
  EXPECT_LT(r.max_rel, 1e-4) << describe(r);
}

TEST(Grad, GaussianLogDensityMatchesFiniteDifferences) {
  Rng rng = make_stream({4});
  ParamSet p;
  p.add_vector("mu", standard_normal(rng, 6, 1));
  p.add_vector("log_sigma", 0.3 * standard_normal(rng, 6, 1));
  const Mat y = standard_normal(rng, 6, 1);
  auto f = [&](const auto& q) {
    const auto r = mul(sub(lift(q("mu"), y), q("mu")), exp(neg(q("log_sigma"))));
    return neg(sum(shift(add(scale(0.5, square(r)), q("log_sigma")), 0.5 * std::log(2 * std::numbers::pi))));
  };
  const auto r = check_gradients(p, f);
  EXPECT_LT(r.max_rel, 1e-4) << describe(r);
}

TEST(Grad, ForwardIsBitDeterministic) {
  Rng rng = make_stream({5});
  const ParamSet p = mlp_params(rng, 4, 6, 2);
  const Mat x = standard_normal(rng, 4, 3);
  auto run = [&] {
    Tape t;
    const auto b = bind(p, t);
    const Var out = affine(b("w2"), tanh(affine(b("w1"), t.constant(x), b("b1"))), b("b2"));
    return std::make_pair(out.value(), grad(sum(out), b)[0]);
  };
  const auto a = run();
  const auto b = run();
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
}

TEST(Grad, PlainAndTapeBackendsAgree) {
  Rng rng = make_stream({6});
  const ParamSet p = mlp_params(rng, 4, 6, 2);
  const Mat x = standard_normal(rng, 4, 3);
  Tape t;
  const auto bv = bind(p, t);
  const auto bm = bind(p);
  const Var ov = affine(bv("w2"), tanh(affine(bv("w1"), t.constant(x), bv("b1"))), bv("b2"));
  const Mat om = affine(bm("w2"), tanh(affine(bm("w1"), x, bm("b1"))), bm("b2"));
  EXPECT_EQ(ov.value(), om);
}

TEST(Reparam, Examples) {
  const Mat z = Mat::Zero(1, 1);
  EXPECT_DOUBLE_EQ(reparameterized_gaussian_sample(z, z, Mat::Constant(1, 1, 0.5))(0, 0), 0.5);
  const Mat mu = Mat::Constant(1, 1, 1.0);
  const Mat ls = Mat::Constant(1, 1, std::log(2.0));
  EXPECT_NEAR(reparameterized_gaussian_sample(mu, ls, Mat::Constant(1, 1, -1.0))(0, 0), -1.0, 1e-15);
}

TEST(Reparam, GradientWrtMuIsOne) {
  Rng rng = make_stream({7});
  ParamSet p;
  p.add_vector("mu", standard_normal(rng, 4, 1));
  p.add_vector("ls", standard_normal(rng, 4, 1));
  const Mat eps = standard_normal(rng, 4, 1);
  for (Eigen::Index i = 0; i < 4; ++i) {
    Tape t;
    const auto b = bind(p, t);
    const Var s = reparameterized_gaussian_sample(b("mu"), b("ls"), eps);
    const auto g = grad(row(s, i), b);
    for (Eigen::Index j = 0; j < 4; ++j) {
      EXPECT_DOUBLE_EQ(g.at("mu")(j, 0), i == j ? 1.0 : 0.0);
      EXPECT_DOUBLE_EQ(g.at("ls")(j, 0), i == j ? std::exp(p.get("ls")(i, 0)) * eps(i, 0) : 0.0);
    }
  }
}

TEST(Reparam, ShapeMismatchIsContractError) {
  EXPECT_THROW(reparameterized_gaussian_sample(Mat(Mat::Zero(2, 1)), Mat(Mat::Zero(3, 1)), Mat::Zero(2, 1)),
               ContractError);
}

TEST(Broadcast, ShapeMismatchIsContractError) {
  Tape t;
  const Var a = t.leaf(Mat::Zero(2, 3));
  const Var b = t.leaf(Mat::Zero(3, 2));
  EXPECT_THROW(add(a, b), ContractError);
  EXPECT_NO_THROW(add(a, t.leaf(Mat::Zero(1, 1))));
}

TEST(ParamSetJson, ExactRoundTrip) {
  Rng rng = make_stream({8});
  ParamSet p;
  p.add_matrix("m", standard_normal(rng, 3, 4));
  p.add_vector("v", standard_normal(rng, 5, 1));
  p.add_scalar("s", -1.0 / 3.0);
  const auto j = p.to_json();
  EXPECT_EQ(j["m"]["shape"], (std::vector<std::size_t>{3, 4}));
  // row-major flattening
  EXPECT_EQ(j["m"]["values"][1].get<double>(), p.get("m")(0, 1));
  const auto q = ParamSet::from_json(json::parse(j.dump()));
  EXPECT_TRUE(p == q);
  std::vector<std::string> names;
  for (const auto& e : q.entries()) names.push_back(e.name);
  EXPECT_EQ(names, (std::vector<std::string>{"m", "v", "s"}));
}

TEST(ParamSetJson, DuplicateNamesRejected) {
  ParamSet p;
  p.add_scalar("a", 1.0);
  EXPECT_THROW(p.add_scalar("a", 2.0), ContractError);
}

TEST(GradMapTest, CombinesBySummation) {
  ParamSet p;
  p.add_vector("x", Vec::Ones(2));
  GradMap a(p), b(p);
  a[0] = Mat::Constant(2, 1, 1.5);
  b[0] = Mat::Constant(2, 1, 2.0);
  a += b;
  EXPECT_EQ(a.at("x"), Mat::Constant(2, 1, 3.5));
  EXPECT_TRUE(a.all_finite());
}

TEST(Streams, IndependentOfCreationOrder) {
  Rng a = make_stream({1, 2, 3});
  Rng b = make_stream({1, 2, 4});
  Rng a2 = make_stream({1, 2, 3});
  EXPECT_EQ(a(), a2());
  EXPECT_NE(make_stream({1, 2, 3})(), b());
}
