#include <cmath>

#include <gtest/gtest.h>

#include "cinet/gradcheck.hpp"
#include "cinet/oracle.hpp"
#include "cinet/rng.hpp"

using namespace cinet;

// Central differences are exact for quadratics up to roundoff.
TEST(FiniteDiff, QuadraticIsExact) {
  oracle::NamedTensors params;
  params["p"] = Tensor({4}, {0.3, -1.2, 2.0, 0.7});
  auto f = [](const oracle::NamedTensors& p) {
    double acc = 0;
    const Tensor& t = p.at("p");
    for (std::int64_t i = 0; i < t.numel(); ++i) acc += 0.5 * t[i] * t[i];
    return acc;
  };
  oracle::NamedTensors g = oracle::finite_diff_grad(f, params);
  for (std::int64_t i = 0; i < 4; ++i) {
    EXPECT_NEAR(g.at("p")[i], params.at("p")[i], 1e-9);
  }
}

TEST(FiniteDiff, ConstantHasZeroGradient) {
  oracle::NamedTensors params;
  params["p"] = Tensor({3}, {1, 2, 3});
  oracle::NamedTensors g =
      oracle::finite_diff_grad([](const oracle::NamedTensors&) { return 42.0; }, params);
  for (std::int64_t i = 0; i < 3; ++i) EXPECT_NEAR(g.at("p")[i], 0.0, 1e-12);
}

TEST(FiniteDiff, NonFiniteProbeIsValueError) {
  oracle::NamedTensors params;
  params["p"] = Tensor({1}, {1.0});
  auto f = [](const oracle::NamedTensors& p) {
    return p.at("p")[0] > 1.0 ? std::numeric_limits<double>::infinity() : 0.0;
  };
  EXPECT_THROW(oracle::finite_diff_grad(f, params), ValueError);
}

TEST(OracleSci, IdenticalChannelsGiveUniformWeights) {
  oracle::Buf x = {1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 1.0, 2.0, 3.0};  // 3 channels, l=3
  oracle::SciRef ref = oracle::sci(x, 3, 3);
  for (double w : ref.weights) EXPECT_NEAR(w, 1.0 / 3.0, 1e-12);
}

TEST(OracleSci, TwoChannelIdentityDerivedValues) {
  // x = [[1,0],[0,1]]: gram = I, negated rows are [-1,0] and [0,-1]
  oracle::Buf x = {1, 0, 0, 1};
  oracle::SciRef ref = oracle::sci(x, 2, 2);
  double e = std::exp(-1.0);
  double lo = e / (1.0 + e);   // 0.26894...
  double hi = 1.0 / (1.0 + e); // 0.73106...
  EXPECT_NEAR(ref.weights[0], lo, 1e-12);
  EXPECT_NEAR(ref.weights[1], hi, 1e-12);
  EXPECT_NEAR(ref.weights[2], hi, 1e-12);
  EXPECT_NEAR(ref.weights[3], lo, 1e-12);
}

TEST(OracleCci, ZeroGatesReduceToSci) {
  Rng rng(13);
  oracle::Buf xa(12), xb(12);
  for (auto& v : xa) v = rng.uniform(-1, 1);
  for (auto& v : xb) v = rng.uniform(-1, 1);
  oracle::CciRef ref = oracle::cci(xa, xb, 3, 4, 0.0, 0.0);
  oracle::SciRef sa = oracle::sci(xa, 3, 4);
  for (std::size_t i = 0; i < sa.weights.size(); ++i) {
    EXPECT_DOUBLE_EQ(ref.weights_ab[i], sa.weights[i]);
  }
}

TEST(OracleCci, IdenticalInputsWithUnitGateCancel) {
  Rng rng(14);
  oracle::Buf x(8);
  for (auto& v : x) v = rng.uniform(-1, 1);
  oracle::CciRef ref = oracle::cci(x, x, 2, 4, 1.0, 0.5);
  for (double w : ref.weights_ab) EXPECT_EQ(w, 0.0);
  for (double y : ref.interacted_a) EXPECT_EQ(y, 0.0);
}

// The comparator must flag a planted sign bug: analytic softmax gradient with
// one entry negated has to breach the tolerance against finite differences.
TEST(GradCompare, DetectsInjectedSignBug) {
  Rng rng(15);
  oracle::NamedTensors params;
  Tensor x({2, 3});
  for (std::int64_t i = 0; i < x.numel(); ++i) x[i] = static_cast<Scalar>(rng.uniform(-1, 1));
  x.requires_grad = true;
  params["x"] = x;

  auto run = [](const oracle::NamedTensors& p, GradMap* grads) {
    Tape tape;
    Var v = tape.param("x", p.at("x"));
    Rng wrng(99);
    Tensor w(v.value().shape());
    for (std::int64_t i = 0; i < w.numel(); ++i) w[i] = static_cast<Scalar>(wrng.uniform(0.5, 1.5));
    Var loss = sum_all(mul(row_softmax(v), tape.input(w)));
    if (grads) *grads = tape.backward(loss);
    return static_cast<double>(loss.value()[0]);
  };

  GradMap analytic;
  run(params, &analytic);
  oracle::NamedTensors fd = oracle::finite_diff_grad(
      [&](const oracle::NamedTensors& p) { return run(p, nullptr); }, params);

  oracle::GradCompare clean = oracle::compare_grads(analytic, fd);
  EXPECT_LT(clean.max_rel_err, 1e-6);

  // flip the sign of the largest-magnitude entry
  Tensor& g = analytic.at("x");
  std::int64_t worst = 0;
  for (std::int64_t i = 1; i < g.numel(); ++i) {
    if (std::fabs(g[i]) > std::fabs(g[worst])) worst = i;
  }
  ASSERT_GT(std::fabs(g[worst]), 1e-3);
  g[worst] = -g[worst];
  oracle::GradCompare bugged = oracle::compare_grads(analytic, fd);
  EXPECT_GT(bugged.max_rel_err, 1e-2);
}

TEST(GradcheckSuite, CoversEveryRegisteredOp) {
  std::vector<oracle::OracleReport> reports = gradcheck_suite(7);
  for (OpKind kind : differentiable_ops()) {
    bool found = false;
    for (const auto& rep : reports) found = found || rep.op == op_name(kind);
    EXPECT_TRUE(found) << "no gradcheck row for " << op_name(kind);
  }
  bool pipeline = false;
  for (const auto& rep : reports) pipeline = pipeline || rep.op == "pipeline_total_loss";
  EXPECT_TRUE(pipeline);
}

TEST(OracleReports, ErrorsAreNonNegative) {
  for (const auto& rep : gradcheck_suite(19)) {
    EXPECT_GE(rep.max_abs_err, 0.0) << rep.op;
    EXPECT_GE(rep.max_rel_err, 0.0) << rep.op;
    EXPECT_GT(rep.tolerance, 0.0) << rep.op;
  }
}
