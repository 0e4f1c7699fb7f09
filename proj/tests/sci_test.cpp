#include <cmath>

#include <gtest/gtest.h>

#include "cinet/gradcheck.hpp"
#include "cinet/model.hpp"
#include "cinet/oracle.hpp"
#include "cinet/rng.hpp"
#include "cinet/sci.hpp"

using namespace cinet;

namespace {

Tensor rand_map(int h, int w, int c, Rng& rng) {
  Tensor t({h, w, c});
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<Scalar>(rng.uniform(-1, 1));
  return t;
}

ModelParams phi_params(int c, Rng& rng, bool zero = false) {
  ModelParams p;
  Tensor k({3, 3, c, c});
  Tensor b({c});
  if (!zero) {
    for (std::int64_t i = 0; i < k.numel(); ++i) k[i] = static_cast<Scalar>(rng.uniform(-0.4, 0.4));
    for (std::int64_t i = 0; i < b.numel(); ++i) b[i] = static_cast<Scalar>(rng.uniform(-0.4, 0.4));
  }
  k.requires_grad = true;
  b.requires_grad = true;
  p.values["sci.phi.kernel"] = k;
  p.values["sci.phi.bias"] = b;
  return p;
}

oracle::Buf to_buf(const Tensor& t) {
  oracle::Buf b(static_cast<std::size_t>(t.numel()));
  for (std::int64_t i = 0; i < t.numel(); ++i) b[static_cast<std::size_t>(i)] = t[i];
  return b;
}

}  // namespace

TEST(SciWeights, IdenticalChannelsAreUniform) {
  // every channel row identical -> constant interaction rows -> uniform softmax
  Tensor flat({3, 4}, {1, 2, 3, 4, 1, 2, 3, 4, 1, 2, 3, 4});
  SciWeights w = sci_weights(flat, SciVariant::negative);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) EXPECT_NEAR(w.matrix.at(i, j), 1.0 / 3.0, 1e-15);
  }
}

TEST(SciWeights, TwoChannelIdentityDerivedValues) {
  Tensor flat({2, 2}, {1, 0, 0, 1});
  SciWeights w = sci_weights(flat, SciVariant::negative);
  double e = std::exp(-1.0);
  EXPECT_NEAR(w.matrix.at(0, 0), e / (1 + e), 1e-12);
  EXPECT_NEAR(w.matrix.at(0, 1), 1 / (1 + e), 1e-12);
  EXPECT_NEAR(w.matrix.at(1, 0), 1 / (1 + e), 1e-12);
  EXPECT_NEAR(w.matrix.at(1, 1), e / (1 + e), 1e-12);
}

TEST(SciWeights, RowStochasticBothVariants) {
  Rng rng(23);
  for (SciVariant variant : {SciVariant::negative, SciVariant::positive}) {
    for (int it = 0; it < 30; ++it) {
      int c = 2 + rng.below(7);
      int l = 2 + rng.below(15);
      Tensor flat({c, l});
      for (std::int64_t i = 0; i < flat.numel(); ++i) {
        flat[i] = static_cast<Scalar>(rng.uniform(-2, 2));
      }
      SciWeights w = sci_weights(flat, variant);
      for (int i = 0; i < c; ++i) {
        double sum = 0;
        for (int j = 0; j < c; ++j) {
          EXPECT_GT(w.matrix.at(i, j), 0.0);
          EXPECT_LT(w.matrix.at(i, j), 1.0);
          sum += w.matrix.at(i, j);
        }
        EXPECT_NEAR(sum, 1.0, 1e-12);
      }
    }
  }
}

TEST(SciWeights, NonFiniteInputIsValueError) {
  Tensor bad({2, 2}, {1.0, std::nan(""), 0.0, 1.0});
  EXPECT_THROW(sci_weights(bad, SciVariant::negative), ValueError);
  EXPECT_THROW(sci_weights(Tensor({1, 4}), SciVariant::negative), ShapeError);
}

// The two variants differ exactly by the sign of the pre-softmax logits.
TEST(SciLogits, NegativeIsMinusPositive) {
  Rng rng(29);
  Tensor flat({4, 6});
  for (std::int64_t i = 0; i < flat.numel(); ++i) {
    flat[i] = static_cast<Scalar>(rng.uniform(-1, 1));
  }
  Tape tape;
  Var x = tape.input(flat);
  Tensor neg = sci_logits(x, SciVariant::negative).value();
  Tensor pos = sci_logits(x, SciVariant::positive).value();
  for (std::int64_t i = 0; i < neg.numel(); ++i) EXPECT_EQ(neg[i], -pos[i]);
}

TEST(SciForward, ZeroPhiIsResidualIdentity) {
  Rng rng(31);
  Tensor map = rand_map(2, 2, 3, rng);
  ModelParams params = phi_params(3, rng, /*zero=*/true);
  Tape tape;
  ParamBind bind(tape, params, false);
  FeatureMap fm = make_feature_map(tape.input(map));
  SciOutput out = sci_forward(bind, fm, SciVariant::negative);
  EXPECT_TRUE(bitwise_equal(out.enhanced.value(), map));
}

TEST(SciForward, IdenticalChannelsMixToChannelMean) {
  // uniform weights average identical channels back onto themselves
  Tensor map({2, 2, 3});
  for (int r = 0; r < 2; ++r) {
    for (int q = 0; q < 2; ++q) {
      for (int c = 0; c < 3; ++c) map.at(r, q, c) = static_cast<Scalar>(1 + r * 2 + q);
    }
  }
  Rng rng(33);
  ModelParams params = phi_params(3, rng);
  Tape tape;
  ParamBind bind(tape, params, false);
  FeatureMap fm = make_feature_map(tape.input(map));
  SciOutput out = sci_forward(bind, fm, SciVariant::negative);
  const Tensor& flat = fm.flat.value();
  const Tensor& mixed = out.interacted.value();
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 4; ++j) EXPECT_NEAR(mixed.at(i, j), flat.at(0, j), 1e-12);
  }
}

TEST(SciForward, MatchesLoopOracle) {
  Rng rng(37);
  for (int it = 0; it < 20; ++it) {
    int h = 2 + rng.below(2), w = 2 + rng.below(2), c = 2 + rng.below(5);
    Tensor map = rand_map(h, w, c, rng);
    ModelParams params = phi_params(c, rng);
    Tape tape;
    ParamBind bind(tape, params, false);
    FeatureMap fm = make_feature_map(tape.input(map));
    SciOutput out = sci_forward(bind, fm, SciVariant::negative);

    oracle::SciRef ref = oracle::sci(to_buf(fm.flat.value()), c, h * w);
    EXPECT_LE(max_abs_diff(out.weights.value(), Tensor({c, c}, std::vector<Scalar>(
                                                             ref.weights.begin(),
                                                             ref.weights.end()))),
              1e-12);
    oracle::Buf spatial = oracle::loop_unflatten(ref.interacted, c, h, w);
    oracle::Buf conv = oracle::loop_conv3x3(spatial, h, w, c,
                                            to_buf(params.at("sci.phi.kernel")), c,
                                            to_buf(params.at("sci.phi.bias")));
    const Tensor& z = out.enhanced.value();
    for (std::int64_t i = 0; i < z.numel(); ++i) {
      EXPECT_NEAR(z[i], conv[static_cast<std::size_t>(i)] + map[i], 1e-12);
    }
  }
}

// Permuting the channel order permutes the weight matrix by (pi, pi) and the
// mixed features' rows by pi.
TEST(SciForward, PermutationEquivariance) {
  Rng rng(41);
  int c = 5, l = 6;
  Tensor flat({c, l});
  for (std::int64_t i = 0; i < flat.numel(); ++i) {
    flat[i] = static_cast<Scalar>(rng.uniform(-1, 1));
  }
  std::vector<int> perm = {3, 0, 4, 1, 2};
  Tensor permuted({c, l});
  for (int i = 0; i < c; ++i) {
    for (int j = 0; j < l; ++j) permuted.at(i, j) = flat.at(perm[static_cast<std::size_t>(i)], j);
  }
  Tape tape;
  Var base = tape.input(flat);
  Var shuffled = tape.input(permuted);
  Tensor w = sci_weights_var(base, SciVariant::negative).value();
  Tensor wp = sci_weights_var(shuffled, SciVariant::negative).value();
  Tensor y = matmul(sci_weights_var(base, SciVariant::negative), base).value();
  Tensor yp = matmul(sci_weights_var(shuffled, SciVariant::negative), shuffled).value();
  for (int i = 0; i < c; ++i) {
    for (int j = 0; j < c; ++j) {
      EXPECT_NEAR(wp.at(i, j),
                  w.at(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]),
                  1e-12);
    }
    for (int j = 0; j < l; ++j) {
      EXPECT_NEAR(yp.at(i, j), y.at(perm[static_cast<std::size_t>(i)], j), 1e-12);
    }
  }
}

// d(scalar(Z))/dX against finite differences on a 2x2x3 map.
TEST(SciForward, InputGradientMatchesFiniteDifferences) {
  Rng rng(43);
  Tensor map = rand_map(2, 2, 3, rng);
  map.requires_grad = true;
  ModelParams phi = phi_params(3, rng);

  auto eval = [&](const oracle::NamedTensors& p, GradMap* grads) {
    Tape tape;
    ModelParams mp;
    mp.values["sci.phi.kernel"] = phi.at("sci.phi.kernel");
    mp.values["sci.phi.bias"] = phi.at("sci.phi.bias");
    ParamBind bind(tape, mp, false);
    Tensor x = p.at("x");
    x.requires_grad = true;
    Var xv = tape.param("x", x);
    FeatureMap fm = make_feature_map(xv);
    SciOutput out = sci_forward(bind, fm, SciVariant::negative);
    Rng wrng(77);
    Tensor wts(out.enhanced.value().shape());
    for (std::int64_t i = 0; i < wts.numel(); ++i) {
      wts[i] = static_cast<Scalar>(wrng.uniform(0.5, 1.5));
    }
    Var loss = sum_all(mul(out.enhanced, tape.input(wts)));
    if (grads) *grads = tape.backward(loss);
    return static_cast<double>(loss.value()[0]);
  };

  oracle::NamedTensors params;
  params["x"] = map;
  GradMap analytic;
  eval(params, &analytic);
  oracle::NamedTensors fd = oracle::finite_diff_grad(
      [&](const oracle::NamedTensors& p) { return eval(p, nullptr); }, params);
  oracle::GradCompare cmp = oracle::compare_grads(analytic, fd);
  EXPECT_LT(cmp.max_rel_err, 1e-6);
}

TEST(ComplementaryTopk, TieBreaksAndOrdering) {
  SciWeights uniform{Tensor::full({4, 4}, 0.25), SciVariant::negative};
  EXPECT_EQ(complementary_topk(uniform, 2, 3), (std::vector<int>{0, 1, 2}));

  SciWeights w{Tensor({3, 3}, {0.1, 0.7, 0.2, 0.3, 0.3, 0.4, 0.5, 0.25, 0.25}),
               SciVariant::negative};
  EXPECT_EQ(complementary_topk(w, 0, 2), (std::vector<int>{1, 2}));

  // derived 2-channel example: row 0 peaks at the other channel
  Tensor flat({2, 2}, {1, 0, 0, 1});
  SciWeights derived = sci_weights(flat, SciVariant::negative);
  EXPECT_EQ(complementary_topk(derived, 0, 1), (std::vector<int>{1}));

  EXPECT_THROW(complementary_topk(w, 3, 1), IndexError);
  EXPECT_THROW(complementary_topk(w, -1, 1), IndexError);
  EXPECT_THROW(complementary_topk(w, 0, 0), IndexError);
  EXPECT_THROW(complementary_topk(w, 0, 4), IndexError);
}
