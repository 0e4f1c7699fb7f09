#include <algorithm>

#include <gtest/gtest.h>

#include "cinet/backbone.hpp"
#include "cinet/model.hpp"
#include "cinet/rng.hpp"

using namespace cinet;

namespace {

Tensor rand_image(int size, Rng& rng) {
  Tensor t({size, size, 3});
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<Scalar>(rng.uniform());
  return t;
}

ModelConfig default_model() {
  ModelConfig cfg;
  cfg.num_classes = 8;
  return cfg;
}

}  // namespace

TEST(BackboneConfig, DefaultArithmetic) {
  BackboneConfig cfg;
  cfg.validate();
  EXPECT_EQ(cfg.stages(), 3);
  EXPECT_EQ(cfg.output_size(), 4);
  EXPECT_EQ(cfg.output_channels(), 32);
}

TEST(BackboneConfig, RejectsBadGeometry) {
  BackboneConfig cfg;
  cfg.input_size = 20;  // 20 -> 10 -> 5: not divisible at stage 3
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.input_size = 8;   // 8 / 2^3 = 1 < 2
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.input_size = 16;
  cfg.validate();
  cfg.stage_channels = {};
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Extract, DefaultShapes) {
  ModelConfig mc = default_model();
  ModelParams params = init_params(mc, 1);
  Rng rng(2);
  Tensor img = rand_image(32, rng);
  Tape tape;
  ParamBind bind(tape, params, false);
  FeatureMap fm = extract(bind, img, mc.backbone);
  EXPECT_EQ(fm.height, 4);
  EXPECT_EQ(fm.width, 4);
  EXPECT_EQ(fm.channels, 32);
  EXPECT_EQ(fm.positions(), 16);
  EXPECT_EQ(fm.flat.shape(), (Shape{32, 16}));
}

TEST(Extract, DeterministicAcrossCalls) {
  ModelConfig mc = default_model();
  ModelParams params = init_params(mc, 3);
  Rng rng(4);
  Tensor img = rand_image(32, rng);
  Tape t1, t2;
  ParamBind b1(t1, params, false), b2(t2, params, false);
  Tensor f1 = extract(b1, img, mc.backbone).spatial.value();
  Tensor f2 = extract(b2, img, mc.backbone).spatial.value();
  EXPECT_TRUE(bitwise_equal(f1, f2));
}

TEST(Extract, ZeroImageZeroBiasGivesZeroFeatures) {
  ModelConfig mc = default_model();
  ModelParams params = init_params(mc, 5);
  for (int i = 0; i < mc.backbone.stages(); ++i) {
    Tensor& b = params.at(stage_bias_name(i));
    for (std::int64_t j = 0; j < b.numel(); ++j) b[j] = 0;
  }
  Tensor img({32, 32, 3});
  Tape tape;
  ParamBind bind(tape, params, false);
  Tensor f = extract(bind, img, mc.backbone).spatial.value();
  for (std::int64_t i = 0; i < f.numel(); ++i) EXPECT_EQ(f[i], 0.0);
}

TEST(Extract, ShapeMismatchIsError) {
  ModelConfig mc = default_model();
  ModelParams params = init_params(mc, 6);
  Tape tape;
  ParamBind bind(tape, params, false);
  EXPECT_THROW(extract(bind, Tensor({16, 16, 3}), mc.backbone), ShapeError);
  EXPECT_THROW(extract(bind, Tensor({32, 32, 1}), mc.backbone), ShapeError);
}

TEST(Flatten, RoundTripAndConvention) {
  Tape tape;
  // 2x2 single-channel map [[a,b],[c,d]] flattens to the row [a,b,c,d]...
  Tensor m({2, 2, 1}, {1, 2, 3, 4});
  Tensor flat = flatten_channels(tape.input(m)).value();
  EXPECT_TRUE(bitwise_equal(flat, Tensor({1, 4}, {1, 2, 3, 4})));

  // ...and unflatten inverts flatten exactly for any map
  Rng rng(7);
  Tensor x({3, 4, 5});
  for (std::int64_t i = 0; i < x.numel(); ++i) x[i] = static_cast<Scalar>(rng.uniform(-1, 1));
  Var fv = flatten_channels(tape.input(x));
  Tensor back = unflatten_channels(fv, 3, 4).value();
  EXPECT_TRUE(bitwise_equal(back, x));

  EXPECT_THROW(flatten_channels(tape.input(Tensor({2, 2}))), ShapeError);
}

TEST(Flatten, PreservesValueMultiset) {
  Rng rng(8);
  Tensor x({2, 3, 4});
  for (std::int64_t i = 0; i < x.numel(); ++i) x[i] = static_cast<Scalar>(rng.uniform(-1, 1));
  Tape tape;
  Tensor flat = flatten_channels(tape.input(x)).value();
  std::vector<Scalar> a(x.data(), x.data() + x.numel());
  std::vector<Scalar> b(flat.data(), flat.data() + flat.numel());
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  EXPECT_EQ(a, b);
}

// No stage may be detached: a loss on the feature map must reach every
// backbone parameter.
TEST(Extract, GradientReachesEveryStage) {
  ModelConfig mc = default_model();
  ModelParams params = init_params(mc, 9);
  Rng rng(10);
  Tensor img = rand_image(32, rng);
  Tape tape;
  ParamBind bind(tape, params, true);
  FeatureMap fm = extract(bind, img, mc.backbone);
  GradMap g = tape.backward(sum_all(fm.spatial));
  for (int i = 0; i < mc.backbone.stages(); ++i) {
    double mk = 0, mb = 0;
    const Tensor& gk = g.at(stage_kernel_name(i));
    const Tensor& gb = g.at(stage_bias_name(i));
    for (std::int64_t j = 0; j < gk.numel(); ++j) mk = std::max(mk, std::fabs((double)gk[j]));
    for (std::int64_t j = 0; j < gb.numel(); ++j) mb = std::max(mb, std::fabs((double)gb[j]));
    EXPECT_GT(mk, 0.0) << "stage " << i << " kernel got no gradient";
    EXPECT_GT(mb, 0.0) << "stage " << i << " bias got no gradient";
  }
}

TEST(InitParams, DeterministicAndFlagged) {
  ModelConfig mc = default_model();
  ModelParams a = init_params(mc, 42);
  ModelParams b = init_params(mc, 42);
  ModelParams c = init_params(mc, 43);
  ASSERT_EQ(a.names(), b.names());
  for (const auto& name : a.names()) {
    EXPECT_TRUE(bitwise_equal(a.at(name), b.at(name))) << name;
    EXPECT_TRUE(a.at(name).requires_grad) << name;
  }
  bool any_diff = false;
  for (const auto& name : a.names()) {
    any_diff = any_diff || !bitwise_equal(a.at(name), c.at(name));
  }
  EXPECT_TRUE(any_diff);
}
