#pragma once

// Randomized gradient and forward-equivalence checks over every registered
// differentiable op plus the complete pair-training objective. The CLI
// gradcheck command and the acceptance suite both run this.

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "cinet/autodiff.hpp"
#include "cinet/data.hpp"
#include "cinet/error.hpp"
#include "cinet/model.hpp"
#include "cinet/oracle.hpp"
#include "cinet/params.hpp"
#include "cinet/rng.hpp"
#include "cinet/trainer.hpp"

namespace cinet {

inline constexpr double kOpGradTolerance = 1e-6;
inline constexpr double kPipelineGradTolerance = 1e-5;
inline constexpr double kForwardTolerance = 1e-12;
inline constexpr double kKinkMargin = 1e-3;
inline constexpr double kFdStep = 1e-5;

namespace detail_gradcheck {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.5, double hi = 1.5) {
  Tensor t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<Scalar>(rng.uniform(lo, hi));
  t.requires_grad = true;
  return t;
}

// magnitudes in [0.2, 1.5] with random sign: comfortably away from the kinks
// of abs/relu/sqrt
inline Tensor random_signed_tensor(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    double mag = rng.uniform(0.2, 1.5);
    t[i] = static_cast<Scalar>(rng.uniform() < 0.5 ? -mag : mag);
  }
  t.requires_grad = true;
  return t;
}

// Scalar loss with fixed random weights so every output entry contributes an
// O(1) sensitivity.
inline Var weighted_sum(const Var& v, Rng& rng) {
  Tensor w(v.value().shape());
  for (std::int64_t i = 0; i < w.numel(); ++i) w[i] = static_cast<Scalar>(rng.uniform(0.5, 1.5));
  Var wv = v.tape()->input(w);
  return sum_all(mul(v, wv));
}

struct OpCheck {
  oracle::NamedTensors params;
  std::function<double(const oracle::NamedTensors&, GradMap*)> run;
};

inline oracle::OracleReport run_grad_check(const std::string& name, const OpCheck& check,
                                           double tolerance) {
  GradMap analytic;
  check.run(check.params, &analytic);
  oracle::NamedTensors fd = oracle::finite_diff_grad(
      [&](const oracle::NamedTensors& p) { return check.run(p, nullptr); }, check.params,
      kFdStep);
  oracle::GradCompare cmp = oracle::compare_grads(analytic, fd);
  oracle::OracleReport rep;
  rep.op = name;
  rep.max_abs_err = cmp.max_abs_err;
  rep.max_rel_err = cmp.max_rel_err;
  rep.tolerance = tolerance;
  rep.pass = cmp.max_rel_err < tolerance;
  return rep;
}

// Builds one micro-instance per op kind. Each lambda binds its tensors as
// named tape parameters, applies the op and reduces to the weighted sum.
inline OpCheck make_op_check(OpKind kind, Rng& rng) {
  OpCheck check;
  std::uint64_t loss_seed = rng.next_u64();
  auto finish = [loss_seed](Tape& tape, const Var& out, GradMap* grads) {
    Rng loss_rng(loss_seed);
    Var loss = weighted_sum(out, loss_rng);
    if (grads) *grads = tape.backward(loss);
    return static_cast<double>(loss.value()[0]);
  };
  switch (kind) {
    case OpKind::add:
    case OpKind::sub:
    case OpKind::mul: {
      check.params["a"] = random_signed_tensor({3, 4}, rng);
      check.params["b"] = random_signed_tensor({3, 4}, rng);
      check.params["s"] = random_signed_tensor({1}, rng);
      check.run = [kind, finish](const oracle::NamedTensors& p, GradMap* grads) {
        Tape tape;
        Var a = tape.param("a", p.at("a"));
        Var b = tape.param("b", p.at("b"));
        Var s = tape.param("s", p.at("s"));
        Var full = kind == OpKind::add ? add(a, b) : kind == OpKind::sub ? sub(a, b) : mul(a, b);
        Var broad = kind == OpKind::add ? add(full, s) : kind == OpKind::sub ? sub(full, s)
                                                                             : mul(full, s);
        return finish(tape, broad, grads);
      };
      break;
    }
    case OpKind::scale: {
      check.params["a"] = random_signed_tensor({2, 5}, rng);
      check.run = [finish](const oracle::NamedTensors& p, GradMap* grads) {
        Tape tape;
        return finish(tape, scale(tape.param("a", p.at("a")), -0.75), grads);
      };
      break;
    }
    case OpKind::abs_elem: {
      check.params["a"] = random_signed_tensor({4, 3}, rng);
      check.run = [finish](const oracle::NamedTensors& p, GradMap* grads) {
        Tape tape;
        return finish(tape, abs(tape.param("a", p.at("a"))), grads);
      };
      break;
    }
    case OpKind::relu: {
      check.params["a"] = random_signed_tensor({4, 3}, rng);
      check.run = [finish](const oracle::NamedTensors& p, GradMap* grads) {
        Tape tape;
        return finish(tape, relu(tape.param("a", p.at("a"))), grads);
      };
      break;
    }
    case OpKind::sqrt_elem: {
      check.params["a"] = random_tensor({6}, rng, 0.3, 2.0);
      check.run = [finish](const oracle::NamedTensors& p, GradMap* grads) {
        Tape tape;
        return finish(tape, sqrt(tape.param("a", p.at("a"))), grads);
      };
      break;
    }
    case OpKind::matmul: {
      check.params["a"] = random_signed_tensor({3, 2}, rng);
      check.params["b"] = random_signed_tensor({2, 4}, rng);
      check.run = [finish](const oracle::NamedTensors& p, GradMap* grads) {
        Tape tape;
        return finish(tape, matmul(tape.param("a", p.at("a")), tape.param("b", p.at("b"))),
                      grads);
      };
      break;
    }
    case OpKind::transpose: {
      check.params["a"] = random_signed_tensor({3, 5}, rng);
      check.run = [finish](const oracle::NamedTensors& p, GradMap* grads) {
        Tape tape;
        return finish(tape, transpose(tape.param("a", p.at("a"))), grads);
      };
      break;
    }
    case OpKind::row_softmax: {
      check.params["a"] = random_tensor({3, 4}, rng, -2.0, 2.0);
      check.run = [finish](const oracle::NamedTensors& p, GradMap* grads) {
        Tape tape;
        return finish(tape, row_softmax(tape.param("a", p.at("a"))), grads);
      };
      break;
    }
    case OpKind::conv2d_3x3: {
      check.params["x"] = random_signed_tensor({4, 4, 2}, rng);
      check.params["k"] = random_signed_tensor({3, 3, 2, 3}, rng);
      check.params["b"] = random_signed_tensor({3}, rng);
      check.run = [finish](const oracle::NamedTensors& p, GradMap* grads) {
        Tape tape;
        return finish(tape,
                      conv2d_3x3(tape.param("x", p.at("x")), tape.param("k", p.at("k")),
                                 tape.param("b", p.at("b"))),
                      grads);
      };
      break;
    }
    case OpKind::pool_mean_2x2: {
      check.params["x"] = random_signed_tensor({4, 6, 3}, rng);
      check.run = [finish](const oracle::NamedTensors& p, GradMap* grads) {
        Tape tape;
        return finish(tape, pool_mean_2x2(tape.param("x", p.at("x"))), grads);
      };
      break;
    }
    case OpKind::pool_spatial_mean: {
      check.params["x"] = random_signed_tensor({3, 4, 3}, rng);
      check.run = [finish](const oracle::NamedTensors& p, GradMap* grads) {
        Tape tape;
        return finish(tape, pool_spatial_mean(tape.param("x", p.at("x"))), grads);
      };
      break;
    }
    case OpKind::fully_connected: {
      check.params["x"] = random_signed_tensor({3}, rng);
      check.params["w"] = random_signed_tensor({2, 3}, rng);
      check.params["b"] = random_signed_tensor({2}, rng);
      check.run = [finish](const oracle::NamedTensors& p, GradMap* grads) {
        Tape tape;
        return finish(tape,
                      fully_connected(tape.param("x", p.at("x")), tape.param("w", p.at("w")),
                                      tape.param("b", p.at("b"))),
                      grads);
      };
      break;
    }
    case OpKind::sum_all: {
      check.params["a"] = random_signed_tensor({2, 3, 2}, rng);
      check.run = [finish](const oracle::NamedTensors& p, GradMap* grads) {
        Tape tape;
        return finish(tape, sum_all(tape.param("a", p.at("a"))), grads);
      };
      break;
    }
    case OpKind::concat_vec: {
      check.params["a"] = random_signed_tensor({3}, rng);
      check.params["b"] = random_signed_tensor({4}, rng);
      check.run = [finish](const oracle::NamedTensors& p, GradMap* grads) {
        Tape tape;
        return finish(tape, concat(tape.param("a", p.at("a")), tape.param("b", p.at("b"))),
                      grads);
      };
      break;
    }
    case OpKind::reshape: {
      check.params["a"] = random_signed_tensor({2, 6}, rng);
      check.run = [finish](const oracle::NamedTensors& p, GradMap* grads) {
        Tape tape;
        return finish(tape, reshape(tape.param("a", p.at("a")), {3, 4}), grads);
      };
      break;
    }
    case OpKind::flatten_channels: {
      check.params["x"] = random_signed_tensor({2, 3, 4}, rng);
      check.run = [finish](const oracle::NamedTensors& p, GradMap* grads) {
        Tape tape;
        return finish(tape, flatten_channels(tape.param("x", p.at("x"))), grads);
      };
      break;
    }
    case OpKind::unflatten_channels: {
      check.params["x"] = random_signed_tensor({4, 6}, rng);
      check.run = [finish](const oracle::NamedTensors& p, GradMap* grads) {
        Tape tape;
        return finish(tape, unflatten_channels(tape.param("x", p.at("x")), 2, 3), grads);
      };
      break;
    }
    case OpKind::cross_entropy: {
      check.params["logits"] = random_tensor({5}, rng, -2.0, 2.0);
      check.run = [](const oracle::NamedTensors& p, GradMap* grads) {
        Tape tape;
        Var loss = cross_entropy_logits(tape.param("logits", p.at("logits")), 2);
        if (grads) *grads = tape.backward(loss);
        return static_cast<double>(loss.value()[0]);
      };
      break;
    }
    case OpKind::leaf:
      throw ContractError("leaf is not a differentiable op");
  }
  return check;
}

}  // namespace detail_gradcheck

// Gradient check of one registered op on a random micro-instance.
inline oracle::OracleReport gradcheck_op(OpKind kind, Rng& rng) {
  auto check = detail_gradcheck::make_op_check(kind, rng);
  return detail_gradcheck::run_grad_check(op_name(kind), check, kOpGradTolerance);
}

// The tiny configuration used for whole-pipeline checks: 8x8 images through
// two backbone stages, a low projection width, defaults elsewhere.
inline ModelConfig gradcheck_model_config() {
  ModelConfig cfg;
  cfg.backbone.input_size = 8;
  cfg.backbone.stage_channels = {3, 4};
  cfg.num_classes = 3;
  cfg.proj_dim = 16;
  return cfg;
}

// Finite-difference check of d(total objective)/d(every parameter) on a
// 2-pair batch of 8x8 images. Probe points whose smallest kink margin falls
// under the threshold are rejected and resampled with the next seed.
inline oracle::OracleReport gradcheck_pipeline(std::uint64_t seed, int max_attempts = 25) {
  ModelConfig model_cfg = gradcheck_model_config();
  TrainConfig train_cfg;
  train_cfg.proj_dim = model_cfg.proj_dim;

  for (int attempt = 0; attempt < max_attempts; ++attempt) {
    Rng rng(derive_seed(seed, 0x919d + static_cast<std::uint64_t>(attempt)));
    oracle::NamedTensors params;
    for (auto& [name, tensor] : init_params(model_cfg, rng.next_u64()).values) {
      // wider than the training init so preactivations spread away from 0
      params[name] = detail_gradcheck::random_tensor(tensor.shape(), rng, -0.6, 0.6);
    }
    std::vector<Tensor> images;
    std::vector<int> labels = {0, 1, 2, 0};
    for (int i = 0; i < 4; ++i) {
      images.push_back(detail_gradcheck::random_tensor({8, 8, 3}, rng, 0.0, 1.0));
    }
    std::vector<std::array<int, 2>> pairs = {{0, 3}, {1, 2}};
    std::vector<int> same = {1, 0};

    auto objective = [&](const oracle::NamedTensors& p, GradMap* grads, Tape* probe) -> double {
      Tape local;
      Tape& tape = probe ? *probe : local;
      ModelParams mp;
      mp.values = p;
      for (auto& [_, t] : mp.values) t.requires_grad = true;
      ParamBind bind(tape, mp, true);
      std::vector<ImageForward> fwd;
      std::vector<Var> ce;
      for (std::size_t i = 0; i < images.size(); ++i) {
        fwd.push_back(forward_image(bind, images[i], model_cfg, true, SciVariant::negative));
        ce.push_back(cross_entropy_logits(fwd.back().logits, labels[i]));
      }
      Var loss_soft = scale(add(add(ce[0], ce[1]), add(ce[2], ce[3])), 0.25);
      std::vector<Var> terms;
      for (std::size_t pi = 0; pi < pairs.size(); ++pi) {
        const auto& [a, b] = pairs[pi];
        CciOutput cci = cci_forward(bind, fwd[static_cast<std::size_t>(a)].fm,
                                    fwd[static_cast<std::size_t>(b)].fm,
                                    fwd[static_cast<std::size_t>(a)].sci,
                                    fwd[static_cast<std::size_t>(b)].sci);
        Var ea = project(bind, cci.enhanced_a);
        Var eb = project(bind, cci.enhanced_b);
        terms.push_back(contrastive_term(ea, eb, same[pi], train_cfg.beta));
      }
      Var loss = total_loss(loss_soft, batch_contrastive_loss(terms), train_cfg.alpha);
      if (grads) *grads = tape.backward(loss);
      return static_cast<double>(loss.value()[0]);
    };

    Tape probe;
    objective(params, nullptr, &probe);
    if (probe.min_kink_margin() < kKinkMargin) continue;

    detail_gradcheck::OpCheck check;
    check.params = params;
    check.run = [&objective](const oracle::NamedTensors& p, GradMap* grads) {
      return objective(p, grads, nullptr);
    };
    return detail_gradcheck::run_grad_check("pipeline_total_loss", check,
                                            kPipelineGradTolerance);
  }
  throw ContractError("no kink-free probe point found for the pipeline gradient check");
}

// ---------------------------------------------------------------------------
// forward equivalence against the loop oracles

namespace detail_gradcheck {

inline oracle::Buf to_buf(const Tensor& t) {
  oracle::Buf b(static_cast<std::size_t>(t.numel()));
  for (std::int64_t i = 0; i < t.numel(); ++i) b[static_cast<std::size_t>(i)] = t[i];
  return b;
}

inline double max_abs_vs(const Tensor& t, const oracle::Buf& b) {
  double m = 0.0;
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    m = std::max(m, std::fabs(static_cast<double>(t[i]) - b[static_cast<std::size_t>(i)]));
  }
  return m;
}

}  // namespace detail_gradcheck

// SCI forward (weights, mixed features, conv residual aggregation) vs the
// loop oracle on random micro-instances.
inline oracle::OracleReport forward_check_sci(Rng& rng, int instances = 100) {
  using namespace detail_gradcheck;
  double worst = 0.0;
  for (int it = 0; it < instances; ++it) {
    int h = 2 + rng.below(3);
    int w = 2 + rng.below(3);
    int c = 2 + rng.below(7);
    Tensor spatial = random_signed_tensor({h, w, c}, rng);
    Tensor phi_k = random_signed_tensor({3, 3, c, c}, rng);
    Tensor phi_b = random_signed_tensor({c}, rng);

    ModelParams mp;
    mp.values["sci.phi.kernel"] = phi_k;
    mp.values["sci.phi.bias"] = phi_b;
    Tape tape;
    ParamBind bind(tape, mp, false);
    FeatureMap fm = make_feature_map(tape.input(spatial));
    SciOutput out = sci_forward(bind, fm, SciVariant::negative);

    oracle::SciRef ref = oracle::sci(to_buf(fm.flat.value()), c, h * w);
    worst = std::max(worst, max_abs_vs(out.weights.value(), ref.weights));
    worst = std::max(worst, max_abs_vs(out.interacted.value(), ref.interacted));
    oracle::Buf ref_spatial = oracle::loop_unflatten(ref.interacted, c, h, w);
    oracle::Buf ref_conv =
        oracle::loop_conv3x3(ref_spatial, h, w, c, to_buf(phi_k), c, to_buf(phi_b));
    for (std::size_t i = 0; i < ref_conv.size(); ++i) {
      ref_conv[i] += static_cast<double>(spatial[static_cast<std::int64_t>(i)]);
    }
    worst = std::max(worst, max_abs_vs(out.enhanced.value(), ref_conv));
  }
  oracle::OracleReport rep;
  rep.op = "sci_forward_vs_oracle";
  rep.max_abs_err = worst;
  rep.tolerance = kForwardTolerance;
  rep.pass = worst <= kForwardTolerance;
  return rep;
}

// CCI forward (contrastive weights, cross-weighted features, aggregation)
// with forced gate values vs the loop oracle.
inline oracle::OracleReport forward_check_cci(Rng& rng, int instances = 100) {
  using namespace detail_gradcheck;
  double worst = 0.0;
  for (int it = 0; it < instances; ++it) {
    int h = 2 + rng.below(3);
    int w = 2 + rng.below(3);
    int c = 2 + rng.below(7);
    Tensor spatial_a = random_signed_tensor({h, w, c}, rng);
    Tensor spatial_b = random_signed_tensor({h, w, c}, rng);
    double eta = rng.uniform(-1.2, 1.2);
    double gamma = rng.uniform(-1.2, 1.2);
    Tensor phi_k = random_signed_tensor({3, 3, c, c}, rng);
    Tensor phi_b = random_signed_tensor({c}, rng);

    ModelParams mp;
    mp.values["sci.phi.kernel"] = phi_k;
    mp.values["sci.phi.bias"] = phi_b;
    Tape tape;
    ParamBind bind(tape, mp, false);
    FeatureMap fa = make_feature_map(tape.input(spatial_a));
    FeatureMap fb = make_feature_map(tape.input(spatial_b));
    SciOutput sa = sci_forward(bind, fa, SciVariant::negative);
    SciOutput sb = sci_forward(bind, fb, SciVariant::negative);

    // re-create the contrastive weights with pinned gates through the same
    // tape ops the module uses
    Var eta_v = tape.input(Tensor::scalar(static_cast<Scalar>(eta)));
    Var gamma_v = tape.input(Tensor::scalar(static_cast<Scalar>(gamma)));
    Var w_ab = abs(sub(sa.weights, mul(eta_v, sb.weights)));
    Var w_ba = abs(sub(sb.weights, mul(gamma_v, sa.weights)));
    Var mixed_a = matmul(w_ab, fa.flat);
    Var mixed_b = matmul(w_ba, fb.flat);

    oracle::CciRef ref =
        oracle::cci(to_buf(fa.flat.value()), to_buf(fb.flat.value()), c, h * w, eta, gamma);
    worst = std::max(worst, max_abs_vs(w_ab.value(), ref.weights_ab));
    worst = std::max(worst, max_abs_vs(w_ba.value(), ref.weights_ba));
    worst = std::max(worst, max_abs_vs(mixed_a.value(), ref.interacted_a));
    worst = std::max(worst, max_abs_vs(mixed_b.value(), ref.interacted_b));

    oracle::Buf ref_spatial = oracle::loop_unflatten(ref.interacted_a, c, h, w);
    oracle::Buf ref_conv =
        oracle::loop_conv3x3(ref_spatial, h, w, c, to_buf(phi_k), c, to_buf(phi_b));
    for (std::size_t i = 0; i < ref_conv.size(); ++i) {
      ref_conv[i] += static_cast<double>(spatial_a[static_cast<std::int64_t>(i)]);
    }
    Var za = add(conv2d_3x3(unflatten_channels(mixed_a, h, w), bind("sci.phi.kernel"),
                            bind("sci.phi.bias")),
                 fa.spatial);
    worst = std::max(worst, max_abs_vs(za.value(), ref_conv));
  }
  oracle::OracleReport rep;
  rep.op = "cci_forward_vs_oracle";
  rep.max_abs_err = worst;
  rep.tolerance = kForwardTolerance;
  rep.pass = worst <= kForwardTolerance;
  return rep;
}

inline oracle::OracleReport forward_check_primitives(Rng& rng, int instances = 50) {
  using namespace detail_gradcheck;
  double worst = 0.0;
  for (int it = 0; it < instances; ++it) {
    Tape tape;
    int m = 1 + rng.below(5), k = 1 + rng.below(5), n = 1 + rng.below(5);
    Tensor a = random_signed_tensor({m, k}, rng);
    Tensor b = random_signed_tensor({k, n}, rng);
    Tensor mm = matmul(tape.input(a), tape.input(b)).value();
    worst = std::max(worst, max_abs_vs(mm, oracle::loop_matmul(to_buf(a), m, k, to_buf(b), n)));

    int h = 1 + rng.below(4), w = 1 + rng.below(4), cin = 1 + rng.below(3), cout = 1 + rng.below(3);
    Tensor x = random_signed_tensor({h, w, cin}, rng);
    Tensor kk = random_signed_tensor({3, 3, cin, cout}, rng);
    Tensor bb = random_signed_tensor({cout}, rng);
    Tensor cv = conv2d_3x3(tape.input(x), tape.input(kk), tape.input(bb)).value();
    worst = std::max(
        worst, max_abs_vs(cv, oracle::loop_conv3x3(to_buf(x), h, w, cin, to_buf(kk), cout,
                                                   to_buf(bb))));

    int din = 1 + rng.below(6), dout = 1 + rng.below(6);
    Tensor fx = random_signed_tensor({din}, rng);
    Tensor fw = random_signed_tensor({dout, din}, rng);
    Tensor fb2 = random_signed_tensor({dout}, rng);
    Tensor fc = fully_connected(tape.input(fx), tape.input(fw), tape.input(fb2)).value();
    worst = std::max(worst, max_abs_vs(fc, oracle::loop_fully_connected(to_buf(fx), to_buf(fw),
                                                                        dout, din, to_buf(fb2))));
  }
  oracle::OracleReport rep;
  rep.op = "primitives_vs_loop_oracle";
  rep.max_abs_err = worst;
  rep.tolerance = kForwardTolerance;
  rep.pass = worst <= kForwardTolerance;
  return rep;
}

// The whole suite, in report order: one gradient row per registered op, the
// forward-equivalence rows, then the pipeline gradient row.
inline std::vector<oracle::OracleReport> gradcheck_suite(std::uint64_t seed) {
  std::vector<oracle::OracleReport> reports;
  Rng rng(derive_seed(seed, 0x96ad));
  for (OpKind kind : differentiable_ops()) {
    reports.push_back(gradcheck_op(kind, rng));
  }
  reports.push_back(forward_check_primitives(rng));
  reports.push_back(forward_check_sci(rng));
  reports.push_back(forward_check_cci(rng));
  reports.push_back(gradcheck_pipeline(seed));
  return reports;
}

}  // namespace cinet
