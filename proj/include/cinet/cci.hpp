#pragma once

#include <optional>
#include <utility>
#include <vector>

#include "cinet/autodiff.hpp"
#include "cinet/backbone.hpp"
#include "cinet/error.hpp"
#include "cinet/params.hpp"
#include "cinet/sci.hpp"
#include "cinet/tensor.hpp"

namespace cinet {

// Scalar gates controlling how much of the partner image's interaction
// matrix is subtracted. Both come from one shared affine gate network fed
// with the ordered pair of pooled mixed features.
struct CciGates {
  Var eta;    // [1]
  Var gamma;  // [1]
};

struct CciOutput {
  Var weights_ab;  // [c, c]  |W_A - eta * W_B|
  Var weights_ba;  // [c, c]  |W_B - gamma * W_A|
  Var enhanced_a;  // [h, w, c]
  Var enhanced_b;  // [h, w, c]
  CciGates gates;
};

struct CciOptions {
  // eta = gamma = 0 without evaluating the gate network; the contrastive
  // path then reduces exactly to the plain interaction features.
  bool gates_forced_zero = false;
  // Pin the gates to explicit values, bypassing the gate network. Test hook.
  std::optional<std::pair<double, double>> forced_gates;
  // Reproduces the aggregation with image B's residual taken from image A
  // instead of B. Only tests use it; the default is the symmetric form.
  bool residual_b_from_a = false;
};

inline Var pooled_rows(const Var& flat, int h, int w) {
  return pool_spatial_mean(unflatten_channels(flat, h, w));
}

// eta from (mixed_a, mixed_b), gamma from the swapped order, through the one
// shared gate layer.
inline CciGates gate(ParamBind& bind, const Var& mixed_a, const Var& mixed_b, int h, int w) {
  if (mixed_a.shape() != mixed_b.shape()) {
    throw ShapeError("gate inputs differ in shape: " + shape_str(mixed_a.shape()) + " vs " +
                     shape_str(mixed_b.shape()));
  }
  Var pa = pooled_rows(mixed_a, h, w);
  Var pb = pooled_rows(mixed_b, h, w);
  Var weight = bind("cci.psi.weight");
  Var bias = bind("cci.psi.bias");
  CciGates g;
  g.eta = fully_connected(concat(pa, pb), weight, bias);
  g.gamma = fully_connected(concat(pb, pa), weight, bias);
  return g;
}

// Contrastive channel interaction over an ordered pair. Shares the conv
// residual parameters with the single-image path.
inline CciOutput cci_forward(ParamBind& bind, const FeatureMap& fm_a, const FeatureMap& fm_b,
                             const SciOutput& sci_a, const SciOutput& sci_b,
                             const CciOptions& opts = {}) {
  if (fm_a.spatial.shape() != fm_b.spatial.shape()) {
    throw ShapeError("paired feature maps differ in shape: " + shape_str(fm_a.spatial.shape()) +
                     " vs " + shape_str(fm_b.spatial.shape()));
  }
  CciOutput out;
  if (opts.gates_forced_zero) {
    Tape& t = bind.tape();
    out.gates = CciGates{t.input(Tensor::scalar(0)), t.input(Tensor::scalar(0))};
    out.weights_ab = abs(sci_a.weights);
    out.weights_ba = abs(sci_b.weights);
  } else if (opts.forced_gates) {
    Tape& t = bind.tape();
    out.gates = CciGates{t.input(Tensor::scalar(static_cast<Scalar>(opts.forced_gates->first))),
                         t.input(Tensor::scalar(static_cast<Scalar>(opts.forced_gates->second)))};
    out.weights_ab = abs(sub(sci_a.weights, mul(out.gates.eta, sci_b.weights)));
    out.weights_ba = abs(sub(sci_b.weights, mul(out.gates.gamma, sci_a.weights)));
  } else {
    out.gates = gate(bind, sci_a.interacted, sci_b.interacted, fm_a.height, fm_a.width);
    out.weights_ab = abs(sub(sci_a.weights, mul(out.gates.eta, sci_b.weights)));
    out.weights_ba = abs(sub(sci_b.weights, mul(out.gates.gamma, sci_a.weights)));
  }
  Var mixed_a = matmul(out.weights_ab, fm_a.flat);
  Var mixed_b = matmul(out.weights_ba, fm_b.flat);
  Var kernel = bind("sci.phi.kernel");
  Var bias = bind("sci.phi.bias");
  Var conv_a = conv2d_3x3(unflatten_channels(mixed_a, fm_a.height, fm_a.width), kernel, bias);
  Var conv_b = conv2d_3x3(unflatten_channels(mixed_b, fm_b.height, fm_b.width), kernel, bias);
  out.enhanced_a = add(conv_a, fm_a.spatial);
  out.enhanced_b = add(conv_b, opts.residual_b_from_a ? fm_a.spatial : fm_b.spatial);
  return out;
}

// Embedding head for the metric loss: pooled features through one affine
// projection into the metric space.
inline Var project(ParamBind& bind, const Var& enhanced) {
  return fully_connected(pool_spatial_mean(enhanced), bind("cci.proj.weight"),
                         bind("cci.proj.bias"));
}

// Margin contrastive term over two embeddings: squared distance for a
// positive pair, squared hinge on the distance for a negative one.
inline Var contrastive_term(const Var& e_a, const Var& e_b, int same_class, double beta) {
  if (beta <= 0) throw ContractError("contrastive margin must be positive");
  if (e_a.shape() != e_b.shape()) {
    throw ShapeError("embedding shapes differ: " + shape_str(e_a.shape()) + " vs " +
                     shape_str(e_b.shape()));
  }
  Var diff = sub(e_a, e_b);
  Var dist_sq = sum_all(mul(diff, diff));
  if (same_class) return dist_sq;
  Tape& t = *e_a.tape();
  Var margin = t.input(Tensor::scalar(static_cast<Scalar>(beta)));
  Var hinge = relu(sub(margin, sqrt(dist_sq)));
  return mul(hinge, hinge);
}

// mean of per-pair terms
inline Var batch_contrastive_loss(const std::vector<Var>& terms) {
  if (terms.empty()) throw ContractError("contrastive loss over an empty batch");
  Var acc = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return scale(acc, 1.0 / static_cast<double>(terms.size()));
}

inline Var total_loss(const Var& loss_soft, const Var& loss_cont, double alpha) {
  return add(loss_soft, scale(loss_cont, alpha));
}

}  // namespace cinet
