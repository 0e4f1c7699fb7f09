#pragma once

#include <algorithm>
#include <numeric>
#include <vector>

#include "cinet/autodiff.hpp"
#include "cinet/backbone.hpp"
#include "cinet/error.hpp"
#include "cinet/params.hpp"
#include "cinet/tensor.hpp"

namespace cinet {

// The default (negative) variant softmaxes the negated channel gram matrix,
// emphasizing channels least similar to the referred one; the positive
// variant keeps the sign and emphasizes similar channels instead.
enum class SciVariant { negative, positive };

inline const char* sci_variant_name(SciVariant v) {
  return v == SciVariant::negative ? "negative" : "positive";
}

struct SciWeights {
  Tensor matrix;  // [c, c], rows sum to 1
  SciVariant variant = SciVariant::negative;
};

struct SciOutput {
  Var weights;     // [c, c]
  Var interacted;  // [c, l]   channel-mixed features
  Var enhanced;    // [h, w, c] conv residual added back onto the input map
  SciVariant variant = SciVariant::negative;
};

// Pre-softmax interaction logits: -(X X^T) for the negative variant, +(X X^T)
// for the positive one. Exposed separately so the sign relation between the
// two variants stays directly testable.
inline Var sci_logits(const Var& flat, SciVariant variant) {
  detail::require_rank(flat, 2, "sci_logits");
  if (flat.shape()[0] < 2) {
    throw ShapeError("channel interaction needs c >= 2, got " + shape_str(flat.shape()));
  }
  Var gram = matmul(flat, transpose(flat));
  return variant == SciVariant::negative ? scale(gram, -1.0) : gram;
}

inline Var sci_weights_var(const Var& flat, SciVariant variant) {
  return row_softmax(sci_logits(flat, variant));
}

// Convenience evaluation on a plain tensor (visualization, tests).
inline SciWeights sci_weights(const Tensor& flat, SciVariant variant) {
  Tape tape;
  Var x = tape.input(flat);
  return SciWeights{sci_weights_var(x, variant).value(), variant};
}

// Channel mixing plus conv residual aggregation over one feature map.
inline SciOutput sci_forward(ParamBind& bind, const FeatureMap& fm, SciVariant variant) {
  SciOutput out;
  out.variant = variant;
  out.weights = sci_weights_var(fm.flat, variant);
  out.interacted = matmul(out.weights, fm.flat);
  Var spatial = unflatten_channels(out.interacted, fm.height, fm.width);
  Var mixed = conv2d_3x3(spatial, bind("sci.phi.kernel"), bind("sci.phi.bias"));
  out.enhanced = add(mixed, fm.spatial);
  return out;
}

// Indices of the k largest entries in one row of the interaction matrix,
// descending; ties resolved toward the lower index.
inline std::vector<int> complementary_topk(const SciWeights& weights, int channel, int k) {
  const Tensor& w = weights.matrix;
  int c = w.extent(0);
  if (channel < 0 || channel >= c) {
    throw IndexError("channel " + std::to_string(channel) + " out of range [0," +
                     std::to_string(c) + ")");
  }
  if (k < 1 || k > c) {
    throw IndexError("top-k count " + std::to_string(k) + " out of range [1," +
                     std::to_string(c) + "]");
  }
  std::vector<int> idx(static_cast<std::size_t>(c));
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](int a, int b) {
    Scalar va = w.at(channel, a);
    Scalar vb = w.at(channel, b);
    if (va != vb) return va > vb;
    return a < b;
  });
  idx.resize(static_cast<std::size_t>(k));
  return idx;
}

}  // namespace cinet
