#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "cinet/autodiff.hpp"
#include "cinet/backbone.hpp"
#include "cinet/cci.hpp"
#include "cinet/error.hpp"
#include "cinet/params.hpp"
#include "cinet/rng.hpp"
#include "cinet/sci.hpp"
#include "cinet/tensor.hpp"

namespace cinet {

struct ModelConfig {
  BackboneConfig backbone;
  int num_classes = 8;
  int proj_dim = 512;

  void validate() const {
    backbone.validate();
    if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
    if (proj_dim < 1) throw ConfigError("proj_dim must be >= 1");
  }
};

namespace detail_model {

inline Tensor init_uniform(Shape shape, double bound, Rng& rng) {
  Tensor t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    t[i] = static_cast<Scalar>(rng.uniform(-bound, bound));
  }
  t.requires_grad = true;
  return t;
}

}  // namespace detail_model

// All learnable tensors from a single seeded stream in fixed name order.
// Weights are uniform in [-sqrt(6/fan_in), sqrt(6/fan_in)] (relu gain) so
// activation scale survives the stacked conv stages; a plain sqrt(1/fan_in)
// bound attenuates activations by ~3x per stage and the net never leaves
// chance at the default learning rate. Biases use the smaller sqrt(1/fan_in).
inline ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  using detail_model::init_uniform;
  Rng rng(derive_seed(seed, 0x1417));
  ModelParams p;
  auto weight_bound = [](int fan_in) { return std::sqrt(6.0 / fan_in); };
  auto bias_bound = [](int fan_in) { return std::sqrt(1.0 / fan_in); };
  int cin = 3;
  for (int i = 0; i < cfg.backbone.stages(); ++i) {
    int cout = cfg.backbone.stage_channels[static_cast<std::size_t>(i)];
    p.values[stage_kernel_name(i)] = init_uniform({3, 3, cin, cout}, weight_bound(9 * cin), rng);
    p.values[stage_bias_name(i)] = init_uniform({cout}, bias_bound(9 * cin), rng);
    cin = cout;
  }
  int c = cfg.backbone.output_channels();
  // the interaction conv starts quiet so the aggregated features begin near
  // the backbone features and the mixing branch grows as gradients demand
  p.values["sci.phi.kernel"] = init_uniform({3, 3, c, c}, 0.3 * weight_bound(9 * c), rng);
  p.values["sci.phi.bias"] = init_uniform({c}, 0.3 * bias_bound(9 * c), rng);
  // gate and projection heads start an order of magnitude smaller: the
  // metric loss then shapes the heads first instead of deforming the shared
  // trunk before the classifier has settled
  p.values["cci.psi.weight"] = init_uniform({1, 2 * c}, 0.1 * weight_bound(2 * c), rng);
  p.values["cci.psi.bias"] = init_uniform({1}, 0.1 * bias_bound(2 * c), rng);
  p.values["cci.proj.weight"] = init_uniform({cfg.proj_dim, c}, 0.1 * weight_bound(c), rng);
  p.values["cci.proj.bias"] = init_uniform({cfg.proj_dim}, 0.1 * bias_bound(c), rng);
  p.values["classifier.weight"] = init_uniform({cfg.num_classes, c}, weight_bound(c), rng);
  p.values["classifier.bias"] = init_uniform({cfg.num_classes}, bias_bound(c), rng);
  return p;
}

// One image through backbone, optional channel interaction, then the
// classifier head. The classifier always reads the pooled feature map; with
// interaction enabled that map is the enhanced one.
struct ImageForward {
  FeatureMap fm;
  SciOutput sci;      // valid only when use_sci
  bool use_sci = false;
  Var pooled;
  Var logits;
};

inline ImageForward forward_image(ParamBind& bind, const Tensor& image, const ModelConfig& cfg,
                                  bool use_sci, SciVariant variant) {
  ImageForward out;
  out.fm = extract(bind, image, cfg.backbone);
  out.use_sci = use_sci;
  if (use_sci) {
    out.sci = sci_forward(bind, out.fm, variant);
    out.pooled = pool_spatial_mean(out.sci.enhanced);
  } else {
    out.pooled = pool_spatial_mean(out.fm.spatial);
  }
  out.logits = fully_connected(out.pooled, bind("classifier.weight"), bind("classifier.bias"));
  return out;
}

inline int argmax_index(const Tensor& v) {
  int best = 0;
  for (std::int64_t i = 1; i < v.numel(); ++i) {
    if (v[i] > v[best]) best = static_cast<int>(i);
  }
  return best;
}

}  // namespace cinet
