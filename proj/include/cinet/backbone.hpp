#pragma once

#include <string>
#include <vector>

#include "cinet/autodiff.hpp"
#include "cinet/error.hpp"
#include "cinet/params.hpp"
#include "cinet/tensor.hpp"

namespace cinet {

// Small trainable feature extractor: stages of conv3x3 -> relu -> 2x2 mean
// downsample. Spatial extent halves per stage; channel counts are configured
// per stage.
struct BackboneConfig {
  int input_size = 32;
  std::vector<int> stage_channels = {8, 16, 32};

  int stages() const { return static_cast<int>(stage_channels.size()); }
  int output_size() const { return input_size >> stages(); }
  int output_channels() const { return stage_channels.empty() ? 0 : stage_channels.back(); }

  void validate() const {
    if (input_size < 4) throw ConfigError("backbone input_size must be >= 4");
    if (stage_channels.empty()) throw ConfigError("backbone needs at least one stage");
    for (int c : stage_channels) {
      if (c < 1) throw ConfigError("backbone stage channel counts must be positive");
    }
    int s = input_size;
    for (int i = 0; i < stages(); ++i) {
      if (s % 2) {
        throw ConfigError("backbone input_size " + std::to_string(input_size) +
                          " is not divisible by 2^" + std::to_string(stages()));
      }
      s /= 2;
    }
    if (s < 2) throw ConfigError("backbone output spatial extent must be >= 2");
    if (output_channels() < 2) throw ConfigError("backbone output channels must be >= 2");
  }
};

// Backbone output in both layouts used downstream: the spatial map and its
// channels-by-positions flattening (column r*w + q holds position (r, q)).
struct FeatureMap {
  Var spatial;  // [h, w, c]
  Var flat;     // [c, h*w]
  int height = 0;
  int width = 0;
  int channels = 0;

  int positions() const { return height * width; }
};

inline FeatureMap make_feature_map(Var spatial) {
  // copy: recording the flatten op below may reallocate the tape's node
  // storage and invalidate references into it
  Shape s = spatial.shape();
  if (s.size() != 3) {
    throw ShapeError("feature map must be rank-3, got " + shape_str(s));
  }
  FeatureMap fm;
  fm.spatial = spatial;
  fm.flat = flatten_channels(spatial);
  fm.height = s[0];
  fm.width = s[1];
  fm.channels = s[2];
  if (fm.channels < 2 || fm.positions() < 2) {
    throw ShapeError("feature map needs c >= 2 and l >= 2, got " + shape_str(s));
  }
  return fm;
}

inline std::string stage_kernel_name(int stage) {
  return "backbone.stage" + std::to_string(stage) + ".kernel";
}
inline std::string stage_bias_name(int stage) {
  return "backbone.stage" + std::to_string(stage) + ".bias";
}

// Shared (siamese) feature extraction: a pure function of the image under
// fixed parameters.
inline FeatureMap extract(ParamBind& bind, const Tensor& image, const BackboneConfig& config) {
  config.validate();
  Shape expected = {config.input_size, config.input_size, 3};
  if (image.shape() != expected) {
    throw ShapeError("backbone expects image of shape " + shape_str(expected) + ", got " +
                     shape_str(image.shape()));
  }
  Var x = bind.tape().input(image);
  for (int i = 0; i < config.stages(); ++i) {
    x = conv2d_3x3(x, bind(stage_kernel_name(i)), bind(stage_bias_name(i)));
    x = relu(x);
    x = pool_mean_2x2(x);
  }
  return make_feature_map(x);
}

}  // namespace cinet
