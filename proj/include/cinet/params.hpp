#pragma once

#include <map>
#include <string>
#include <vector>

#include "cinet/autodiff.hpp"
#include "cinet/error.hpp"
#include "cinet/tensor.hpp"

namespace cinet {

// All learnable tensors, addressable by stable dotted names. Shapes are fixed
// at construction; save/load must round-trip names and values exactly.
struct ModelParams {
  std::map<std::string, Tensor> values;

  Tensor& at(const std::string& name) {
    auto it = values.find(name);
    if (it == values.end()) throw IndexError("unknown parameter '" + name + "'");
    return it->second;
  }
  const Tensor& at(const std::string& name) const {
    auto it = values.find(name);
    if (it == values.end()) throw IndexError("unknown parameter '" + name + "'");
    return it->second;
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(values.size());
    for (const auto& [name, _] : values) out.push_back(name);
    return out;
  }

  // convention: weight decay skips every tensor named "*.bias"
  static bool is_bias(const std::string& name) {
    return name.size() >= 5 && name.compare(name.size() - 5, 5, ".bias") == 0;
  }
};

// Binds named parameters onto a tape, one leaf per name, so a parameter used
// by several paths contributes a single accumulated gradient.
class ParamBind {
 public:
  ParamBind(Tape& tape, const ModelParams& params, bool trainable = true)
      : tape_(tape), params_(params), trainable_(trainable) {}

  Var operator()(const std::string& name) {
    if (trainable_) return tape_.param(name, params_.at(name));
    return tape_.input(params_.at(name));
  }

  Tape& tape() { return tape_; }

 private:
  Tape& tape_;
  const ModelParams& params_;
  bool trainable_;
};

}  // namespace cinet
