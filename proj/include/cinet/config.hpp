#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cinet/backbone.hpp"
#include "cinet/data.hpp"
#include "cinet/error.hpp"
#include "cinet/model.hpp"
#include "cinet/sci.hpp"
#include "cinet/trainer.hpp"

namespace cinet {

// Fully resolved run configuration: defaults, then the JSON config file, then
// command-line overrides. Commands serialize the resolved form next to their
// outputs so every artifact records exactly what produced it.
struct RunConfig {
  SyntheticTaskConfig data;
  BackboneConfig backbone;
  TrainConfig train;

  void validate() const {
    data.validate();
    backbone.validate();
    train.validate();
    if (backbone.input_size != data.image_size) {
      throw ConfigError("backbone input_size must match data image_size");
    }
  }

  ModelConfig model_config() const {
    ModelConfig m;
    m.backbone = backbone;
    m.num_classes = data.num_classes();
    m.proj_dim = train.proj_dim;
    return m;
  }

  void set_seed(std::uint64_t seed) {
    data.seed = seed;
    train.seed = seed;
  }
};

// The named ablation configurations selectable via --variant.
inline void apply_variant_mode(TrainConfig& cfg, const std::string& mode) {
  if (mode == "plain") {
    cfg.sci_enabled = false;
    cfg.cci_enabled = false;
    cfg.gates_forced_zero = false;
  } else if (mode == "sci") {
    cfg.sci_enabled = true;
    cfg.cci_enabled = false;
    cfg.gates_forced_zero = false;
  } else if (mode == "sci-cont") {
    cfg.sci_enabled = true;
    cfg.cci_enabled = true;
    cfg.gates_forced_zero = true;
  } else if (mode == "cin") {
    cfg.sci_enabled = true;
    cfg.cci_enabled = true;
    cfg.gates_forced_zero = false;
  } else {
    throw UsageError("unknown variant '" + mode + "' (expected plain|sci|sci-cont|cin)");
  }
}

inline std::string variant_mode_name(const TrainConfig& cfg) {
  if (!cfg.sci_enabled && !cfg.cci_enabled) return "plain";
  if (cfg.sci_enabled && !cfg.cci_enabled) return "sci";
  if (cfg.sci_enabled && cfg.cci_enabled && cfg.gates_forced_zero) return "sci-cont";
  if (cfg.sci_enabled && cfg.cci_enabled) return "cin";
  return "custom";
}

namespace detail_config {

inline void check_known_keys(const nlohmann::json& obj, const std::string& section,
                             const std::vector<std::string>& known) {
  for (const auto& [key, _] : obj.items()) {
    bool ok = false;
    for (const auto& k : known) ok = ok || k == key;
    if (!ok) {
      std::string where = section.empty() ? key : section + "." + key;
      throw UsageError("unknown config field '" + where + "'");
    }
  }
}

template <class T>
inline T fetch(const nlohmann::json& obj, const std::string& section, const std::string& key,
               T current) {
  if (!obj.contains(key)) return current;
  try {
    return obj.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw UsageError("invalid config field '" + section + "." + key + "'");
  }
}

}  // namespace detail_config

inline void apply_config_json(RunConfig& cfg, const nlohmann::json& j) {
  using detail_config::check_known_keys;
  using detail_config::fetch;
  if (!j.is_object()) throw UsageError("config root must be a JSON object");
  check_known_keys(j, "", {"data", "backbone", "train", "variant"});
  if (j.contains("data")) {
    const auto& d = j.at("data");
    check_known_keys(d, "data",
                     {"num_superclasses", "subclasses_per_superclass", "image_size",
                      "glyph_size", "noise_std", "train_per_class", "val_per_class", "hflip",
                      "seed"});
    cfg.data.num_superclasses = fetch(d, "data", "num_superclasses", cfg.data.num_superclasses);
    cfg.data.subclasses_per_superclass =
        fetch(d, "data", "subclasses_per_superclass", cfg.data.subclasses_per_superclass);
    cfg.data.image_size = fetch(d, "data", "image_size", cfg.data.image_size);
    cfg.data.glyph_size = fetch(d, "data", "glyph_size", cfg.data.glyph_size);
    cfg.data.noise_std = fetch(d, "data", "noise_std", cfg.data.noise_std);
    cfg.data.train_per_class = fetch(d, "data", "train_per_class", cfg.data.train_per_class);
    cfg.data.val_per_class = fetch(d, "data", "val_per_class", cfg.data.val_per_class);
    cfg.data.hflip = fetch(d, "data", "hflip", cfg.data.hflip);
    cfg.data.seed = fetch(d, "data", "seed", cfg.data.seed);
  }
  if (j.contains("backbone")) {
    const auto& b = j.at("backbone");
    check_known_keys(b, "backbone", {"input_size", "stage_channels"});
    cfg.backbone.input_size = fetch(b, "backbone", "input_size", cfg.backbone.input_size);
    cfg.backbone.stage_channels =
        fetch(b, "backbone", "stage_channels", cfg.backbone.stage_channels);
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    check_known_keys(t, "train",
                     {"epochs", "base_lr", "lr_decay", "lr_decay_every", "weight_decay",
                      "momentum", "alpha", "beta", "proj_dim", "seed", "sci_enabled",
                      "sci_variant", "cci_enabled", "gates_forced_zero"});
    cfg.train.epochs = fetch(t, "train", "epochs", cfg.train.epochs);
    cfg.train.base_lr = fetch(t, "train", "base_lr", cfg.train.base_lr);
    cfg.train.lr_decay = fetch(t, "train", "lr_decay", cfg.train.lr_decay);
    cfg.train.lr_decay_every = fetch(t, "train", "lr_decay_every", cfg.train.lr_decay_every);
    cfg.train.weight_decay = fetch(t, "train", "weight_decay", cfg.train.weight_decay);
    cfg.train.momentum = fetch(t, "train", "momentum", cfg.train.momentum);
    cfg.train.alpha = fetch(t, "train", "alpha", cfg.train.alpha);
    cfg.train.beta = fetch(t, "train", "beta", cfg.train.beta);
    cfg.train.proj_dim = fetch(t, "train", "proj_dim", cfg.train.proj_dim);
    cfg.train.seed = fetch(t, "train", "seed", cfg.train.seed);
    cfg.train.sci_enabled = fetch(t, "train", "sci_enabled", cfg.train.sci_enabled);
    std::string sv =
        fetch<std::string>(t, "train", "sci_variant", sci_variant_name(cfg.train.sci_variant));
    if (sv == "negative") {
      cfg.train.sci_variant = SciVariant::negative;
    } else if (sv == "positive") {
      cfg.train.sci_variant = SciVariant::positive;
    } else {
      throw UsageError("invalid config field 'train.sci_variant'");
    }
    cfg.train.cci_enabled = fetch(t, "train", "cci_enabled", cfg.train.cci_enabled);
    cfg.train.gates_forced_zero =
        fetch(t, "train", "gates_forced_zero", cfg.train.gates_forced_zero);
  }
  if (j.contains("variant")) {
    if (!j.at("variant").is_string()) throw UsageError("invalid config field 'variant'");
    apply_variant_mode(cfg.train, j.at("variant").get<std::string>());
  }
}

inline RunConfig load_run_config(const std::optional<std::filesystem::path>& config_path) {
  RunConfig cfg;
  if (config_path) {
    std::ifstream in(*config_path);
    if (!in) throw UsageError("cannot open config file " + config_path->string());
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw UsageError("malformed config JSON: " + std::string(e.what()));
    }
    apply_config_json(cfg, j);
  }
  return cfg;
}

inline nlohmann::json run_config_json(const RunConfig& cfg) {
  nlohmann::json j;
  j["data"] = task_config_json(cfg.data);
  j["backbone"] = {
      {"input_size", cfg.backbone.input_size},
      {"stage_channels", cfg.backbone.stage_channels},
  };
  j["train"] = {
      {"epochs", cfg.train.epochs},
      {"base_lr", cfg.train.base_lr},
      {"lr_decay", cfg.train.lr_decay},
      {"lr_decay_every", cfg.train.lr_decay_every},
      {"weight_decay", cfg.train.weight_decay},
      {"momentum", cfg.train.momentum},
      {"alpha", cfg.train.alpha},
      {"beta", cfg.train.beta},
      {"proj_dim", cfg.train.proj_dim},
      {"seed", cfg.train.seed},
      {"sci_enabled", cfg.train.sci_enabled},
      {"sci_variant", sci_variant_name(cfg.train.sci_variant)},
      {"cci_enabled", cfg.train.cci_enabled},
      {"gates_forced_zero", cfg.train.gates_forced_zero},
  };
  j["variant"] = variant_mode_name(cfg.train);
  return j;
}

inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string config_hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

inline std::string config_hash(const RunConfig& cfg) {
  return config_hash_hex(fnv1a64(run_config_json(cfg).dump()));
}

}  // namespace cinet
