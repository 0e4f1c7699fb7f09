#pragma once

// Command implementations behind the cinet binary. Kept as plain functions
// over streams and paths so the test suites can drive them in-process.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cinet/checkpoint.hpp"
#include "cinet/config.hpp"
#include "cinet/data.hpp"
#include "cinet/error.hpp"
#include "cinet/gradcheck.hpp"
#include "cinet/model.hpp"
#include "cinet/trainer.hpp"
#include "cinet/visualize.hpp"

namespace cinet {

namespace detail_cli {

inline void ensure_out_dir(const std::filesystem::path& dir, bool force) {
  namespace fs = std::filesystem;
  if (fs::exists(dir) && !fs::is_directory(dir)) {
    throw UsageError("output path " + dir.string() + " exists and is not a directory");
  }
  if (fs::exists(dir) && !fs::is_empty(dir) && !force) {
    throw UsageError("output directory " + dir.string() +
                     " is not empty; pass --force to reuse it");
  }
  fs::create_directories(dir);
}

inline void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

inline void write_resolved_config(const RunConfig& cfg, const std::filesystem::path& dir) {
  write_json_file(dir / "resolved_config.json", run_config_json(cfg));
}

inline std::string file_hash(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return config_hash_hex(fnv1a64(bytes));
}

inline nlohmann::json checkpoint_meta(const RunConfig& cfg) {
  return nlohmann::json{
      {"config", run_config_json(cfg)},
      {"config_hash", config_hash(cfg)},
      {"seed", cfg.train.seed},
      {"num_classes", cfg.data.num_classes()},
  };
}

inline RunConfig config_from_checkpoint(const nlohmann::json& header) {
  RunConfig cfg;
  try {
    apply_config_json(cfg, header.at("config"));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint header lacks a config: ") + e.what());
  }
  return cfg;
}

}  // namespace detail_cli

// gen: synthesize a dataset directory (raw float64 arrays + JSON manifest).
inline void cmd_gen(const RunConfig& cfg, const std::filesystem::path& out_dir, bool force,
                    std::ostream& os) {
  cfg.data.validate();
  detail_cli::ensure_out_dir(out_dir, force);
  Dataset ds = generate(cfg.data);
  export_dataset(ds, out_dir);
  detail_cli::write_resolved_config(cfg, out_dir);
  nlohmann::json summary{
      {"command", "gen"},
      {"out", out_dir.string()},
      {"num_classes", cfg.data.num_classes()},
      {"train_images", ds.train.size()},
      {"val_images", ds.val.size()},
      {"manifest_hash", detail_cli::file_hash(out_dir / "manifest.json")},
  };
  os << summary.dump() << "\n";
}

struct TrainOutcome {
  double best_val_acc = 0.0;
  int best_epoch = 0;
  double final_val_acc = 0.0;
  std::filesystem::path best_checkpoint;
  std::filesystem::path last_checkpoint;
};

// train: pair-batched SGD with per-epoch metrics lines, a rolling last
// checkpoint and the best-validation checkpoint.
inline TrainOutcome cmd_train(RunConfig cfg, const std::filesystem::path& data_dir,
                              const std::filesystem::path& out_dir, bool force,
                              std::ostream& os) {
  Dataset ds = import_dataset(data_dir);
  cfg.data = ds.config;  // the dataset on disk is authoritative for its section
  cfg.validate();
  detail_cli::ensure_out_dir(out_dir, force);
  detail_cli::write_resolved_config(cfg, out_dir);

  ModelConfig model_cfg = cfg.model_config();
  nlohmann::json meta = detail_cli::checkpoint_meta(cfg);
  TrainOutcome outcome;
  outcome.best_checkpoint = out_dir / "best.ckpt";
  outcome.last_checkpoint = out_dir / "last.ckpt";

  std::ofstream metrics(out_dir / "metrics.jsonl");
  if (!metrics) throw DataError("cannot write metrics in " + out_dir.string());

  TrainResult result;
  try {
    result = run_train(ds, model_cfg, cfg.train, [&](const EpochMetrics& m, const ModelParams& p) {
      nlohmann::json line{
          {"epoch", m.epoch},         {"lr", m.lr},
          {"loss_total", m.loss_total}, {"loss_soft", m.loss_soft},
          {"loss_cont", m.loss_cont},   {"train_acc", m.train_acc},
          {"val_acc", m.val_acc},
      };
      metrics << line.dump() << "\n";
      save_checkpoint(p, outcome.last_checkpoint, meta);
    });
  } catch (const DivergenceError& e) {
    nlohmann::json err{{"command", "train"},
                       {"error", e.what()},
                       {"last_checkpoint", outcome.last_checkpoint.string()}};
    os << err.dump() << "\n";
    throw;
  }

  save_checkpoint(result.best_params, outcome.best_checkpoint, meta);
  outcome.best_val_acc = result.best_val_acc;
  outcome.best_epoch = result.best_epoch;
  outcome.final_val_acc = result.history.back().val_acc;

  nlohmann::json summary{
      {"command", "train"},
      {"epochs", cfg.train.epochs},
      {"variant", variant_mode_name(cfg.train)},
      {"best_val_acc", outcome.best_val_acc},
      {"best_epoch", outcome.best_epoch},
      {"final_val_acc", outcome.final_val_acc},
      {"best_checkpoint", outcome.best_checkpoint.string()},
      {"config_hash", config_hash(cfg)},
  };
  detail_cli::write_json_file(out_dir / "summary.json", summary);
  os << summary.dump() << "\n";
  return outcome;
}

struct EvalOutcome {
  double val_acc = 0.0;
  int count = 0;
};

// eval: single-image inference over the validation split of a dataset.
inline EvalOutcome cmd_eval(const std::filesystem::path& checkpoint_path,
                            const std::filesystem::path& data_dir,
                            const std::optional<std::filesystem::path>& out_dir,
                            std::ostream& os) {
  LoadedCheckpoint ckpt = load_checkpoint(checkpoint_path);
  RunConfig cfg = detail_cli::config_from_checkpoint(ckpt.header);
  Dataset ds = import_dataset(data_dir);
  int ckpt_classes = ckpt.header.value("num_classes", cfg.data.num_classes());
  if (ckpt_classes != ds.config.num_classes()) {
    throw CheckpointError("checkpoint trained for " + std::to_string(ckpt_classes) +
                          " classes, dataset has " + std::to_string(ds.config.num_classes()));
  }
  if (ds.config.image_size != cfg.backbone.input_size) {
    throw CheckpointError("checkpoint expects images of size " +
                          std::to_string(cfg.backbone.input_size) + ", dataset has " +
                          std::to_string(ds.config.image_size));
  }
  ModelConfig model_cfg = cfg.model_config();
  EvalOutcome outcome;
  outcome.val_acc = evaluate_top1(ds.val, ckpt.params, model_cfg, cfg.train.sci_enabled,
                                  cfg.train.sci_variant);
  outcome.count = static_cast<int>(ds.val.size());
  nlohmann::json report{
      {"command", "eval"},
      {"checkpoint", checkpoint_path.string()},
      {"val_acc", outcome.val_acc},
      {"count", outcome.count},
      {"config_hash", ckpt.header.value("config_hash", "")},
  };
  os << report.dump() << "\n";
  if (out_dir) {
    detail_cli::ensure_out_dir(*out_dir, true);
    detail_cli::write_json_file(*out_dir / "eval_report.json", report);
    detail_cli::write_resolved_config(cfg, *out_dir);
  }
  return outcome;
}

// gradcheck: oracle suite over randomized micro-instances; one JSON report
// line per check. Returns false when any tolerance is breached.
inline bool cmd_gradcheck(const RunConfig& cfg, std::ostream& os) {
  bool all_pass = true;
  for (const auto& rep : gradcheck_suite(cfg.train.seed)) {
    nlohmann::json line{
        {"op", rep.op},
        {"max_abs_err", rep.max_abs_err},
        {"max_rel_err", rep.max_rel_err},
        {"tolerance", rep.tolerance},
        {"pass", rep.pass},
    };
    os << line.dump() << "\n";
    all_pass = all_pass && rep.pass;
  }
  return all_pass;
}

struct VisualizeSelection {
  std::string split = "val";
  std::optional<int> image;            // single-image mode
  std::optional<std::array<int, 2>> pair;  // pair mode
  int channel = 0;
  int topk = 3;
};

namespace detail_cli {

inline const std::vector<LabeledImage>& pick_split(const Dataset& ds, const std::string& name) {
  if (name == "train") return ds.train;
  if (name == "val") return ds.val;
  throw UsageError("unknown split '" + name + "' (expected train|val)");
}

inline const LabeledImage& pick_image(const std::vector<LabeledImage>& split, int index) {
  if (index < 0 || index >= static_cast<int>(split.size())) {
    throw IndexError("image index " + std::to_string(index) + " out of range [0," +
                     std::to_string(split.size()) + ")");
  }
  return split[static_cast<std::size_t>(index)];
}

}  // namespace detail_cli

// visualize: channel activation maps as PGM files plus a JSON sidecar of the
// raw values and chosen channel indices. Single-image mode writes the
// referred channel, its top-3 complementary channels and the post-interaction
// channel; pair mode writes the channel-mean contrastive maps of both images.
inline void cmd_visualize(const std::filesystem::path& checkpoint_path,
                          const std::filesystem::path& data_dir, const VisualizeSelection& sel,
                          const std::filesystem::path& out_dir, bool force, std::ostream& os) {
  if (sel.image.has_value() == sel.pair.has_value()) {
    throw UsageError("visualize needs exactly one of --image or --pair");
  }
  LoadedCheckpoint ckpt = load_checkpoint(checkpoint_path);
  RunConfig cfg = detail_cli::config_from_checkpoint(ckpt.header);
  if (!cfg.train.sci_enabled) {
    throw UsageError("visualize requires a checkpoint trained with the interaction module");
  }
  Dataset ds = import_dataset(data_dir);
  if (ds.config.image_size != cfg.backbone.input_size) {
    throw CheckpointError("checkpoint expects images of size " +
                          std::to_string(cfg.backbone.input_size) + ", dataset has " +
                          std::to_string(ds.config.image_size));
  }
  detail_cli::ensure_out_dir(out_dir, force);
  const auto& split = detail_cli::pick_split(ds, sel.split);
  ModelConfig model_cfg = cfg.model_config();
  SciVariant variant = cfg.train.sci_variant;

  nlohmann::json sidecar{
      {"checkpoint", checkpoint_path.string()},
      {"config_hash", ckpt.header.value("config_hash", "")},
      {"split", sel.split},
  };

  Tape tape;
  ParamBind bind(tape, ckpt.params, /*trainable=*/false);
  if (sel.image) {
    const LabeledImage& img = detail_cli::pick_image(split, *sel.image);
    FeatureMap fm = extract(bind, img.pixels, cfg.backbone);
    SciOutput sci = sci_forward(bind, fm, variant);
    int c = fm.channels;
    if (sel.channel < 0 || sel.channel >= c) {
      throw IndexError("channel " + std::to_string(sel.channel) + " out of range [0," +
                       std::to_string(c) + ")");
    }
    SciWeights weights{sci.weights.value(), variant};
    std::vector<int> comp = complementary_topk(weights, sel.channel, sel.topk);
    Tensor interacted_spatial =
        unflatten_channels(sci.interacted, fm.height, fm.width).value();

    ActivationMap referred = channel_slice(fm.spatial.value(), sel.channel);
    write_pgm(out_dir / "referred.pgm", referred);
    sidecar["mode"] = "single";
    sidecar["image_index"] = *sel.image;
    sidecar["class_id"] = img.class_id;
    sidecar["referred_channel"] = sel.channel;
    sidecar["complementary_channels"] = comp;
    sidecar["maps"]["referred"] = map_json(referred);
    std::vector<double> row;
    for (int j = 0; j < c; ++j) row.push_back(weights.matrix.at(sel.channel, j));
    sidecar["weights_row"] = row;
    for (std::size_t i = 0; i < comp.size(); ++i) {
      ActivationMap m = channel_slice(fm.spatial.value(), comp[i]);
      std::string name = "comp_" + std::to_string(i);
      write_pgm(out_dir / (name + ".pgm"), m);
      sidecar["maps"][name] = map_json(m);
    }
    ActivationMap post = channel_slice(interacted_spatial, sel.channel);
    write_pgm(out_dir / "post_sci.pgm", post);
    sidecar["maps"]["post_sci"] = map_json(post);
  } else {
    const LabeledImage& img_a = detail_cli::pick_image(split, (*sel.pair)[0]);
    const LabeledImage& img_b = detail_cli::pick_image(split, (*sel.pair)[1]);
    FeatureMap fa = extract(bind, img_a.pixels, cfg.backbone);
    FeatureMap fb = extract(bind, img_b.pixels, cfg.backbone);
    SciOutput sa = sci_forward(bind, fa, variant);
    SciOutput sb = sci_forward(bind, fb, variant);
    CciOptions opts;
    opts.gates_forced_zero = cfg.train.gates_forced_zero;
    CciOutput cci = cci_forward(bind, fa, fb, sa, sb, opts);
    ActivationMap mean_a = channel_mean(cci.enhanced_a.value());
    ActivationMap mean_b = channel_mean(cci.enhanced_b.value());
    write_pgm(out_dir / "cci_mean_a.pgm", mean_a);
    write_pgm(out_dir / "cci_mean_b.pgm", mean_b);
    sidecar["mode"] = "pair";
    sidecar["pair_indices"] = {(*sel.pair)[0], (*sel.pair)[1]};
    sidecar["class_ids"] = {img_a.class_id, img_b.class_id};
    sidecar["same_class"] = img_a.class_id == img_b.class_id;
    sidecar["eta"] = static_cast<double>(cci.gates.eta.value()[0]);
    sidecar["gamma"] = static_cast<double>(cci.gates.gamma.value()[0]);
    sidecar["maps"]["cci_mean_a"] = map_json(mean_a);
    sidecar["maps"]["cci_mean_b"] = map_json(mean_b);
  }
  detail_cli::write_json_file(out_dir / "maps.json", sidecar);
  detail_cli::write_resolved_config(cfg, out_dir);
  nlohmann::json summary{{"command", "visualize"}, {"out", out_dir.string()},
                         {"mode", sel.image ? "single" : "pair"}};
  os << summary.dump() << "\n";
}

}  // namespace cinet
