#include <array>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cinet/cli.hpp"

namespace {

// exit codes: 0 success, 1 check/validation failure, 2 usage error
constexpr int kOk = 0;
constexpr int kCheckFailure = 1;
constexpr int kUsage = 2;

struct GlobalArgs {
  std::optional<std::filesystem::path> config;
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> out;
  bool force = false;
};

cinet::RunConfig resolve_config(const GlobalArgs& g, const std::optional<int>& epochs,
                                const std::optional<std::string>& variant,
                                const std::optional<std::string>& sci_variant) {
  cinet::RunConfig cfg = cinet::load_run_config(g.config);
  if (variant) cinet::apply_variant_mode(cfg.train, *variant);
  if (sci_variant) {
    if (*sci_variant == "negative") {
      cfg.train.sci_variant = cinet::SciVariant::negative;
    } else if (*sci_variant == "positive") {
      cfg.train.sci_variant = cinet::SciVariant::positive;
    } else {
      throw cinet::UsageError("unknown --sci-variant '" + *sci_variant + "'");
    }
  }
  if (epochs) cfg.train.epochs = *epochs;
  if (g.seed) cfg.set_seed(*g.seed);
  return cfg;
}

std::filesystem::path require_out(const GlobalArgs& g) {
  if (!g.out) throw cinet::UsageError("this command needs --out <dir>");
  return *g.out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"channel interaction network: synthetic fine-grained training sandbox"};
  app.require_subcommand(1);
  app.fallthrough();  // global flags may follow the subcommand name

  GlobalArgs global;
  app.add_option("--config", global.config, "JSON config file");
  app.add_option("--seed", global.seed, "override every seed in the config");
  app.add_option("--out", global.out, "output directory");
  app.add_flag("--force", global.force, "reuse a non-empty output directory");

  auto* gen = app.add_subcommand("gen", "generate a synthetic dataset directory");

  auto* train = app.add_subcommand("train", "train on a generated dataset");
  std::filesystem::path train_data;
  std::optional<int> train_epochs;
  std::optional<std::string> train_variant;
  std::optional<std::string> train_sci_variant;
  train->add_option("--data", train_data, "dataset directory")->required();
  train->add_option("--epochs", train_epochs, "override train.epochs");
  train->add_option("--variant", train_variant, "plain|sci|sci-cont|cin");
  train->add_option("--sci-variant", train_sci_variant, "negative|positive");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset's val split");
  std::filesystem::path eval_ckpt, eval_data;
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  eval->add_option("--data", eval_data, "dataset directory")->required();

  auto* gradcheck = app.add_subcommand("gradcheck", "run the oracle and gradient suites");

  auto* visualize = app.add_subcommand("visualize", "export channel activation maps");
  std::filesystem::path vis_ckpt, vis_data;
  std::optional<int> vis_image;
  std::vector<int> vis_pair;
  cinet::VisualizeSelection vis_sel;
  visualize->add_option("--checkpoint", vis_ckpt, "checkpoint file")->required();
  visualize->add_option("--data", vis_data, "dataset directory")->required();
  visualize->add_option("--split", vis_sel.split, "train|val (default val)");
  visualize->add_option("--image", vis_image, "image index for single-image maps");
  visualize->add_option("--pair", vis_pair, "two image indices for pair maps")->expected(2);
  visualize->add_option("--channel", vis_sel.channel, "referred channel (default 0)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return e.get_exit_code() == 0 ? kOk : kUsage;
  }

  try {
    if (gen->parsed()) {
      cinet::RunConfig cfg = resolve_config(global, {}, {}, {});
      cinet::cmd_gen(cfg, require_out(global), global.force, std::cout);
      return kOk;
    }
    if (train->parsed()) {
      cinet::RunConfig cfg =
          resolve_config(global, train_epochs, train_variant, train_sci_variant);
      cinet::cmd_train(cfg, train_data, require_out(global), global.force, std::cout);
      return kOk;
    }
    if (eval->parsed()) {
      cinet::cmd_eval(eval_ckpt, eval_data, global.out, std::cout);
      return kOk;
    }
    if (gradcheck->parsed()) {
      cinet::RunConfig cfg = resolve_config(global, {}, {}, {});
      return cinet::cmd_gradcheck(cfg, std::cout) ? kOk : kCheckFailure;
    }
    if (visualize->parsed()) {
      if (vis_image) vis_sel.image = *vis_image;
      if (!vis_pair.empty()) vis_sel.pair = std::array<int, 2>{vis_pair[0], vis_pair[1]};
      cinet::cmd_visualize(vis_ckpt, vis_data, vis_sel, require_out(global), global.force,
                           std::cout);
      return kOk;
    }
  } catch (const cinet::UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const cinet::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kCheckFailure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kCheckFailure;
  }
  return kUsage;
}
