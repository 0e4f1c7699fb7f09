#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "cinet/cli.hpp"

using namespace cinet;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const char* tag) {
  fs::path dir = fs::temp_directory_path() / (std::string("cinet_cli_") + tag);
  fs::remove_all(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

int count_lines(const std::string& s) {
  int n = 0;
  for (char c : s) n += c == '\n';
  return n;
}

// small task so command tests stay quick
RunConfig small_config() {
  RunConfig cfg;
  cfg.data.image_size = 16;
  cfg.data.glyph_size = 4;
  cfg.data.train_per_class = 5;
  cfg.data.val_per_class = 2;
  cfg.backbone.input_size = 16;
  cfg.backbone.stage_channels = {4, 8};
  cfg.train.epochs = 2;
  cfg.train.proj_dim = 8;
  return cfg;
}

int run_cli(const std::string& args) {
  std::string cmd = std::string(CINET_BIN) + " " + args + " > /dev/null 2>&1";
  int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

}  // namespace

TEST(CmdGen, WritesDatasetAndConfig) {
  RunConfig cfg = small_config();
  fs::path out = temp_dir("gen");
  std::ostringstream os;
  cmd_gen(cfg, out, false, os);
  EXPECT_TRUE(fs::exists(out / "manifest.json"));
  EXPECT_TRUE(fs::exists(out / "train.f64"));
  EXPECT_TRUE(fs::exists(out / "val.f64"));
  EXPECT_TRUE(fs::exists(out / "resolved_config.json"));
  nlohmann::json summary = nlohmann::json::parse(os.str());
  EXPECT_EQ(summary.at("num_classes"), 8);
  EXPECT_EQ(summary.at("train_images"), 40);

  // refuses to clobber without force, then succeeds with it
  EXPECT_THROW(cmd_gen(cfg, out, false, os), UsageError);
  std::ostringstream os2;
  cmd_gen(cfg, out, true, os2);
  nlohmann::json again = nlohmann::json::parse(os2.str());
  EXPECT_EQ(summary.at("manifest_hash"), again.at("manifest_hash"));
  fs::remove_all(out);
}

TEST(Config, UnknownFieldIsNamedInUsageError) {
  RunConfig cfg;
  try {
    apply_config_json(cfg, nlohmann::json{{"data", {{"bogus_field", 1}}}});
    FAIL() << "expected UsageError";
  } catch (const UsageError& e) {
    EXPECT_NE(std::string(e.what()).find("data.bogus_field"), std::string::npos);
  }
  EXPECT_THROW(apply_config_json(cfg, nlohmann::json{{"train", {{"epochs", "ten"}}}}),
               UsageError);
  EXPECT_THROW(apply_config_json(cfg, nlohmann::json{{"nonsense", 1}}), UsageError);
}

TEST(Config, VariantModesMapToFlags) {
  RunConfig cfg;
  apply_variant_mode(cfg.train, "plain");
  EXPECT_FALSE(cfg.train.sci_enabled);
  EXPECT_FALSE(cfg.train.cci_enabled);
  apply_variant_mode(cfg.train, "sci");
  EXPECT_TRUE(cfg.train.sci_enabled);
  EXPECT_FALSE(cfg.train.cci_enabled);
  apply_variant_mode(cfg.train, "sci-cont");
  EXPECT_TRUE(cfg.train.cci_enabled);
  EXPECT_TRUE(cfg.train.gates_forced_zero);
  apply_variant_mode(cfg.train, "cin");
  EXPECT_TRUE(cfg.train.cci_enabled);
  EXPECT_FALSE(cfg.train.gates_forced_zero);
  EXPECT_EQ(variant_mode_name(cfg.train), "cin");
  EXPECT_THROW(apply_variant_mode(cfg.train, "turbo"), UsageError);
}

TEST(Config, HashIsStableAndSensitive) {
  RunConfig a = small_config();
  RunConfig b = small_config();
  EXPECT_EQ(config_hash(a), config_hash(b));
  b.train.alpha = 1.0;
  EXPECT_NE(config_hash(a), config_hash(b));
}

TEST(CmdTrain, OneEpochWritesOneMetricsLine) {
  RunConfig cfg = small_config();
  cfg.train.epochs = 1;
  fs::path data = temp_dir("train1_data");
  fs::path out = temp_dir("train1_out");
  std::ostringstream os;
  cmd_gen(cfg, data, false, os);
  cmd_train(cfg, data, out, false, os);
  std::string metrics = slurp(out / "metrics.jsonl");
  EXPECT_EQ(count_lines(metrics), 1);
  nlohmann::json line = nlohmann::json::parse(metrics);
  EXPECT_EQ(line.at("epoch"), 0);
  EXPECT_DOUBLE_EQ(line.at("lr").get<double>(), cfg.train.base_lr);
  EXPECT_TRUE(fs::exists(out / "best.ckpt"));
  EXPECT_TRUE(fs::exists(out / "last.ckpt"));
  EXPECT_TRUE(fs::exists(out / "summary.json"));
  fs::remove_all(data);
  fs::remove_all(out);
}

TEST(CmdTrain, SameSeedSameBytes) {
  RunConfig cfg = small_config();
  fs::path data = temp_dir("train2_data");
  fs::path o1 = temp_dir("train2_a");
  fs::path o2 = temp_dir("train2_b");
  std::ostringstream os;
  cmd_gen(cfg, data, false, os);
  cmd_train(cfg, data, o1, false, os);
  cmd_train(cfg, data, o2, false, os);
  EXPECT_EQ(slurp(o1 / "metrics.jsonl"), slurp(o2 / "metrics.jsonl"));
  EXPECT_EQ(slurp(o1 / "best.ckpt"), slurp(o2 / "best.ckpt"));
  EXPECT_EQ(slurp(o1 / "last.ckpt"), slurp(o2 / "last.ckpt"));
  fs::remove_all(data);
  fs::remove_all(o1);
  fs::remove_all(o2);
}

TEST(CmdEval, ReproducesBestValAccuracy) {
  RunConfig cfg = small_config();
  fs::path data = temp_dir("eval_data");
  fs::path out = temp_dir("eval_out");
  std::ostringstream os;
  cmd_gen(cfg, data, false, os);
  TrainOutcome trained = cmd_train(cfg, data, out, false, os);

  std::ostringstream eos;
  EvalOutcome eval = cmd_eval(trained.best_checkpoint, data, std::nullopt, eos);
  EXPECT_DOUBLE_EQ(eval.val_acc, trained.best_val_acc);
  nlohmann::json report = nlohmann::json::parse(eos.str());
  EXPECT_EQ(report.at("config_hash"), config_hash(cfg));
  fs::remove_all(data);
  fs::remove_all(out);
}

TEST(CmdEval, ClassCountMismatchIsCheckpointError) {
  RunConfig cfg = small_config();
  fs::path data = temp_dir("mismatch_data");
  fs::path out = temp_dir("mismatch_out");
  std::ostringstream os;
  cmd_gen(cfg, data, false, os);
  cmd_train(cfg, data, out, false, os);

  RunConfig other = small_config();
  other.data.subclasses_per_superclass = 2;  // 4 classes instead of 8
  fs::path data4 = temp_dir("mismatch_data4");
  cmd_gen(other, data4, false, os);
  EXPECT_THROW(cmd_eval(out / "best.ckpt", data4, std::nullopt, os), CheckpointError);
  fs::remove_all(data);
  fs::remove_all(data4);
  fs::remove_all(out);
}

// Untrained parameters sit near chance on the validation split: a fresh
// net predicts by superclass cluster, so single seeds can land on 0 or 0.25;
// the 5-seed mean concentrates near 1/8.
TEST(CmdEval, UntrainedParamsNearChance) {
  RunConfig cfg;  // default 8-class task, 80 validation images
  cfg.data.train_per_class = 1;
  Dataset ds = generate(cfg.data);
  ModelConfig mc = cfg.model_config();
  double mean = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    ModelParams params = init_params(mc, seed);
    mean += evaluate_top1(ds.val, params, mc, true, SciVariant::negative) / 5.0;
  }
  EXPECT_GE(mean, 0.02);
  EXPECT_LE(mean, 0.30);
}

TEST(CmdGradcheck, PassesAndListsEveryOp) {
  RunConfig cfg;
  std::ostringstream os;
  EXPECT_TRUE(cmd_gradcheck(cfg, os));
  std::istringstream lines(os.str());
  std::string line;
  std::set<std::string> ops;
  while (std::getline(lines, line)) {
    nlohmann::json row = nlohmann::json::parse(line);
    EXPECT_TRUE(row.at("pass").get<bool>()) << row.dump();
    ops.insert(row.at("op").get<std::string>());
  }
  for (OpKind kind : differentiable_ops()) {
    EXPECT_TRUE(ops.count(op_name(kind))) << op_name(kind);
  }
  EXPECT_TRUE(ops.count("pipeline_total_loss"));
  EXPECT_TRUE(ops.count("sci_forward_vs_oracle"));
  EXPECT_TRUE(ops.count("cci_forward_vs_oracle"));
}

TEST(CmdVisualize, SingleImageEmitsFiveMapsPlusSidecar) {
  RunConfig cfg = small_config();
  fs::path data = temp_dir("vis_data");
  fs::path train_out = temp_dir("vis_train");
  fs::path vis_out = temp_dir("vis_maps");
  std::ostringstream os;
  cmd_gen(cfg, data, false, os);
  TrainOutcome trained = cmd_train(cfg, data, train_out, false, os);

  VisualizeSelection sel;
  sel.image = 3;
  sel.channel = 2;
  cmd_visualize(trained.best_checkpoint, data, sel, vis_out, false, os);

  int pgm_count = 0;
  for (const auto& entry : fs::directory_iterator(vis_out)) {
    if (entry.path().extension() == ".pgm") pgm_count++;
  }
  EXPECT_EQ(pgm_count, 5);  // referred + 3 complementary + post-interaction
  ASSERT_TRUE(fs::exists(vis_out / "maps.json"));

  nlohmann::json sidecar = nlohmann::json::parse(slurp(vis_out / "maps.json"));
  EXPECT_EQ(sidecar.at("referred_channel"), 2);
  ASSERT_EQ(sidecar.at("complementary_channels").size(), 3u);

  // indices must agree with a fresh top-k over the same weights
  LoadedCheckpoint ckpt = load_checkpoint(trained.best_checkpoint);
  Dataset ds = import_dataset(data);
  Tape tape;
  ParamBind bind(tape, ckpt.params, false);
  FeatureMap fm = extract(bind, ds.val[3].pixels, cfg.backbone);
  SciOutput sci = sci_forward(bind, fm, SciVariant::negative);
  SciWeights w{sci.weights.value(), SciVariant::negative};
  std::vector<int> expected = complementary_topk(w, 2, 3);
  EXPECT_EQ(sidecar.at("complementary_channels").get<std::vector<int>>(), expected);

  // P5 header with the feature-map geometry
  std::string pgm = slurp(vis_out / "referred.pgm");
  EXPECT_EQ(pgm.rfind("P5\n4 4\n255\n", 0), 0u);

  fs::remove_all(data);
  fs::remove_all(train_out);
  fs::remove_all(vis_out);
}

TEST(CmdVisualize, PairModeAndUsageErrors) {
  RunConfig cfg = small_config();
  fs::path data = temp_dir("vispair_data");
  fs::path train_out = temp_dir("vispair_train");
  fs::path vis_out = temp_dir("vispair_maps");
  std::ostringstream os;
  cmd_gen(cfg, data, false, os);
  TrainOutcome trained = cmd_train(cfg, data, train_out, false, os);

  VisualizeSelection pair_sel;
  pair_sel.pair = {0, 9};
  cmd_visualize(trained.best_checkpoint, data, pair_sel, vis_out, false, os);
  EXPECT_TRUE(fs::exists(vis_out / "cci_mean_a.pgm"));
  EXPECT_TRUE(fs::exists(vis_out / "cci_mean_b.pgm"));
  nlohmann::json sidecar = nlohmann::json::parse(slurp(vis_out / "maps.json"));
  EXPECT_EQ(sidecar.at("mode"), "pair");
  EXPECT_TRUE(sidecar.contains("eta"));
  EXPECT_TRUE(sidecar.contains("gamma"));

  VisualizeSelection both;
  both.image = 0;
  both.pair = {0, 1};
  EXPECT_THROW(
      cmd_visualize(trained.best_checkpoint, data, both, temp_dir("vis_bad"), false, os),
      UsageError);
  VisualizeSelection neither;
  EXPECT_THROW(
      cmd_visualize(trained.best_checkpoint, data, neither, temp_dir("vis_bad2"), false, os),
      UsageError);

  fs::remove_all(data);
  fs::remove_all(train_out);
  fs::remove_all(vis_out);
}

// A diverging run aborts with the rolling checkpoint path in the error line.
TEST(CmdTrain, DivergenceAbortsWithLastCheckpoint) {
  RunConfig cfg = small_config();
  cfg.train.base_lr = 1e9;
  cfg.train.epochs = 4;
  fs::path data = temp_dir("div_data");
  fs::path out = temp_dir("div_out");
  std::ostringstream os;
  cmd_gen(cfg, data, false, os);
  std::ostringstream tos;
  EXPECT_THROW(cmd_train(cfg, data, out, false, tos), DivergenceError);
  nlohmann::json err = nlohmann::json::parse(tos.str());
  EXPECT_EQ(err.at("command"), "train");
  EXPECT_TRUE(err.contains("last_checkpoint"));
  fs::remove_all(data);
  fs::remove_all(out);
}

TEST(ConstantMap, RendersMidGray) {
  ActivationMap m;
  m.height = 2;
  m.width = 2;
  m.values = {3.5, 3.5, 3.5, 3.5};
  auto gray = to_gray(m);
  for (auto v : gray) EXPECT_EQ(v, 128);
}

// exit-code contract of the installed binary
TEST(Binary, ExitCodes) {
  EXPECT_EQ(run_cli(""), 2);                       // missing subcommand
  EXPECT_EQ(run_cli("--bogus-flag gen"), 2);       // unknown flag
  EXPECT_EQ(run_cli("gen"), 2);                    // gen without --out
  fs::path out = temp_dir("bin_gen");
  EXPECT_EQ(run_cli("gen --out " + out.string()), 0);
  EXPECT_EQ(run_cli("gen --out " + out.string()), 2);  // non-empty without --force
  fs::remove_all(out);
}

// a config file feeds the command through --config
TEST(Binary, ConfigFileIsApplied) {
  fs::path dir = temp_dir("bin_cfg");
  fs::create_directories(dir);
  fs::path cfg_path = dir / "config.json";
  {
    std::ofstream cfg(cfg_path);
    cfg << R"({"data": {"num_superclasses": 1, "train_per_class": 5, "val_per_class": 1}})";
  }
  fs::path out = dir / "ds";
  ASSERT_EQ(run_cli("gen --config " + cfg_path.string() + " --out " + out.string()), 0);
  Dataset ds = import_dataset(out);
  EXPECT_EQ(ds.config.num_classes(), 4);
  EXPECT_EQ(ds.train.size(), 20u);

  // unknown config fields are usage errors
  {
    std::ofstream cfg(cfg_path);
    cfg << R"({"data": {"bogus": 1}})";
  }
  EXPECT_EQ(run_cli("gen --config " + cfg_path.string() + " --out " + out.string() + " --force"),
            2);
  fs::remove_all(dir);
}
