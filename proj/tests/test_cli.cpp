#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "bcat/cli.hpp"

namespace {

namespace fs = std::filesystem;

int run(std::vector<std::string> args) {
  args.insert(args.begin(), "bcat");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return bcat::cli::run(static_cast<int>(argv.size()), argv.data());
}

fs::path fresh(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("bcat_cli_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream(p) << text;
}

// A model small enough to train in well under a second per step.
const char* kTinyConfig = R"({
  "model": {"dim": 16, "n_heads": 2, "n_layers": 1, "patch_size": 8, "resolution": 16, "channels": 1,
            "max_frames": 8, "input_frames": 4},
  "train": {"batch_size": 2, "steps": 4, "input_frames": 4, "output_frames": 4},
  "eval": {"input_frames": 4, "output_frames": 4, "short_output_frames": 2},
  "data": {"resolution": 16, "frames": 8, "n": 3, "n_test": 2},
  "bench": {"repeats": 3, "warmup": 1, "output_frames": 2}
})";

TEST(Cli, MissingSubcommandIsUsageError) {
  testing::internal::CaptureStderr();
  EXPECT_EQ(run({}), 1);
  const std::string err = testing::internal::GetCapturedStderr();
  EXPECT_NE(err.find("Usage"), std::string::npos);
}

TEST(Cli, UnknownFlagAndMissingOutAreUsageErrors) {
  testing::internal::CaptureStderr();
  EXPECT_EQ(run({"datagen", "--out", "/tmp/x", "--bogus", "1"}), 1);
  EXPECT_EQ(run({"datagen", "--n", "2"}), 1);
  const std::string err = testing::internal::GetCapturedStderr();
  EXPECT_NE(err.find("--bogus"), std::string::npos);
  EXPECT_NE(err.find("--out"), std::string::npos);
}

TEST(Cli, BadValuesNameTheirFlag) {
  const fs::path out = fresh("badflag");
  testing::internal::CaptureStderr();
  EXPECT_EQ(run({"datagen", "--out", out.string(), "--family", "plasma"}), 1);
  std::string err = testing::internal::GetCapturedStderr();
  EXPECT_NE(err.find("--family"), std::string::npos) << err;
  const fs::path cfg = out / "bad.json";
  write(cfg, R"({"model": {"dimension": 3}})");
  testing::internal::CaptureStderr();
  EXPECT_EQ(run({"datagen", "--out", out.string(), "--config", cfg.string()}), 1);
  err = testing::internal::GetCapturedStderr();
  EXPECT_NE(err.find("model.dimension"), std::string::npos) << err;
  fs::remove_all(out);
}

TEST(Cli, DatagenIsReproducible) {
  const fs::path a = fresh("dg_a"), b = fresh("dg_b");
  testing::internal::CaptureStdout();
  ASSERT_EQ(run({"datagen", "--family", "adv_diff", "--n", "4", "--seed", "7", "--resolution", "16", "--out", a}), 0);
  ASSERT_EQ(run({"datagen", "--family", "adv_diff", "--n", "4", "--seed", "7", "--resolution", "16", "--out", b}), 0);
  testing::internal::GetCapturedStdout();
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(a)) {
    ++files;
    EXPECT_EQ(slurp(e.path()), slurp(b / e.path().filename())) << e.path();
  }
  EXPECT_EQ(files, 4u + 3u);  // trajectories, manifest, config, hash
  const auto m = bcat::read_manifest(a / "manifest.json");
  EXPECT_EQ(m.generator["config_hash"].get<std::string>() + "\n", slurp(a / "config.sha256"));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Cli, EndToEndTrainEvalRolloutBench) {
  const fs::path root = fresh("e2e");
  write(root / "cfg.json", kTinyConfig);
  const std::string cfg = (root / "cfg.json").string();
  testing::internal::CaptureStdout();
  ASSERT_EQ(run({"datagen", "--config", cfg, "--seed", "1", "--out", (root / "data").string()}), 0);
  ASSERT_EQ(run({"train", "--config", cfg, "--data", (root / "data").string(), "--out", (root / "run").string()}), 0);
  ASSERT_TRUE(fs::exists(root / "run" / "model.bckp"));
  const std::string metrics = slurp(root / "run" / "metrics.csv");
  EXPECT_EQ(metrics.rfind("step,lr,loss\n", 0), 0u);
  EXPECT_EQ(std::count(metrics.begin(), metrics.end(), '\n'), 5);

  // Flags win over the config file.
  ASSERT_EQ(run({"train", "--config", cfg, "--steps", "2", "--data", (root / "data").string(), "--out",
                 (root / "run2").string()}),
            0);
  const auto effective = bcat::load_run_config(root / "run2" / "config.json");
  EXPECT_EQ(effective.train.steps, 2u);
  EXPECT_EQ(effective.model.dim, 16u);

  const std::string ckpt = (root / "run" / "model.bckp").string();
  ASSERT_EQ(run({"eval", "--config", cfg, "--checkpoint", ckpt, "--data", (root / "data").string(), "--out",
                 (root / "eval").string()}),
            0);
  const std::string report = slurp(root / "eval" / "report.csv");
  EXPECT_EQ(std::count(report.begin(), report.end(), '\n'), 4);
  const auto summary = nlohmann::json::parse(slurp(root / "eval" / "summary.json"));
  EXPECT_EQ(summary["metadata"]["config_hash"].get<std::string>() + "\n", slurp(root / "eval" / "config.sha256"));

  ASSERT_EQ(run({"rollout", "--config", cfg, "--checkpoint", ckpt, "--input",
                 (root / "data" / "traj_00000.btrj").string(), "--frames", "3", "--out", (root / "roll").string()}),
            0);
  const auto side = nlohmann::json::parse(slurp(root / "roll" / "rollout.json"));
  EXPECT_EQ(side["model_calls"].get<std::size_t>(), 3u);
  EXPECT_TRUE(side.contains("rel_l2"));
  EXPECT_EQ(bcat::read_trajectory(root / "roll" / "rollout.btrj").frames, 3u);

  ASSERT_EQ(run({"bench", "--config", cfg, "--checkpoint", ckpt, "--out", (root / "bench").string()}), 0);
  const auto bench = nlohmann::json::parse(slurp(root / "bench" / "bench.json"));
  EXPECT_EQ(bench["bcat"]["runs_ms"].size(), 3u);
  EXPECT_EQ(bench["bcat"]["model_calls"].get<std::size_t>(), 2u);
  EXPECT_EQ(bench["next_token"]["model_calls"].get<std::size_t>(), 2u * 4u);
  testing::internal::GetCapturedStdout();

  // Geometry mismatch against the checkpoint is a configuration error.
  testing::internal::CaptureStderr();
  EXPECT_EQ(run({"eval", "--config", cfg, "--checkpoint", ckpt, "--patch-size", "4", "--data",
                 (root / "data").string(), "--out", (root / "eval2").string()}),
            1);
  EXPECT_NE(testing::internal::GetCapturedStderr().find("patch_size"), std::string::npos);
  // Missing data is a data error.
  testing::internal::CaptureStderr();
  EXPECT_EQ(run({"eval", "--config", cfg, "--checkpoint", ckpt, "--data", (root / "nothing").string(), "--out",
                 (root / "eval3").string()}),
            2);
  EXPECT_EQ(run({"eval", "--config", cfg, "--checkpoint", (root / "missing.bckp").string(), "--data",
                 (root / "data").string(), "--out", (root / "eval4").string()}),
            2);
  testing::internal::GetCapturedStderr();
  fs::remove_all(root);
}

TEST(Cli, NonFiniteTrainingExitsThree) {
  const fs::path root = fresh("nan");
  write(root / "cfg.json", kTinyConfig);
  auto traj = bcat::Trajectory::zeros(8, 16, 16, 1);
  for (std::size_t i = 0; i < traj.data.size(); ++i) traj.data[i] = static_cast<float>(i % 7);
  traj.data[100] = std::numeric_limits<float>::quiet_NaN();
  fs::create_directories(root / "data");
  bcat::write_trajectory(traj, root / "data" / "t.btrj");
  bcat::Manifest m;
  m.family = "adv_diff";
  m.files.push_back({"t.btrj", 0, 8, 16, 1, {}});
  bcat::write_manifest(m, root / "data" / "manifest.json");
  testing::internal::CaptureStderr();
  testing::internal::CaptureStdout();
  EXPECT_EQ(run({"train", "--config", (root / "cfg.json").string(), "--data", (root / "data").string(), "--out",
                 (root / "run").string()}),
            3);
  testing::internal::GetCapturedStdout();
  EXPECT_NE(testing::internal::GetCapturedStderr().find("numeric"), std::string::npos);
  EXPECT_TRUE(fs::exists(root / "run" / "last_good.bckp"));
  fs::remove_all(root);
}

TEST(Cli, AblateWritesSummaryAndRejectsBadSuites) {
  const fs::path root = fresh("ablate");
  write(root / "cfg.json", kTinyConfig);
  testing::internal::CaptureStdout();
  ASSERT_EQ(run({"ablate", "--config", (root / "cfg.json").string(), "--suite", "qk_norm", "--values", "on", "off",
                 "--steps", "2", "--out", (root / "out").string()}),
            0);
  testing::internal::GetCapturedStdout();
  const std::string csv = slurp(root / "out" / "summary.csv");
  EXPECT_EQ(csv.rfind("variant,params,train_loss,test_rel_l2\nqk_norm_on,", 0), 0u) << csv;
  EXPECT_NE(csv.find("\nqk_norm_off,"), std::string::npos);
  testing::internal::CaptureStderr();
  EXPECT_EQ(run({"ablate", "--config", (root / "cfg.json").string(), "--variant", "vit_direct", "--suite",
                 "alignment", "--values", "frame", "token", "--out", (root / "bad").string()}),
            1);
  EXPECT_EQ(run({"ablate", "--config", (root / "cfg.json").string(), "--suite", "depth", "--out",
                 (root / "bad").string()}),
            1);
  testing::internal::GetCapturedStderr();
  fs::remove_all(root);
}

TEST(RunConfig, RoundTripIsIdentical) {
  bcat::RunConfig c;
  c.seed = 42;
  c.model.dim = 48;
  c.model.activation = bcat::Activation::kGeLU;
  c.train.steps = 77;
  c.eval.output_frames = 4;
  c.data.gen.family = bcat::Family::kLinearSwe;
  c.ablate.axis = "patch";
  c.ablate.values = {"8", "16"};
  c.paths.data = "/data";
  const auto j = bcat::run_config_to_json(c);
  const auto back = bcat::run_config_from_json(j);
  EXPECT_EQ(bcat::run_config_to_json(back), j);
  EXPECT_EQ(bcat::config_hash(back), bcat::config_hash(c));
  const auto again = bcat::run_config_from_json(nlohmann::json::parse(j.dump()));
  EXPECT_EQ(bcat::run_config_to_json(again).dump(), j.dump());
}

TEST(RunConfig, UnknownKeysNameTheField) {
  auto expect_field = [](const nlohmann::json& j, const std::string& field) {
    try {
      bcat::run_config_from_json(j);
      FAIL() << "accepted " << j.dump();
    } catch (const bcat::ConfigError& e) {
      EXPECT_NE(std::string(e.what()).find(field), std::string::npos) << e.what();
    }
  };
  expect_field({{"modle", {}}}, "config.modle");
  expect_field({{"train", {{"lr_max", 1}}}}, "train.lr_max");
  expect_field({{"eval", {{"eps", "x"}}}}, "eval.eps");
  expect_field({{"data", {{"family", "plasma"}}}}, "data.family");
  expect_field({{"data", {{"seed", 3}}}}, "data.seed");
  expect_field({{"bench", {{"repeat", 3}}}}, "bench.repeat");
  expect_field({{"paths", {{"ckpt", "x"}}}}, "paths.ckpt");
}

TEST(RunConfig, PartialDocumentsKeepDefaults) {
  const auto c = bcat::run_config_from_json({{"model", {{"dim", 32}}}, {"train", {{"lr", 0.01}}}});
  EXPECT_EQ(c.model.dim, 32u);
  EXPECT_EQ(c.model.n_heads, bcat::ModelConfig{}.n_heads);
  EXPECT_EQ(c.train.base_lr, 0.01);
  EXPECT_EQ(c.train.steps, bcat::TrainConfig{}.steps);
}

TEST(ConfigHash, Sha256KnownAnswerAndSensitivity) {
  EXPECT_EQ(bcat::sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  EXPECT_EQ(bcat::sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  bcat::RunConfig a, b;
  EXPECT_EQ(bcat::config_hash(a), bcat::config_hash(b));
  b.train.steps += 1;
  EXPECT_NE(bcat::config_hash(a), bcat::config_hash(b));
  EXPECT_EQ(bcat::config_hash(a).size(), 64u);
}

}  // namespace
