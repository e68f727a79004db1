#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "manpp/cli.hpp"

using namespace manpp;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

const fs::path kModels = fs::path(MANPP_SOURCE_DIR) / "models";

struct Run {
  int code = -1;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  Run r;
  r.code = run_cli(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("manpp_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string out(const std::string& name) const { return (dir_ / name).string(); }

  std::vector<std::string> blobs_train(const std::string& name) const {
    return {"train", "--model", (kModels / "mlp_blobs.model").string(), "--data", "blobs", "--n", "120",
            "--n-test", "40", "--epochs", "2", "--batch-size", "16", "--seed", "7", "--out", out(name)};
  }

  fs::path dir_;
};

}  // namespace

TEST_F(Cli, UnknownFlagIsAConfigError) {
  const auto r = cli({"train", "--no-such-flag"});
  EXPECT_EQ(r.code, kExitConfig);
  EXPECT_FALSE(r.err.empty());
  EXPECT_EQ(cli({}).code, kExitConfig);
}

TEST_F(Cli, BadValuesAreConfigErrors) {
  auto args = blobs_train("a");
  args.insert(args.end(), {"--lr", "-1"});
  EXPECT_EQ(cli(args).code, kExitConfig);
  EXPECT_EQ(cli({"train", "--model", out("missing.model"), "--data", "blobs"}).code, kExitConfig);
  std::ofstream(out("bad.model")) << "input 2\nlinear 2 4\nlinear 5 2\n";
  const auto r = cli({"train", "--model", out("bad.model"), "--data", "blobs"});
  EXPECT_EQ(r.code, kExitConfig);
  EXPECT_NE(r.err.find("model line 3"), std::string::npos) << r.err;
}

TEST_F(Cli, RuntimeFailuresExitTwo) {
  std::ofstream(out("short-images"), std::ios::binary) << std::string("\0\0\x08\x03\0\0\0\x05", 8);
  std::ofstream(out("labels"), std::ios::binary) << std::string("\0\0\x08\x01\0\0\0\x01\x02", 9);
  const auto r = cli({"train", "--model", (kModels / "mlp_digits.model").string(), "--data", "idx", "--train-images",
                      out("short-images"), "--train-labels", out("labels"), "--out", out("run")});
  EXPECT_EQ(r.code, kExitRuntime) << r.err;
}

TEST_F(Cli, SameSeedSameMetrics) {
  ASSERT_EQ(cli(blobs_train("a")).code, kExitOk);
  ASSERT_EQ(cli(blobs_train("b")).code, kExitOk);
  const auto a = slurp(dir_ / "a" / "metrics.csv");
  EXPECT_FALSE(a.empty());
  EXPECT_EQ(a, slurp(dir_ / "b" / "metrics.csv"));
  EXPECT_EQ(a.substr(0, a.find('\n')), "epoch,block,loss,acc,lr,peak_scalars,wall_ms");
}

TEST_F(Cli, ConfigFileReproducesRun) {
  ASSERT_EQ(cli(blobs_train("a")).code, kExitOk);
  const auto r = cli({"train", "--config", out("a/config.ini"), "--out", out("b")});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_EQ(slurp(dir_ / "a" / "metrics.csv"), slurp(dir_ / "b" / "metrics.csv"));
}

TEST_F(Cli, RecordCounts) {
  ASSERT_EQ(cli(blobs_train("a")).code, kExitOk);
  const auto s = json::parse(slurp(dir_ / "a" / "summary.json"));
  EXPECT_EQ(s["train_records"], 120);
  EXPECT_EQ(s["test_records"], 40);
  EXPECT_EQ(s["mode"], "sequential");
  EXPECT_EQ(s["config"]["seed"], "7");
}

TEST_F(Cli, CostGuideline) {
  const auto r = cli({"cost", "--L", "101", "--K", "11", "--eps", "0.1", "--beta-f", "0.02", "--out", out("c")});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const auto j = json::parse(slurp(dir_ / "c" / "cost.json"));
  EXPECT_EQ(j["flops"]["k_max"], 11);
  EXPECT_EQ(j["flops"]["within_budget"], true);
  EXPECT_NE(r.out.find("11 (K within budget)"), std::string::npos) << r.out;
}

TEST_F(Cli, CostAgainstModel) {
  const auto r = cli({"cost", "--model", (kModels / "mlp_digits.model").string(), "--out", out("c")});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const auto j = json::parse(slurp(dir_ / "c" / "cost.json"));
  EXPECT_TRUE(j.contains("measured"));
}

TEST_F(Cli, ProbeSingleBlockIsZero) {
  const auto r = cli({"probe", "--model", (kModels / "mlp_blobs.model").string(), "--K", "1", "--data", "blobs",
                      "--n", "64", "--out", out("p")});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const auto s = json::parse(slurp(dir_ / "p" / "summary.json"));
  ASSERT_EQ(s["bias"].size(), 1u);
  EXPECT_EQ(s["bias"][0], 0.0);
}

TEST_F(Cli, PipelineAndE2e) {
  auto args = blobs_train("p");
  args[0] = "pipeline";
  const auto r = cli(args);
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_TRUE(fs::exists(dir_ / "p" / "pipeline_stats.csv"));
  args = blobs_train("e");
  args[0] = "e2e";
  ASSERT_EQ(cli(args).code, kExitOk);
  EXPECT_EQ(json::parse(slurp(dir_ / "e" / "summary.json"))["blocks"], 1);
}

TEST_F(Cli, GenDigitsThenTrainOnIdx) {
  ASSERT_EQ(cli({"gen-digits", "--n", "64", "--n-test", "32", "--out", out("d")}).code, kExitOk);
  const auto r = cli({"train", "--model", (kModels / "mlp_digits.model").string(), "--data", "idx",
                      "--train-images", out("d/train-images.idx"), "--train-labels", out("d/train-labels.idx"),
                      "--test-images", out("d/test-images.idx"), "--test-labels", out("d/test-labels.idx"),
                      "--epochs", "1", "--out", out("t")});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const auto s = json::parse(slurp(dir_ / "t" / "summary.json"));
  EXPECT_EQ(s["train_records"], 64);
  EXPECT_EQ(s["test_records"], 32);
}
