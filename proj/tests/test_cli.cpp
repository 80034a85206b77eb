#include <gtest/gtest.h>

#include <fstream>
#include <regex>
#include <sstream>

#include <json.hpp>

#include "esf/cli.hpp"
#include "helpers.hpp"

using namespace esf;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code;
  std::string out, err;
};

Outcome run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

const char* kTinyConfig =
    R"({"model": {"base_scale": 16, "base_channels": 4, "fpb_count": 1},
        "batch_size": 4, "epochs": 1, "seed": 2})";

// Generates data and trains once for the whole suite.
class CliPipeline : public ::testing::Test {
 protected:
  static fs::path dir;

  static void SetUpTestSuite() {
    dir = fixtures::scratch_dir("cli_pipeline");
    ASSERT_EQ(run({"gen-toy", "--out", (dir / "toy").string(), "--n", "4", "--size", "32", "--seed", "5"}).code, 0);
    write(dir / "cfg.json", kTinyConfig);
    const auto r = run({"train", "--data", (dir / "toy" / "train").string(), "--config",
                        (dir / "cfg.json").string(), "--out", (dir / "m.esfc").string()});
    ASSERT_EQ(r.code, 0) << r.err;
  }
};

fs::path CliPipeline::dir;

}  // namespace

TEST(Cli, NoArgumentsIsUsageError) {
  const auto r = run({});
  EXPECT_EQ(r.code, 1);
  EXPECT_FALSE(r.err.empty());
}

TEST(Cli, UnknownSubcommand) {
  const auto r = run({"frobnicate"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("gen-toy"), std::string::npos);
}

TEST(Cli, HelpForEverySubcommand) {
  EXPECT_EQ(run({"--help"}).code, 0);
  for (const char* sub : {"gen-toy", "train", "eval", "infer", "perturb", "spectrum", "gradcheck"}) {
    const auto r = run({sub, "--help"});
    EXPECT_EQ(r.code, 0) << sub;
    EXPECT_NE(r.out.find("--"), std::string::npos) << sub;
  }
}

TEST(Cli, UnknownFlagRejected) {
  EXPECT_EQ(run({"gen-toy", "--out", "x", "--colour", "red"}).code, 1);
  EXPECT_EQ(run({"perturb", "--in", "a", "--out", "b", "--kind", "sharpen"}).code, 1);
}

TEST(Cli, MissingInputsAreUsageErrors) {
  const auto dir = fixtures::scratch_dir("cli_missing");
  auto r = run({"infer", "--image", (dir / "nope.pgm").string(), "--ckpt", (dir / "nope.esfc").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1);
  write(dir / "bad.json", "{\"epochs\": ");
  r = run({"train", "--data", dir.string(), "--config", (dir / "bad.json").string(), "--out",
           (dir / "m.esfc").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("bad.json"), std::string::npos);
  write(dir / "unknown.json", "{\"epoch\": 3}");
  r = run({"train", "--data", dir.string(), "--config", (dir / "unknown.json").string(), "--out",
           (dir / "m.esfc").string()});
  EXPECT_EQ(r.code, 1);
}

TEST_F(CliPipeline, GenToyLayoutAndReproducibility) {
  EXPECT_TRUE(fs::exists(dir / "toy" / "train" / "toy" / "real" / "000000.pgm"));
  EXPECT_TRUE(fs::exists(dir / "toy" / "test" / "toy" / "fake" / "000001.pgm"));
  const auto again = fixtures::scratch_dir("cli_gen_again");
  ASSERT_EQ(run({"gen-toy", "--out", again.string(), "--n", "4", "--size", "32", "--seed", "5"}).code, 0);
  EXPECT_EQ(slurp(again / "train" / "toy" / "fake" / "000003.pgm"),
            slurp(dir / "toy" / "train" / "toy" / "fake" / "000003.pgm"));
}

TEST_F(CliPipeline, TrainWritesCheckpointAndTrace) {
  EXPECT_EQ(slurp(dir / "m.esfc").substr(0, 4), "ESFC");
  const auto trace = slurp(dir / "m.esfc.csv");
  EXPECT_EQ(trace.substr(0, trace.find('\n')), "epoch,mean_loss,train_acc,lr");
  const auto r = run({"train", "--data", (dir / "toy" / "train").string(), "--config",
                      (dir / "cfg.json").string(), "--out", (dir / "again.esfc").string(), "--trace",
                      (dir / "again.csv").string()});
  ASSERT_EQ(r.code, 0);
  EXPECT_EQ(slurp(dir / "again.esfc"), slurp(dir / "m.esfc"));
  EXPECT_EQ(slurp(dir / "again.csv"), trace);
}

TEST_F(CliPipeline, EvalReportSchema) {
  const auto report = dir / "report.json";
  const auto r = run({"eval", "--data", (dir / "toy" / "test").string(), "--ckpt",
                      (dir / "m.esfc").string(), "--report", report.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(slurp(report));
  const double macc = j.at("mAcc").get<double>();
  EXPECT_GE(macc, 0.0);
  EXPECT_LE(macc, 100.0);
  EXPECT_FALSE(j.contains("perturbation"));
}

TEST_F(CliPipeline, EvalWithPerturbationIsReproducible) {
  std::vector<std::string> args{"eval", "--data", (dir / "toy" / "test").string(), "--ckpt",
                                (dir / "m.esfc").string(), "--report", (dir / "p1.json").string(),
                                "--perturb", "all", "--seed", "3"};
  ASSERT_EQ(run(args).code, 0);
  args[6] = (dir / "p2.json").string();
  ASSERT_EQ(run(args).code, 0);
  EXPECT_EQ(slurp(dir / "p1.json"), slurp(dir / "p2.json"));
  const auto j = nlohmann::json::parse(slurp(dir / "p1.json"));
  EXPECT_EQ(j.at("perturbation").at("mAcc").size(), 5u);
}

TEST_F(CliPipeline, InferOutputFormat) {
  const auto r = run({"infer", "--image", (dir / "toy" / "test" / "toy" / "fake" / "000000.pgm").string(),
                      "--ckpt", (dir / "m.esfc").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(std::regex_match(r.out, std::regex(R"(score=[0-9.]+ label=(real|fake)\n)"))) << r.out;
}

TEST_F(CliPipeline, PerturbAndSpectrum) {
  const auto out = dir / "blurred";
  auto r = run({"perturb", "--in", (dir / "toy" / "test").string(), "--out", out.string(), "--kind",
                "blur", "--seed", "1"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(out / "toy" / "real" / "000000.pgm"));
  r = run({"spectrum", "--dir", (dir / "toy" / "train" / "toy" / "fake").string(), "--out",
           (dir / "spec.png").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(slurp(dir / "spec.png").substr(1, 3), "PNG");
}

TEST(Cli, GradcheckPasses) {
  const auto r = run({"gradcheck", "--seed", "4"});
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(r.out.find("FAIL"), std::string::npos);
}
