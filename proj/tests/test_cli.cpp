// Drives the built vstain binary end to end and checks its exit codes.
#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "vstain/pipeline.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string output;
};

Run run(const std::string& args, const fs::path& dir) {
  const auto log = dir / "cli.log";
  const std::string cmd = std::string(VSTAIN_CLI) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(log);
  r.output.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  return r;
}

fs::path temp_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / ("vstain_cli_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

}  // namespace

TEST(Cli, UsageErrorsExitOne) {
  const auto d = temp_dir("usage");
  EXPECT_EQ(run("", d).code, 1);
  EXPECT_EQ(run("frobnicate", d).code, 1);
  EXPECT_EQ(run("register --slide x", d).code, 1);
  EXPECT_EQ(run("--help", d).code, 0);
}

TEST(Cli, DataErrorsExitTwo) {
  const auto d = temp_dir("data");
  fs::create_directories(d / "none");
  auto r = run("register --autofl " + (d / "none").string() + " --slide s.png --out " + (d / "m.jsonl").string(), d);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("no tiles"), std::string::npos) << r.output;
  EXPECT_EQ(run("clean --manifest " + (d / "missing.jsonl").string(), d).code, 2);
  EXPECT_EQ(run("infer --checkpoint " + (d / "missing.vsgan").string() + " --input a.tif --out b.png", d).code, 2);
}

TEST(Cli, SynthRegisterCleanTrainInferEvaluate) {
  const auto d = temp_dir("e2e");
  const std::string D = d.string();
  auto r = run("synth --out " + D + "/fx --tiles 3 --seed 4", d);
  ASSERT_EQ(r.code, 0) << r.output;
  r = run("register --autofl " + D + "/fx/autofl --slide " + D + "/fx/slide.png --out " + D +
              "/m.jsonl --ratio 1 --patch 64 --stride 64 --preset liver-mt",
          d);
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("registered 3 of 3 tiles; 12 patches"), std::string::npos) << r.output;

  r = run("clean --manifest " + D + "/m.jsonl --threshold 0.7", d);
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("accepted 12, rejected 0"), std::string::npos) << r.output;
  EXPECT_EQ(run("clean --manifest " + D + "/m.jsonl --rounds 2", d).code, 1);

  EXPECT_EQ(run("train --manifest " + D + "/m.jsonl --preset bogus", d).code, 1);
  r = run("--threads 1 train --manifest " + D + "/m.jsonl --out-dir " + D +
              "/run --gen-scale 0.0625 --disc-scale 0.0078125 --max-iterations 2 --batch-size 3",
          d);
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("preset liver-mt: 3840 patches, 26 epochs"), std::string::npos) << r.output;
  ASSERT_TRUE(fs::exists(d / "run" / "final.vsgan"));

  // A wider generator cannot start from this checkpoint.
  r = run("train --manifest " + D + "/m.jsonl --out-dir " + D + "/run2 --gen-scale 0.125 --disc-scale 0.0078125 --init " +
              D + "/run/final.vsgan --max-iterations 1",
          d);
  EXPECT_EQ(r.code, 2) << r.output;

  fs::create_directories(d / "out");
  fs::create_directories(d / "labels");
  r = run("infer --checkpoint " + D + "/run/final.vsgan --input " + D + "/fx/autofl/tile_00.tif --out " + D + "/out/t.png", d);
  ASSERT_EQ(r.code, 0) << r.output;
  fs::copy_file(d / "out" / "t.png", d / "labels" / "t.png");
  r = run("evaluate --outputs " + D + "/out --labels " + D + "/labels --report " + D + "/report.json", d);
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("Number of test images: 1"), std::string::npos) << r.output;
  const auto report = nlohmann::json::parse(vstain::read_text(d / "report.json"));
  EXPECT_DOUBLE_EQ(report["aggregate"]["ssim"]["mean"].get<double>(), 1.0);
}
