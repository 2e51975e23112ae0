#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

namespace fs = std::filesystem;

namespace {

int cli(const std::string& args) {
  const std::string cmd = std::string(MTCP_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("mtcp_cli_" + name);
  fs::remove_all(p);
  return p;
}

const char* kTiny = "-s data.train=2 -s data.val=1 -s train.epochs=1";

}  // namespace

TEST(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(cli(""), 1);
  EXPECT_EQ(cli("frobnicate"), 1);
  EXPECT_EQ(cli("train --set lps.kapa=2"), 1);
  EXPECT_EQ(cli("train --set lps.kappa=-1"), 1);
  EXPECT_EQ(cli("ablate --grid optimizer"), 1);
}

TEST(Cli, HelpExitsZero) { EXPECT_EQ(cli("--help"), 0); }

TEST(Cli, MissingFilesExitThree) {
  EXPECT_EQ(cli("eval /nonexistent/checkpoint.mtcp"), 3);
  EXPECT_EQ(cli("train --config /nonexistent/run.cfg"), 3);
}

TEST(Cli, GradcheckPassesAndFailureIsNumeric) {
  EXPECT_EQ(cli("gradcheck --only conv --seeds 2"), 0);
  EXPECT_EQ(cli("gradcheck --only conv --seeds 1 --tol 0"), 2);
}

TEST(Cli, TrainThenEvalWithConfigFile) {
  const fs::path dir = scratch("train");
  fs::create_directories(dir);
  std::ofstream(dir / "run.cfg") << "# tiny run\nlps.kappa = 7.5\nseed = 3\n";
  const std::string out = (dir / "run").string();
  ASSERT_EQ(cli("train -q --config " + (dir / "run.cfg").string() + " " + kTiny + " -o " + out), 0);
  for (const char* f : {"metrics.csv", "summary.json", "weights_trajectory.csv", "checkpoint.mtcp"}) {
    EXPECT_TRUE(fs::exists(fs::path(out) / f)) << f;
  }
  EXPECT_EQ(cli("eval " + out + "/checkpoint.mtcp"), 0);
}

TEST(Cli, GenDataWritesSamples) {
  const fs::path dir = scratch("data");
  ASSERT_EQ(cli("gen-data -s data.train=3 -s data.val=2 -o " + dir.string()), 0);
  EXPECT_TRUE(fs::exists(dir / "train_0002.mtds"));
  EXPECT_TRUE(fs::exists(dir / "val_0001.mtds"));
  EXPECT_FALSE(fs::exists(dir / "train_0003.mtds"));
}
