#include "tiny.hpp"

#include "pad/eval.hpp"

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

using namespace pad;
namespace fs = std::filesystem;

namespace {

const fs::path kWork = fs::temp_directory_path() / "pad_cli_tests";

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

int run(const std::string& args) {
  const std::string cmd = std::string(PAD_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    fs::remove_all(kWork);
    fs::create_directories(kWork);
    save_config(test::tiny_config(), config_path());
    ASSERT_EQ(run("train --config " + config_path().string() + " --out " + run_dir().string() + " --quiet"), 0);
  }
  static fs::path config_path() { return kWork / "tiny.json"; }
  static fs::path run_dir() { return kWork / "a"; }
  static std::string tiny_train(const fs::path& out, const std::string& extra = "") {
    return "train --config " + config_path().string() + " --out " + out.string() + " --quiet " + extra;
  }
};

}  // namespace

TEST_F(Cli, TrainWritesOneBlockPerStage) {
  const MetricsReport r = parse_metrics(slurp(run_dir() / "metrics.csv"), slurp(run_dir() / "diagnostics.csv"));
  EXPECT_EQ(r.final_stage(), 2);
  for (int t = 0; t < 3; ++t) EXPECT_EQ(r.stage_entries(t, "seen").size(), static_cast<size_t>(t + 1));
  EXPECT_TRUE(fs::exists(run_dir() / "config.json"));
}

TEST_F(Cli, RerunIntoFreshDirIsIdentical) {
  ASSERT_EQ(run(tiny_train(kWork / "b")), 0);
  EXPECT_EQ(slurp(kWork / "b" / "metrics.csv"), slurp(run_dir() / "metrics.csv"));
}

TEST_F(Cli, SetOverridesConfig) {
  ASSERT_EQ(run(tiny_train(kWork / "seed1", "--set seed=1 --stop-after 0")), 0);
  EXPECT_EQ(load_config(kWork / "seed1" / "config.json").seed, 1u);
  EXPECT_NE(slurp(kWork / "seed1" / "metrics.csv").substr(0, 200), slurp(run_dir() / "metrics.csv").substr(0, 200));
}

TEST_F(Cli, ReportSummaryAndPlots) {
  ASSERT_EQ(run("report --run-dir " + run_dir().string()), 0);
  const std::string summary = slurp(run_dir() / "summary.txt");
  const MetricsReport r = parse_metrics(slurp(run_dir() / "metrics.csv"), slurp(run_dir() / "diagnostics.csv"));
  std::smatch m;
  ASSERT_TRUE(std::regex_search(summary, m, std::regex("seen_avg mAP: ([0-9.eE+-]+)")));
  EXPECT_NEAR(std::stod(m[1]), r.seen_avg_map(2), 1e-9);

  // Domain 0's seen line has one point per stage.
  const std::string svg = slurp(run_dir() / "plots" / "seen_trend.svg");
  ASSERT_TRUE(std::regex_search(svg, m, std::regex("<polyline[^>]*points=\"([^\"]*)\"")));
  std::istringstream pts(m[1].str());
  int n = 0;
  for (std::string p; pts >> p;) ++n;
  EXPECT_EQ(n, 3);
  EXPECT_TRUE(fs::exists(run_dir() / "plots" / "unseen_trend.svg"));

  ASSERT_EQ(run("report --run-dir " + run_dir().string()), 0);
  EXPECT_EQ(slurp(run_dir() / "summary.txt"), summary);
}

TEST_F(Cli, EvalReproducesStoredFinalStage) {
  const fs::path out = kWork / "eval_all.csv";
  ASSERT_EQ(run("eval --checkpoint " + (run_dir() / "checkpoints" / "stage_2.ckpt").string() + " --splits all --out " +
                out.string()),
            0);
  const MetricsReport stored = parse_metrics(slurp(run_dir() / "metrics.csv"), "");
  MetricsReport final_only;
  for (const auto& e : stored.entries)
    if (e.stage == 2) final_only.entries.push_back(e);
  EXPECT_EQ(slurp(out), metrics_csv(final_only));
}

TEST_F(Cli, EvalSplitFilter) {
  const fs::path out = kWork / "eval_unseen.csv";
  ASSERT_EQ(run("eval --checkpoint " + (run_dir() / "checkpoints" / "stage_1.ckpt").string() +
                " --splits unseen --out " + out.string()),
            0);
  const MetricsReport r = parse_metrics(slurp(out), "");
  ASSERT_FALSE(r.entries.empty());
  for (const auto& e : r.entries) EXPECT_EQ(e.split, "unseen");
}

TEST_F(Cli, CorruptCheckpointWritesNothing) {
  const fs::path bad = kWork / "bad.ckpt";
  const std::string bytes = slurp(run_dir() / "checkpoints" / "stage_0.ckpt");
  std::ofstream(bad, std::ios::binary) << bytes.substr(0, bytes.size() / 3);
  const fs::path out = kWork / "bad_eval.csv";
  EXPECT_EQ(run("eval --checkpoint " + bad.string() + " --out " + out.string()), 2);
  EXPECT_FALSE(fs::exists(out));
}

TEST_F(Cli, ExitCodes) {
  EXPECT_EQ(run("--help"), 0);
  EXPECT_EQ(run("train --no-such-flag"), 1);
  EXPECT_EQ(run("train --variant S9 --out " + (kWork / "x").string()), 1);
  EXPECT_EQ(run("train --config /nonexistent.json --out " + (kWork / "x").string()), 1);
  EXPECT_EQ(run(tiny_train(kWork / "x", "--set lambda_txt=1")), 1);
  EXPECT_EQ(run("eval --checkpoint " + (kWork / "missing.ckpt").string()), 2);
  EXPECT_EQ(run("ablate --suite nonsense"), 1);
  EXPECT_EQ(run("eval --checkpoint x --splits both"), 1);
}
