#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "dpkws/dpkws.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path kWork = fs::temp_directory_path() / "dpkws_cli_test";

int run(const std::string& args) {
  const std::string cmd = std::string("cd ") + kWork.string() + " && " + DPKWS_CLI_PATH + " " + args + " >>cli.log 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

const std::string kSmall = "--positives 30 --negatives 30 --eval-positives 10 --eval-negatives 10 --cv-fraction 0.1";
const std::string kFast = "--max-epochs 2 --batch-utterances 16 --hidden-width 16 --hidden-layers 2";

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    fs::remove_all(kWork);
    fs::create_directories(kWork);
    ASSERT_EQ(run("gen --out corpus --seed 3 " + kSmall), 0);
  }
};

}  // namespace

TEST_F(Cli, GenIsReproducible) {
  ASSERT_EQ(run("gen --out again --seed 3 " + kSmall), 0);
  EXPECT_EQ(slurp(kWork / "corpus/manifest.jsonl"), slurp(kWork / "again/manifest.jsonl"));
  EXPECT_EQ(slurp(kWork / "corpus/wav/70.wav"), slurp(kWork / "again/wav/70.wav"));
  ASSERT_EQ(run("gen --out other --seed 4 " + kSmall), 0);
  EXPECT_NE(slurp(kWork / "corpus/wav/70.wav"), slurp(kWork / "other/wav/70.wav"));
}

TEST_F(Cli, GenCounts) {
  const auto m = dpkws::read_manifest(kWork / "corpus/manifest.jsonl");
  ASSERT_EQ(m.size(), 2u * 60u + 20u);
  int noisy = 0, eval = 0, cv = 0, pos = 0;
  for (const auto& e : m) {
    noisy += e.provenance.noisy && e.split != dpkws::Split::eval;
    eval += e.split == dpkws::Split::eval;
    cv += e.split == dpkws::Split::cv;
    pos += e.is_positive && e.split != dpkws::Split::eval;
    EXPECT_TRUE(fs::exists(kWork / "corpus" / e.path));
    EXPECT_TRUE(fs::exists(kWork / "corpus" / e.frame_label_path));
  }
  EXPECT_EQ(noisy, 60);
  EXPECT_EQ(eval, 20);
  EXPECT_EQ(cv, 12);
  EXPECT_EQ(pos, 60);
}

TEST_F(Cli, CleanOnlyCorpusHasNoNoisyUtterances) {
  ASSERT_EQ(run("gen --out clean --clean-only " + kSmall), 0);
  const auto m = dpkws::read_manifest(kWork / "clean/manifest.jsonl");
  EXPECT_EQ(m.size(), 80u);
  for (const auto& e : m) EXPECT_FALSE(e.provenance.noisy);
}

TEST_F(Cli, BaselineRunWritesNoSigmaSnapshots) {
  ASSERT_EQ(run("train --corpus corpus --run base " + kFast), 0);
  EXPECT_TRUE(fs::exists(kWork / "base/checkpoint.bin"));
  EXPECT_TRUE(fs::exists(kWork / "base/train_log.jsonl"));
  EXPECT_FALSE(fs::exists(kWork / "base/sigma"));
  // report needs snapshots
  EXPECT_EQ(run("report --run base --corpus corpus"), 3);
}

TEST_F(Cli, RunConfigRecordsResolvedTableValues) {
  ASSERT_EQ(run("train --corpus corpus --run jc --mode joint --data clean " + kFast), 0);
  auto t = read_json(kWork / "jc/run_config.json")["train"];
  EXPECT_EQ(t["instance_lr"].get<double>(), 0.1);
  EXPECT_EQ(t["instance_init"].get<double>(), 0.01);
  EXPECT_EQ(t["class_lr"].get<double>(), 0.001);
  EXPECT_EQ(t["class_init"].get<double>(), 1.0);
  ASSERT_EQ(run("train --corpus corpus --run cn --mode class --data noisy " + kFast), 0);
  t = read_json(kWork / "cn/run_config.json")["train"];
  EXPECT_EQ(t["class_lr"].get<double>(), 0.001);
  EXPECT_EQ(t["weight_decay"].get<double>(), 0.01);
  EXPECT_EQ(t["mode"], "class");
  EXPECT_TRUE(fs::exists(kWork / "cn/sigma/epoch_000.csv"));
  EXPECT_TRUE(fs::exists(kWork / "cn/sigma/epoch_002.csv"));
}

TEST_F(Cli, EvalOperatingPoints) {
  ASSERT_EQ(run("train --corpus corpus --run ev --mode instance " + kFast), 0);
  ASSERT_EQ(run("eval --run ev --corpus corpus --svg"), 0);
  const auto m10 = read_json(kWork / "ev/metrics.json");
  EXPECT_EQ(m10["fa_per_hour_target"].get<double>(), 10.0);
  EXPECT_TRUE(fs::exists(kWork / "ev/scores.csv"));
  EXPECT_TRUE(fs::exists(kWork / "ev/det.csv"));
  EXPECT_TRUE(fs::exists(kWork / "ev/det.svg"));
  ASSERT_EQ(run("eval --run ev --corpus corpus --fa-per-hour 1 --out ev1"), 0);
  const auto m1 = read_json(kWork / "ev1/metrics.json");
  EXPECT_GE(m1["frr"].get<double>(), m10["frr"].get<double>());
  ASSERT_EQ(run("report --run ev --corpus corpus --svg"), 0);
  const auto rep = slurp(kWork / "ev/sigma_report.csv");
  EXPECT_NE(rep.find("instance_noisy"), std::string::npos);
  EXPECT_TRUE(fs::exists(kWork / "ev/sigma_report.svg"));
}

TEST_F(Cli, RerunFromSavedConfigIsBitIdentical) {
  ASSERT_EQ(run("train --corpus corpus --run first --mode joint --seed 11 " + kFast), 0);
  ASSERT_EQ(run("train --config first/run_config.json --corpus corpus --run second"), 0);
  EXPECT_EQ(slurp(kWork / "first/checkpoint.bin"), slurp(kWork / "second/checkpoint.bin"));
  EXPECT_EQ(slurp(kWork / "first/sigma/epoch_002.csv"), slurp(kWork / "second/sigma/epoch_002.csv"));
}

TEST_F(Cli, SeparableToyCorpusIsLearned) {
  std::ofstream(kWork / "toy.json") << R"({"corpus": {"keyword": {"near_miss_probability": 0.0}}})";
  ASSERT_EQ(run("gen --config toy.json --out toy --clean-only --positives 80 --negatives 80 --eval-positives 10 "
                "--eval-negatives 10 --cv-fraction 0.1"),
            0);
  ASSERT_EQ(run("train --corpus toy --run toyrun --max-epochs 15 --batch-utterances 16 --hidden-width 32 "
                "--hidden-layers 2"),
            0);
  ASSERT_EQ(run("eval --run toyrun --corpus toy --split train"), 0);
  EXPECT_LE(read_json(kWork / "toyrun/metrics.json")["frr"].get<double>(), 0.05);
}

TEST_F(Cli, ExitCodes) {
  EXPECT_EQ(run("--help"), 0);
  EXPECT_EQ(run("train --no-such-flag"), 2);
  EXPECT_EQ(run("train --corpus corpus --run bad --mode sideways"), 2);
  std::ofstream(kWork / "unknown.json") << R"({"train": {"speed": 3}})";
  EXPECT_EQ(run("train --config unknown.json --corpus corpus --run bad2"), 2);
  EXPECT_EQ(run("eval --run nowhere --corpus corpus --config unknown.json"), 2);
  EXPECT_EQ(run("train --corpus missing_corpus --run bad3"), 3);
  ASSERT_EQ(run("train --corpus corpus --run base2 " + kFast), 0);
  EXPECT_EQ(run("eval --run base2 --corpus corpus --fa-per-hour -1"), 2);
}

TEST_F(Cli, LockedRunDirectoryIsRefused) {
  fs::create_directories(kWork / "locked");
  std::ofstream(kWork / "locked/.lock") << "held";
  EXPECT_EQ(run("train --corpus corpus --run locked " + kFast), 3);
  EXPECT_FALSE(fs::exists(kWork / "locked/checkpoint.bin"));
  EXPECT_NE(slurp(kWork / "cli.log").find("locked"), std::string::npos);
}
