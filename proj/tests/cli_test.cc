#include <gtest/gtest.h>
#include <json.hpp>

#include "flowcube/io.h"
#include "testutil.h"

namespace {

namespace fs = std::filesystem;
using testutil::RunCli;

std::string Q(const fs::path& p) { return "'" + p.string() + "'"; }

// Every file under `dir` except the timing report, keyed by relative path.
std::map<std::string, std::string> Tree(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file() || e.path().filename() == "_report.json") continue;
    out[fs::relative(e.path(), dir).string()] = flowcube::ReadFile(e.path());
  }
  return out;
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    flowcube::WriteFileAtomic(
        dir_ / "grid.json",
        R"({"region":[-90,35,-80,45],"levels":5,"base_cell_arcsec":30,"growth":2})");
    ASSERT_EQ(RunCli("synth --users 150 --seed 7 --region -90,35,-80,45 -o " + Q(dir_ / "ev.csv")), 0);
  }
  testutil::TempDir dir_;
};

TEST_F(Cli, SynthIsDeterministic) {
  ASSERT_EQ(RunCli("synth --users 150 --seed 7 --region -90,35,-80,45 -o " + Q(dir_ / "ev2.csv")), 0);
  EXPECT_EQ(flowcube::ReadFile(dir_ / "ev.csv"), flowcube::ReadFile(dir_ / "ev2.csv"));
  ASSERT_EQ(RunCli("synth --users 150 --seed 8 --region -90,35,-80,45 -o " + Q(dir_ / "ev3.csv")), 0);
  EXPECT_NE(flowcube::ReadFile(dir_ / "ev.csv"), flowcube::ReadFile(dir_ / "ev3.csv"));
}

TEST_F(Cli, ExitCodes) {
  EXPECT_EQ(RunCli("--help"), 0);
  EXPECT_EQ(RunCli("no-such-command"), 1);
  EXPECT_EQ(RunCli("ingest " + Q(dir_ / "missing.csv") + " -o " + Q(dir_ / "m.csv")), 1);
  EXPECT_EQ(RunCli("partition " + Q(dir_ / "ev.csv") + " --partitions 3 -o " + Q(dir_ / "p.json")), 1);
  flowcube::WriteFileAtomic(dir_ / "garbage.csv", "a\nb\nc\nd\n");
  EXPECT_EQ(RunCli("ingest " + Q(dir_ / "garbage.csv") + " -o " + Q(dir_ / "m.csv")), 2);
  flowcube::WriteFileAtomic(dir_ / "bad.cube", "not a cube");
  EXPECT_EQ(RunCli("cube inspect " + Q(dir_ / "bad.cube")), 2);
}

TEST_F(Cli, RunAllEqualsIndividualStages) {
  const std::string grid = " --grid " + Q(dir_ / "grid.json");
  ASSERT_EQ(RunCli("run-all " + Q(dir_ / "ev.csv") + grid + " --depth 2 --build-time 0 --workers 2 -o " +
                   Q(dir_ / "all.cube") + " --work-dir " + Q(dir_ / "work")),
            0);
  const fs::path s = dir_ / "stages";
  ASSERT_EQ(RunCli("ingest " + Q(dir_ / "ev.csv") + grid + " -o " + Q(s / "movements.csv")), 0);
  ASSERT_EQ(RunCli("partition " + Q(s / "movements.csv") + grid + " --depth 2 -o " + Q(s / "parts.json")), 0);
  ASSERT_EQ(RunCli("aggregate " + Q(s / "movements.csv") + grid + " --parts " + Q(s / "parts.json") +
                   " -o " + Q(s / "agg")),
            0);
  ASSERT_EQ(RunCli("summarize " + Q(s / "agg") + " --parts " + Q(s / "parts.json") + " -o " +
                   Q(s / "summary")),
            0);
  ASSERT_EQ(RunCli("filter-edges " + Q(s / "agg") + " " + Q(s / "summary") + " -o " + Q(s / "edges")), 0);
  ASSERT_EQ(RunCli("pack " + Q(s / "summary") + " " + Q(s / "edges") + " --build-time 0 -o " +
                   Q(dir_ / "stages.cube")),
            0);
  EXPECT_EQ(flowcube::ReadFile(dir_ / "all.cube"), flowcube::ReadFile(dir_ / "stages.cube"));
  auto a = Tree(dir_ / "work");
  auto b = Tree(s);
  EXPECT_FALSE(a.empty());
  EXPECT_EQ(a.size(), b.size());
  for (const auto& [name, bytes] : a) {
    ASSERT_TRUE(b.count(name)) << name;
    EXPECT_TRUE(b[name] == bytes) << name;
  }

  std::string out;
  ASSERT_EQ(RunCli("cube inspect " + Q(dir_ / "all.cube"), &out), 0);
  auto j = nlohmann::json::parse(out);
  EXPECT_EQ(j["levels"].size(), 5u);
}

TEST_F(Cli, ConfigFileAndOverride) {
  flowcube::WriteFileAtomic(dir_ / "synth.toml", "[synth]\nusers = 20\nseed = 3\nregion = \"-90,35,-80,45\"\n");
  ASSERT_EQ(RunCli("synth --config " + Q(dir_ / "synth.toml") + " -o " + Q(dir_ / "a.csv")), 0);
  ASSERT_EQ(RunCli("synth --users 20 --seed 3 --region -90,35,-80,45 -o " + Q(dir_ / "b.csv")), 0);
  EXPECT_EQ(flowcube::ReadFile(dir_ / "a.csv"), flowcube::ReadFile(dir_ / "b.csv"));
  flowcube::WriteFileAtomic(dir_ / "synth.json", R"({"synth": {"users": 20, "seed": 3, "region": "-90,35,-80,45"}})");
  ASSERT_EQ(RunCli("synth --config " + Q(dir_ / "synth.json") + " -o " + Q(dir_ / "c.csv")), 0);
  EXPECT_EQ(flowcube::ReadFile(dir_ / "a.csv"), flowcube::ReadFile(dir_ / "c.csv"));
  ASSERT_EQ(RunCli("synth --config " + Q(dir_ / "synth.toml") + " --seed 4 -o " + Q(dir_ / "d.csv")), 0);
  EXPECT_NE(flowcube::ReadFile(dir_ / "a.csv"), flowcube::ReadFile(dir_ / "d.csv"));
}

}  // namespace
