#include <atomic>
#include <fstream>
#include <random>

#include <gtest/gtest.h>

#include "flowcube/errors.h"
#include "flowcube/io.h"
#include "flowcube/mapreduce.h"
#include "testutil.h"

namespace flowcube::mr {
namespace {

namespace fs = std::filesystem;

// "key,number" lines; emits (key, number).
class KvMapper : public Mapper {
 public:
  void Map(std::string_view line, MapContext& ctx) override {
    auto comma = line.find(',');
    if (comma == std::string_view::npos) throw DataError("no comma");
    ctx.Emit(std::string(line.substr(0, comma)), std::string(line.substr(comma + 1)));
  }
};

class SumReducer : public Reducer {
 public:
  void Reduce(std::string_view key, std::span<const std::string> values,
              ReduceContext& ctx) override {
    int64_t sum = 0;
    for (const auto& v : values) sum += std::stoll(v);
    ctx.Write(std::string(key) + "=" + std::to_string(sum));
  }
};

std::string ReadAll(const std::vector<fs::path>& files) {
  std::string out;
  for (const auto& f : files) out += ReadFile(f) + "\x1e";
  return out;
}

JobSpec KvJob(const fs::path& input, const fs::path& out, uint32_t workers, uint32_t parts,
              uint64_t split_bytes) {
  JobSpec spec;
  std::vector<fs::path> in{input};
  spec.splits = MakeSplits(in, split_bytes);
  spec.make_mapper = [](std::string_view) { return std::make_unique<KvMapper>(); };
  spec.make_reducer = [](uint32_t, std::string_view) { return std::make_unique<SumReducer>(); };
  spec.partitioner = [parts](std::string_view key) {
    return static_cast<uint32_t>(std::hash<std::string_view>()(key) % parts);
  };
  spec.workers = workers;
  spec.partitions = parts;
  spec.output_dir = out;
  return spec;
}

TEST(RunJob, IdentityMapSumReduce) {
  testutil::TempDir dir;
  WriteFileAtomic(dir / "in.txt", "a,1\na,2\nb,3\n");
  auto r = RunJob(KvJob(dir / "in.txt", dir / "out", 1, 1, 1 << 20));
  ASSERT_EQ(r.outputs.size(), 1u);
  EXPECT_EQ(ReadFile(r.outputs[0]), "a=3\nb=3\n");
  EXPECT_EQ(r.map_input_records, 3u);
  EXPECT_EQ(r.map_emissions, 3u);
  EXPECT_EQ(r.reduce_groups, 2u);
}

TEST(RunJob, WorkerCountDoesNotChangeOutput) {
  testutil::TempDir dir;
  std::mt19937_64 rng(1);
  std::string text;
  for (int i = 0; i < 100000; ++i) {
    text += "k" + std::to_string(rng() % 5000) + "," + std::to_string(rng() % 100) + "\n";
  }
  WriteFileAtomic(dir / "in.txt", text);
  auto r1 = RunJob(KvJob(dir / "in.txt", dir / "w1", 1, 7, 64 << 10));
  auto r8 = RunJob(KvJob(dir / "in.txt", dir / "w8", 8, 7, 64 << 10));
  EXPECT_EQ(ReadAll(r1.outputs), ReadAll(r8.outputs));
  EXPECT_EQ(r1.partition_loads, r8.partition_loads);
  uint64_t total = 0;
  for (auto l : r1.partition_loads) total += l;
  EXPECT_EQ(total, r1.map_emissions);
}

TEST(RunJob, SpillingKeepsOutputIdentical) {
  testutil::TempDir dir;
  std::string text;
  for (int i = 0; i < 50000; ++i) text += "k" + std::to_string(i % 777) + ",1\n";
  WriteFileAtomic(dir / "in.txt", text);
  auto base = KvJob(dir / "in.txt", dir / "mem", 2, 3, 32 << 10);
  auto spill = KvJob(dir / "in.txt", dir / "spill", 2, 3, 32 << 10);
  spill.shuffle_memory_bytes = 16 << 10;
  auto a = RunJob(base);
  auto b = RunJob(spill);
  EXPECT_EQ(a.spilled_runs, 0u);
  EXPECT_GT(b.spilled_runs, 0u);
  EXPECT_EQ(ReadAll(a.outputs), ReadAll(b.outputs));
}

TEST(RunJob, RoutingContractReportsLoads) {
  testutil::TempDir dir;
  WriteFileAtomic(dir / "in.txt", "a,1\nb,2\nc,3\nd,4\n");
  auto spec = KvJob(dir / "in.txt", dir / "out", 2, 4, 1 << 20);
  spec.partitioner = [](std::string_view) { return 2u; };
  auto r = RunJob(spec);
  EXPECT_EQ(r.partition_loads, (std::vector<uint64_t>{0, 0, 4, 0}));
  EXPECT_EQ(ReadFile(r.outputs[0]), "");
  EXPECT_EQ(ReadFile(r.outputs[2]), "a=1\nb=2\nc=3\nd=4\n");
}

TEST(RunJob, FailureRemovesPartialOutputs) {
  testutil::TempDir dir;
  WriteFileAtomic(dir / "in.txt", "a,1\nbroken\n");
  try {
    RunJob(KvJob(dir / "in.txt", dir / "out", 1, 2, 1 << 20));
    FAIL() << "expected JobError";
  } catch (const JobError& e) {
    EXPECT_TRUE(e.caused_by_data());
  }
  EXPECT_TRUE(!fs::exists(dir / "out") || ListPartFiles(dir / "out").empty());
}

class CountingMapper : public Mapper {
 public:
  explicit CountingMapper(std::atomic<int>* cleanups) : cleanups_(cleanups) {}
  void Map(std::string_view line, MapContext& ctx) override { ctx.Write(line); }
  void Cleanup(MapContext& ctx) override {
    cleanups_->fetch_add(1);
    ctx.Count("cleanups");
  }

 private:
  std::atomic<int>* cleanups_;
};

TEST(RunJob, MapOnlyCleanupOncePerSplit) {
  testutil::TempDir dir;
  std::string text;
  for (int i = 0; i < 3000; ++i) text += "line" + std::to_string(i) + "\n";
  WriteFileAtomic(dir / "in.txt", text);
  std::atomic<int> cleanups{0};
  JobSpec spec;
  std::vector<fs::path> in{dir / "in.txt"};
  spec.splits = MakeSplits(in, 4096);
  spec.make_mapper = [&](std::string_view) { return std::make_unique<CountingMapper>(&cleanups); };
  spec.workers = 3;
  spec.output_dir = dir / "out";
  auto r = RunJob(spec);
  EXPECT_EQ(cleanups.load(), static_cast<int>(spec.splits.size()));
  EXPECT_EQ(r.counters.at("cleanups"), static_cast<int64_t>(spec.splits.size()));
  EXPECT_EQ(r.outputs.size(), spec.splits.size());
  std::string joined;
  for (const auto& f : r.outputs) joined += ReadFile(f);
  EXPECT_EQ(joined, text);
}

TEST(MakeSplits, EveryLineOwnedOnce) {
  testutil::TempDir dir;
  std::string text;
  for (int i = 0; i < 1000; ++i) text += std::string(static_cast<size_t>(i % 37), 'x') + "\n";
  WriteFileAtomic(dir / "in.txt", text);
  std::vector<fs::path> in{dir / "in.txt"};
  for (uint64_t size : {1ull, 7ull, 100ull, 4096ull, 1ull << 30}) {
    auto splits = MakeSplits(in, size);
    uint64_t covered = 0;
    for (const auto& s : splits) covered += s.length;
    EXPECT_EQ(covered, text.size());
  }
}

TEST(LoadStats, Basic) {
  std::vector<uint64_t> loads{2, 4, 6};
  auto s = ComputeLoadStats(loads);
  EXPECT_DOUBLE_EQ(s.avg, 4);
  EXPECT_EQ(s.min, 2u);
  EXPECT_EQ(s.max, 6u);
  EXPECT_NEAR(s.stddev, std::sqrt(8.0 / 3), 1e-12);
}

}  // namespace
}  // namespace flowcube::mr
