#include <random>

#include <gtest/gtest.h>

#include "flowcube/bloom.h"
#include "flowcube/edge_filter.h"
#include "flowcube/errors.h"
#include "flowcube/io.h"
#include "oracle.h"
#include "testutil.h"

namespace flowcube {
namespace {

namespace fs = std::filesystem;
using bloom::BloomFilter;

TEST(Bloom, OptimalParams) {
  EXPECT_EQ(bloom::OptimalParams(1000, 0.01), (std::pair<uint64_t, uint32_t>{9586, 7}));
  for (uint64_t n : {1ull, 10ull, 777ull, 123456ull}) {
    for (double p : {0.001, 0.01, 0.05}) EXPECT_EQ(bloom::OptimalParams(n, p), oracle::BloomParams(n, p));
  }
}

TEST(Bloom, NoFalseNegatives) {
  auto f = BloomFilter::ForCapacity(2, 0.01);
  f.Insert("a");
  f.Insert("b");
  EXPECT_TRUE(f.MayContain("a"));
  EXPECT_TRUE(f.MayContain("b"));
  EXPECT_EQ(f.n_inserted(), 2u);
}

TEST(Bloom, EmptyFilterRejectsEverything) {
  auto f = BloomFilter::ForCapacity(0, 0.01, 3);
  EXPECT_FALSE(f.MayContainCell(3, 0));
  EXPECT_FALSE(f.MayContain("x"));
}

TEST(Bloom, FalsePositiveRateAtDesignLoad) {
  for (uint64_t seed = 1; seed <= 3; ++seed) {
    std::mt19937_64 rng(seed);
    const uint64_t n = 20000;
    auto f = BloomFilter::ForCapacity(n, 0.01, 4);
    std::set<uint64_t> in;
    while (in.size() < n) in.insert(rng() % 10'000'000);
    for (uint64_t id : in) f.InsertCell(4, id);
    for (uint64_t id : in) ASSERT_TRUE(f.MayContainCell(4, id));
    uint64_t fp = 0, probes = 0;
    while (probes < 100000) {
      const uint64_t id = 10'000'000 + rng() % 10'000'000;
      ++probes;
      fp += f.MayContainCell(4, id);
    }
    EXPECT_LE(static_cast<double>(fp) / static_cast<double>(probes), 0.02);
  }
}

TEST(Bloom, FileLayout) {
  BloomFilter f(100, 3, 7);
  f.Insert("k");
  const std::string bytes = f.Serialize();
  ASSERT_EQ(bytes.size(), 4 + 4 + 8 + 4 + 8 + 13u);
  EXPECT_EQ(bytes.substr(0, 4), "BLM1");
  EXPECT_EQ(static_cast<uint8_t>(bytes[4]), 7);
  EXPECT_EQ(static_cast<uint8_t>(bytes[8]), 100);
  EXPECT_EQ(static_cast<uint8_t>(bytes[16]), 3);
  EXPECT_EQ(static_cast<uint8_t>(bytes[20]), 1);
  size_t bits = 0;
  for (size_t i = 28; i < bytes.size(); ++i) bits += std::popcount(static_cast<uint8_t>(bytes[i]));
  EXPECT_EQ(bits, f.bits_set());
}

TEST(Bloom, RoundTripAnswersIdentically) {
  testutil::TempDir dir;
  std::mt19937_64 rng(4);
  auto f = BloomFilter::ForCapacity(5000, 0.01, 2);
  for (int i = 0; i < 5000; ++i) f.InsertCell(2, rng());
  f.Save(dir / "f.bin");
  auto g = BloomFilter::Load(dir / "f.bin");
  EXPECT_EQ(f, g);
  for (int i = 0; i < 10000; ++i) {
    const uint64_t id = rng();
    EXPECT_EQ(f.MayContainCell(2, id), g.MayContainCell(2, id));
  }
}

TEST(Bloom, CorruptFilesRejected) {
  BloomFilter f(64, 2);
  std::string bytes = f.Serialize();
  EXPECT_THROW(BloomFilter::Deserialize(bytes.substr(0, bytes.size() - 1)), DataError);
  bytes[0] = 'X';
  EXPECT_THROW(BloomFilter::Deserialize(bytes), DataError);
}

std::vector<NodeRecord> Nodes(int level, std::initializer_list<uint64_t> ids) {
  std::vector<NodeRecord> out;
  for (uint64_t id : ids) {
    NodeRecord n;
    n.level = level;
    n.id = id;
    out.push_back(n);
  }
  return out;
}

TEST(EdgeFilter, KeepAndDrop) {
  auto nodes = Nodes(1, {1, 2});
  auto filters = edgefilter::BuildFilters(nodes, 2, 0.01);
  EXPECT_TRUE(edgefilter::KeepEdge({1, 1, 2, 1, 0, {}}, filters));
  // Level 2 has no summarized nodes: its filter is empty, never a false positive.
  EXPECT_FALSE(edgefilter::KeepEdge({2, 1, 2, 1, 0, {}}, filters));
  EXPECT_THROW(edgefilter::KeepEdge({3, 1, 2, 1, 0, {}}, filters), DataError);
}

TEST(ExactJoin, Boundaries) {
  std::vector<EdgeRecord> edges{{1, 1, 2, 1, 0, {}}, {1, 2, 3, 1, 0, {}}};
  EXPECT_TRUE(edgefilter::ExactJoin(edges, {}).empty());
  auto all = Nodes(1, {1, 2, 3});
  EXPECT_EQ(edgefilter::ExactJoin(edges, all), edges);
}

TEST(EdgeFilter, SupersetOfExactJoinWithBoundedSurplus) {
  for (uint64_t seed = 1; seed <= 10; ++seed) {
    std::mt19937_64 rng(seed);
    std::vector<NodeRecord> summary;
    std::set<std::pair<int, uint64_t>> kept;
    for (int l = 1; l <= 3; ++l) {
      for (uint64_t id = 0; id < 20000; ++id) {
        if (rng() % 5 == 0) {
          summary.push_back(Nodes(l, {id})[0]);
          kept.insert({l, id});
        }
      }
    }
    std::vector<EdgeRecord> edges;
    for (int i = 0; i < 50000; ++i) {
      edges.push_back({static_cast<int>(1 + rng() % 3), rng() % 20000, rng() % 20000, 1, 0, {}});
    }
    auto filters = edgefilter::BuildFilters(summary, 3, 0.01);
    auto got = edgefilter::FilterEdges(edges, filters);
    auto exact = edgefilter::ExactJoin(edges, summary);
    uint64_t oracle_count = 0;
    for (const auto& e : edges) oracle_count += kept.count({e.level, e.src}) && kept.count({e.level, e.dst});
    ASSERT_EQ(exact.size(), oracle_count);
    // Zero false negatives.
    size_t j = 0;
    for (const auto& e : got) {
      if (j < exact.size() && e == exact[j]) ++j;
    }
    ASSERT_EQ(j, exact.size()) << "seed " << seed;
    const double surplus = static_cast<double>(got.size() - exact.size());
    const double non_significant = static_cast<double>(edges.size() - exact.size());
    EXPECT_LE(surplus / non_significant, 2 * 0.01);
  }
}

TEST(LevelFilters, SerializeAndDirRoundTrip) {
  testutil::TempDir dir;
  auto nodes = Nodes(1, {5, 6});
  auto more = Nodes(3, {9});
  nodes.insert(nodes.end(), more.begin(), more.end());
  auto f = edgefilter::BuildFilters(nodes, 3, 0.01);
  auto g = edgefilter::LevelFilters::Deserialize(f.Serialize());
  EXPECT_EQ(f.filters(), g.filters());
  f.SaveDir(dir.path());
  EXPECT_TRUE(fs::exists(dir / "bloom-01.bin"));
  auto h = edgefilter::LevelFilters::LoadDir(dir.path(), 3);
  EXPECT_EQ(f.filters(), h.filters());
  EXPECT_THROW(edgefilter::LevelFilters::LoadDir(dir.path(), 4), DataError);
}

TEST(FilterJob, MatchesInMemoryFilter) {
  testutil::TempDir dir;
  std::mt19937_64 rng(3);
  std::vector<NodeRecord> summary;
  for (uint64_t id = 0; id < 2000; id += 3) summary.push_back(Nodes(2, {id})[0]);
  std::vector<EdgeRecord> edges;
  std::string text;
  for (int i = 0; i < 5000; ++i) {
    NodeRecord n = Nodes(2, {rng() % 2000})[0];
    n.count = 1;
    text += ToLine(n) + "\n";
    EdgeRecord e{2, rng() % 2000, rng() % 2000, 1, 5, {{1, 1}}};
    edges.push_back(e);
    text += ToLine(e) + "\n";
  }
  WriteFileAtomic(dir / "part-00000", text);
  auto filters = edgefilter::BuildFilters(summary, 2, 0.01);
  edgefilter::FilterJobConfig cfg;
  cfg.output_dir = dir / "out";
  cfg.split_bytes = 32 << 10;
  cfg.workers = 3;
  std::vector<fs::path> in{dir / "part-00000"};
  auto r = edgefilter::RunFilterJob(in, filters, cfg);
  std::vector<EdgeRecord> got;
  ForEachLine(r.outputs, [&](std::string_view line) { got.push_back(ParseEdgeLine(line)); });
  EXPECT_EQ(got, edgefilter::FilterEdges(edges, filters));
  EXPECT_EQ(r.counters.at("edges_kept"), static_cast<int64_t>(got.size()));
}

}  // namespace
}  // namespace flowcube
