#include <random>

#include <gtest/gtest.h>

#include "flowcube/aggregate.h"
#include "flowcube/io.h"
#include "flowcube/movement.h"
#include "oracle.h"
#include "testutil.h"

namespace flowcube::aggregate {
namespace {

namespace fs = std::filesystem;

GridConfig SmallGrid() {
  return GridConfig::FromJson(nlohmann::json::parse(
      R"({"region":[-90,35,-80,45],"levels":5,"base_cell_arcsec":30,"growth":2})"));
}

oracle::Grid OracleGrid() { return {{-90, 35, -80, 45}, 5, 30, 2, 0, 86400}; }

std::vector<MovementRecord> RandomMovements(size_t n, uint64_t seed) {
  std::mt19937_64 rng(seed);
  // Clustered so cells repeat; some long trips so the threshold bites.
  std::uniform_real_distribution<double> lon(-90, -80), lat(35, 45);
  std::normal_distribution<double> step(0, 0.05);
  std::vector<MovementRecord> out;
  for (size_t i = 0; i < n; ++i) {
    const double cx = -85 + 3 * static_cast<double>(i % 3 == 0), cy = 40;
    GeoPoint s{std::clamp(cx + step(rng), -90.0, -80.0), std::clamp(cy + step(rng), 35.0, 45.0)};
    GeoPoint d = (i % 7 == 0) ? GeoPoint{lon(rng), lat(rng)}
                              : GeoPoint{std::clamp(s.lon + step(rng), -90.0, -80.0),
                                         std::clamp(s.lat + step(rng), 35.0, 45.0)};
    s = {std::round(s.lon * 1e6) / 1e6, std::round(s.lat * 1e6) / 1e6};
    d = {std::round(d.lon * 1e6) / 1e6, std::round(d.lat * 1e6) / 1e6};
    const int64_t t = 1609459200 + static_cast<int64_t>(rng() % (20 * 86400));
    out.push_back({rng() % 300, s, d, t, t + static_cast<int64_t>(rng() % 7200)});
  }
  return out;
}

void ExpectMatchesOracle(const AggregateResult& got, const oracle::Graph& want) {
  ASSERT_EQ(got.nodes.size(), want.nodes.size());
  for (const auto& n : got.nodes) {
    auto it = want.nodes.find({n.level, n.id});
    ASSERT_NE(it, want.nodes.end()) << n.level << "/" << n.id;
    const NodeRecord& w = it->second;
    EXPECT_EQ(n.count, w.count);
    EXPECT_EQ(n.src_count, w.src_count);
    EXPECT_EQ(n.tt_sum, w.tt_sum);
    EXPECT_EQ(n.tb, w.tb);
    EXPECT_EQ(n.users, w.users);
    EXPECT_NEAR(n.centroid.lon, w.centroid.lon, 1e-9);
    EXPECT_NEAR(n.centroid.lat, w.centroid.lat, 1e-9);
  }
  ASSERT_EQ(got.edges.size(), want.edges.size());
  for (const auto& e : got.edges) {
    auto it = want.edges.find({e.level, e.src, e.dst});
    ASSERT_NE(it, want.edges.end());
    EXPECT_EQ(e, it->second);
  }
}

TEST(Threshold, FinestAndCoarsestLevels) {
  const auto na = GridConfig::NorthAmerica().grid;
  EXPECT_NEAR(ThresholdKm(10, na, 64), 59.304, 1e-9);
  EXPECT_NEAR(ThresholdKm(1, na, 64), 30363.648, 1e-6);
  // Larger than half the circumference: nothing is filtered at level 1.
  EXPECT_GT(ThresholdKm(1, na, 64), 3.14159 * 6371.0);
}

TEST(AggState, SingleMovementTrace) {
  GridConfig g{GridHierarchy({0, 0, 6, 6}, 1, 1.5 * 3600), {}};
  AggState st(g, {});
  ASSERT_TRUE(st.Add({1, {0.2, 0.2}, {0.4, 0.6}, 10, 20}));
  const auto& lv = st.levels()[0];
  ASSERT_EQ(lv.nodes.size(), 1u);
  const auto& n = lv.nodes.at(0).partial.Finish(1, 0, false);
  EXPECT_EQ(n.count, 2u);
  EXPECT_NEAR(n.centroid.lon, 0.3, 1e-12);
  EXPECT_NEAR(n.centroid.lat, 0.4, 1e-12);
  ASSERT_EQ(lv.edges.size(), 1u);
  EXPECT_EQ(lv.edges.begin()->first, (std::pair<uint64_t, uint64_t>{0, 0}));
  EXPECT_EQ(lv.edges.begin()->second.count, 1u);
}

TEST(AggState, ThresholdDropsEdgeOnlyAtFinerLevel) {
  // Finest cells 0.925 km so alpha 64 gives 59.3 km at level 2 and 118.6 km
  // at level 1; a ~100 km trip keeps only the level-1 edge.
  GridConfig g{GridHierarchy({-90, 35, -80, 45}, 2, 30), {}};
  AggState st(g, {});
  ASSERT_TRUE(st.Add({1, {-88.0, 40.0}, {-88.0, 40.9}, 0, 1}));
  EXPECT_EQ(st.levels()[0].edges.size(), 1u);
  EXPECT_EQ(st.levels()[1].edges.size(), 0u);
  EXPECT_EQ(st.levels()[1].nodes.size(), 2u);
}

TEST(AggState, RejectsOutOfRegionAndPreOrigin) {
  GridConfig g = SmallGrid();
  AggState st(g, {});
  EXPECT_FALSE(st.Add({1, {-95, 40}, {-88, 40}, 0, 1}));
  g.time.t0 = 100;
  AggState st2(g, {});
  EXPECT_FALSE(st2.Add({1, {-88, 40}, {-87, 40}, 50, 60}));
  EXPECT_TRUE(st.levels()[0].nodes.empty());
}

TEST(NodePartial, WeightedMerge) {
  NodePartial a, b;
  a.count = 3;
  a.sum_lon = ToFixed(1.0) * 3;
  a.sum_lat = ToFixed(2.0) * 3;
  b.count = 5;
  b.sum_lon = ToFixed(3.0) * 5;
  b.sum_lat = ToFixed(4.0) * 5;
  a.Merge(b);
  auto n = a.Finish(1, 0, false);
  EXPECT_EQ(n.count, 8u);
  EXPECT_NEAR(n.centroid.lon, (3 * 1.0 + 5 * 3.0) / 8, 1e-12);
  EXPECT_NEAR(n.centroid.lat, (3 * 2.0 + 5 * 4.0) / 8, 1e-12);
  EXPECT_EQ(NodePartial::Decode(a.Encode()).Finish(1, 0, false), n);
}

TEST(AggregateInMemory, TenThousandMovementsMatchOracle) {
  auto ms = RandomMovements(10000, 1);
  AggregateOptions opts{64, true};
  auto got = AggregateInMemory(ms, SmallGrid(), opts);
  ExpectMatchesOracle(got, oracle::Aggregate(ms, OracleGrid(), 64, true));
}

TEST(AggregateInMemory, HugeAlphaEqualsUnfilteredOracle) {
  auto ms = RandomMovements(3000, 2);
  auto got = AggregateInMemory(ms, SmallGrid(), {1e12, false});
  auto want = oracle::Aggregate(ms, OracleGrid(), 1e12);
  ExpectMatchesOracle(got, want);
  uint64_t edges_l5 = 0;
  for (const auto& e : got.edges) edges_l5 += e.level == 5 ? e.count : 0;
  EXPECT_EQ(edges_l5, ms.size());
}

TEST(AggregateInMemory, CountInvariants) {
  auto ms = RandomMovements(5000, 3);
  const auto g = SmallGrid();
  auto r = AggregateInMemory(ms, g, {});
  for (int l = 1; l <= 5; ++l) {
    uint64_t nodes = 0, edges = 0, expected_edges = 0;
    for (const auto& n : r.nodes) {
      if (n.level != l) continue;
      nodes += n.count;
      EXPECT_EQ(HistogramTotal(n.tb), n.count);
      EXPECT_TRUE(g.grid.cell_bounds({l, n.id}).Contains(n.centroid));
    }
    for (const auto& e : r.edges) edges += e.level == l ? e.count : 0;
    for (const auto& m : ms) expected_edges += GreatCircleKm(m.src, m.dst) < ThresholdKm(l, g.grid, 64);
    EXPECT_EQ(nodes, 2 * ms.size());
    EXPECT_EQ(edges, expected_edges);
  }
}

TEST(AggregateJob, MatchesInMemoryAndRoutesBySource) {
  testutil::TempDir dir;
  auto ms = RandomMovements(10000, 4);
  WriteMovements(dir / "mv.csv", ms);
  const auto g = SmallGrid();
  std::vector<GeoPoint> sample;
  for (const auto& m : ms) sample.push_back(m.src);
  auto scheme = partition::RecursiveBisect(sample, g.grid.region(), 2);

  AggregateJobConfig cfg;
  cfg.grid = g;
  cfg.scheme = scheme;
  cfg.options = {64, true};
  cfg.output_dir = dir / "agg";
  cfg.split_bytes = 64 << 10;
  cfg.workers = 3;
  std::vector<fs::path> in{dir / "mv.csv"};
  auto res = RunAggregateJob(in, cfg);
  ASSERT_EQ(res.outputs.size(), 4u);

  AggregateResult got;
  const auto og = OracleGrid();
  for (uint32_t p = 0; p < res.outputs.size(); ++p) {
    const Region& rect = scheme.rects[p];
    ForEachLine({res.outputs[p]}, [&](std::string_view line) {
      uint64_t cell = 0;
      int level = 0;
      if (ClassifyLine(line) == LineKind::kNode) {
        got.nodes.push_back(ParseNodeLine(line));
        cell = got.nodes.back().id;
        level = got.nodes.back().level;
      } else {
        got.edges.push_back(ParseEdgeLine(line));
        cell = got.edges.back().src;
        level = got.edges.back().level;
      }
      // Cell center clamped into the region must fall in this rectangle.
      const double len = og.len_deg(level);
      const uint64_t cols = og.cols(level);
      double cx = og.region.lon_min + (static_cast<double>(cell % cols) + 0.5) * len;
      double cy = og.region.lat_min + (static_cast<double>(cell / cols) + 0.5) * len;
      cx = std::min(cx, og.region.lon_max);
      cy = std::min(cy, og.region.lat_max);
      const bool in_rect = cx >= rect.lon_min && cy >= rect.lat_min &&
                           (cx < rect.lon_max || rect.lon_max == og.region.lon_max) &&
                           (cy < rect.lat_max || rect.lat_max == og.region.lat_max);
      EXPECT_TRUE(in_rect) << line.substr(0, 60);
    });
  }
  std::sort(got.nodes.begin(), got.nodes.end(),
            [](const auto& a, const auto& b) { return std::tie(a.level, a.id) < std::tie(b.level, b.id); });
  std::sort(got.edges.begin(), got.edges.end(), [](const auto& a, const auto& b) {
    return std::tie(a.level, a.src, a.dst) < std::tie(b.level, b.src, b.dst);
  });
  ExpectMatchesOracle(got, oracle::Aggregate(ms, og, 64, true));
  EXPECT_EQ(got.nodes, AggregateInMemory(ms, g, {64, true}).nodes);
}

TEST(AggregateJob, OutputIndependentOfWorkersAndOrder) {
  testutil::TempDir dir;
  auto ms = RandomMovements(8000, 5);
  WriteMovements(dir / "a.csv", ms);
  const auto g = SmallGrid();
  std::vector<GeoPoint> sample;
  for (const auto& m : ms) sample.push_back(m.src);
  auto scheme = partition::RecursiveBisect(sample, g.grid.region(), 3);
  auto run = [&](const fs::path& input, uint32_t workers, const std::string& out) {
    AggregateJobConfig cfg;
    cfg.grid = g;
    cfg.scheme = scheme;
    cfg.output_dir = dir / out;
    cfg.split_bytes = 32 << 10;
    cfg.workers = workers;
    std::vector<fs::path> in{input};
    std::string all;
    for (const auto& f : RunAggregateJob(in, cfg).outputs) all += ReadFile(f) + "|";
    return all;
  };
  const std::string w1 = run(dir / "a.csv", 1, "w1");
  EXPECT_EQ(w1, run(dir / "a.csv", 8, "w8"));
  // Same movements in another order, different split boundaries.
  std::reverse(ms.begin(), ms.end());
  WriteMovements(dir / "b.csv", ms);
  EXPECT_EQ(w1, run(dir / "b.csv", 2, "rev"));
}

TEST(Keys, RoundTripAndOrder) {
  auto k = DecodeKey(EdgeKey(3, 17, 99));
  EXPECT_TRUE(k.is_edge);
  EXPECT_EQ(k.level, 3);
  EXPECT_EQ(k.cell, 17u);
  EXPECT_EQ(k.dst, 99u);
  EXPECT_LT(NodeKey(9, 1000), EdgeKey(1, 0, 0));
  EXPECT_LT(NodeKey(1, 255), NodeKey(1, 256));
}

}  // namespace
}  // namespace flowcube::aggregate
