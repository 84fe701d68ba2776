#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "flowcube/errors.h"
#include "flowcube/partition.h"
#include "flowcube/synth.h"
#include "oracle.h"
#include "testutil.h"

namespace flowcube::partition {
namespace {

std::vector<MovementRecord> UniformMovements(size_t n, uint64_t seed, const Region& r) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> lon(r.lon_min, r.lon_max), lat(r.lat_min, r.lat_max);
  std::vector<MovementRecord> out;
  for (size_t i = 0; i < n; ++i) {
    out.push_back({i, {lon(rng), lat(rng)}, {lon(rng), lat(rng)}, 0, 1});
  }
  return out;
}

uint32_t LinearLocate(const PartitionScheme& s, const GeoPoint& p) {
  for (uint32_t i = 0; i < s.rects.size(); ++i) {
    if (OwnsPoint(s.rects[i], s.region, p)) return i;
  }
  return UINT32_MAX;
}

TEST(SamplePoints, FullRateKeepsEverySource) {
  auto ms = UniformMovements(100, 1, {0, 0, 10, 10});
  auto s = SamplePoints(ms, 1.0, 7);
  ASSERT_EQ(s.size(), 100u);
  for (size_t i = 0; i < 100; ++i) EXPECT_EQ(s[i], ms[i].src);
}

TEST(SamplePoints, DeterministicForSeed) {
  auto ms = UniformMovements(200000, 2, {0, 0, 10, 10});
  EXPECT_EQ(SamplePoints(ms, 0.01, 5), SamplePoints(ms, 0.01, 5));
  EXPECT_NE(SamplePoints(ms, 0.01, 5), SamplePoints(ms, 0.01, 6));
}

TEST(SamplePoints, EmptyInputIsAnError) {
  std::vector<MovementRecord> none;
  EXPECT_THROW(SamplePoints(none, 0.5, 1), DataError);
}

TEST(SamplePoints, MeanWithinThreeSigma) {
  const Region r{0, 0, 10, 10};
  auto ms = UniformMovements(200000, 3, r);
  auto s = SamplePoints(ms, 0.05, 1);
  double mx = 0, my = 0;
  for (const auto& p : s) {
    mx += p.lon;
    my += p.lat;
  }
  mx /= static_cast<double>(s.size());
  my /= static_cast<double>(s.size());
  // Uniform on [0,10]: sigma 10/sqrt(12), population mean 5.
  const double se = 10 / std::sqrt(12.0) / std::sqrt(static_cast<double>(s.size()));
  EXPECT_LT(std::abs(mx - 5), 3 * se);
  EXPECT_LT(std::abs(my - 5), 3 * se);
}

TEST(RecursiveBisect, MedianSplitOfFourPoints) {
  std::vector<GeoPoint> pts{{0, 5}, {1, 5}, {10, 5}, {11, 5}};
  const Region region{0, 0, 12, 10};
  auto s1 = RecursiveBisect(pts, region, 1);
  ASSERT_EQ(s1.size(), 2u);
  EXPECT_EQ(s1.counts, (std::vector<uint64_t>{2, 2}));
  EXPECT_EQ(s1.rects[0].lat_max, 10);  // vertical cut
  EXPECT_GT(s1.rects[0].lon_max, 1);
  EXPECT_LE(s1.rects[0].lon_max, 10);
  auto s2 = RecursiveBisect(pts, region, 2);
  ASSERT_EQ(s2.size(), 4u);
  EXPECT_EQ(s2.counts, (std::vector<uint64_t>{1, 1, 1, 1}));
}

TEST(RecursiveBisect, EmptyRectangleSplitsAtMidpoint) {
  std::vector<GeoPoint> pts{{1, 1}};
  auto s = RecursiveBisect(pts, {0, 0, 8, 4}, 2);
  ASSERT_EQ(s.size(), 4u);
  double area = 0;
  for (const auto& r : s.rects) area += r.area();
  EXPECT_NEAR(area, 32, 1e-9);
}

TEST(RecursiveBisect, SkewedSampleIsBalanced) {
  synth::SynthOptions o;
  o.users = 5000;
  o.events_per_user = 20;
  o.skew = 0.8;
  o.hot_area_fraction = 0.05;
  auto ev = synth::Synthesize(o);
  std::vector<GeoPoint> pts;
  for (const auto& e : ev) pts.push_back(e.point);
  ASSERT_GE(pts.size(), 100000u);
  auto s = RecursiveBisect(pts, o.region, 4);
  const double mean = static_cast<double>(pts.size()) / 16;
  const auto mx = *std::max_element(s.counts.begin(), s.counts.end());
  EXPECT_LE(static_cast<double>(mx) / mean, 1.3);
  EXPECT_EQ(std::accumulate(s.counts.begin(), s.counts.end(), uint64_t{0}), pts.size());
}

TEST(RecursiveBisect, TilesRegionAndLocateMatchesScan) {
  const Region region{-170, 10, -50, 75};
  auto ms = UniformMovements(5000, 4, region);
  auto sample = SamplePoints(ms, 1.0, 1);
  for (int depth = 0; depth <= 5; ++depth) {
    auto s = RecursiveBisect(sample, region, depth);
    ASSERT_EQ(s.size(), size_t{1} << depth);
    double area = 0;
    for (const auto& r : s.rects) area += r.area();
    EXPECT_NEAR(area, region.area(), 1e-6);
    RectIndex idx(s);
    std::mt19937_64 rng(depth);
    std::uniform_real_distribution<double> lon(-170, -50), lat(10, 75);
    for (int i = 0; i < 10000; ++i) {
      GeoPoint p{lon(rng), lat(rng)};
      if (i % 10 == 0 && !s.rects.empty()) p.lon = s.rects[i % s.size()].lon_min;  // on a cut
      if (i % 17 == 0) p = {-50, 75};
      const uint32_t want = LinearLocate(s, p);
      ASSERT_NE(want, UINT32_MAX);
      EXPECT_EQ(idx.Locate(p), want);
    }
  }
}

TEST(RectIndex, TwoRectSplitAtFive) {
  PartitionScheme s;
  s.region = {0, 0, 10, 10};
  s.rects = {{0, 0, 5, 10}, {5, 0, 10, 10}};
  s.counts = {1, 1};
  RectIndex idx(s);
  EXPECT_EQ(idx.Locate({3, 4}), 0u);
  EXPECT_EQ(idx.Locate({5, 4}), 1u);
  EXPECT_EQ(idx.Locate({10, 10}), 1u);
  EXPECT_THROW(idx.Locate({11, 4}), OutOfRegionError);
}

TEST(RectIndex, NeighborPartitions) {
  PartitionScheme s;
  s.region = {0, 0, 10, 10};
  s.rects = {{0, 0, 5, 5}, {5, 0, 10, 5}, {0, 5, 5, 10}, {5, 5, 10, 10}};
  s.counts = {1, 1, 1, 1};
  RectIndex idx(s);
  EXPECT_EQ(idx.NeighborPartitions({2, 2}, 0), (std::vector<uint32_t>{0}));
  EXPECT_EQ(idx.NeighborPartitions({5, 5}, 0.1), (std::vector<uint32_t>{0, 1, 2, 3}));
}

TEST(RectIndex, NeighborsMatchBruteForce) {
  const Region region{-170, 10, -50, 75};
  auto ms = UniformMovements(3000, 8, region);
  auto s = RecursiveBisect(SamplePoints(ms, 1.0, 1), region, 4);
  RectIndex idx(s);
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> lon(-170, -50), lat(10, 75), off(0, 15);
  for (int i = 0; i < 1000; ++i) {
    const GeoPoint p{lon(rng), lat(rng)};
    const double o = off(rng);
    const Region q{p.lon - o, p.lat - o, p.lon + o, p.lat + o};
    std::vector<uint32_t> want;
    for (uint32_t k = 0; k < s.size(); ++k) {
      if (s.rects[k].Intersects(q)) want.push_back(k);
    }
    const auto got = idx.NeighborPartitions(p, o);
    EXPECT_EQ(got, want);
    EXPECT_TRUE(std::binary_search(got.begin(), got.end(), idx.Locate(p)));
  }
}

TEST(SafeOffset, CoversGreatCircleDisc) {
  const Region region{-170, 10, -50, 75};
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> lon(-170, -50), lat(10, 75), ang(0, 6.283185307179586);
  for (double radius : {1.0, 50.0, 500.0}) {
    const double off = SafeOffsetDeg(radius, region);
    for (int i = 0; i < 2000; ++i) {
      const GeoPoint p{lon(rng), lat(rng)};
      // A point at just under `radius` in a random direction.
      const double a = ang(rng), d = radius * 0.999 / 6371.0;
      const double la = p.lat * M_PI / 180, lo = p.lon * M_PI / 180;
      const double lat2 = std::asin(std::sin(la) * std::cos(d) + std::cos(la) * std::sin(d) * std::cos(a));
      const double lon2 = lo + std::atan2(std::sin(a) * std::sin(d) * std::cos(la),
                                          std::cos(d) - std::sin(la) * std::sin(lat2));
      const GeoPoint q{lon2 * 180 / M_PI, lat2 * 180 / M_PI};
      if (!region.Contains(q)) continue;
      ASSERT_LT(oracle::HaversineKm(p.lon, p.lat, q.lon, q.lat), radius);
      EXPECT_LE(std::abs(q.lon - p.lon), off);
      EXPECT_LE(std::abs(q.lat - p.lat), off);
    }
  }
}

TEST(PartitionScheme, JsonRoundTrip) {
  testutil::TempDir dir;
  auto ms = UniformMovements(500, 9, {0, 0, 10, 10});
  auto s = RecursiveBisect(SamplePoints(ms, 1.0, 1), {0, 0, 10, 10}, 3);
  s.seed = 42;
  s.Save(dir / "p.json");
  auto back = PartitionScheme::Load(dir / "p.json");
  EXPECT_EQ(back.rects, s.rects);
  EXPECT_EQ(back.counts, s.counts);
  EXPECT_EQ(back.seed, 42u);
  EXPECT_EQ(back.depth, 3);
}

}  // namespace
}  // namespace flowcube::partition
