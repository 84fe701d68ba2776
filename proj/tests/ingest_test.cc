#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "flowcube/errors.h"
#include "flowcube/ingest.h"
#include "flowcube/movement.h"
#include "oracle.h"
#include "testutil.h"

namespace flowcube::ingest {
namespace {

const Region kRegion{-170, 10, -50, 75};

std::vector<GeoEvent> Parse(const std::string& text, ParseStats* stats = nullptr,
                            ParseOptions opts = {}) {
  std::istringstream in(text);
  return ParseEvents(in, stats, opts);
}

TEST(ParseEvents, FieldMapping) {
  auto ev = Parse("42,1406851200,-88.2,40.1\n");
  ASSERT_EQ(ev.size(), 1u);
  EXPECT_EQ(ev[0], (GeoEvent{42, 1406851200, {-88.2, 40.1}}));
}

TEST(ParseEvents, MalformedLineSkipped) {
  ParseStats st;
  std::string text;
  for (int i = 0; i < 20; ++i) text += "1," + std::to_string(100 + i) + ",-88,40\n";
  text += "42,notatime,-88.2,40.1\n";
  auto ev = Parse(text, &st);
  EXPECT_EQ(ev.size(), 20u);
  EXPECT_EQ(st.malformed, 1u);
}

TEST(ParseEvents, HeaderDetected) {
  ParseStats st;
  auto ev = Parse("user_id,epoch_seconds,lon,lat\n1,2,3,4\n", &st);
  EXPECT_TRUE(st.header);
  EXPECT_EQ(ev.size(), 1u);
}

TEST(ParseEvents, TooManyMalformedIsFatal) {
  EXPECT_THROW(Parse("1,2,3,4\nx\ny\n"), DataError);
  ParseOptions lenient;
  lenient.max_malformed_fraction = 0.9;
  EXPECT_NO_THROW(Parse("1,2,3,4\nx\ny\n", nullptr, lenient));
}

TEST(ParseEvents, OutOfRangeCoordinatesAreMalformed) {
  ParseStats st;
  ParseOptions lenient;
  lenient.max_malformed_fraction = 1.0;
  Parse("1,2,-190,4\n1,2,3,95\n1,2,nan,4\n1,-5,3,4\n", &st, lenient);
  EXPECT_EQ(st.malformed, 4u);
}

TEST(ParseEvents, TenThousandLinesInOrder) {
  std::mt19937_64 rng(2);
  std::string text;
  std::vector<GeoEvent> truth;
  for (int i = 0; i < 10000; ++i) {
    GeoEvent e{rng() % 100, static_cast<int64_t>(rng() % 1000000),
               {-100 + static_cast<double>(rng() % 1000) / 100, 40}};
    truth.push_back(e);
    text += std::to_string(e.user) + "," + std::to_string(e.t) + "," +
            std::to_string(e.point.lon) + ",40\n";
  }
  auto ev = Parse(text);
  ASSERT_EQ(ev.size(), truth.size());
  for (size_t i = 0; i < ev.size(); ++i) {
    EXPECT_EQ(ev[i].user, truth[i].user);
    EXPECT_EQ(ev[i].t, truth[i].t);
  }
}

TEST(BuildMovements, SimplePair) {
  std::vector<GeoEvent> ev{{1, 1, {-88, 40}}, {1, 2, {-87, 41}}};
  auto m = BuildMovements(ev, kRegion);
  ASSERT_EQ(m.size(), 1u);
  EXPECT_EQ(m[0], (MovementRecord{1, {-88, 40}, {-87, 41}, 1, 2}));
  EXPECT_EQ(m[0].travel_time(), 1);
}

TEST(BuildMovements, CollapsesRepeatsKeepingLatestDeparture) {
  std::vector<GeoEvent> ev{{1, 1, {-88, 40}}, {1, 2, {-88, 40}}, {1, 3, {-87, 41}}};
  BuildStats st;
  auto m = BuildMovements(ev, kRegion, {}, &st);
  ASSERT_EQ(m.size(), 1u);
  EXPECT_EQ(m[0].t_src, 2);
  EXPECT_EQ(m[0].t_dst, 3);
  EXPECT_EQ(st.collapsed, 1u);
}

TEST(BuildMovements, UnsortedInputAndOutOfRegion) {
  std::vector<GeoEvent> ev{{2, 5, {-87, 41}}, {2, 1, {-88, 40}}, {2, 3, {10, 10}}};
  BuildStats st;
  auto m = BuildMovements(ev, kRegion, {}, &st);
  ASSERT_EQ(m.size(), 1u);
  EXPECT_EQ(m[0].t_src, 1);
  EXPECT_EQ(st.dropped_out_of_region, 1u);
}

TEST(BuildMovements, MaxGapBreaksTrajectory) {
  std::vector<GeoEvent> ev{{1, 0, {-88, 40}}, {1, 10, {-87, 41}}, {1, 1000, {-86, 42}}};
  BuildOptions o;
  o.max_gap_seconds = 100;
  BuildStats st;
  auto m = BuildMovements(ev, kRegion, o, &st);
  EXPECT_EQ(m.size(), 1u);
  EXPECT_EQ(st.gap_breaks, 1u);
}

TEST(BuildMovements, RandomWalkMatchesOracle) {
  std::mt19937_64 rng(1000);
  std::vector<GeoEvent> ev;
  for (uint64_t u = 0; u < 1000; ++u) {
    const int n = static_cast<int>(rng() % 15);
    double lon = -100, lat = 40;
    for (int i = 0; i < n; ++i) {
      if (rng() % 3) {
        lon += static_cast<double>(rng() % 5) * 0.01;
        lat -= static_cast<double>(rng() % 3) * 0.01;
      }
      // Shuffle times a little so sorting and ties are exercised.
      ev.push_back({u, static_cast<int64_t>(rng() % 50), {lon, lat}});
    }
  }
  std::shuffle(ev.begin(), ev.end(), rng);
  for (int workers : {1, 4}) {
    BuildOptions o;
    o.workers = workers;
    auto got = BuildMovements(ev, kRegion, o);
    auto want = oracle::Trajectories(ev, kRegion);
    ASSERT_EQ(got, want);
    for (const auto& m : got) {
      EXPECT_LE(m.t_src, m.t_dst);
      EXPECT_NE(m.src, m.dst);
    }
  }
}

TEST(Movements, CsvRoundTripIsExact) {
  testutil::TempDir dir;
  std::vector<MovementRecord> ms{{7, {-88.123456, 40.000001}, {-87.5, 41.25}, 10, 20},
                                 {8, {-0.1, 0.3}, {1e-7, -2.5e-5}, 0, 0}};
  WriteMovements(dir / "m.csv", ms);
  EXPECT_EQ(ReadMovements(dir / "m.csv"), ms);
}

}  // namespace
}  // namespace flowcube::ingest
