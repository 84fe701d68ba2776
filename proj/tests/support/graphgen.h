#pragma once

#include <algorithm>
#include <random>
#include <set>
#include <vector>

#include "flowcube/grid.h"
#include "flowcube/records.h"

namespace testutil {

struct RandomGraph {
  std::vector<flowcube::NodeRecord> nodes;
  std::vector<flowcube::EdgeRecord> edges;
};

// Nodes on distinct cells of every level, each with a histogram over
// buckets [0, 30); edges only between existing nodes.
inline RandomGraph MakeGraph(const flowcube::GridHierarchy& grid, size_t nodes_per_level,
                             size_t edges_per_level, uint64_t seed) {
  using namespace flowcube;
  std::mt19937_64 rng(seed);
  const Region r = grid.region();
  std::uniform_real_distribution<double> lon(r.lon_min, r.lon_max), lat(r.lat_min, r.lat_max);
  RandomGraph g;
  for (int l = 1; l <= grid.levels(); ++l) {
    std::vector<uint64_t> ids;
    std::set<uint64_t> used;
    for (size_t tries = 0; ids.size() < nodes_per_level && tries < nodes_per_level * 20; ++tries) {
      const GeoPoint p{lon(rng), lat(rng)};
      const uint64_t id = grid.cell_id(p, l).index;
      if (!used.insert(id).second) continue;
      ids.push_back(id);
      NodeRecord n;
      n.level = l;
      n.id = id;
      n.centroid = p;
      for (int k = 0; k < 3; ++k) AddToHistogram(n.tb, static_cast<int64_t>(rng() % 30), 1 + rng() % 9);
      n.count = HistogramTotal(n.tb);
      n.src_count = n.count / 2 + 1;
      n.tt_sum = static_cast<int64_t>(rng() % 100000);
      if (rng() % 2) n.users = 1 + rng() % n.count;
      if (rng() % 2) n.rank = 80.5 + static_cast<double>(rng() % 195) / 10;
      g.nodes.push_back(n);
    }
    std::set<std::pair<uint64_t, uint64_t>> pairs;
    for (size_t i = 0; i < edges_per_level && ids.size() > 1; ++i) {
      const uint64_t s = ids[rng() % ids.size()], d = ids[rng() % ids.size()];
      if (!pairs.insert({s, d}).second) continue;
      EdgeRecord e;
      e.level = l;
      e.src = s;
      e.dst = d;
      for (int k = 0; k < 2; ++k) AddToHistogram(e.tb, static_cast<int64_t>(rng() % 30), 1 + rng() % 4);
      e.count = HistogramTotal(e.tb);
      e.tt_sum = static_cast<int64_t>(rng() % 50000);
      g.edges.push_back(e);
    }
  }
  std::shuffle(g.nodes.begin(), g.nodes.end(), rng);
  std::shuffle(g.edges.begin(), g.edges.end(), rng);
  return g;
}

}  // namespace testutil
