#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "flowcube/grid.h"
#include "flowcube/mapreduce.h"
#include "flowcube/movement.h"
#include "flowcube/partition.h"
#include "flowcube/records.h"

namespace flowcube::aggregate {

struct AggregateOptions {
  // Edges at level l require great-circle length < alpha * cell_len_km(l).
  double alpha = 64.0;
  bool track_users = false;
};

double ThresholdKm(int level, const GridHierarchy& grid, double alpha);

// Cell center clamped into the region (edge cells may overhang it). Used to
// route a cell's partials to a partition.
GeoPoint CellRoutingPoint(const GridHierarchy& grid, const CellId& cell);

// Coordinates are accumulated in fixed point (1e-10 degree units) with
// 128-bit sums, so merging partials is exact and order independent.
inline constexpr double kFixedScale = 1e10;
int64_t ToFixed(double degrees);

struct NodePartial {
  uint64_t count = 0;
  __int128 sum_lon = 0;
  __int128 sum_lat = 0;
  uint64_t src_count = 0;
  int64_t tt_sum = 0;
  Histogram tb;
  // Sorted, unique; empty unless users are tracked.
  std::vector<uint64_t> users;

  void Merge(const NodePartial& other);
  NodeRecord Finish(int level, uint64_t id, bool track_users) const;
  std::string Encode() const;
  static NodePartial Decode(std::string_view bytes);
};

struct EdgePartial {
  uint64_t count = 0;
  int64_t tt_sum = 0;
  Histogram tb;

  void Merge(const EdgePartial& other);
  EdgeRecord Finish(int level, uint64_t src, uint64_t dst) const;
  std::string Encode() const;
  static EdgePartial Decode(std::string_view bytes);
};

// Shuffle keys: [kind][level][cell BE64]([dst BE64] for edges). Nodes sort
// before edges, then by level and cell ids.
std::string NodeKey(int level, uint64_t cell);
std::string EdgeKey(int level, uint64_t src, uint64_t dst);
struct DecodedKey {
  bool is_edge = false;
  int level = 0;
  uint64_t cell = 0;  // source cell for edges
  uint64_t dst = 0;
};
DecodedKey DecodeKey(std::string_view key);

struct PairHash {
  size_t operator()(const std::pair<uint64_t, uint64_t>& p) const noexcept {
    return std::hash<uint64_t>()(p.first * 0x9E3779B97F4A7C15ULL ^ p.second);
  }
};

// Per-mapper in-memory combiner state: one graph per level.
class AggState {
 public:
  struct NodeAcc {
    NodePartial partial;
    std::unordered_set<uint64_t> users;
  };
  struct LevelGraph {
    std::unordered_map<uint64_t, NodeAcc> nodes;
    std::unordered_map<std::pair<uint64_t, uint64_t>, EdgePartial, PairHash> edges;
  };

  AggState(const GridConfig& config, const AggregateOptions& opts);

  // Merges one movement into every level. Returns false (and merges
  // nothing) when an endpoint is outside the region or the departure time
  // precedes the time origin.
  bool Add(const MovementRecord& m);

  const std::vector<LevelGraph>& levels() const { return levels_; }
  // Emits every partial once as (key, encoded value) and clears the state.
  template <typename Fn>
  void Drain(Fn&& emit);

 private:
  GridConfig config_;
  AggregateOptions opts_;
  std::vector<double> threshold_km_;
  std::vector<LevelGraph> levels_;
};

struct AggregateResult {
  std::vector<NodeRecord> nodes;  // sorted by (level, id)
  std::vector<EdgeRecord> edges;  // sorted by (level, src, dst)
  uint64_t dropped = 0;
};

// Single-process aggregation over an in-memory movement list.
AggregateResult AggregateInMemory(std::span<const MovementRecord> movements,
                                  const GridConfig& config,
                                  const AggregateOptions& opts = {});

struct AggregateJobConfig {
  GridConfig grid = GridConfig::NorthAmerica();
  partition::PartitionScheme scheme;
  AggregateOptions options;
  uint32_t workers = 1;
  uint64_t split_bytes = uint64_t{16} << 20;
  uint64_t shuffle_memory_bytes = uint64_t{256} << 20;
  std::filesystem::path output_dir;
};

// Runs the aggregation job over movement CSV files. Each output part holds
// the node lines followed by the edge lines of one partition.
mr::JobResult RunAggregateJob(std::span<const std::filesystem::path> movement_files,
                              const AggregateJobConfig& cfg);

// Job pieces, exposed for tests.
std::unique_ptr<mr::Mapper> MakeAggMapper(std::string_view broadcast);
std::unique_ptr<mr::Reducer> MakeAggReducer(bool track_users);
std::string MakeAggBroadcast(const GridConfig& grid, const AggregateOptions& opts);

}  // namespace flowcube::aggregate

namespace flowcube::aggregate {

template <typename Fn>
void AggState::Drain(Fn&& emit) {
  for (int l = 1; l <= static_cast<int>(levels_.size()); ++l) {
    LevelGraph& g = levels_[l - 1];
    for (auto& [cell, acc] : g.nodes) {
      if (opts_.track_users) {
        acc.partial.users.assign(acc.users.begin(), acc.users.end());
        std::sort(acc.partial.users.begin(), acc.partial.users.end());
      }
      emit(NodeKey(l, cell), acc.partial.Encode());
    }
    for (const auto& [key, partial] : g.edges) {
      emit(EdgeKey(l, key.first, key.second), partial.Encode());
    }
    g.nodes.clear();
    g.edges.clear();
  }
}

}  // namespace flowcube::aggregate
