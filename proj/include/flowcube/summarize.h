#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <json.hpp>

#include "flowcube/grid.h"
#include "flowcube/mapreduce.h"
#include "flowcube/partition.h"
#include "flowcube/records.h"

namespace flowcube::summarize {

struct SummaryConfig {
  // Neighborhood radius in cell lengths; one value for every level, or one
  // per level (coarsest first).
  std::vector<double> radius_cells = {8.0};
  // Nodes whose percentile rank is strictly above this survive.
  double threshold = 80.0;

  double RadiusCells(int level) const;
  void Validate(int levels) const;
  nlohmann::json ToJson() const;
  static SummaryConfig FromJson(const nlohmann::json& j);
};

// Percentile rank of `count` among its neighbours, with ties counted as
// half: 100 * (#less + 0.5 * #equal) / n. An empty neighbourhood ranks 100.
// The node itself must not be part of `neighbors`.
double PercentileRank(uint64_t count, std::span<const uint64_t> neighbors);

// Great-circle neighbourhood radius at a level: cell_len_km * r.
double RadiusKm(const GridHierarchy& grid, const SummaryConfig& cfg, int level);
// Square window half-width (degrees) guaranteed to cover that radius.
double FanoutOffsetDeg(const GridHierarchy& grid, const SummaryConfig& cfg, int level);

struct Replica {
  NodeRecord node;
  // True only for the copy held by the partition that contains the node.
  bool home = false;
};

// Partitions that must see `node` so every neighbourhood is complete, and
// which of them is home.
struct Fanout {
  std::vector<uint32_t> partitions;
  uint32_t home = 0;
};
Fanout NeighborFanout(const NodeRecord& node, const partition::RectIndex& index,
                      const GridHierarchy& grid, const SummaryConfig& cfg);

// Scores every home replica against all replicas of its level and returns
// the survivors (with rank set), sorted by (level, id).
std::vector<NodeRecord> ScoreReplicas(std::span<const Replica> replicas,
                                      const GridHierarchy& grid,
                                      const SummaryConfig& cfg);

// Scores a complete node set in one process (every node is home).
std::vector<NodeRecord> SummarizeInMemory(std::span<const NodeRecord> nodes,
                                          const GridHierarchy& grid,
                                          const SummaryConfig& cfg);

struct SummarizeJobConfig {
  GridConfig grid = GridConfig::NorthAmerica();
  partition::PartitionScheme scheme;
  SummaryConfig summary;
  uint32_t workers = 1;
  uint64_t split_bytes = uint64_t{16} << 20;
  uint64_t shuffle_memory_bytes = uint64_t{256} << 20;
  std::filesystem::path output_dir;
};

// Reads the node lines of aggregation outputs and writes summary node lines
// (node line plus "rank") per partition.
mr::JobResult RunSummarizeJob(std::span<const std::filesystem::path> agg_files,
                              const SummarizeJobConfig& cfg);

}  // namespace flowcube::summarize
