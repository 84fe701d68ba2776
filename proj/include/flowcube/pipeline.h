#pragma once

// Pipeline stages over files and directories. Each stage directory gets a
// `_meta.json` (grid, parameters, input hash) that downstream stages read,
// and a `_report.json` with timings and loads. `_meta.json` never depends
// on the worker count or the clock.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include <json.hpp>

#include "flowcube/aggregate.h"
#include "flowcube/grid.h"
#include "flowcube/mapreduce.h"
#include "flowcube/partition.h"
#include "flowcube/summarize.h"

namespace flowcube::pipeline {

namespace fs = std::filesystem;

inline constexpr std::string_view kMetaFile = "_meta.json";
inline constexpr std::string_view kReportFile = "_report.json";

nlohmann::json ReadMeta(const fs::path& dir);
GridConfig GridFromMeta(const fs::path& dir);

struct IngestConfig {
  Region region = GridConfig::NorthAmerica().grid.region();
  std::optional<int64_t> max_gap_seconds;
  int workers = 1;
  double max_malformed_fraction = 0.10;
};
// Writes the movement CSV and returns parse/build statistics.
nlohmann::json IngestStage(std::span<const fs::path> event_files, const fs::path& out_csv,
                           const IngestConfig& cfg);

struct PartitionConfig {
  int depth = 4;
  double sample_rate = 0.01;
  uint64_t seed = 1;
};
partition::PartitionScheme PartitionStage(const fs::path& movements_csv, const GridConfig& grid,
                                          const PartitionConfig& cfg, const fs::path& out_json);

struct JobConfig {
  uint32_t workers = 1;
  uint64_t split_bytes = uint64_t{16} << 20;
  uint64_t shuffle_memory_bytes = uint64_t{256} << 20;
};

mr::JobResult AggregateStage(std::span<const fs::path> movement_files, const GridConfig& grid,
                             const partition::PartitionScheme& scheme,
                             const aggregate::AggregateOptions& opts, const JobConfig& job,
                             const fs::path& out_dir);

// Grid and upstream parameters come from agg_dir's metadata.
mr::JobResult SummarizeStage(const fs::path& agg_dir, const partition::PartitionScheme& scheme,
                             const summarize::SummaryConfig& summary, const JobConfig& job,
                             const fs::path& out_dir);

// Builds per-level filters from the summary, saves them as bloom-LL.bin in
// out_dir and filters the aggregation edges into out_dir.
mr::JobResult FilterStage(const fs::path& agg_dir, const fs::path& summary_dir, double p,
                          const JobConfig& job, const fs::path& out_dir);

struct PackResult {
  uint64_t nodes = 0;
  uint64_t edges = 0;
  // Filter survivors with an endpoint outside the summary (false positives).
  uint64_t dropped_edges = 0;
};
// build_time: seconds since the epoch recorded in the header; defaults to
// SOURCE_DATE_EPOCH when set, else the current time.
PackResult PackStage(const fs::path& summary_dir, const fs::path& edges_dir,
                     const fs::path& out_snapshot, std::optional<int64_t> build_time = {});

struct RunAllConfig {
  GridConfig grid = GridConfig::NorthAmerica();
  IngestConfig ingest;  // region is taken from grid
  PartitionConfig partition;
  aggregate::AggregateOptions aggregate;
  summarize::SummaryConfig summary;
  double bloom_p = 0.01;
  JobConfig job;
  fs::path work_dir;
  std::optional<int64_t> build_time;
};
// ingest → partition → aggregate → summarize → filter → pack, with the
// intermediate files under work_dir. Returns the stage timing report.
nlohmann::json RunAll(std::span<const fs::path> event_files, const fs::path& out_snapshot,
                      const RunAllConfig& cfg);

nlohmann::json JobReport(const mr::JobResult& r, double seconds);

}  // namespace flowcube::pipeline
