#include "flowcube/pipeline.h"

#include <chrono>
#include <cstdlib>
#include <unordered_set>

#include <fmt/format.h>

#include "flowcube/cube.h"
#include "flowcube/edge_filter.h"
#include "flowcube/errors.h"
#include "flowcube/ingest.h"
#include "flowcube/io.h"

namespace flowcube::pipeline {

namespace {

using Clock = std::chrono::steady_clock;

double Since(Clock::time_point t) {
  return std::chrono::duration<double>(Clock::now() - t).count();
}

std::string HashHex(uint64_t h) { return fmt::format("fnv1a64:{:016x}", h); }

std::string HashFiles(std::span<const fs::path> files) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& f : files) {
    const uint64_t fh = HashFile(f);
    h = Fnv1a64(std::string_view(reinterpret_cast<const char*>(&fh), sizeof fh), h);
  }
  return HashHex(h);
}

void WriteJson(const fs::path& path, const nlohmann::json& j) {
  WriteFileAtomic(path, j.dump(2) + "\n");
}

std::vector<fs::path> RequireParts(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError(fmt::format("{} is not a directory", dir.string()));
  return ListPartFiles(dir);
}

}  // namespace

nlohmann::json ReadMeta(const fs::path& dir) {
  const fs::path p = dir / kMetaFile;
  if (!fs::exists(p)) {
    throw DataError(fmt::format("{} has no {}; was it produced by a pipeline stage?",
                                dir.string(), kMetaFile));
  }
  auto j = nlohmann::json::parse(ReadFile(p), nullptr, false);
  if (!j.is_object()) throw DataError(fmt::format("{} is not a JSON object", p.string()));
  return j;
}

GridConfig GridFromMeta(const fs::path& dir) {
  return GridConfig::FromJson(ReadMeta(dir).at("grid"));
}

nlohmann::json JobReport(const mr::JobResult& r, double seconds) {
  const auto stats = mr::ComputeLoadStats(r.partition_loads);
  return {{"seconds", seconds},
          {"partition_loads", r.partition_loads},
          {"load_avg", stats.avg},
          {"load_stddev", stats.stddev},
          {"load_min", stats.min},
          {"load_max", stats.max},
          {"map_input_records", r.map_input_records},
          {"map_emissions", r.map_emissions},
          {"reduce_groups", r.reduce_groups},
          {"spilled_runs", r.spilled_runs},
          {"counters", r.counters},
          {"outputs", r.outputs.size()}};
}

nlohmann::json IngestStage(std::span<const fs::path> event_files, const fs::path& out_csv,
                           const IngestConfig& cfg) {
  if (event_files.empty()) throw InvalidArgument("ingest needs at least one events file");
  ingest::ParseStats ps;
  ingest::ParseOptions po;
  po.max_malformed_fraction = cfg.max_malformed_fraction;
  auto events = ingest::ParseEventFiles(event_files, cfg.workers, &ps, po);
  ingest::BuildOptions bo;
  bo.max_gap_seconds = cfg.max_gap_seconds;
  bo.workers = cfg.workers;
  ingest::BuildStats bs;
  auto movements = ingest::BuildMovements(events, cfg.region, bo, &bs);
  if (!out_csv.parent_path().empty()) fs::create_directories(out_csv.parent_path());
  WriteMovements(out_csv, movements);
  return {{"lines", ps.lines},
          {"events", ps.events},
          {"malformed", ps.malformed},
          {"header", ps.header},
          {"users", bs.users},
          {"dropped_out_of_region", bs.dropped_out_of_region},
          {"collapsed", bs.collapsed},
          {"gap_breaks", bs.gap_breaks},
          {"movements", movements.size()}};
}

partition::PartitionScheme PartitionStage(const fs::path& movements_csv, const GridConfig& grid,
                                          const PartitionConfig& cfg, const fs::path& out_json) {
  auto sample = partition::SamplePoints(movements_csv, cfg.sample_rate, cfg.seed);
  auto scheme = partition::RecursiveBisect(sample, grid.grid.region(), cfg.depth);
  scheme.seed = cfg.seed;
  scheme.sample_rate = cfg.sample_rate;
  scheme.sample_size = sample.size();
  if (!out_json.parent_path().empty()) fs::create_directories(out_json.parent_path());
  scheme.Save(out_json);
  return scheme;
}

mr::JobResult AggregateStage(std::span<const fs::path> movement_files, const GridConfig& grid,
                             const partition::PartitionScheme& scheme,
                             const aggregate::AggregateOptions& opts, const JobConfig& job,
                             const fs::path& out_dir) {
  const auto t = Clock::now();
  aggregate::AggregateJobConfig cfg;
  cfg.grid = grid;
  cfg.scheme = scheme;
  cfg.options = opts;
  cfg.workers = job.workers;
  cfg.split_bytes = job.split_bytes;
  cfg.shuffle_memory_bytes = job.shuffle_memory_bytes;
  cfg.output_dir = out_dir;
  auto result = aggregate::RunAggregateJob(movement_files, cfg);
  WriteJson(out_dir / kMetaFile, {{"stage", "aggregate"},
                                  {"grid", grid.ToJson()},
                                  {"alpha", opts.alpha},
                                  {"track_users", opts.track_users},
                                  {"partitions", scheme.size()},
                                  {"partition_depth", scheme.depth},
                                  {"input_hash", HashFiles(movement_files)}});
  WriteJson(out_dir / kReportFile, JobReport(result, Since(t)));
  return result;
}

mr::JobResult SummarizeStage(const fs::path& agg_dir, const partition::PartitionScheme& scheme,
                             const summarize::SummaryConfig& summary, const JobConfig& job,
                             const fs::path& out_dir) {
  const auto t = Clock::now();
  auto meta = ReadMeta(agg_dir);
  summarize::SummarizeJobConfig cfg;
  cfg.grid = GridConfig::FromJson(meta.at("grid"));
  cfg.scheme = scheme;
  cfg.summary = summary;
  cfg.workers = job.workers;
  cfg.split_bytes = job.split_bytes;
  cfg.shuffle_memory_bytes = job.shuffle_memory_bytes;
  cfg.output_dir = out_dir;
  const auto parts = RequireParts(agg_dir);
  auto result = summarize::RunSummarizeJob(parts, cfg);
  meta["stage"] = "summarize";
  meta["r"] = summary.radius_cells;
  meta["threshold"] = summary.threshold;
  WriteJson(out_dir / kMetaFile, meta);
  WriteJson(out_dir / kReportFile, JobReport(result, Since(t)));
  return result;
}

mr::JobResult FilterStage(const fs::path& agg_dir, const fs::path& summary_dir, double p,
                          const JobConfig& job, const fs::path& out_dir) {
  const auto t = Clock::now();
  auto meta = ReadMeta(summary_dir);
  const GridConfig grid = GridConfig::FromJson(meta.at("grid"));
  std::vector<NodeRecord> nodes;
  ForEachLine(RequireParts(summary_dir), [&](std::string_view line) {
    if (ClassifyLine(line) == LineKind::kNode) nodes.push_back(ParseNodeLine(line));
  });
  auto filters = edgefilter::BuildFilters(nodes, grid.grid.levels(), p);
  fs::create_directories(out_dir);
  filters.SaveDir(out_dir);
  edgefilter::FilterJobConfig fc;
  fc.workers = job.workers;
  fc.split_bytes = job.split_bytes;
  fc.output_dir = out_dir;
  const auto parts = RequireParts(agg_dir);
  auto result = edgefilter::RunFilterJob(parts, filters, fc);
  meta["stage"] = "filter-edges";
  meta["p"] = p;
  WriteJson(out_dir / kMetaFile, meta);
  WriteJson(out_dir / kReportFile, JobReport(result, Since(t)));
  return result;
}

PackResult PackStage(const fs::path& summary_dir, const fs::path& edges_dir,
                     const fs::path& out_snapshot, std::optional<int64_t> build_time) {
  auto summary_meta = ReadMeta(summary_dir);
  auto meta = ReadMeta(edges_dir);
  if (summary_meta.at("grid") != meta.at("grid")) {
    throw DataError("summary and edge directories were built with different grids");
  }
  cube::SnapshotHeader header;
  header.grid = GridConfig::FromJson(meta.at("grid"));
  std::vector<NodeRecord> nodes;
  ForEachLine(RequireParts(summary_dir), [&](std::string_view line) {
    if (ClassifyLine(line) == LineKind::kNode) nodes.push_back(ParseNodeLine(line));
  });
  using Key = std::pair<uint64_t, uint64_t>;
  std::unordered_set<Key, aggregate::PairHash> present;
  for (const auto& n : nodes) present.insert({static_cast<uint64_t>(n.level), n.id});
  PackResult res;
  std::vector<EdgeRecord> edges;
  ForEachLine(RequireParts(edges_dir), [&](std::string_view line) {
    if (ClassifyLine(line) != LineKind::kEdge) return;
    EdgeRecord e = ParseEdgeLine(line);
    const auto l = static_cast<uint64_t>(e.level);
    if (present.contains(Key{l, e.src}) && present.contains(Key{l, e.dst})) {
      edges.push_back(std::move(e));
    } else {
      ++res.dropped_edges;
    }
  });
  if (!build_time) {
    if (const char* sde = std::getenv("SOURCE_DATE_EPOCH")) build_time = ParseNumber<int64_t>(sde);
  }
  if (!build_time) {
    build_time = std::chrono::duration_cast<std::chrono::seconds>(
                     std::chrono::system_clock::now().time_since_epoch())
                     .count();
  }
  meta.erase("stage");
  meta.erase("grid");
  meta["build_time"] = *build_time;
  meta["bloom_false_positive_edges"] = res.dropped_edges;
  header.provenance = meta;
  res.nodes = nodes.size();
  res.edges = edges.size();
  if (!out_snapshot.parent_path().empty()) fs::create_directories(out_snapshot.parent_path());
  cube::WriteSnapshot(out_snapshot, std::move(nodes), std::move(edges), header);
  return res;
}

nlohmann::json RunAll(std::span<const fs::path> event_files, const fs::path& out_snapshot,
                      const RunAllConfig& cfg) {
  nlohmann::json report = {{"stages", nlohmann::json::array()}};
  auto timed = [&](const char* name, auto&& fn) {
    const auto t = Clock::now();
    nlohmann::json details = fn();
    details["stage"] = name;
    if (!details.contains("seconds")) details["seconds"] = Since(t);
    report["stages"].push_back(details);
  };
  const fs::path work = cfg.work_dir;
  fs::create_directories(work);
  const fs::path movements = work / "movements.csv";
  const fs::path parts = work / "parts.json";
  const fs::path agg = work / "agg";
  const fs::path summary = work / "summary";
  const fs::path edges = work / "edges";

  IngestConfig ic = cfg.ingest;
  ic.region = cfg.grid.grid.region();
  timed("ingest", [&] { return IngestStage(event_files, movements, ic); });
  partition::PartitionScheme scheme;
  timed("partition", [&] {
    scheme = PartitionStage(movements, cfg.grid, cfg.partition, parts);
    return nlohmann::json{{"partitions", scheme.size()}, {"sample_size", scheme.sample_size}};
  });
  const std::vector<fs::path> mv{movements};
  timed("aggregate", [&] {
    const auto t = Clock::now();
    return JobReport(AggregateStage(mv, cfg.grid, scheme, cfg.aggregate, cfg.job, agg), Since(t));
  });
  timed("summarize", [&] {
    const auto t = Clock::now();
    return JobReport(SummarizeStage(agg, scheme, cfg.summary, cfg.job, summary), Since(t));
  });
  timed("filter-edges", [&] {
    const auto t = Clock::now();
    return JobReport(FilterStage(agg, summary, cfg.bloom_p, cfg.job, edges), Since(t));
  });
  timed("pack", [&] {
    auto r = PackStage(summary, edges, out_snapshot, cfg.build_time);
    return nlohmann::json{
        {"nodes", r.nodes}, {"edges", r.edges}, {"dropped_edges", r.dropped_edges}};
  });
  double total = 0;
  for (const auto& s : report["stages"]) total += s["seconds"].get<double>();
  report["total_seconds"] = total;
  return report;
}

}  // namespace flowcube::pipeline
