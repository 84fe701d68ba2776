#include "flowcube/summarize.h"

#include <algorithm>
#include <map>

#include <boost/geometry.hpp>
#include <boost/geometry/index/rtree.hpp>
#include <fmt/format.h>

#include "flowcube/aggregate.h"
#include "flowcube/errors.h"

namespace flowcube::summarize {

namespace bg = boost::geometry;
namespace bgi = boost::geometry::index;

namespace {

using BoostPoint = bg::model::point<double, 2, bg::cs::cartesian>;
using BoostBox = bg::model::box<BoostPoint>;
using IndexedPoint = std::pair<BoostPoint, size_t>;

GeoPoint ClampToRegion(GeoPoint p, const Region& r) {
  p.lon = std::clamp(p.lon, r.lon_min, r.lon_max);
  p.lat = std::clamp(p.lat, r.lat_min, r.lat_max);
  return p;
}

struct Broadcast {
  GridConfig grid;
  partition::PartitionScheme scheme;
  SummaryConfig summary;
};

std::string EncodeBroadcast(const SummarizeJobConfig& cfg) {
  nlohmann::json j = {{"grid", cfg.grid.ToJson()},
                      {"scheme", cfg.scheme.ToJson()},
                      {"summary", cfg.summary.ToJson()}};
  return j.dump();
}

Broadcast DecodeBroadcast(std::string_view data) {
  auto j = nlohmann::json::parse(data);
  return {GridConfig::FromJson(j.at("grid")),
          partition::PartitionScheme::FromJson(j.at("scheme")),
          SummaryConfig::FromJson(j.at("summary"))};
}

class FanoutMapper : public mr::Mapper {
 public:
  explicit FanoutMapper(std::string_view broadcast)
      : b_(DecodeBroadcast(broadcast)), index_(b_.scheme) {}

  void Map(std::string_view line, mr::MapContext& ctx) override {
    if (ClassifyLine(line) != LineKind::kNode) return;
    NodeRecord node = ParseNodeLine(line);
    Fanout f = NeighborFanout(node, index_, b_.grid.grid, b_.summary);
    const std::string key = aggregate::NodeKey(node.level, node.id);
    for (uint32_t p : f.partitions) {
      std::string value(1, p == f.home ? '\1' : '\0');
      value.append(line);
      ctx.EmitTo(p, key, std::move(value));
    }
    ctx.Count("fanout_emissions", static_cast<int64_t>(f.partitions.size()));
  }

 private:
  Broadcast b_;
  partition::RectIndex index_;
};

class ScoreReducer : public mr::Reducer {
 public:
  explicit ScoreReducer(std::string_view broadcast) : b_(DecodeBroadcast(broadcast)) {}

  void Reduce(std::string_view, std::span<const std::string> values,
              mr::ReduceContext&) override {
    // One replica per partition is expected; keep the home copy if several
    // arrive for the same cell.
    const std::string* chosen = &values.front();
    for (const auto& v : values) {
      if (!v.empty() && v[0] == '\1') chosen = &v;
    }
    Replica r;
    r.home = (*chosen)[0] == '\1';
    r.node = ParseNodeLine(std::string_view(*chosen).substr(1));
    replicas_.push_back(std::move(r));
  }

  void Finish(mr::ReduceContext& ctx) override {
    for (const auto& n : ScoreReplicas(replicas_, b_.grid.grid, b_.summary)) {
      ctx.Write(ToLine(n));
    }
    ctx.Count("summary_nodes_in", static_cast<int64_t>(std::count_if(
        replicas_.begin(), replicas_.end(), [](const Replica& r) { return r.home; })));
  }

 private:
  Broadcast b_;
  std::vector<Replica> replicas_;
};

}  // namespace

double SummaryConfig::RadiusCells(int level) const {
  if (radius_cells.size() == 1) return radius_cells[0];
  return radius_cells.at(static_cast<size_t>(level - 1));
}

void SummaryConfig::Validate(int levels) const {
  if (radius_cells.size() != 1 && radius_cells.size() != static_cast<size_t>(levels)) {
    throw InvalidArgument(fmt::format("summary radius needs 1 or {} values, got {}", levels,
                                      radius_cells.size()));
  }
  for (double r : radius_cells) {
    if (!(r > 0)) throw InvalidArgument("summary radius must be positive");
  }
  if (!(threshold >= 0 && threshold <= 100)) {
    throw InvalidArgument("summary threshold must be in [0, 100]");
  }
}

nlohmann::json SummaryConfig::ToJson() const {
  return {{"r", radius_cells}, {"threshold", threshold}};
}

SummaryConfig SummaryConfig::FromJson(const nlohmann::json& j) {
  SummaryConfig c;
  const auto& r = j.at("r");
  c.radius_cells = r.is_array() ? r.get<std::vector<double>>()
                                 : std::vector<double>{r.get<double>()};
  c.threshold = j.value("threshold", 80.0);
  return c;
}

double PercentileRank(uint64_t count, std::span<const uint64_t> neighbors) {
  if (neighbors.empty()) return 100.0;
  uint64_t less = 0, equal = 0;
  for (uint64_t q : neighbors) {
    if (q < count) {
      ++less;
    } else if (q == count) {
      ++equal;
    }
  }
  return 100.0 * (static_cast<double>(less) + 0.5 * static_cast<double>(equal)) /
         static_cast<double>(neighbors.size());
}

double RadiusKm(const GridHierarchy& grid, const SummaryConfig& cfg, int level) {
  return grid.cell_len_km(level) * cfg.RadiusCells(level);
}

double FanoutOffsetDeg(const GridHierarchy& grid, const SummaryConfig& cfg, int level) {
  return partition::SafeOffsetDeg(RadiusKm(grid, cfg, level), grid.region());
}

Fanout NeighborFanout(const NodeRecord& node, const partition::RectIndex& index,
                      const GridHierarchy& grid, const SummaryConfig& cfg) {
  const GeoPoint at = ClampToRegion(node.centroid, grid.region());
  Fanout f;
  f.home = index.Locate(at);
  f.partitions = index.NeighborPartitions(at, FanoutOffsetDeg(grid, cfg, node.level));
  return f;
}

std::vector<NodeRecord> ScoreReplicas(std::span<const Replica> replicas,
                                      const GridHierarchy& grid,
                                      const SummaryConfig& cfg) {
  std::map<int, std::vector<size_t>> by_level;
  for (size_t i = 0; i < replicas.size(); ++i) {
    by_level[replicas[i].node.level].push_back(i);
  }
  std::vector<NodeRecord> kept;
  std::vector<uint64_t> neighbor_counts;
  std::vector<IndexedPoint> hits;
  for (const auto& [level, members] : by_level) {
    std::vector<IndexedPoint> pts;
    pts.reserve(members.size());
    for (size_t i : members) {
      const GeoPoint& c = replicas[i].node.centroid;
      pts.emplace_back(BoostPoint(c.lon, c.lat), i);
    }
    bgi::rtree<IndexedPoint, bgi::quadratic<16>> tree(pts.begin(), pts.end());
    const double radius = RadiusKm(grid, cfg, level);
    const double off = FanoutOffsetDeg(grid, cfg, level);
    for (size_t i : members) {
      const Replica& r = replicas[i];
      if (!r.home) continue;
      const GeoPoint& c = r.node.centroid;
      hits.clear();
      tree.query(bgi::intersects(BoostBox({c.lon - off, c.lat - off}, {c.lon + off, c.lat + off})),
                 std::back_inserter(hits));
      neighbor_counts.clear();
      for (const auto& [pt, j] : hits) {
        if (j == i || replicas[j].node.id == r.node.id) continue;
        if (GreatCircleKm(c, replicas[j].node.centroid) < radius) {
          neighbor_counts.push_back(replicas[j].node.count);
        }
      }
      const double rank = PercentileRank(r.node.count, neighbor_counts);
      if (rank > cfg.threshold) {
        NodeRecord out = r.node;
        out.rank = rank;
        kept.push_back(std::move(out));
      }
    }
  }
  std::sort(kept.begin(), kept.end(), [](const NodeRecord& a, const NodeRecord& b) {
    return std::tie(a.level, a.id) < std::tie(b.level, b.id);
  });
  return kept;
}

std::vector<NodeRecord> SummarizeInMemory(std::span<const NodeRecord> nodes,
                                          const GridHierarchy& grid,
                                          const SummaryConfig& cfg) {
  std::vector<Replica> replicas;
  replicas.reserve(nodes.size());
  for (const auto& n : nodes) replicas.push_back({n, true});
  return ScoreReplicas(replicas, grid, cfg);
}

mr::JobResult RunSummarizeJob(std::span<const std::filesystem::path> agg_files,
                              const SummarizeJobConfig& cfg) {
  cfg.summary.Validate(cfg.grid.grid.levels());
  if (cfg.scheme.region != cfg.grid.grid.region()) {
    throw DataError("partition scheme region differs from the grid region");
  }
  mr::JobSpec spec;
  spec.splits = mr::MakeSplits(agg_files, cfg.split_bytes);
  spec.broadcast = EncodeBroadcast(cfg);
  spec.make_mapper = [](std::string_view b) { return std::make_unique<FanoutMapper>(b); };
  spec.make_reducer = [](uint32_t, std::string_view b) {
    return std::make_unique<ScoreReducer>(b);
  };
  spec.workers = cfg.workers;
  spec.partitions = static_cast<uint32_t>(cfg.scheme.size());
  spec.output_dir = cfg.output_dir;
  spec.shuffle_memory_bytes = cfg.shuffle_memory_bytes;
  return mr::RunJob(spec);
}

}  // namespace flowcube::summarize
