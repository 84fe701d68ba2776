#include "flowcube/edge_filter.h"

#include <algorithm>
#include <set>

#include <fmt/format.h>

#include "flowcube/bytes.h"
#include "flowcube/errors.h"
#include "flowcube/io.h"

namespace flowcube::edgefilter {

namespace {

class FilterMapper : public mr::Mapper {
 public:
  explicit FilterMapper(std::string_view broadcast)
      : filters_(LevelFilters::Deserialize(broadcast)) {}

  void Map(std::string_view line, mr::MapContext& ctx) override {
    if (ClassifyLine(line) != LineKind::kEdge) return;
    EdgeRecord e = ParseEdgeLine(line);
    if (KeepEdge(e, filters_)) {
      ctx.Write(line);
      ctx.Count("edges_kept");
    } else {
      ctx.Count("edges_dropped");
    }
  }

 private:
  LevelFilters filters_;
};

}  // namespace

LevelFilters::LevelFilters(std::vector<bloom::BloomFilter> filters)
    : filters_(std::move(filters)) {}

bool LevelFilters::Has(int level) const {
  return level >= 1 && level <= static_cast<int>(filters_.size());
}

const bloom::BloomFilter& LevelFilters::at(int level) const {
  if (!Has(level)) throw DataError(fmt::format("no bloom filter for level {}", level));
  return filters_[static_cast<size_t>(level - 1)];
}

std::string LevelFilters::Serialize() const {
  std::string out;
  for (const auto& f : filters_) {
    std::string bytes = f.Serialize();
    bytes::PutLE<uint64_t>(out, bytes.size());
    out += bytes;
  }
  return out;
}

LevelFilters LevelFilters::Deserialize(std::string_view data) {
  std::vector<bloom::BloomFilter> filters;
  size_t pos = 0;
  while (pos < data.size()) {
    if (pos + 8 > data.size()) throw DataError("truncated filter set");
    bytes::Reader r(data.substr(pos, 8));
    const auto len = r.Get<uint64_t>();
    pos += 8;
    if (pos + len > data.size()) throw DataError("truncated filter set");
    filters.push_back(bloom::BloomFilter::Deserialize(data.substr(pos, len)));
    pos += len;
  }
  return LevelFilters(std::move(filters));
}

void LevelFilters::SaveDir(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  for (size_t i = 0; i < filters_.size(); ++i) {
    filters_[i].Save(dir / fmt::format("bloom-{:02}.bin", i + 1));
  }
}

LevelFilters LevelFilters::LoadDir(const std::filesystem::path& dir, int levels) {
  std::vector<bloom::BloomFilter> filters;
  for (int l = 1; l <= levels; ++l) {
    auto f = bloom::BloomFilter::Load(dir / fmt::format("bloom-{:02}.bin", l));
    if (f.level() != static_cast<uint32_t>(l)) {
      throw DataError(fmt::format("bloom-{:02}.bin holds level {}", l, f.level()));
    }
    filters.push_back(std::move(f));
  }
  return LevelFilters(std::move(filters));
}

LevelFilters BuildFilters(std::span<const NodeRecord> summary_nodes, int levels, double p) {
  std::vector<uint64_t> per_level(static_cast<size_t>(levels), 0);
  for (const auto& n : summary_nodes) {
    if (n.level < 1 || n.level > levels) {
      throw DataError(fmt::format("summary node level {} outside [1,{}]", n.level, levels));
    }
    ++per_level[static_cast<size_t>(n.level - 1)];
  }
  std::vector<bloom::BloomFilter> filters;
  for (int l = 1; l <= levels; ++l) {
    filters.push_back(bloom::BloomFilter::ForCapacity(per_level[static_cast<size_t>(l - 1)], p,
                                                      static_cast<uint32_t>(l)));
  }
  for (const auto& n : summary_nodes) {
    filters[static_cast<size_t>(n.level - 1)].InsertCell(static_cast<uint32_t>(n.level), n.id);
  }
  return LevelFilters(std::move(filters));
}

bool KeepEdge(const EdgeRecord& e, const LevelFilters& filters) {
  return filters.MayContain(e.level, e.src) && filters.MayContain(e.level, e.dst);
}

std::vector<EdgeRecord> FilterEdges(std::span<const EdgeRecord> edges,
                                    const LevelFilters& filters) {
  std::vector<EdgeRecord> kept;
  for (const auto& e : edges) {
    if (KeepEdge(e, filters)) kept.push_back(e);
  }
  return kept;
}

std::vector<EdgeRecord> ExactJoin(std::span<const EdgeRecord> edges,
                                  std::span<const NodeRecord> summary_nodes) {
  std::set<std::pair<int, uint64_t>> present;
  for (const auto& n : summary_nodes) present.emplace(n.level, n.id);
  std::vector<EdgeRecord> kept;
  for (const auto& e : edges) {
    if (present.contains({e.level, e.src}) && present.contains({e.level, e.dst})) {
      kept.push_back(e);
    }
  }
  return kept;
}

mr::JobResult RunFilterJob(std::span<const std::filesystem::path> agg_files,
                           const LevelFilters& filters, const FilterJobConfig& cfg) {
  mr::JobSpec spec;
  spec.splits = mr::MakeSplits(agg_files, cfg.split_bytes);
  spec.broadcast = filters.Serialize();
  spec.make_mapper = [](std::string_view b) { return std::make_unique<FilterMapper>(b); };
  spec.workers = cfg.workers;
  spec.output_dir = cfg.output_dir;
  return mr::RunJob(spec);
}

}  // namespace flowcube::edgefilter
