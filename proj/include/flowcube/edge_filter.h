#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "flowcube/bloom.h"
#include "flowcube/mapreduce.h"
#include "flowcube/records.h"

namespace flowcube::edgefilter {

// One Bloom filter per level over the summarized node ids.
class LevelFilters {
 public:
  LevelFilters() = default;
  explicit LevelFilters(std::vector<bloom::BloomFilter> filters);

  // Throws DataError when no filter exists for `level`.
  const bloom::BloomFilter& at(int level) const;
  bool Has(int level) const;
  bool MayContain(int level, uint64_t id) const {
    return at(level).MayContainCell(static_cast<uint32_t>(level), id);
  }
  int levels() const { return static_cast<int>(filters_.size()); }
  const std::vector<bloom::BloomFilter>& filters() const { return filters_; }

  // Concatenation of length-prefixed filter files; the broadcast payload.
  std::string Serialize() const;
  static LevelFilters Deserialize(std::string_view data);

  // bloom-LL.bin per level.
  void SaveDir(const std::filesystem::path& dir) const;
  static LevelFilters LoadDir(const std::filesystem::path& dir, int levels);

 private:
  std::vector<bloom::BloomFilter> filters_;  // index level - 1
};

// Sizes each level's filter for its exact node count at rate p and inserts
// every node.
LevelFilters BuildFilters(std::span<const NodeRecord> summary_nodes, int levels, double p);

// Kept iff both endpoints pass their level's membership test.
bool KeepEdge(const EdgeRecord& e, const LevelFilters& filters);
std::vector<EdgeRecord> FilterEdges(std::span<const EdgeRecord> edges,
                                    const LevelFilters& filters);

// Exact semi-join on (level, cell) for both endpoints.
std::vector<EdgeRecord> ExactJoin(std::span<const EdgeRecord> edges,
                                  std::span<const NodeRecord> summary_nodes);

struct FilterJobConfig {
  uint32_t workers = 1;
  uint64_t split_bytes = uint64_t{16} << 20;
  std::filesystem::path output_dir;
};

// Map-only job over aggregation outputs: copies the edge lines that pass
// the filters, one output file per input split.
mr::JobResult RunFilterJob(std::span<const std::filesystem::path> agg_files,
                           const LevelFilters& filters, const FilterJobConfig& cfg);

}  // namespace flowcube::edgefilter
