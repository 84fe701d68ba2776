#pragma once

// Node and edge records exchanged between pipeline stages as NDJSON lines.
//
//   {"t":"n","l":3,"id":17,"lon":-88.2,"lat":40.1,"c":12,"sc":7,"u":5,
//    "tt":3600,"tb":[[16283,12]],"rank":87.5}
//   {"t":"e","l":3,"s":17,"d":18,"c":4,"tt":1200,"tb":[[16283,4]]}
//
// "u" is present only when distinct users are tracked, "rank" only on
// summarized nodes. "tb" is a sparse time histogram of [bucket, count]
// pairs sorted by bucket.

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "flowcube/grid.h"

namespace flowcube {

using Histogram = std::vector<std::pair<int64_t, uint64_t>>;

void AddToHistogram(Histogram& h, int64_t bucket, uint64_t count);
void MergeHistogram(Histogram& into, const Histogram& from);
// Sum of counts for buckets in [from, to].
uint64_t HistogramSum(const Histogram& h, int64_t from, int64_t to);
uint64_t HistogramTotal(const Histogram& h);

struct NodeRecord {
  int level = 1;
  uint64_t id = 0;
  GeoPoint centroid;
  // Endpoint count: every movement adds one per endpoint in the cell.
  uint64_t count = 0;
  // Movements whose source is in the cell; denominator of the travel-time
  // average.
  uint64_t src_count = 0;
  std::optional<uint64_t> users;
  int64_t tt_sum = 0;
  // Endpoints bucketed by the movement's departure time.
  Histogram tb;
  std::optional<double> rank;

  CellId cell() const { return {level, id}; }
  double avg_travel_time() const {
    return src_count ? static_cast<double>(tt_sum) / static_cast<double>(src_count) : 0.0;
  }
  friend bool operator==(const NodeRecord&, const NodeRecord&) = default;
};

struct EdgeRecord {
  int level = 1;
  uint64_t src = 0;
  uint64_t dst = 0;
  uint64_t count = 0;
  int64_t tt_sum = 0;
  Histogram tb;

  double avg_travel_time() const {
    return count ? static_cast<double>(tt_sum) / static_cast<double>(count) : 0.0;
  }
  friend bool operator==(const EdgeRecord&, const EdgeRecord&) = default;
};

std::string ToLine(const NodeRecord& n);
std::string ToLine(const EdgeRecord& e);

enum class LineKind { kNode, kEdge, kOther };
// Cheap classification by the leading `{"t":"n"` / `{"t":"e"` prefix.
LineKind ClassifyLine(std::string_view line);

// Throw DataError on malformed input.
NodeRecord ParseNodeLine(std::string_view line);
EdgeRecord ParseEdgeLine(std::string_view line);

}  // namespace flowcube
