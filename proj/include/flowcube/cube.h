#pragma once

// Snapshot of the summarized multi-level graph and the in-memory cube that
// answers bounding-box subgraph queries over it.
//
// File layout:
//   MPCUBE1\n
//   <header byte length>\n
//   <header JSON>\n
//   <sections>
// The header carries the grid, provenance and a section table
// [{"level":l,"kind":"nodes"|"edges","rows":n,"bytes":b},...] listing, for
// each level in order, its node section then its edge section. Sections
// are NDJSON in the pipeline line formats, nodes sorted by id and edges by
// (src, dst).

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "flowcube/grid.h"
#include "flowcube/records.h"

namespace flowcube::cube {

inline constexpr std::string_view kSnapshotMagic = "MPCUBE1";

struct SnapshotHeader {
  GridConfig grid = GridConfig::NorthAmerica();
  // Free-form build parameters: input hash, alpha, r, threshold, p, build
  // time and so on.
  nlohmann::json provenance = nlohmann::json::object();
};

// Sorts, checks referential integrity and encodes. Throws DataError naming
// the offending ids when an edge endpoint has no node, a level is out of
// range or a node appears twice.
std::string EncodeSnapshot(std::vector<NodeRecord> nodes, std::vector<EdgeRecord> edges,
                           const SnapshotHeader& header);
void WriteSnapshot(const std::filesystem::path& path, std::vector<NodeRecord> nodes,
                   std::vector<EdgeRecord> edges, const SnapshotHeader& header);

// Inclusive bucket range.
struct Window {
  int64_t from = 0;
  int64_t to = 0;
};

struct ResultNode {
  uint64_t id = 0;
  GeoPoint centroid;
  uint64_t count = 0;  // in window
  std::optional<uint64_t> users;
  double avg_tt = 0;
  std::optional<double> rank;
  // Destination of a returned edge whose centroid lies outside the box.
  bool context = false;

  friend bool operator==(const ResultNode&, const ResultNode&) = default;
};

struct ResultEdge {
  uint64_t src = 0;
  uint64_t dst = 0;
  uint64_t count = 0;  // in window
  double avg_tt = 0;

  friend bool operator==(const ResultEdge&, const ResultEdge&) = default;
};

struct SubgraphResult {
  int level = 1;
  Region box;
  Window window;
  bool truncated = false;
  std::vector<ResultNode> nodes;  // sorted by id
  std::vector<ResultEdge> edges;  // sorted by (src, dst)
};

enum class QueryErrorKind { kLevel, kBox, kWindow };

class QueryError : public std::invalid_argument {
 public:
  QueryError(QueryErrorKind kind, const std::string& what)
      : std::invalid_argument(what), kind_(kind) {}
  QueryErrorKind kind() const { return kind_; }

 private:
  QueryErrorKind kind_;
};

// Raised before any work when the candidate estimate exceeds the hard cap.
class TooLargeError : public std::runtime_error {
 public:
  TooLargeError(uint64_t estimate, uint64_t cap);
  uint64_t estimate() const { return estimate_; }

 private:
  uint64_t estimate_;
};

struct QueryOptions {
  // Result element budget (nodes + edges). When exceeded, in-box nodes are
  // ranked by (window count desc, id) and fill at most half the budget;
  // edges of kept nodes, ranked by (window count desc, src, dst), fill the
  // rest together with any context nodes they need.
  uint64_t limit = 50'000;
  // Upper bound on candidates (in-box nodes plus their stored edges); 0
  // disables the check.
  uint64_t hard_cap = 0;
};

class Cube {
 public:
  static std::shared_ptr<const Cube> Load(const std::filesystem::path& path);
  static std::shared_ptr<const Cube> Parse(std::string_view bytes);
  ~Cube();

  const SnapshotHeader& header() const { return header_; }
  const GridHierarchy& grid() const { return header_.grid.grid; }
  const TimeBucketing& time() const { return header_.grid.time; }
  int levels() const { return grid().levels(); }
  // Smallest and largest bucket present in any node histogram.
  std::optional<Window> bucket_range() const { return bucket_range_; }
  uint64_t node_count(int level) const;
  uint64_t edge_count(int level) const;
  uint64_t total_nodes() const;
  uint64_t total_edges() const;

  // Candidate count for the 413 check: in-box nodes plus their edges,
  // before window filtering.
  uint64_t Estimate(int level, const Region& box) const;

  // Throws QueryError on a bad level, box or window and TooLargeError past
  // the hard cap.
  SubgraphResult QueryBbox(int level, const Region& box, const Window& window,
                           const QueryOptions& opts = {}) const;

  // Throws NotFoundError for unknown ids, QueryError for a bad level.
  NodeRecord NodeDetail(int level, uint64_t id) const;

  // All rows, in snapshot order.
  std::vector<NodeRecord> Nodes(int level) const;
  std::vector<EdgeRecord> Edges(int level) const;

 private:
  struct Level;
  Cube() = default;
  const Level& level_data(int level) const;

  SnapshotHeader header_;
  std::optional<Window> bucket_range_;
  std::vector<std::unique_ptr<Level>> levels_;
};

}  // namespace flowcube::cube
