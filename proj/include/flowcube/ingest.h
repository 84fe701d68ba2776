#pragma once

#include <cstdint>
#include <filesystem>
#include <istream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "flowcube/grid.h"
#include "flowcube/movement.h"

namespace flowcube::ingest {

struct GeoEvent {
  uint64_t user = 0;
  int64_t t = 0;
  GeoPoint point;

  friend bool operator==(const GeoEvent&, const GeoEvent&) = default;
};

struct ParseOptions {
  // Fail when more than this fraction of data lines is malformed.
  double max_malformed_fraction = 0.10;
};

struct ParseStats {
  uint64_t lines = 0;
  uint64_t events = 0;
  uint64_t malformed = 0;
  bool header = false;
  // First few offending line numbers, for diagnostics.
  std::vector<uint64_t> malformed_lines;
};

// Reads `user_id,epoch_seconds,lon,lat` lines. A first line whose first
// field is not numeric is treated as a header. Malformed lines are skipped
// and counted; throws DataError when they exceed the configured fraction.
std::vector<GeoEvent> ParseEvents(std::istream& in, ParseStats* stats = nullptr,
                                  const ParseOptions& opts = {},
                                  std::string_view source = "<stream>");

// Parses several files concurrently; events are concatenated in file order.
std::vector<GeoEvent> ParseEventFiles(
    std::span<const std::filesystem::path> files, int workers,
    ParseStats* stats = nullptr, const ParseOptions& opts = {});

struct BuildOptions {
  // Consecutive events further apart than this never form a movement.
  std::optional<int64_t> max_gap_seconds;
  int workers = 1;
};

struct BuildStats {
  uint64_t users = 0;
  uint64_t dropped_out_of_region = 0;
  uint64_t collapsed = 0;
  uint64_t gap_breaks = 0;
};

// Groups events per user, orders them by time (stable for ties), collapses
// runs at identical coordinates and emits one movement per consecutive pair
// of distinct positions. A run's first timestamp is its arrival time and its
// last timestamp the departure time. Output is ordered by (user, t_src).
std::vector<MovementRecord> BuildMovements(std::span<const GeoEvent> events,
                                           const Region& region,
                                           const BuildOptions& opts = {},
                                           BuildStats* stats = nullptr);

}  // namespace flowcube::ingest
