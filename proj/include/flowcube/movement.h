#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "flowcube/grid.h"

namespace flowcube {

// One directed trip of one user.
struct MovementRecord {
  uint64_t user = 0;
  GeoPoint src;
  GeoPoint dst;
  int64_t t_src = 0;
  int64_t t_dst = 0;

  int64_t travel_time() const { return t_dst - t_src; }
  friend bool operator==(const MovementRecord&, const MovementRecord&) = default;
};

// Canonical interchange line: user_id,t_src,t_dst,lon_s,lat_s,lon_d,lat_d
// Coordinates use shortest round-trip formatting.
std::string FormatMovement(const MovementRecord& m);
std::optional<MovementRecord> ParseMovement(std::string_view line);

void WriteMovements(const std::filesystem::path& path,
                    std::span<const MovementRecord> movements);
// Throws DataError on the first malformed line.
std::vector<MovementRecord> ReadMovements(const std::filesystem::path& path);

}  // namespace flowcube
