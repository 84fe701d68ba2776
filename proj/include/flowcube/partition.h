#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <vector>

#include <json.hpp>

#include "flowcube/grid.h"
#include "flowcube/movement.h"

namespace flowcube::partition {

// A tiling of the grid region into 2^depth rectangles, built from a sample.
// A point belongs to the rectangle whose half-open extent [min, max) contains
// it; on the region's own max edges the extent is closed.
struct PartitionScheme {
  Region region;
  int depth = 0;
  std::vector<Region> rects;
  // Sample points that fell in each rectangle when it was built.
  std::vector<uint64_t> counts;
  uint64_t seed = 0;
  double sample_rate = 1.0;
  uint64_t sample_size = 0;

  size_t size() const { return rects.size(); }

  // {"depth":k,"rects":[[lon_min,lat_min,lon_max,lat_max],...],"counts":[...],
  //  "seed":s,"region":[...],"sample_rate":r,"sample_size":n}
  nlohmann::json ToJson() const;
  static PartitionScheme FromJson(const nlohmann::json& j);
  static PartitionScheme Load(const std::filesystem::path& path);
  void Save(const std::filesystem::path& path) const;
};

// Bernoulli sample of movement source points, deterministic for a seed.
// Throws DataError for empty input or an empty sample.
std::vector<GeoPoint> SamplePoints(std::span<const MovementRecord> movements,
                                   double rate, uint64_t seed);
std::vector<GeoPoint> SamplePoints(const std::filesystem::path& movements_csv,
                                   double rate, uint64_t seed);

// Recursively splits `region` into 2^depth rectangles. Each split picks, per
// axis, the cut that best balances the contained sample (a median cut), and
// uses whichever axis balances better; ties go to the longer axis, then to
// longitude. Rectangles without samples are halved spatially.
PartitionScheme RecursiveBisect(std::span<const GeoPoint> points,
                                const Region& region, int depth);

// Half-open membership with closed region max edges.
bool OwnsPoint(const Region& rect, const Region& region, const GeoPoint& p);

// Half-width in degrees of a square window that contains every in-region
// point within `radius_km` great-circle distance of any in-region point.
double SafeOffsetDeg(double radius_km, const Region& region);

// Bounding-rectangle tree over a partition scheme.
class RectIndex {
 public:
  explicit RectIndex(const PartitionScheme& scheme);
  ~RectIndex();
  RectIndex(RectIndex&&) noexcept;
  RectIndex& operator=(RectIndex&&) noexcept;

  // Partition owning p. Throws OutOfRegionError outside the region.
  uint32_t Locate(const GeoPoint& p) const;
  // Partitions intersecting the closed square p ± offset_deg, ascending.
  std::vector<uint32_t> NeighborPartitions(const GeoPoint& p,
                                           double offset_deg) const;

  size_t size() const { return rects_.size(); }
  const std::vector<Region>& rects() const { return rects_; }
  const Region& region() const { return region_; }

 private:
  struct Tree;
  Region region_;
  std::vector<Region> rects_;
  std::unique_ptr<Tree> tree_;
};

}  // namespace flowcube::partition
