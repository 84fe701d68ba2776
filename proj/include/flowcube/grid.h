#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

#include <json.hpp>

namespace flowcube {

inline constexpr double kEarthRadiusKm = 6371.0;
// Nominal km per degree of latitude used for cell sizes.
inline constexpr double kKmPerDegree = 111.195;

struct GeoPoint {
  double lon = 0.0;
  double lat = 0.0;

  friend bool operator==(const GeoPoint&, const GeoPoint&) = default;
};

bool IsValid(const GeoPoint& p);

struct Region {
  double lon_min = 0.0;
  double lat_min = 0.0;
  double lon_max = 0.0;
  double lat_max = 0.0;

  double width() const { return lon_max - lon_min; }
  double height() const { return lat_max - lat_min; }
  double area() const { return width() * height(); }
  // Closed-rectangle tests.
  bool Contains(const GeoPoint& p) const {
    return p.lon >= lon_min && p.lon <= lon_max && p.lat >= lat_min &&
           p.lat <= lat_max;
  }
  bool Intersects(const Region& o) const {
    return lon_min <= o.lon_max && o.lon_min <= lon_max &&
           lat_min <= o.lat_max && o.lat_min <= lat_max;
  }
  bool ContainsRegion(const Region& o) const {
    return o.lon_min >= lon_min && o.lon_max <= lon_max &&
           o.lat_min >= lat_min && o.lat_max <= lat_max;
  }
  GeoPoint center() const {
    return {(lon_min + lon_max) / 2, (lat_min + lat_max) / 2};
  }

  friend bool operator==(const Region&, const Region&) = default;
};

// Throws InvalidArgument unless the region is a proper, in-range rectangle.
void Validate(const Region& r);

struct CellId {
  int level = 1;
  uint64_t index = 0;

  friend auto operator<=>(const CellId&, const CellId&) = default;
};

// Great-circle distance on a sphere of radius kEarthRadiusKm (haversine).
double GreatCircleKm(const GeoPoint& a, const GeoPoint& b);

// Hierarchical uniform grids over one region. Level 1 is the coarsest,
// level `levels()` the finest; consecutive levels differ by `growth`.
class GridHierarchy {
 public:
  GridHierarchy(Region region, int levels, double base_cell_arcsec = 30.0,
                int growth = 2);

  const Region& region() const { return region_; }
  int levels() const { return levels_; }
  double base_cell_arcsec() const { return base_cell_arcsec_; }
  int growth() const { return growth_; }

  double cell_len_deg(int level) const;
  // Nominal edge length, using kKmPerDegree of latitude.
  double cell_len_km(int level) const;
  uint64_t cols(int level) const;
  uint64_t rows(int level) const;
  uint64_t cell_count(int level) const { return cols(level) * rows(level); }

  // O(1) arithmetic lookup. Points on a max edge are clamped into the last
  // row/column. Throws OutOfRegionError outside the region.
  CellId cell_id(const GeoPoint& p, int level) const;
  bool ValidCell(const CellId& c) const;
  GeoPoint cell_center(const CellId& c) const;
  Region cell_bounds(const CellId& c) const;
  std::pair<GeoPoint, Region> cell_centroid_bounds(const CellId& c) const;

  friend bool operator==(const GridHierarchy& a, const GridHierarchy& b) {
    return a.region_ == b.region_ && a.levels_ == b.levels_ &&
           a.base_cell_arcsec_ == b.base_cell_arcsec_ && a.growth_ == b.growth_;
  }

 private:
  void CheckLevel(int level) const;
  void CheckCell(const CellId& c) const;

  Region region_;
  int levels_;
  double base_cell_arcsec_;
  int growth_;
  // Per-level geometry, index level-1.
  std::vector<double> len_deg_;
  std::vector<uint64_t> cols_;
  std::vector<uint64_t> rows_;
};

// Temporal axis of the cube: bucket(t) = floor((t - t0) / width).
struct TimeBucketing {
  int64_t t0 = 0;
  int64_t width = 86400;

  int64_t bucket(int64_t t) const;
  int64_t bucket_start(int64_t b) const { return t0 + b * width; }
  friend bool operator==(const TimeBucketing&, const TimeBucketing&) = default;
};

// The grid configuration file shared by every stage:
// {"region":[lon_min,lat_min,lon_max,lat_max],"levels":10,
//  "base_cell_arcsec":30,"growth":2}
// plus optional "time_origin" and "time_bucket_seconds".
struct GridConfig {
  GridHierarchy grid;
  TimeBucketing time;

  static GridConfig NorthAmerica();
  static GridConfig FromJson(const nlohmann::json& j);
  static GridConfig Load(const std::filesystem::path& path);
  nlohmann::json ToJson() const;
  void Save(const std::filesystem::path& path) const;

  friend bool operator==(const GridConfig&, const GridConfig&) = default;
};

}  // namespace flowcube
