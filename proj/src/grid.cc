#include "flowcube/grid.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include <fmt/format.h>

#include "flowcube/errors.h"

namespace flowcube {

namespace {

double ToRadians(double deg) { return deg * std::numbers::pi / 180.0; }

int64_t FloorDiv(int64_t a, int64_t b) {
  int64_t q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

}  // namespace

bool IsValid(const GeoPoint& p) {
  return std::isfinite(p.lon) && std::isfinite(p.lat) && p.lon >= -180.0 &&
         p.lon <= 180.0 && p.lat >= -90.0 && p.lat <= 90.0;
}

void Validate(const Region& r) {
  if (!IsValid({r.lon_min, r.lat_min}) || !IsValid({r.lon_max, r.lat_max})) {
    throw InvalidArgument("region coordinates out of range");
  }
  if (!(r.lon_min < r.lon_max) || !(r.lat_min < r.lat_max)) {
    throw InvalidArgument(fmt::format(
        "degenerate region [{},{}]-[{},{}]", r.lon_min, r.lat_min, r.lon_max,
        r.lat_max));
  }
}

double GreatCircleKm(const GeoPoint& a, const GeoPoint& b) {
  const double phi1 = ToRadians(a.lat);
  const double phi2 = ToRadians(b.lat);
  const double dphi = phi2 - phi1;
  const double dlambda = ToRadians(b.lon - a.lon);
  const double s1 = std::sin(dphi / 2);
  const double s2 = std::sin(dlambda / 2);
  double h = s1 * s1 + std::cos(phi1) * std::cos(phi2) * s2 * s2;
  h = std::clamp(h, 0.0, 1.0);
  return 2.0 * kEarthRadiusKm * std::asin(std::sqrt(h));
}

GridHierarchy::GridHierarchy(Region region, int levels,
                             double base_cell_arcsec, int growth)
    : region_(region),
      levels_(levels),
      base_cell_arcsec_(base_cell_arcsec),
      growth_(growth) {
  Validate(region_);
  if (levels_ < 1 || levels_ > 64) {
    throw InvalidArgument(fmt::format("levels must be in [1,64], got {}", levels_));
  }
  if (!(base_cell_arcsec_ > 0) || !std::isfinite(base_cell_arcsec_)) {
    throw InvalidArgument("base_cell_arcsec must be positive");
  }
  if (growth_ < 1) throw InvalidArgument("growth must be >= 1");

  for (int l = 1; l <= levels_; ++l) {
    const double arcsec =
        base_cell_arcsec_ * std::pow(static_cast<double>(growth_), levels_ - l);
    const double deg = arcsec / 3600.0;
    // The small tolerance keeps exact multiples from gaining a sliver column.
    const auto count = [deg](double extent) {
      return std::max<uint64_t>(
          1, static_cast<uint64_t>(std::ceil(extent / deg - 1e-9)));
    };
    len_deg_.push_back(deg);
    cols_.push_back(count(region_.width()));
    rows_.push_back(count(region_.height()));
    if (static_cast<double>(cols_.back()) * static_cast<double>(rows_.back()) >
        9.0e18) {
      throw InvalidArgument("grid too fine: cell index overflows 64 bits");
    }
  }
}

void GridHierarchy::CheckLevel(int level) const {
  if (level < 1 || level > levels_) {
    throw InvalidArgument(
        fmt::format("level {} outside [1,{}]", level, levels_));
  }
}

double GridHierarchy::cell_len_deg(int level) const {
  CheckLevel(level);
  return len_deg_[level - 1];
}

double GridHierarchy::cell_len_km(int level) const {
  CheckLevel(level);
  return base_cell_arcsec_ * std::pow(static_cast<double>(growth_), levels_ - level) *
         (kKmPerDegree / 3600.0);
}

uint64_t GridHierarchy::cols(int level) const {
  CheckLevel(level);
  return cols_[level - 1];
}

uint64_t GridHierarchy::rows(int level) const {
  CheckLevel(level);
  return rows_[level - 1];
}

CellId GridHierarchy::cell_id(const GeoPoint& p, int level) const {
  CheckLevel(level);
  if (!IsValid(p) || !region_.Contains(p)) {
    throw OutOfRegionError(
        fmt::format("point ({}, {}) outside grid region", p.lon, p.lat));
  }
  const double len = len_deg_[level - 1];
  const uint64_t ncols = cols_[level - 1];
  const uint64_t nrows = rows_[level - 1];
  auto col = static_cast<uint64_t>(std::floor((p.lon - region_.lon_min) / len));
  auto row = static_cast<uint64_t>(std::floor((p.lat - region_.lat_min) / len));
  col = std::min(col, ncols - 1);
  row = std::min(row, nrows - 1);
  return {level, row * ncols + col};
}

bool GridHierarchy::ValidCell(const CellId& c) const {
  return c.level >= 1 && c.level <= levels_ && c.index < cell_count(c.level);
}

void GridHierarchy::CheckCell(const CellId& c) const {
  if (!ValidCell(c)) {
    throw InvalidArgument(
        fmt::format("cell ({}, {}) out of range", c.level, c.index));
  }
}

Region GridHierarchy::cell_bounds(const CellId& c) const {
  CheckCell(c);
  const double len = len_deg_[c.level - 1];
  const uint64_t ncols = cols_[c.level - 1];
  const uint64_t row = c.index / ncols;
  const uint64_t col = c.index % ncols;
  Region r;
  r.lon_min = region_.lon_min + static_cast<double>(col) * len;
  r.lat_min = region_.lat_min + static_cast<double>(row) * len;
  r.lon_max = r.lon_min + len;
  r.lat_max = r.lat_min + len;
  return r;
}

GeoPoint GridHierarchy::cell_center(const CellId& c) const {
  return cell_bounds(c).center();
}

std::pair<GeoPoint, Region> GridHierarchy::cell_centroid_bounds(
    const CellId& c) const {
  Region r = cell_bounds(c);
  return {r.center(), r};
}

int64_t TimeBucketing::bucket(int64_t t) const { return FloorDiv(t - t0, width); }

GridConfig GridConfig::NorthAmerica() {
  return {GridHierarchy({-170.0, 10.0, -50.0, 75.0}, 10, 30.0, 2), {}};
}

GridConfig GridConfig::FromJson(const nlohmann::json& j) {
  try {
    const auto& r = j.at("region");
    if (!r.is_array() || r.size() != 4) {
      throw DataError("grid config: region must be [lon_min,lat_min,lon_max,lat_max]");
    }
    Region region{r[0].get<double>(), r[1].get<double>(), r[2].get<double>(),
                  r[3].get<double>()};
    GridConfig cfg{GridHierarchy(region, j.value("levels", 10),
                                 j.value("base_cell_arcsec", 30.0),
                                 j.value("growth", 2)),
                   {}};
    cfg.time.t0 = j.value("time_origin", int64_t{0});
    cfg.time.width = j.value("time_bucket_seconds", int64_t{86400});
    if (cfg.time.width <= 0) throw DataError("grid config: time_bucket_seconds must be > 0");
    return cfg;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(fmt::format("grid config: {}", e.what()));
  } catch (const InvalidArgument& e) {
    throw DataError(fmt::format("grid config: {}", e.what()));
  }
}

GridConfig GridConfig::Load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError(fmt::format("cannot open grid config {}", path.string()));
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(fmt::format("grid config {}: {}", path.string(), e.what()));
  }
  return FromJson(j);
}

nlohmann::json GridConfig::ToJson() const {
  const Region& r = grid.region();
  return {{"region", {r.lon_min, r.lat_min, r.lon_max, r.lat_max}},
          {"levels", grid.levels()},
          {"base_cell_arcsec", grid.base_cell_arcsec()},
          {"growth", grid.growth()},
          {"time_origin", time.t0},
          {"time_bucket_seconds", time.width}};
}

void GridConfig::Save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw DataError(fmt::format("cannot write {}", path.string()));
  out << ToJson().dump() << '\n';
}

}  // namespace flowcube
