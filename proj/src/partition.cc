#include "flowcube/partition.h"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numbers>
#include <random>

#include <boost/geometry.hpp>
#include <boost/geometry/index/rtree.hpp>
#include <fmt/format.h>

#include "flowcube/errors.h"
#include "flowcube/io.h"

namespace flowcube::partition {

namespace bg = boost::geometry;
namespace bgi = boost::geometry::index;

using BoostPoint = bg::model::point<double, 2, bg::cs::cartesian>;
using BoostBox = bg::model::box<BoostPoint>;
using TreeValue = std::pair<BoostBox, uint32_t>;

struct RectIndex::Tree {
  bgi::rtree<TreeValue, bgi::quadratic<16>> rtree;
};

namespace {

BoostBox ToBox(const Region& r) {
  return {{r.lon_min, r.lat_min}, {r.lon_max, r.lat_max}};
}

nlohmann::json RegionJson(const Region& r) {
  return {r.lon_min, r.lat_min, r.lon_max, r.lat_max};
}

Region RegionFromJson(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 4) throw DataError("rectangle must have 4 numbers");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>(),
          j[3].get<double>()};
}

struct AxisCut {
  double cut = 0;
  uint64_t imbalance = 0;
};

// Best single cut along one axis of `rect` for the given sorted coordinates.
AxisCut BestCut(std::vector<double>& coords, double lo, double hi) {
  std::sort(coords.begin(), coords.end());
  const size_t n = coords.size();
  auto imbalance_at = [&](double cut) {
    const auto left = static_cast<uint64_t>(
        std::lower_bound(coords.begin(), coords.end(), cut) - coords.begin());
    return static_cast<uint64_t>(std::llabs(static_cast<int64_t>(n) - 2 * static_cast<int64_t>(left)));
  };
  bool found = false;
  AxisCut best;
  // Candidates sit halfway between distinct neighbours; the lowest cut wins
  // ties.
  for (size_t i = 1; i < n; ++i) {
    if (!(coords[i - 1] < coords[i])) continue;
    double cut = coords[i - 1] + (coords[i] - coords[i - 1]) / 2;
    if (!(cut > lo && cut < hi)) continue;
    const uint64_t imb = imbalance_at(cut);
    if (!found || imb < best.imbalance) {
      best = {cut, imb};
      found = true;
    }
  }
  if (!found) {
    const double mid = lo + (hi - lo) / 2;
    best = {mid, imbalance_at(mid)};
  }
  return best;
}

void Bisect(const Region& rect, std::vector<GeoPoint> pts, int depth,
            PartitionScheme& out) {
  if (depth == 0) {
    out.rects.push_back(rect);
    out.counts.push_back(pts.size());
    return;
  }
  const bool lon_longer = rect.width() >= rect.height();
  bool split_lon;
  double cut;
  if (pts.empty()) {
    split_lon = lon_longer;
    cut = split_lon ? rect.lon_min + rect.width() / 2 : rect.lat_min + rect.height() / 2;
  } else {
    std::vector<double> xs, ys;
    xs.reserve(pts.size());
    ys.reserve(pts.size());
    for (const auto& p : pts) {
      xs.push_back(p.lon);
      ys.push_back(p.lat);
    }
    AxisCut cx = BestCut(xs, rect.lon_min, rect.lon_max);
    AxisCut cy = BestCut(ys, rect.lat_min, rect.lat_max);
    if (cx.imbalance != cy.imbalance) {
      split_lon = cx.imbalance < cy.imbalance;
    } else if (rect.width() != rect.height()) {
      split_lon = lon_longer;
    } else {
      split_lon = true;
    }
    cut = split_lon ? cx.cut : cy.cut;
  }

  Region left = rect, right = rect;
  if (split_lon) {
    left.lon_max = cut;
    right.lon_min = cut;
  } else {
    left.lat_max = cut;
    right.lat_min = cut;
  }
  std::vector<GeoPoint> lp, rp;
  for (const auto& p : pts) {
    const double v = split_lon ? p.lon : p.lat;
    (v < cut ? lp : rp).push_back(p);
  }
  pts.clear();
  pts.shrink_to_fit();
  Bisect(left, std::move(lp), depth - 1, out);
  Bisect(right, std::move(rp), depth - 1, out);
}

}  // namespace

nlohmann::json PartitionScheme::ToJson() const {
  nlohmann::json rect_json = nlohmann::json::array();
  for (const auto& r : rects) rect_json.push_back(RegionJson(r));
  return {{"depth", depth},
          {"rects", rect_json},
          {"counts", counts},
          {"seed", seed},
          {"region", RegionJson(region)},
          {"sample_rate", sample_rate},
          {"sample_size", sample_size}};
}

PartitionScheme PartitionScheme::FromJson(const nlohmann::json& j) {
  PartitionScheme s;
  try {
    s.depth = j.at("depth").get<int>();
    for (const auto& r : j.at("rects")) s.rects.push_back(RegionFromJson(r));
    s.counts = j.at("counts").get<std::vector<uint64_t>>();
    s.seed = j.value("seed", uint64_t{0});
    s.sample_rate = j.value("sample_rate", 1.0);
    s.sample_size = j.value("sample_size", uint64_t{0});
    if (j.contains("region")) {
      s.region = RegionFromJson(j.at("region"));
    } else {
      // Bounding box of the rectangles.
      s.region = s.rects.at(0);
      for (const auto& r : s.rects) {
        s.region.lon_min = std::min(s.region.lon_min, r.lon_min);
        s.region.lat_min = std::min(s.region.lat_min, r.lat_min);
        s.region.lon_max = std::max(s.region.lon_max, r.lon_max);
        s.region.lat_max = std::max(s.region.lat_max, r.lat_max);
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(fmt::format("partition file: {}", e.what()));
  } catch (const std::out_of_range&) {
    throw DataError("partition file: no rectangles");
  }
  if (s.rects.empty() || s.rects.size() != s.counts.size() ||
      s.rects.size() != (size_t{1} << s.depth)) {
    throw DataError("partition file: rects/counts/depth disagree");
  }
  return s;
}

PartitionScheme PartitionScheme::Load(const std::filesystem::path& path) {
  try {
    return FromJson(nlohmann::json::parse(ReadFile(path)));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(fmt::format("{}: {}", path.string(), e.what()));
  }
}

void PartitionScheme::Save(const std::filesystem::path& path) const {
  WriteFileAtomic(path, ToJson().dump() + "\n");
}

std::vector<GeoPoint> SamplePoints(std::span<const MovementRecord> movements,
                                   double rate, uint64_t seed) {
  if (!(rate > 0.0 && rate <= 1.0)) {
    throw InvalidArgument(fmt::format("sample rate {} outside (0, 1]", rate));
  }
  if (movements.empty()) throw DataError("cannot partition: no movements");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::vector<GeoPoint> out;
  for (const auto& m : movements) {
    if (rate >= 1.0 || coin(rng) < rate) out.push_back(m.src);
  }
  if (out.empty()) throw DataError("sample is empty; raise the sample rate");
  return out;
}

std::vector<GeoPoint> SamplePoints(const std::filesystem::path& movements_csv,
                                   double rate, uint64_t seed) {
  if (!(rate > 0.0 && rate <= 1.0)) {
    throw InvalidArgument(fmt::format("sample rate {} outside (0, 1]", rate));
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::vector<GeoPoint> out;
  uint64_t seen = 0;
  uint64_t lineno = 0;
  ForEachLine({movements_csv}, [&](std::string_view line) {
    ++lineno;
    if (line.empty()) return;
    ++seen;
    if (rate < 1.0 && !(coin(rng) < rate)) return;
    auto m = ParseMovement(line);
    if (!m) {
      throw DataError(
          fmt::format("{}:{}: malformed movement line", movements_csv.string(), lineno));
    }
    out.push_back(m->src);
  });
  if (seen == 0) throw DataError("cannot partition: no movements");
  if (out.empty()) throw DataError("sample is empty; raise the sample rate");
  return out;
}

PartitionScheme RecursiveBisect(std::span<const GeoPoint> points,
                                const Region& region, int depth) {
  Validate(region);
  if (depth < 0 || depth > 20) {
    throw InvalidArgument(fmt::format("depth {} outside [0, 20]", depth));
  }
  if (points.empty()) throw InvalidArgument("recursive bisection needs sample points");
  PartitionScheme scheme;
  scheme.region = region;
  scheme.depth = depth;
  scheme.sample_size = points.size();
  std::vector<GeoPoint> inside;
  inside.reserve(points.size());
  for (const auto& p : points) {
    if (region.Contains(p)) inside.push_back(p);
  }
  Bisect(region, std::move(inside), depth, scheme);
  return scheme;
}

bool OwnsPoint(const Region& rect, const Region& region, const GeoPoint& p) {
  const bool lon_ok = p.lon >= rect.lon_min &&
                      (p.lon < rect.lon_max ||
                       (p.lon == rect.lon_max && rect.lon_max == region.lon_max));
  const bool lat_ok = p.lat >= rect.lat_min &&
                      (p.lat < rect.lat_max ||
                       (p.lat == rect.lat_max && rect.lat_max == region.lat_max));
  return lon_ok && lat_ok;
}

double SafeOffsetDeg(double radius_km, const Region& region) {
  if (radius_km <= 0) return 0.0;
  const double theta = radius_km / kEarthRadiusKm;
  if (theta >= std::numbers::pi) return 360.0;
  const double max_abs_lat =
      std::max(std::fabs(region.lat_min), std::fabs(region.lat_max));
  const double cos_lat = std::cos(max_abs_lat * std::numbers::pi / 180.0);
  const double lat_off = theta * 180.0 / std::numbers::pi;
  if (cos_lat <= 0) return 360.0;
  const double ratio = std::sin(theta / 2) / cos_lat;
  if (ratio >= 1.0) return 360.0;
  const double lon_off = 2 * std::asin(ratio) * 180.0 / std::numbers::pi;
  // Slack for rounding in the haversine evaluation.
  return std::max(lat_off, lon_off) * (1 + 1e-9) + 1e-12;
}

RectIndex::RectIndex(const PartitionScheme& scheme)
    : region_(scheme.region), rects_(scheme.rects), tree_(std::make_unique<Tree>()) {
  std::vector<TreeValue> values;
  values.reserve(rects_.size());
  for (uint32_t i = 0; i < rects_.size(); ++i) values.emplace_back(ToBox(rects_[i]), i);
  tree_->rtree = decltype(tree_->rtree)(values.begin(), values.end());
}

RectIndex::~RectIndex() = default;
RectIndex::RectIndex(RectIndex&&) noexcept = default;
RectIndex& RectIndex::operator=(RectIndex&&) noexcept = default;

uint32_t RectIndex::Locate(const GeoPoint& p) const {
  if (!IsValid(p) || !region_.Contains(p)) {
    throw OutOfRegionError(fmt::format("point ({}, {}) outside partitioned region",
                                       p.lon, p.lat));
  }
  std::vector<TreeValue> hits;
  tree_->rtree.query(bgi::intersects(BoostPoint(p.lon, p.lat)), std::back_inserter(hits));
  uint32_t best = UINT32_MAX;
  for (const auto& [box, id] : hits) {
    if (OwnsPoint(rects_[id], region_, p)) best = std::min(best, id);
  }
  if (best == UINT32_MAX) {
    throw OutOfRegionError(
        fmt::format("point ({}, {}) not covered by any partition", p.lon, p.lat));
  }
  return best;
}

std::vector<uint32_t> RectIndex::NeighborPartitions(const GeoPoint& p,
                                                    double offset_deg) const {
  std::vector<uint32_t> ids;
  if (offset_deg <= 0) {
    ids.push_back(Locate(p));
    return ids;
  }
  BoostBox window({p.lon - offset_deg, p.lat - offset_deg},
                  {p.lon + offset_deg, p.lat + offset_deg});
  std::vector<TreeValue> hits;
  tree_->rtree.query(bgi::intersects(window), std::back_inserter(hits));
  for (const auto& hit : hits) ids.push_back(hit.second);
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  return ids;
}

}  // namespace flowcube::partition
