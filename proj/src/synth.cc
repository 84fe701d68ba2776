#include "flowcube/synth.h"

#include <algorithm>
#include <cmath>
#include <random>

#include <fmt/format.h>

#include "flowcube/errors.h"
#include "flowcube/io.h"

namespace flowcube::synth {

namespace {

constexpr int kPlacementAttempts = 1000;

double Round6(double x) { return std::round(x * 1e6) / 1e6; }

GeoPoint ClampRound(GeoPoint p, const Region& r) {
  p.lon = std::clamp(Round6(std::clamp(p.lon, r.lon_min, r.lon_max)), r.lon_min, r.lon_max);
  p.lat = std::clamp(Round6(std::clamp(p.lat, r.lat_min, r.lat_max)), r.lat_min, r.lat_max);
  return p;
}

GeoPoint UniformIn(const Region& r, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> lon(r.lon_min, r.lon_max);
  std::uniform_real_distribution<double> lat(r.lat_min, r.lat_max);
  const double x = lon(rng);
  return {x, lat(rng)};
}

}  // namespace

std::vector<Cluster> MakeClusters(const SynthOptions& opts) {
  Validate(opts.region);
  if (opts.clusters == 0 || opts.hot_area_fraction <= 0) return {};
  if (opts.hot_area_fraction >= 1) throw InvalidArgument("hot_area_fraction must be below 1");
  const Region& r = opts.region;
  const double side =
      std::sqrt(opts.hot_area_fraction * r.area() / static_cast<double>(opts.clusters));
  if (side >= r.width() || side >= r.height()) {
    throw InvalidArgument("cluster squares do not fit in the region");
  }
  std::mt19937_64 rng(opts.seed ^ 0x5bd1e995u);
  const Region centers{r.lon_min + side / 2, r.lat_min + side / 2, r.lon_max - side / 2,
                       r.lat_max - side / 2};
  std::vector<Cluster> out;
  for (uint32_t k = 0; k < opts.clusters; ++k) {
    Region box;
    for (int attempt = 0; attempt < kPlacementAttempts; ++attempt) {
      const GeoPoint c = UniformIn(centers, rng);
      box = {c.lon - side / 2, c.lat - side / 2, c.lon + side / 2, c.lat + side / 2};
      const bool overlaps = std::any_of(out.begin(), out.end(), [&](const Cluster& o) {
        return box.lon_min < o.box.lon_max && o.box.lon_min < box.lon_max &&
               box.lat_min < o.box.lat_max && o.box.lat_min < box.lat_max;
      });
      if (!overlaps) break;
    }
    out.push_back({box});
  }
  return out;
}

std::vector<ingest::GeoEvent> Synthesize(const SynthOptions& opts) {
  const Region& region = opts.region;
  const auto clusters = MakeClusters(opts);
  std::mt19937_64 rng(opts.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> step(0.0, opts.walk_sigma_deg);
  std::exponential_distribution<double> gap(1.0 / opts.mean_gap_seconds);
  std::uniform_int_distribution<size_t> pick_cluster(0, clusters.empty() ? 0 : clusters.size() - 1);
  std::uniform_int_distribution<int64_t> start(0, std::max<int64_t>(0, opts.start_spread_seconds - 1));

  std::vector<ingest::GeoEvent> events;
  events.reserve(opts.users * opts.events_per_user);
  for (uint64_t u = 0; u < opts.users; ++u) {
    const bool clustered = !clusters.empty() && unit(rng) < opts.skew;
    const GeoPoint home =
        clustered ? UniformIn(clusters[pick_cluster(rng)].box, rng) : UniformIn(region, rng);
    int64_t t = opts.t_start + start(rng);
    GeoPoint prev = ClampRound(home, region);
    for (uint32_t e = 0; e < opts.events_per_user; ++e) {
      GeoPoint p;
      const double roll = unit(rng);
      if (e > 0 && roll < opts.repeat_prob) {
        p = prev;
      } else if (roll < opts.repeat_prob + opts.long_trip_prob) {
        p = clusters.empty() ? UniformIn(region, rng)
                             : UniformIn(clusters[pick_cluster(rng)].box, rng);
      } else {
        const double dx = step(rng);
        p = {home.lon + dx, home.lat + step(rng)};
      }
      p = ClampRound(p, region);
      events.push_back({u, t, p});
      prev = p;
      t += std::max<int64_t>(1, std::llround(gap(rng)));
    }
  }
  return events;
}

void WriteEvents(const std::filesystem::path& path, std::span<const ingest::GeoEvent> events) {
  std::string out = "user_id,epoch_seconds,lon,lat\n";
  out.reserve(events.size() * 40 + out.size());
  for (const auto& e : events) {
    fmt::format_to(std::back_inserter(out), "{},{},{},{}\n", e.user, e.t, e.point.lon,
                   e.point.lat);
  }
  WriteFileAtomic(path, out);
}

}  // namespace flowcube::synth
