#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "flowcube/grid.h"
#include "flowcube/ingest.h"

namespace flowcube::synth {

// Users live around home points. A `skew` fraction of homes sits in
// `clusters` dense squares that together cover `hot_area_fraction` of the
// region; the rest are spread uniformly. Each user's events form a noisy
// walk around home with occasional long trips to another cluster and
// occasional repeats of the previous position.
struct SynthOptions {
  uint64_t users = 1000;
  uint32_t events_per_user = 20;
  double skew = 0.8;
  double hot_area_fraction = 0.05;
  uint32_t clusters = 8;
  Region region = {-170, 10, -50, 75};
  uint64_t seed = 1;
  int64_t t_start = 1609459200;  // 2021-01-01T00:00:00Z
  int64_t start_spread_seconds = 30 * 86400;
  double mean_gap_seconds = 7200;
  // Standard deviation of a step away from home, degrees.
  double walk_sigma_deg = 0.02;
  double long_trip_prob = 0.05;
  double repeat_prob = 0.2;
};

struct Cluster {
  Region box;
};

// Cluster squares for a configuration (deterministic for the seed).
std::vector<Cluster> MakeClusters(const SynthOptions& opts);

// Events ordered by user then time. Coordinates are rounded to 1e-6 degrees.
std::vector<ingest::GeoEvent> Synthesize(const SynthOptions& opts);

// user_id,epoch_seconds,lon,lat with a header line.
void WriteEvents(const std::filesystem::path& path, std::span<const ingest::GeoEvent> events);

}  // namespace flowcube::synth
