#pragma once

// Query workload generation and open-loop replay against the HTTP service.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "flowcube/cube.h"
#include "flowcube/grid.h"

namespace flowcube::stress {

enum class Mode { kPopulation, kHotspot };
Mode ParseMode(std::string_view s);
std::string_view ModeName(Mode m);

// Point sample used as the density proxy. Empty weights mean uniform.
struct DensitySample {
  std::vector<GeoPoint> points;
  std::vector<double> weights;
};
// Lines of lon,lat[,weight]; a non-numeric first line is a header.
DensitySample LoadPointSample(const std::filesystem::path& path);
// Node centroids of one level weighted by their counts.
DensitySample SampleFromCube(const cube::Cube& cube, int level);

struct GenOptions {
  Mode mode = Mode::kPopulation;
  size_t n = 2000;
  uint64_t seed = 1;
  // Box edge in cell lengths of the query level.
  double box_cells = 40;
  // Side of the hotspot square, degrees.
  double hotspot_deg = 1.0;
};

struct StressQuery {
  int level = 1;
  Region box;
  std::string Target() const;
};

struct Script {
  Mode mode = Mode::kPopulation;
  std::optional<Region> hotspot;
  std::vector<StressQuery> queries;
};

// Population mode draws each box center from the sample in proportion to
// weight. Hotspot mode first picks one dense sub-region (a hotspot_deg
// square around a weighted draw, clipped to the region) and then draws
// centers only from sample points inside it. Levels are uniform on 1..L.
// Throws DataError on an empty sample.
Script StressGen(const DensitySample& sample, const GridHierarchy& grid, const GenOptions& opts);

// One request target per line after a "# mode=..." comment line.
void SaveScript(const std::filesystem::path& path, const Script& script);
std::vector<std::string> LoadTargets(const std::filesystem::path& path);

struct ReplayOptions {
  std::string host = "127.0.0.1";
  int port = 8080;
  double rate_qps = 40;
  int clients = 32;
  bool gzip = true;
};

struct ReplayReport {
  std::string mode;
  double rate_qps = 0;
  double wall_seconds = 0;
  // Per query in script order: completion minus scheduled send time.
  std::vector<double> latencies_ms;
  std::vector<int> statuses;
  uint64_t errors = 0;

  double avg_ms() const;
  double median_ms() const;
  double p90_ms() const;
  nlohmann::json ToJson() const;
};

// Nearest-rank percentile (p in (0, 100]) of unsorted values.
double Percentile(std::span<const double> values, double p);

// Sends target i at start + i / rate from a pool of keep-alive clients.
ReplayReport Replay(std::span<const std::string> targets, const ReplayOptions& opts);

}  // namespace flowcube::stress
