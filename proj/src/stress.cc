#include "flowcube/stress.h"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <thread>

#include <fmt/format.h>
#include <httplib.h>

#include "flowcube/errors.h"
#include "flowcube/io.h"

namespace flowcube::stress {

namespace {

using Clock = std::chrono::steady_clock;

class Picker {
 public:
  explicit Picker(const DensitySample& s)
      : uniform_(0, s.points.size() - 1),
        weighted_(s.weights.begin(), s.weights.end()),
        use_weights_(!s.weights.empty()) {}

  size_t operator()(std::mt19937_64& rng) { return use_weights_ ? weighted_(rng) : uniform_(rng); }

 private:
  std::uniform_int_distribution<size_t> uniform_;
  std::discrete_distribution<size_t> weighted_;
  bool use_weights_;
};

}  // namespace

Mode ParseMode(std::string_view s) {
  if (s == "population") return Mode::kPopulation;
  if (s == "hotspot") return Mode::kHotspot;
  throw InvalidArgument(fmt::format("unknown stress mode '{}'", s));
}

std::string_view ModeName(Mode m) { return m == Mode::kPopulation ? "population" : "hotspot"; }

DensitySample LoadPointSample(const std::filesystem::path& path) {
  DensitySample s;
  bool first = true;
  ForEachLine({path}, [&](std::string_view line) {
    const bool was_first = first;
    first = false;
    if (line.empty()) return;
    auto f = SplitFields(line, ',');
    if (f.size() < 2 || f.size() > 3) throw DataError("point sample lines are lon,lat[,weight]");
    auto lon = ParseNumber<double>(f[0]);
    auto lat = ParseNumber<double>(f[1]);
    if (!lon || !lat) {
      if (was_first) return;
      throw DataError(fmt::format("bad point sample line: {}", line));
    }
    s.points.push_back({*lon, *lat});
    if (f.size() == 3) {
      auto w = ParseNumber<double>(f[2]);
      if (!w || *w < 0) throw DataError(fmt::format("bad point weight: {}", line));
      s.weights.push_back(*w);
    }
  });
  if (!s.weights.empty() && s.weights.size() != s.points.size()) {
    throw DataError("either every point sample line has a weight or none does");
  }
  return s;
}

DensitySample SampleFromCube(const cube::Cube& cube, int level) {
  DensitySample s;
  for (const auto& n : cube.Nodes(level)) {
    s.points.push_back(n.centroid);
    s.weights.push_back(static_cast<double>(n.count));
  }
  return s;
}

std::string StressQuery::Target() const {
  return fmt::format("/api/graph?level={}&bbox={},{},{},{}", level, box.lon_min, box.lat_min,
                     box.lon_max, box.lat_max);
}

Script StressGen(const DensitySample& sample, const GridHierarchy& grid, const GenOptions& opts) {
  if (sample.points.empty()) throw DataError("stress generator needs a non-empty point sample");
  if (!sample.weights.empty() &&
      std::accumulate(sample.weights.begin(), sample.weights.end(), 0.0) <= 0) {
    throw DataError("point sample weights sum to zero");
  }
  std::mt19937_64 rng(opts.seed);
  Script script;
  script.mode = opts.mode;

  DensitySample pool;
  if (opts.mode == Mode::kHotspot) {
    const GeoPoint c = sample.points[Picker(sample)(rng)];
    const Region& r = grid.region();
    const double h = opts.hotspot_deg / 2;
    Region hs{std::max(r.lon_min, c.lon - h), std::max(r.lat_min, c.lat - h),
              std::min(r.lon_max, c.lon + h), std::min(r.lat_max, c.lat + h)};
    script.hotspot = hs;
    for (size_t i = 0; i < sample.points.size(); ++i) {
      if (!hs.Contains(sample.points[i])) continue;
      pool.points.push_back(sample.points[i]);
      if (!sample.weights.empty()) pool.weights.push_back(sample.weights[i]);
    }
    if (pool.points.empty()) throw DataError("hotspot square holds no sample points");
    if (!pool.weights.empty() &&
        std::accumulate(pool.weights.begin(), pool.weights.end(), 0.0) <= 0) {
      pool.weights.clear();
    }
  }
  const DensitySample& from = opts.mode == Mode::kHotspot ? pool : sample;
  std::uniform_int_distribution<int> level(1, grid.levels());
  Picker pick(from);
  for (size_t i = 0; i < opts.n; ++i) {
    StressQuery q;
    q.level = level(rng);
    const GeoPoint c = from.points[pick(rng)];
    const double h = opts.box_cells * grid.cell_len_deg(q.level) / 2;
    q.box = {c.lon - h, c.lat - h, c.lon + h, c.lat + h};
    script.queries.push_back(q);
  }
  return script;
}

void SaveScript(const std::filesystem::path& path, const Script& script) {
  std::string out = fmt::format("# mode={}", ModeName(script.mode));
  if (script.hotspot) {
    const Region& h = *script.hotspot;
    out += fmt::format(" hotspot={},{},{},{}", h.lon_min, h.lat_min, h.lon_max, h.lat_max);
  }
  out += '\n';
  for (const auto& q : script.queries) {
    out += q.Target();
    out += '\n';
  }
  WriteFileAtomic(path, out);
}

std::vector<std::string> LoadTargets(const std::filesystem::path& path) {
  std::vector<std::string> out;
  ForEachLine({path}, [&](std::string_view line) {
    if (line.empty() || line.starts_with('#')) return;
    out.emplace_back(line);
  });
  return out;
}

double Percentile(std::span<const double> values, double p) {
  if (values.empty()) return 0.0;
  std::vector<double> v(values.begin(), values.end());
  std::sort(v.begin(), v.end());
  const auto rank = static_cast<size_t>(std::ceil(p / 100.0 * static_cast<double>(v.size())));
  return v[std::clamp<size_t>(rank, 1, v.size()) - 1];
}

double ReplayReport::avg_ms() const {
  if (latencies_ms.empty()) return 0.0;
  return std::accumulate(latencies_ms.begin(), latencies_ms.end(), 0.0) /
         static_cast<double>(latencies_ms.size());
}
double ReplayReport::median_ms() const { return Percentile(latencies_ms, 50); }
double ReplayReport::p90_ms() const { return Percentile(latencies_ms, 90); }

nlohmann::json ReplayReport::ToJson() const {
  std::map<std::string, uint64_t> status_counts;
  for (int s : statuses) ++status_counts[std::to_string(s)];
  return {{"mode", mode},
          {"n", latencies_ms.size()},
          {"rate_qps", rate_qps},
          {"wall_seconds", wall_seconds},
          {"avg_ms", avg_ms()},
          {"median_ms", median_ms()},
          {"p90_ms", p90_ms()},
          {"p99_ms", Percentile(latencies_ms, 99)},
          {"max_ms", latencies_ms.empty()
                         ? 0.0
                         : *std::max_element(latencies_ms.begin(), latencies_ms.end())},
          {"errors", errors},
          {"status_counts", status_counts},
          {"latencies_ms", latencies_ms}};
}

ReplayReport Replay(std::span<const std::string> targets, const ReplayOptions& opts) {
  if (!(opts.rate_qps > 0)) throw InvalidArgument("replay rate must be positive");
  ReplayReport report;
  report.rate_qps = opts.rate_qps;
  report.latencies_ms.assign(targets.size(), 0.0);
  report.statuses.assign(targets.size(), 0);
  std::atomic<size_t> next{0};
  const auto start = Clock::now() + std::chrono::milliseconds(50);
  const auto period = std::chrono::duration<double>(1.0 / opts.rate_qps);

  auto worker = [&] {
    httplib::Client cli(opts.host, opts.port);
    cli.set_keep_alive(true);
    cli.set_read_timeout(std::chrono::seconds(60));
    httplib::Headers headers;
    if (opts.gzip) headers.emplace("Accept-Encoding", "gzip");
    for (;;) {
      const size_t i = next.fetch_add(1);
      if (i >= targets.size()) break;
      const auto scheduled =
          start + std::chrono::duration_cast<Clock::duration>(period * static_cast<double>(i));
      std::this_thread::sleep_until(scheduled);
      auto res = cli.Get(targets[i], headers);
      const auto done = Clock::now();
      report.latencies_ms[i] =
          std::chrono::duration<double, std::milli>(done - scheduled).count();
      report.statuses[i] = res ? res->status : 0;
    }
  };
  std::vector<std::thread> pool;
  const int clients = std::max(1, opts.clients);
  for (int c = 0; c < clients; ++c) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  report.wall_seconds = std::chrono::duration<double>(Clock::now() - start).count();
  for (int s : report.statuses) {
    if (s != 200) ++report.errors;
  }
  return report;
}

}  // namespace flowcube::stress
