#pragma once

// HTTP front end over a loaded cube.
//
//   GET /api/meta
//   GET /api/graph?level=&bbox=w,s,e,n&from=&to=
//   GET /api/node/{level}/{id}
//
// Every JSON body carries "v". Handlers only read the current snapshot, so
// requests never wait on each other; a reload swaps the snapshot pointer and
// in-flight requests finish on the version they started with.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>

#include "flowcube/cube.h"

namespace flowcube::service {

inline constexpr int kApiVersion = 1;

struct ServiceOptions {
  uint64_t max_response_elems = 50'000;
  uint64_t hard_cap = 500'000;
  int threads = 64;
  // Graph requests whose candidate estimate exceeds this run on a small pool
  // of low-priority threads so they cannot starve cheap requests of CPU.
  // 0 sends everything through the request threads.
  uint64_t heavy_estimate = 20'000;
  int heavy_threads = 2;
  // Served at "/" when set (the browser client bundle).
  std::optional<std::filesystem::path> static_dir;
  // One line per request; null disables logging.
  std::FILE* access_log = stderr;
};

struct ApiResponse {
  int status = 200;
  std::string body;
};

// Accepts a bucket index ("19000") or an ISO-8601 date or date-time in UTC
// ("2021-03-04", "2021-03-04T12:00:00Z"). Dates map through `time`.
std::optional<int64_t> ParseTimeParam(std::string_view s, const TimeBucketing& time);
// "w,s,e,n" with finite numbers.
std::optional<Region> ParseBbox(std::string_view s);

std::string GraphJson(const cube::SubgraphResult& r);
std::string NodeJson(const NodeRecord& n, const TimeBucketing& time);

class QueryService {
 public:
  explicit QueryService(ServiceOptions opts = {});
  ~QueryService();

  void SetSnapshot(std::shared_ptr<const cube::Cube> cube);
  std::shared_ptr<const cube::Cube> snapshot() const;

  ApiResponse Meta() const;
  ApiResponse Graph(const std::multimap<std::string, std::string>& params) const;
  ApiResponse Node(std::string_view level, std::string_view id) const;
  // True when Graph(params) would be routed to the low-priority pool.
  bool IsHeavy(const std::multimap<std::string, std::string>& params) const;

  // Binds to host:port (port 0 picks a free one) and returns the bound port,
  // or -1 on failure.
  int Bind(const std::string& host, int port);
  // Serves until Stop(); call after Bind.
  void Serve();
  void Stop();
  bool running() const;

 private:
  struct Http;
  class Lane;
  ServiceOptions opts_;
  mutable std::mutex snapshot_mu_;  // guards the pointer copy only
  std::shared_ptr<const cube::Cube> snapshot_;
  std::unique_ptr<Lane> lane_;
  std::unique_ptr<Http> http_;
};

}  // namespace flowcube::service
