#include "flowcube/query_service.h"

#include <sys/resource.h>
#include <sys/syscall.h>
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <condition_variable>
#include <deque>
#include <functional>
#include <future>
#include <iterator>
#include <thread>

#include <fmt/chrono.h>
#include <fmt/format.h>
#include <httplib.h>
#include <zlib.h>

#include "flowcube/errors.h"
#include "flowcube/io.h"

namespace flowcube::service {

namespace {

using Clock = std::chrono::steady_clock;

thread_local Clock::time_point request_start;

ApiResponse Error(int status, std::string_view message) {
  return {status, nlohmann::json({{"v", kApiVersion}, {"error", message}}).dump()};
}

std::optional<int> Digits(std::string_view s, size_t pos, size_t len) {
  if (pos + len > s.size()) return std::nullopt;
  return ParseNumber<int>(s.substr(pos, len));
}

// Days since 1970-01-01 for a proleptic Gregorian date.
std::optional<int64_t> DaysFromCivil(int y, int m, int d) {
  using namespace std::chrono;
  const year_month_day ymd{year{y}, month{static_cast<unsigned>(m)},
                           day{static_cast<unsigned>(d)}};
  if (!ymd.ok()) return std::nullopt;
  return sys_days(ymd).time_since_epoch().count();
}

void AppendOptional(std::string& out, const std::optional<uint64_t>& v) {
  if (v) {
    fmt::format_to(std::back_inserter(out), "{}", *v);
  } else {
    out += "null";
  }
}

void AppendOptional(std::string& out, const std::optional<double>& v) {
  if (v) {
    fmt::format_to(std::back_inserter(out), "{}", *v);
  } else {
    out += "null";
  }
}

std::string FirstParam(const std::multimap<std::string, std::string>& params,
                       const std::string& key, bool* present) {
  auto it = params.find(key);
  *present = it != params.end();
  return *present ? it->second : std::string();
}

// Fast gzip for API bodies; the library's own compressor runs at the default
// level, which costs several times the query itself on large responses.
constexpr size_t kGzipMinBytes = 1024;

std::optional<std::string> GzipFast(std::string_view data) {
  z_stream zs{};
  if (deflateInit2(&zs, 1, Z_DEFLATED, 15 + 16, 8, Z_DEFAULT_STRATEGY) != Z_OK) return std::nullopt;
  std::string out(deflateBound(&zs, data.size()), '\0');
  zs.next_in = reinterpret_cast<Bytef*>(const_cast<char*>(data.data()));
  zs.avail_in = static_cast<uInt>(data.size());
  zs.next_out = reinterpret_cast<Bytef*>(out.data());
  zs.avail_out = static_cast<uInt>(out.size());
  const int rc = deflate(&zs, Z_FINISH);
  deflateEnd(&zs);
  if (rc != Z_STREAM_END) return std::nullopt;
  out.resize(zs.total_out);
  return out;
}

bool AcceptsGzip(const httplib::Request& req) {
  return req.get_header_value("Accept-Encoding").find("gzip") != std::string::npos;
}

struct Encoded {
  ApiResponse response;
  bool gzip = false;
};

Encoded Encode(const httplib::Request& req, ApiResponse r) {
  if (r.body.size() >= kGzipMinBytes && AcceptsGzip(req)) {
    if (auto gz = GzipFast(r.body)) {
      r.body = std::move(*gz);
      return {std::move(r), true};
    }
  }
  return {std::move(r), false};
}

}  // namespace

std::optional<int64_t> ParseTimeParam(std::string_view s, const TimeBucketing& time) {
  if (auto n = ParseNumber<int64_t>(s)) return n;
  // YYYY-MM-DD[THH:MM[:SS]][Z]
  if (s.size() < 10 || s[4] != '-' || s[7] != '-') return std::nullopt;
  const auto y = Digits(s, 0, 4), mo = Digits(s, 5, 2), d = Digits(s, 8, 2);
  if (!y || !mo || !d) return std::nullopt;
  const auto days = DaysFromCivil(*y, *mo, *d);
  if (!days) return std::nullopt;
  int64_t secs = *days * 86400;
  std::string_view rest = s.substr(10);
  if (rest.ends_with('Z')) rest.remove_suffix(1);  // only UTC is supported
  if (rest.empty()) return time.bucket(secs);
  if (rest[0] != 'T' && rest[0] != ' ') return std::nullopt;
  if (rest.size() != 6 && rest.size() != 9) return std::nullopt;
  const auto hh = Digits(rest, 1, 2), mm = Digits(rest, 4, 2);
  if (!hh || !mm || rest[3] != ':' || *hh > 23 || *mm > 59) return std::nullopt;
  int ss = 0;
  if (rest.size() == 9) {
    const auto sv = Digits(rest, 7, 2);
    if (rest[6] != ':' || !sv || *sv > 60) return std::nullopt;
    ss = *sv;
  }
  secs += *hh * 3600 + *mm * 60 + ss;
  return time.bucket(secs);
}

std::optional<Region> ParseBbox(std::string_view s) {
  auto f = SplitFields(s, ',');
  if (f.size() != 4) return std::nullopt;
  double v[4];
  for (int i = 0; i < 4; ++i) {
    auto x = ParseNumber<double>(f[static_cast<size_t>(i)]);
    if (!x || !std::isfinite(*x)) return std::nullopt;
    v[i] = *x;
  }
  return Region{v[0], v[1], v[2], v[3]};
}

std::string GraphJson(const cube::SubgraphResult& r) {
  std::string out;
  out.reserve(160 + r.nodes.size() * 110 + r.edges.size() * 60);
  auto it = std::back_inserter(out);
  fmt::format_to(it,
                 R"({{"v":{},"level":{},"bbox":[{},{},{},{}],"window":[{},{}],"truncated":{},)",
                 kApiVersion, r.level, r.box.lon_min, r.box.lat_min, r.box.lon_max,
                 r.box.lat_max, r.window.from, r.window.to, r.truncated);
  out += R"("nodes":[)";
  for (size_t i = 0; i < r.nodes.size(); ++i) {
    const auto& n = r.nodes[i];
    if (i) out += ',';
    fmt::format_to(it, R"({{"id":{},"lon":{},"lat":{},"count":{},"users":)", n.id,
                   n.centroid.lon, n.centroid.lat, n.count);
    AppendOptional(out, n.users);
    fmt::format_to(it, R"(,"avg_tt":{},"rank":)", n.avg_tt);
    AppendOptional(out, n.rank);
    if (n.context) out += R"(,"ctx":true)";
    out += '}';
  }
  out += R"(],"edges":[)";
  for (size_t i = 0; i < r.edges.size(); ++i) {
    const auto& e = r.edges[i];
    if (i) out += ',';
    fmt::format_to(it, R"({{"s":{},"d":{},"count":{},"avg_tt":{}}})", e.src, e.dst, e.count,
                   e.avg_tt);
  }
  out += "]}";
  return out;
}

std::string NodeJson(const NodeRecord& n, const TimeBucketing& time) {
  std::string out;
  auto it = std::back_inserter(out);
  fmt::format_to(it,
                 R"({{"v":{},"level":{},"id":{},"lon":{},"lat":{},"count":{},"src_count":{},)"
                 R"("users":)",
                 kApiVersion, n.level, n.id, n.centroid.lon, n.centroid.lat, n.count,
                 n.src_count);
  AppendOptional(out, n.users);
  fmt::format_to(it, R"(,"tt_sum":{},"avg_tt":{},"rank":)", n.tt_sum, n.avg_travel_time());
  AppendOptional(out, n.rank);
  fmt::format_to(it, R"(,"bucket_seconds":{},"tb":[)", time.width);
  for (size_t i = 0; i < n.tb.size(); ++i) {
    if (i) out += ',';
    fmt::format_to(it, "[{},{}]", n.tb[i].first, n.tb[i].second);
  }
  out += "]}";
  return out;
}

struct QueryService::Http {
  httplib::Server svr;
};

// Worker threads at the lowest scheduling priority. Callers block on the
// result, so a heavy request still holds its connection thread but not the
// CPU.
class QueryService::Lane {
 public:
  explicit Lane(int threads) {
    for (int i = 0; i < threads; ++i) {
      workers_.emplace_back([this] {
        setpriority(PRIO_PROCESS, static_cast<id_t>(syscall(SYS_gettid)), 19);
        Loop();
      });
    }
  }
  ~Lane() {
    {
      std::lock_guard lock(mu_);
      done_ = true;
    }
    cv_.notify_all();
    for (auto& t : workers_) t.join();
  }

  template <typename Fn>
  auto Run(Fn&& fn) {
    std::packaged_task<decltype(fn())()> task(std::forward<Fn>(fn));
    auto result = task.get_future();
    {
      std::lock_guard lock(mu_);
      queue_.emplace_back([&task] { task(); });
    }
    cv_.notify_one();
    return result.get();
  }

 private:
  void Loop() {
    for (;;) {
      std::function<void()> job;
      {
        std::unique_lock lock(mu_);
        cv_.wait(lock, [this] { return done_ || !queue_.empty(); });
        if (queue_.empty()) return;
        job = std::move(queue_.front());
        queue_.pop_front();
      }
      job();
    }
  }

  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<std::function<void()>> queue_;
  bool done_ = false;
  std::vector<std::thread> workers_;
};

QueryService::QueryService(ServiceOptions opts)
    : opts_(std::move(opts)), http_(std::make_unique<Http>()) {
  if (opts_.heavy_estimate > 0 && opts_.heavy_threads > 0) {
    lane_ = std::make_unique<Lane>(opts_.heavy_threads);
  }
  auto& svr = http_->svr;
  const int threads = std::max(1, opts_.threads);
  svr.new_task_queue = [threads] { return new httplib::ThreadPool(static_cast<size_t>(threads)); };
  svr.set_default_headers({{"Access-Control-Allow-Origin", "*"}});
  svr.set_pre_routing_handler([](const httplib::Request&, httplib::Response&) {
    request_start = Clock::now();
    return httplib::Server::HandlerResponse::Unhandled;
  });
  if (opts_.access_log) {
    std::FILE* log = opts_.access_log;
    svr.set_logger([log](const httplib::Request& req, const httplib::Response& res) {
      const auto us =
          std::chrono::duration_cast<std::chrono::microseconds>(Clock::now() - request_start)
              .count();
      const auto now = std::chrono::floor<std::chrono::milliseconds>(
          std::chrono::system_clock::now());
      fmt::print(log, "{:%Y-%m-%dT%H:%M:%S}Z {} \"{} {}\" {} {} {}us\n", now, req.remote_addr,
                 req.method, req.target, res.status, res.body.size(), us);
      std::fflush(log);
    });
  }
  // The charset suffix keeps the library from compressing a second time.
  auto reply = [](httplib::Response& res, Encoded e) {
    res.status = e.response.status;
    res.set_header("Vary", "Accept-Encoding");
    if (e.gzip) res.set_header("Content-Encoding", "gzip");
    res.set_content(std::move(e.response.body), "application/json; charset=utf-8");
  };
  auto send = [reply](const httplib::Request& req, httplib::Response& res, ApiResponse r) {
    reply(res, Encode(req, std::move(r)));
  };
  svr.Options(".*", [](const httplib::Request&, httplib::Response& res) {
    res.set_header("Access-Control-Allow-Methods", "GET, OPTIONS");
    res.set_header("Access-Control-Allow-Headers", "Content-Type, Accept-Encoding");
    res.status = 204;
  });
  svr.Get("/api/meta", [this, send](const httplib::Request& req, httplib::Response& res) {
    send(req, res, Meta());
  });
  svr.Get("/api/graph", [this, reply](const httplib::Request& req, httplib::Response& res) {
    std::multimap<std::string, std::string> params(req.params.begin(), req.params.end());
    auto work = [&] { return Encode(req, Graph(params)); };
    reply(res, lane_ && IsHeavy(params) ? lane_->Run(work) : work());
  });
  svr.Get(R"(/api/node/([^/]+)/([^/]+))",
          [this, send](const httplib::Request& req, httplib::Response& res) {
            send(req, res, Node(req.matches[1].str(), req.matches[2].str()));
          });
  if (opts_.static_dir) svr.set_mount_point("/", opts_.static_dir->string());
}

QueryService::~QueryService() {
  Stop();
  http_.reset();
}

void QueryService::SetSnapshot(std::shared_ptr<const cube::Cube> cube) {
  std::lock_guard lock(snapshot_mu_);
  snapshot_ = std::move(cube);
}

std::shared_ptr<const cube::Cube> QueryService::snapshot() const {
  std::lock_guard lock(snapshot_mu_);
  return snapshot_;
}

ApiResponse QueryService::Meta() const {
  auto snap = snapshot();
  if (!snap) return Error(503, "no snapshot loaded");
  nlohmann::json levels = nlohmann::json::array();
  for (int l = 1; l <= snap->levels(); ++l) {
    levels.push_back({{"level", l},
                      {"cell_len_deg", snap->grid().cell_len_deg(l)},
                      {"cell_len_km", snap->grid().cell_len_km(l)},
                      {"nodes", snap->node_count(l)},
                      {"edges", snap->edge_count(l)}});
  }
  nlohmann::json j = {{"v", kApiVersion},
                      {"grid", snap->header().grid.ToJson()},
                      {"levels", snap->levels()},
                      {"level_stats", levels},
                      {"time", {{"origin", snap->time().t0}, {"bucket_seconds", snap->time().width}}},
                      {"provenance", snap->header().provenance},
                      {"limits",
                       {{"max_response_elems", opts_.max_response_elems},
                        {"hard_cap", opts_.hard_cap}}}};
  if (auto r = snap->bucket_range()) {
    j["buckets"] = {r->from, r->to};
  } else {
    j["buckets"] = nullptr;
  }
  return {200, j.dump()};
}

ApiResponse QueryService::Graph(const std::multimap<std::string, std::string>& params) const {
  auto snap = snapshot();
  if (!snap) return Error(503, "no snapshot loaded");
  bool has = false;
  const std::string level_s = FirstParam(params, "level", &has);
  if (!has) return Error(400, "missing level");
  const auto level = ParseNumber<int>(level_s);
  if (!level) return Error(400, fmt::format("bad level '{}'", level_s));
  if (*level < 1 || *level > snap->levels()) {
    return Error(422, fmt::format("level {} outside [1,{}]", *level, snap->levels()));
  }
  Region box = snap->grid().region();
  const std::string bbox_s = FirstParam(params, "bbox", &has);
  if (has) {
    auto b = ParseBbox(bbox_s);
    if (!b) return Error(400, fmt::format("bad bbox '{}'; expected w,s,e,n", bbox_s));
    box = *b;
  }
  cube::Window window = snap->bucket_range().value_or(cube::Window{0, 0});
  for (const char* key : {"from", "to"}) {
    const std::string v = FirstParam(params, key, &has);
    if (!has) continue;
    auto b = ParseTimeParam(v, snap->time());
    if (!b) return Error(400, fmt::format("bad {} '{}'", key, v));
    (key[0] == 'f' ? window.from : window.to) = *b;
  }
  cube::QueryOptions q{opts_.max_response_elems, opts_.hard_cap};
  try {
    return {200, GraphJson(snap->QueryBbox(*level, box, window, q))};
  } catch (const cube::QueryError& e) {
    return Error(e.kind() == cube::QueryErrorKind::kLevel ? 422 : 400, e.what());
  } catch (const cube::TooLargeError& e) {
    return Error(413, e.what());
  }
}

bool QueryService::IsHeavy(const std::multimap<std::string, std::string>& params) const {
  if (opts_.heavy_estimate == 0) return false;
  auto snap = snapshot();
  if (!snap) return false;
  bool has = false;
  const auto level = ParseNumber<int>(FirstParam(params, "level", &has));
  if (!level || *level < 1 || *level > snap->levels()) return false;
  Region box = snap->grid().region();
  const std::string bbox_s = FirstParam(params, "bbox", &has);
  if (has) {
    auto b = ParseBbox(bbox_s);
    if (!b || b->lon_min > b->lon_max || b->lat_min > b->lat_max) return false;
    box = *b;
  }
  return snap->Estimate(*level, box) > opts_.heavy_estimate;
}

ApiResponse QueryService::Node(std::string_view level_s, std::string_view id_s) const {
  auto snap = snapshot();
  if (!snap) return Error(503, "no snapshot loaded");
  const auto level = ParseNumber<int>(level_s);
  const auto id = ParseNumber<uint64_t>(id_s);
  if (!level || !id) return Error(400, "node path must be /api/node/{level}/{id}");
  if (*level < 1 || *level > snap->levels()) {
    return Error(422, fmt::format("level {} outside [1,{}]", *level, snap->levels()));
  }
  try {
    return {200, NodeJson(snap->NodeDetail(*level, *id), snap->time())};
  } catch (const NotFoundError& e) {
    return Error(404, e.what());
  }
}

int QueryService::Bind(const std::string& host, int port) {
  if (port == 0) return http_->svr.bind_to_any_port(host);
  return http_->svr.bind_to_port(host, port) ? port : -1;
}

void QueryService::Serve() { http_->svr.listen_after_bind(); }

void QueryService::Stop() {
  if (http_) http_->svr.stop();
}

bool QueryService::running() const { return http_->svr.is_running(); }

}  // namespace flowcube::service
