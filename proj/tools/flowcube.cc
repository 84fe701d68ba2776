// flowcube: pipeline driver, query server and workload tools.

#include <atomic>
#include <bit>
#include <csignal>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <json.hpp>

#include "flowcube/cube.h"
#include "flowcube/errors.h"
#include "flowcube/io.h"
#include "flowcube/mapreduce.h"
#include "flowcube/pipeline.h"
#include "flowcube/query_service.h"
#include "flowcube/stress.h"
#include "flowcube/synth.h"

namespace fs = std::filesystem;
using namespace flowcube;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitInternal = 3;

// TOML by default; a file whose first character is '{' is read as JSON with
// one nested object per subcommand.
class TomlOrJsonConfig : public CLI::ConfigTOML {
 public:
  std::vector<CLI::ConfigItem> from_config(std::istream& in) const override {
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const auto first = text.find_first_not_of(" \t\r\n");
    if (first == std::string::npos || text[first] != '{') {
      std::istringstream ss(text);
      return CLI::ConfigTOML::from_config(ss);
    }
    auto j = nlohmann::json::parse(text, nullptr, false);
    if (!j.is_object()) throw CLI::ConversionError("config file is not a JSON object");
    std::vector<CLI::ConfigItem> items;
    Flatten(j, {}, items);
    return items;
  }

 private:
  static std::string Scalar(const nlohmann::json& v) {
    return v.is_string() ? v.get<std::string>() : v.dump();
  }

  static void Flatten(const nlohmann::json& obj, const std::vector<std::string>& parents,
                      std::vector<CLI::ConfigItem>& items) {
    for (const auto& [key, value] : obj.items()) {
      if (value.is_object()) {
        auto p = parents;
        p.push_back(key);
        Flatten(value, p, items);
        continue;
      }
      CLI::ConfigItem item;
      item.parents = parents;
      item.name = key;
      if (value.is_array()) {
        for (const auto& v : value) item.inputs.push_back(Scalar(v));
      } else {
        item.inputs.push_back(Scalar(value));
      }
      items.push_back(std::move(item));
    }
  }
};

struct JobFlags {
  uint32_t workers = 1;
  uint64_t shuffle_mem_mb = 256;
  uint64_t split_mb = 16;

  void Add(CLI::App* app) {
    app->add_option("--workers", workers, "Worker threads")
        ->envname("FLOWCUBE_WORKERS")
        ->check(CLI::PositiveNumber);
    app->add_option("--shuffle-mem-mb", shuffle_mem_mb, "Shuffle memory budget before spilling")
        ->check(CLI::PositiveNumber);
    app->add_option("--split-mb", split_mb, "Input split size")->check(CLI::PositiveNumber);
  }
  pipeline::JobConfig Get() const {
    return {workers, split_mb << 20, shuffle_mem_mb << 20};
  }
};

std::optional<Region> ParseRegion(const std::string& s) {
  return service::ParseBbox(s);
}

GridConfig LoadGrid(const std::string& path) {
  return path.empty() ? GridConfig::NorthAmerica() : GridConfig::Load(path);
}

void PrintJson(const nlohmann::json& j) { std::cout << j.dump(2) << "\n"; }

summarize::SummaryConfig MakeSummary(const std::vector<double>& r, double threshold) {
  summarize::SummaryConfig c;
  c.radius_cells = r;
  c.threshold = threshold;
  return c;
}

std::atomic<bool> g_stop{false};

// Blocks SIGINT/SIGTERM/SIGHUP in every thread and handles them on one
// waiter: stop on the first two, reload the snapshot on SIGHUP.
void ServeWithSignals(service::QueryService& svc, const fs::path& snapshot) {
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  sigaddset(&set, SIGHUP);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);
  std::thread waiter([&] {
    for (;;) {
      int sig = 0;
      if (sigwait(&set, &sig) != 0) continue;
      if (sig == SIGHUP) {
        try {
          svc.SetSnapshot(cube::Cube::Load(snapshot));
          fmt::print(stderr, "reloaded {}\n", snapshot.string());
        } catch (const std::exception& e) {
          fmt::print(stderr, "reload failed, keeping the current snapshot: {}\n", e.what());
        }
        continue;
      }
      g_stop = true;
      svc.Stop();
      return;
    }
  });
  svc.Serve();
  if (!g_stop) {
    // Serve returned on its own; wake the waiter.
    pthread_kill(waiter.native_handle(), SIGTERM);
  }
  waiter.join();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-level spatial flow cube: pipeline, query server and tools"};
  app.config_formatter(std::make_shared<TomlOrJsonConfig>());
  app.set_config("--config", "", "TOML or JSON file with one section per subcommand");
  app.require_subcommand(1);
  app.fallthrough();

  // ingest
  auto* ingest = app.add_subcommand("ingest", "Turn geo-tagged events into movements");
  std::vector<std::string> ingest_in;
  std::string ingest_out, ingest_grid, ingest_region;
  std::optional<int64_t> max_gap;
  double max_malformed = 0.10;
  JobFlags ingest_job;
  ingest->add_option("events", ingest_in, "Event CSV files (user_id,epoch_seconds,lon,lat)")
      ->required()
      ->check(CLI::ExistingFile);
  ingest->add_option("-o,--output", ingest_out, "Movement CSV")->required();
  ingest->add_option("--grid", ingest_grid, "Grid JSON (region used for filtering)");
  ingest->add_option("--region", ingest_region, "Region w,s,e,n (overrides the grid)");
  ingest->add_option("--max-gap-seconds", max_gap, "Never join events further apart");
  ingest->add_option("--max-malformed", max_malformed, "Tolerated malformed line fraction")
      ->check(CLI::Range(0.0, 1.0));
  ingest_job.Add(ingest);

  // partition
  auto* part = app.add_subcommand("partition", "Build a recursive-bisection partitioning");
  std::string part_in, part_out, part_grid;
  int depth = 4;
  std::optional<uint32_t> part_count;
  double sample_rate = 0.01;
  uint64_t part_seed = 1;
  part->add_option("movements", part_in, "Movement CSV")->required()->check(CLI::ExistingFile);
  part->add_option("-o,--output", part_out, "Partition JSON")->required();
  part->add_option("--grid", part_grid, "Grid JSON");
  part->add_option("--depth", depth, "Bisection depth (2^depth partitions)")
      ->check(CLI::Range(0, 20));
  part->add_option("--partitions", part_count, "Partition count (a power of two)");
  part->add_option("--sample-rate", sample_rate, "Bernoulli sample rate")
      ->check(CLI::Range(0.0, 1.0));
  part->add_option("--seed", part_seed, "Sampling seed");

  // aggregate
  auto* agg = app.add_subcommand("aggregate", "Aggregate movements into per-level graphs");
  std::vector<std::string> agg_in;
  std::string agg_parts, agg_grid, agg_out;
  double alpha = 64;
  bool track_users = false;
  JobFlags agg_job;
  agg->add_option("movements", agg_in, "Movement CSV files")->required()->check(CLI::ExistingFile);
  agg->add_option("--parts", agg_parts, "Partition JSON")->required()->check(CLI::ExistingFile);
  agg->add_option("--grid", agg_grid, "Grid JSON");
  agg->add_option("-o,--output", agg_out, "Output directory")->required();
  agg->add_option("--alpha", alpha, "Edge distance factor (cell lengths)")
      ->check(CLI::PositiveNumber);
  agg->add_flag("--track-users", track_users, "Count distinct users per node");
  agg_job.Add(agg);

  // summarize
  auto* summ = app.add_subcommand("summarize", "Keep locally significant nodes");
  std::string summ_in, summ_parts, summ_out;
  std::vector<double> radius = {8.0};
  double threshold = 80;
  JobFlags summ_job;
  summ->add_option("agg", summ_in, "Aggregation directory")->required()->check(CLI::ExistingDirectory);
  summ->add_option("--parts", summ_parts, "Partition JSON")->required()->check(CLI::ExistingFile);
  summ->add_option("-o,--output", summ_out, "Output directory")->required();
  summ->add_option("--r", radius, "Neighbourhood radius in cell lengths (one, or one per level)")
      ->delimiter(',');
  summ->add_option("--threshold", threshold, "Percentile rank threshold")
      ->check(CLI::Range(0.0, 100.0));
  summ_job.Add(summ);

  // filter-edges
  auto* filt = app.add_subcommand("filter-edges", "Keep edges whose endpoints survived");
  std::string filt_agg, filt_summary, filt_out;
  double bloom_p = 0.01;
  JobFlags filt_job;
  filt->add_option("agg", filt_agg, "Aggregation directory")->required()->check(CLI::ExistingDirectory);
  filt->add_option("summary", filt_summary, "Summary directory")
      ->required()
      ->check(CLI::ExistingDirectory);
  filt->add_option("-o,--output", filt_out, "Output directory")->required();
  filt->add_option("--p", bloom_p, "Bloom false-positive rate")->check(CLI::Range(1e-9, 0.5));
  filt_job.Add(filt);

  // pack and cube pack / cube inspect
  std::string pack_summary, pack_edges, pack_out;
  std::optional<int64_t> build_time;
  auto add_pack = [&](CLI::App* sub) {
    sub->add_option("summary", pack_summary, "Summary directory")
        ->required()
        ->check(CLI::ExistingDirectory);
    sub->add_option("edges", pack_edges, "Filtered edge directory")
        ->required()
        ->check(CLI::ExistingDirectory);
    sub->add_option("-o,--output", pack_out, "Snapshot file")->required();
    sub->add_option("--build-time", build_time, "Epoch seconds recorded in the header");
  };
  auto* pack = app.add_subcommand("pack", "Write a cube snapshot");
  add_pack(pack);
  auto* cube_cmd = app.add_subcommand("cube", "Snapshot tools");
  cube_cmd->require_subcommand(1);
  auto* cube_pack = cube_cmd->add_subcommand("pack", "Write a cube snapshot");
  add_pack(cube_pack);
  auto* cube_inspect = cube_cmd->add_subcommand("inspect", "Print a snapshot's header and counts");
  std::string inspect_in;
  cube_inspect->add_option("snapshot", inspect_in, "Snapshot file")
      ->required()
      ->check(CLI::ExistingFile);

  // run-all
  auto* all = app.add_subcommand("run-all", "Run every stage from events to snapshot");
  std::vector<std::string> all_in;
  std::string all_out, all_grid, all_work, all_report;
  pipeline::RunAllConfig rc;
  JobFlags all_job;
  std::vector<double> all_radius = {8.0};
  all->add_option("events", all_in, "Event CSV files")->required()->check(CLI::ExistingFile);
  all->add_option("-o,--output", all_out, "Snapshot file")->required();
  all->add_option("--grid", all_grid, "Grid JSON");
  all->add_option("--work-dir", all_work, "Intermediate directory (default <output>.work)");
  all->add_option("--report", all_report, "Also write the timing report here");
  all->add_option("--max-gap-seconds", rc.ingest.max_gap_seconds, "Never join events further apart");
  all->add_option("--max-malformed", rc.ingest.max_malformed_fraction,
                  "Tolerated malformed line fraction");
  all->add_option("--depth", rc.partition.depth, "Bisection depth")->check(CLI::Range(0, 20));
  all->add_option("--sample-rate", rc.partition.sample_rate, "Partition sample rate")
      ->check(CLI::Range(0.0, 1.0));
  all->add_option("--seed", rc.partition.seed, "Sampling seed");
  all->add_option("--alpha", rc.aggregate.alpha, "Edge distance factor")->check(CLI::PositiveNumber);
  all->add_flag("--track-users", rc.aggregate.track_users, "Count distinct users per node");
  all->add_option("--r", all_radius, "Neighbourhood radius in cell lengths")->delimiter(',');
  all->add_option("--threshold", rc.summary.threshold, "Percentile rank threshold")
      ->check(CLI::Range(0.0, 100.0));
  all->add_option("--p", rc.bloom_p, "Bloom false-positive rate")->check(CLI::Range(1e-9, 0.5));
  all->add_option("--build-time", rc.build_time, "Epoch seconds recorded in the header");
  all_job.Add(all);

  // serve
  auto* serve = app.add_subcommand("serve", "Serve a snapshot over HTTP");
  std::string serve_snap, serve_host = "0.0.0.0", static_dir;
  int port = 8080;
  service::ServiceOptions so;
  serve->add_option("snapshot,--snapshot", serve_snap, "Snapshot file")->check(CLI::ExistingFile);
  serve->add_option("--port", port, "TCP port")->check(CLI::Range(0, 65535));
  serve->add_option("--host", serve_host, "Bind address");
  serve->add_option("--max-response-elems", so.max_response_elems, "Truncate results past this");
  serve->add_option("--hard-cap", so.hard_cap, "Reject (413) queries estimated above this");
  serve->add_option("--threads", so.threads, "Request threads")->check(CLI::PositiveNumber);
  serve->add_option("--heavy-estimate", so.heavy_estimate,
                    "Run queries estimated above this on low-priority threads (0 disables)");
  serve->add_option("--static-dir", static_dir, "Directory served at /")
      ->check(CLI::ExistingDirectory);

  // synth
  auto* syn = app.add_subcommand("synth", "Generate synthetic skewed events");
  synth::SynthOptions sy;
  std::string syn_out, syn_region, syn_grid;
  syn->add_option("-o,--output", syn_out, "Event CSV")->required();
  syn->add_option("--users", sy.users, "Users")->check(CLI::PositiveNumber);
  syn->add_option("--events-per-user", sy.events_per_user, "Events per user")
      ->check(CLI::PositiveNumber);
  syn->add_option("--skew", sy.skew, "Fraction of users homed in dense clusters")
      ->check(CLI::Range(0.0, 1.0));
  syn->add_option("--hot-area", sy.hot_area_fraction, "Area fraction covered by clusters")
      ->check(CLI::Range(0.0, 1.0));
  syn->add_option("--clusters", sy.clusters, "Dense cluster count");
  syn->add_option("--seed", sy.seed, "Random seed");
  syn->add_option("--region", syn_region, "Region w,s,e,n");
  syn->add_option("--grid", syn_grid, "Take the region from a grid JSON");
  syn->add_option("--walk-sigma-deg", sy.walk_sigma_deg, "Step size around home");
  syn->add_option("--long-trip-prob", sy.long_trip_prob, "Probability of a trip to a cluster");

  // stress-gen and stress
  std::string st_snap, st_sample, st_out, st_script, st_mode = "population", st_host = "127.0.0.1";
  stress::GenOptions go;
  int st_sample_level = 0;
  int st_port = 0;
  stress::ReplayOptions ro;
  auto add_gen = [&](CLI::App* sub) {
    sub->add_option("snapshot", st_snap, "Snapshot file")->required()->check(CLI::ExistingFile);
    sub->add_option("--mode", st_mode, "population or hotspot")
        ->check(CLI::IsMember({"population", "hotspot"}));
    sub->add_option("-n", go.n, "Query count");
    sub->add_option("--seed", go.seed, "Random seed");
    sub->add_option("--sample", st_sample, "Point sample lon,lat[,weight] (default: snapshot nodes)")
        ->check(CLI::ExistingFile);
    sub->add_option("--sample-level", st_sample_level, "Snapshot level used as the sample")
        ->check(CLI::NonNegativeNumber);
    sub->add_option("--box-cells", go.box_cells, "Box edge in cell lengths")
        ->check(CLI::PositiveNumber);
    sub->add_option("--hotspot-deg", go.hotspot_deg, "Hotspot square side in degrees")
        ->check(CLI::PositiveNumber);
  };
  auto* sgen = app.add_subcommand("stress-gen", "Write a query script");
  add_gen(sgen);
  sgen->add_option("-o,--output", st_script, "Script file")->required();
  auto* st = app.add_subcommand("stress", "Replay a generated workload and report latencies");
  add_gen(st);
  st->add_option("-o,--output", st_out, "Report JSON")->required();
  st->add_option("--rate", ro.rate_qps, "Queries per second")->check(CLI::PositiveNumber);
  st->add_option("--clients", ro.clients, "Client connections")->check(CLI::PositiveNumber);
  st->add_option("--host", st_host, "Target host when --port is given");
  st->add_option("--port", st_port, "Replay against a running server instead of an in-process one");
  st->add_option("--script", st_script, "Also save the generated script");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (ingest->parsed()) {
      pipeline::IngestConfig ic;
      ic.region = LoadGrid(ingest_grid).grid.region();
      if (!ingest_region.empty()) {
        auto r = ParseRegion(ingest_region);
        if (!r) throw InvalidArgument("--region must be w,s,e,n");
        Validate(*r);
        ic.region = *r;
      }
      ic.max_gap_seconds = max_gap;
      ic.workers = static_cast<int>(ingest_job.workers);
      ic.max_malformed_fraction = max_malformed;
      std::vector<fs::path> in(ingest_in.begin(), ingest_in.end());
      PrintJson(pipeline::IngestStage(in, ingest_out, ic));
    } else if (part->parsed()) {
      pipeline::PartitionConfig pc;
      pc.depth = depth;
      if (part_count) {
        const uint32_t n = *part_count;
        if (n == 0 || (n & (n - 1)) != 0) throw InvalidArgument("--partitions must be a power of two");
        pc.depth = std::countr_zero(n);
      }
      pc.sample_rate = sample_rate;
      pc.seed = part_seed;
      auto scheme = pipeline::PartitionStage(part_in, LoadGrid(part_grid), pc, part_out);
      PrintJson({{"partitions", scheme.size()},
                 {"sample_size", scheme.sample_size},
                 {"counts", scheme.counts}});
    } else if (agg->parsed()) {
      aggregate::AggregateOptions ao{alpha, track_users};
      std::vector<fs::path> in(agg_in.begin(), agg_in.end());
      auto r = pipeline::AggregateStage(in, LoadGrid(agg_grid),
                                        partition::PartitionScheme::Load(agg_parts), ao,
                                        agg_job.Get(), agg_out);
      auto j = pipeline::JobReport(r, 0);
      j.erase("seconds");
      PrintJson(j);
    } else if (summ->parsed()) {
      auto r = pipeline::SummarizeStage(summ_in, partition::PartitionScheme::Load(summ_parts),
                                        MakeSummary(radius, threshold), summ_job.Get(), summ_out);
      auto j = pipeline::JobReport(r, 0);
      j.erase("seconds");
      PrintJson(j);
    } else if (filt->parsed()) {
      auto r = pipeline::FilterStage(filt_agg, filt_summary, bloom_p, filt_job.Get(), filt_out);
      auto j = pipeline::JobReport(r, 0);
      j.erase("seconds");
      PrintJson(j);
    } else if (pack->parsed() || cube_pack->parsed()) {
      auto r = pipeline::PackStage(pack_summary, pack_edges, pack_out, build_time);
      PrintJson({{"nodes", r.nodes}, {"edges", r.edges}, {"dropped_edges", r.dropped_edges}});
    } else if (cube_inspect->parsed()) {
      auto c = cube::Cube::Load(inspect_in);
      nlohmann::json levels = nlohmann::json::array();
      for (int l = 1; l <= c->levels(); ++l) {
        levels.push_back({{"level", l}, {"nodes", c->node_count(l)}, {"edges", c->edge_count(l)}});
      }
      nlohmann::json j = {{"grid", c->header().grid.ToJson()},
                          {"provenance", c->header().provenance},
                          {"levels", levels},
                          {"nodes", c->total_nodes()},
                          {"edges", c->total_edges()}};
      if (auto b = c->bucket_range()) j["buckets"] = {b->from, b->to};
      PrintJson(j);
    } else if (all->parsed()) {
      rc.grid = LoadGrid(all_grid);
      rc.job = all_job.Get();
      rc.ingest.workers = static_cast<int>(all_job.workers);
      rc.summary.radius_cells = all_radius;
      rc.work_dir = all_work.empty() ? fs::path(all_out + ".work") : fs::path(all_work);
      std::vector<fs::path> in(all_in.begin(), all_in.end());
      auto report = pipeline::RunAll(in, all_out, rc);
      if (!all_report.empty()) WriteFileAtomic(all_report, report.dump(2) + "\n");
      PrintJson(report);
    } else if (serve->parsed()) {
      if (serve_snap.empty()) throw InvalidArgument("serve needs a snapshot");
      if (!static_dir.empty()) so.static_dir = static_dir;
      service::QueryService svc(so);
      svc.SetSnapshot(cube::Cube::Load(serve_snap));
      const int bound = svc.Bind(serve_host, port);
      if (bound < 0) throw std::runtime_error(fmt::format("cannot bind {}:{}", serve_host, port));
      fmt::print(stderr, "serving {} on {}:{}\n", serve_snap, serve_host, bound);
      ServeWithSignals(svc, serve_snap);
    } else if (syn->parsed()) {
      if (!syn_grid.empty()) sy.region = GridConfig::Load(syn_grid).grid.region();
      if (!syn_region.empty()) {
        auto r = ParseRegion(syn_region);
        if (!r) throw InvalidArgument("--region must be w,s,e,n");
        sy.region = *r;
      }
      auto events = synth::Synthesize(sy);
      synth::WriteEvents(syn_out, events);
      PrintJson({{"events", events.size()}, {"users", sy.users}});
    } else if (sgen->parsed() || st->parsed()) {
      go.mode = stress::ParseMode(st_mode);
      auto c = cube::Cube::Load(st_snap);
      const int level = st_sample_level > 0 ? st_sample_level : c->levels();
      auto sample = st_sample.empty() ? stress::SampleFromCube(*c, level)
                                      : stress::LoadPointSample(st_sample);
      auto script = stress::StressGen(sample, c->grid(), go);
      if (!st_script.empty()) stress::SaveScript(st_script, script);
      if (st->parsed()) {
        std::vector<std::string> targets;
        for (const auto& q : script.queries) targets.push_back(q.Target());
        std::unique_ptr<service::QueryService> local;
        std::thread server;
        ro.host = st_host;
        ro.port = st_port;
        if (st_port == 0) {
          service::ServiceOptions lo;
          lo.access_log = nullptr;
          local = std::make_unique<service::QueryService>(lo);
          local->SetSnapshot(c);
          ro.host = "127.0.0.1";
          ro.port = local->Bind(ro.host, 0);
          if (ro.port < 0) throw std::runtime_error("cannot bind a local port");
          server = std::thread([&] { local->Serve(); });
        }
        auto report = stress::Replay(targets, ro);
        report.mode = std::string(stress::ModeName(go.mode));
        if (local) {
          local->Stop();
          server.join();
        }
        auto j = report.ToJson();
        WriteFileAtomic(st_out, j.dump(2) + "\n");
        j.erase("latencies_ms");
        PrintJson(j);
      }
    }
  } catch (const InvalidArgument& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return kExitUsage;
  } catch (const mr::JobError& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return e.caused_by_data() ? kExitData : kExitInternal;
  } catch (const DataError& e) {
    fmt::print(stderr, "data error: {}\n", e.what());
    return kExitData;
  } catch (const NotFoundError& e) {
    fmt::print(stderr, "not found: {}\n", e.what());
    return kExitData;
  } catch (const nlohmann::json::exception& e) {
    fmt::print(stderr, "data error: {}\n", e.what());
    return kExitData;
  } catch (const fs::filesystem_error& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return kExitData;
  } catch (const std::exception& e) {
    fmt::print(stderr, "internal error: {}\n", e.what());
    return kExitInternal;
  }
  return kExitOk;
}
