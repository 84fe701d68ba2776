#include "flowcube/aggregate.h"

#include <cmath>
#include <iterator>

#include <fmt/format.h>
#include <json.hpp>

#include "flowcube/bytes.h"
#include "flowcube/errors.h"

namespace flowcube::aggregate {

namespace {

constexpr char kNodeKind = 0;
constexpr char kEdgeKind = 1;

void PutHistogram(std::string& out, const Histogram& h) {
  bytes::PutLE<uint32_t>(out, static_cast<uint32_t>(h.size()));
  for (const auto& [b, c] : h) {
    bytes::PutLE<int64_t>(out, b);
    bytes::PutLE<uint64_t>(out, c);
  }
}

Histogram GetHistogram(bytes::Reader& r) {
  Histogram h(r.Get<uint32_t>());
  for (auto& e : h) {
    e.first = r.Get<int64_t>();
    e.second = r.Get<uint64_t>();
  }
  return h;
}

void PutI128(std::string& out, __int128 v) {
  bytes::PutLE<uint64_t>(out, static_cast<uint64_t>(v));
  bytes::PutLE<uint64_t>(out, static_cast<uint64_t>(static_cast<unsigned __int128>(v) >> 64));
}

__int128 GetI128(bytes::Reader& r) {
  const uint64_t lo = r.Get<uint64_t>();
  const uint64_t hi = r.Get<uint64_t>();
  return static_cast<__int128>((static_cast<unsigned __int128>(hi) << 64) | lo);
}

double FixedMean(__int128 sum, uint64_t count) {
  const auto n = static_cast<__int128>(count);
  const __int128 q = sum / n;
  const __int128 r = sum % n;
  return (static_cast<double>(q) + static_cast<double>(r) / static_cast<double>(count)) /
         kFixedScale;
}

class AggMapper : public mr::Mapper {
 public:
  AggMapper(GridConfig config, AggregateOptions opts) : state_(config, opts) {}

  void Map(std::string_view line, mr::MapContext& ctx) override {
    auto m = ParseMovement(line);
    if (!m) {
      throw DataError(fmt::format("malformed movement line: {}", line.substr(0, 120)));
    }
    if (!state_.Add(*m)) ctx.Count("dropped_movements");
  }

  void Cleanup(mr::MapContext& ctx) override {
    state_.Drain([&](std::string key, std::string value) {
      ctx.Emit(std::move(key), std::move(value));
    });
  }

 private:
  AggState state_;
};

class AggReducer : public mr::Reducer {
 public:
  explicit AggReducer(bool track_users) : track_users_(track_users) {}

  void Reduce(std::string_view key, std::span<const std::string> values,
              mr::ReduceContext& ctx) override {
    DecodedKey k = DecodeKey(key);
    if (k.is_edge) {
      EdgePartial acc;
      for (const auto& v : values) acc.Merge(EdgePartial::Decode(v));
      ctx.Write(ToLine(acc.Finish(k.level, k.cell, k.dst)));
      ctx.Count("edges");
    } else {
      NodePartial acc;
      for (const auto& v : values) acc.Merge(NodePartial::Decode(v));
      ctx.Write(ToLine(acc.Finish(k.level, k.cell, track_users_)));
      ctx.Count("nodes");
    }
  }

 private:
  bool track_users_;
};

}  // namespace

double ThresholdKm(int level, const GridHierarchy& grid, double alpha) {
  if (!(alpha > 0)) throw InvalidArgument("alpha must be positive");
  return alpha * grid.cell_len_km(level);
}

GeoPoint CellRoutingPoint(const GridHierarchy& grid, const CellId& cell) {
  GeoPoint c = grid.cell_center(cell);
  const Region& r = grid.region();
  c.lon = std::clamp(c.lon, r.lon_min, r.lon_max);
  c.lat = std::clamp(c.lat, r.lat_min, r.lat_max);
  return c;
}

int64_t ToFixed(double degrees) { return std::llround(degrees * kFixedScale); }

void NodePartial::Merge(const NodePartial& o) {
  count += o.count;
  sum_lon += o.sum_lon;
  sum_lat += o.sum_lat;
  src_count += o.src_count;
  tt_sum += o.tt_sum;
  MergeHistogram(tb, o.tb);
  if (!o.users.empty()) {
    std::vector<uint64_t> merged;
    merged.reserve(users.size() + o.users.size());
    std::set_union(users.begin(), users.end(), o.users.begin(), o.users.end(),
                   std::back_inserter(merged));
    users = std::move(merged);
  }
}

NodeRecord NodePartial::Finish(int level, uint64_t id, bool track_users) const {
  NodeRecord n;
  n.level = level;
  n.id = id;
  n.count = count;
  n.src_count = src_count;
  n.tt_sum = tt_sum;
  n.tb = tb;
  if (count > 0) n.centroid = {FixedMean(sum_lon, count), FixedMean(sum_lat, count)};
  if (track_users) n.users = users.size();
  return n;
}

std::string NodePartial::Encode() const {
  std::string out;
  out.reserve(64 + tb.size() * 16 + users.size() * 8);
  bytes::PutLE<uint64_t>(out, count);
  PutI128(out, sum_lon);
  PutI128(out, sum_lat);
  bytes::PutLE<uint64_t>(out, src_count);
  bytes::PutLE<int64_t>(out, tt_sum);
  PutHistogram(out, tb);
  bytes::PutLE<uint32_t>(out, static_cast<uint32_t>(users.size()));
  for (uint64_t u : users) bytes::PutLE<uint64_t>(out, u);
  return out;
}

NodePartial NodePartial::Decode(std::string_view data) {
  bytes::Reader r(data);
  NodePartial p;
  p.count = r.Get<uint64_t>();
  p.sum_lon = GetI128(r);
  p.sum_lat = GetI128(r);
  p.src_count = r.Get<uint64_t>();
  p.tt_sum = r.Get<int64_t>();
  p.tb = GetHistogram(r);
  p.users.resize(r.Get<uint32_t>());
  for (auto& u : p.users) u = r.Get<uint64_t>();
  if (!r.done()) throw DataError("trailing bytes in node partial");
  return p;
}

void EdgePartial::Merge(const EdgePartial& o) {
  count += o.count;
  tt_sum += o.tt_sum;
  MergeHistogram(tb, o.tb);
}

EdgeRecord EdgePartial::Finish(int level, uint64_t src, uint64_t dst) const {
  return {level, src, dst, count, tt_sum, tb};
}

std::string EdgePartial::Encode() const {
  std::string out;
  out.reserve(24 + tb.size() * 16);
  bytes::PutLE<uint64_t>(out, count);
  bytes::PutLE<int64_t>(out, tt_sum);
  PutHistogram(out, tb);
  return out;
}

EdgePartial EdgePartial::Decode(std::string_view data) {
  bytes::Reader r(data);
  EdgePartial p;
  p.count = r.Get<uint64_t>();
  p.tt_sum = r.Get<int64_t>();
  p.tb = GetHistogram(r);
  if (!r.done()) throw DataError("trailing bytes in edge partial");
  return p;
}

std::string NodeKey(int level, uint64_t cell) {
  std::string k;
  k.reserve(10);
  k.push_back(kNodeKind);
  k.push_back(static_cast<char>(level));
  bytes::PutBE64(k, cell);
  return k;
}

std::string EdgeKey(int level, uint64_t src, uint64_t dst) {
  std::string k;
  k.reserve(18);
  k.push_back(kEdgeKind);
  k.push_back(static_cast<char>(level));
  bytes::PutBE64(k, src);
  bytes::PutBE64(k, dst);
  return k;
}

DecodedKey DecodeKey(std::string_view key) {
  DecodedKey d;
  if (key.size() == 10 && key[0] == kNodeKind) {
    d.level = static_cast<unsigned char>(key[1]);
    d.cell = bytes::GetBE64(key, 2);
    return d;
  }
  if (key.size() == 18 && key[0] == kEdgeKind) {
    d.is_edge = true;
    d.level = static_cast<unsigned char>(key[1]);
    d.cell = bytes::GetBE64(key, 2);
    d.dst = bytes::GetBE64(key, 10);
    return d;
  }
  throw DataError("malformed aggregation key");
}

AggState::AggState(const GridConfig& config, const AggregateOptions& opts)
    : config_(config), opts_(opts), levels_(config.grid.levels()) {
  for (int l = 1; l <= config_.grid.levels(); ++l) {
    threshold_km_.push_back(ThresholdKm(l, config_.grid, opts_.alpha));
  }
}

bool AggState::Add(const MovementRecord& m) {
  const GridHierarchy& grid = config_.grid;
  const Region& region = grid.region();
  if (!IsValid(m.src) || !IsValid(m.dst) || !region.Contains(m.src) ||
      !region.Contains(m.dst)) {
    return false;
  }
  const int64_t bucket = config_.time.bucket(m.t_src);
  if (bucket < 0) return false;
  const int64_t tt = m.travel_time();
  const int64_t lon_s = ToFixed(m.src.lon), lat_s = ToFixed(m.src.lat);
  const int64_t lon_d = ToFixed(m.dst.lon), lat_d = ToFixed(m.dst.lat);
  const double dist = GreatCircleKm(m.src, m.dst);

  for (int l = 1; l <= grid.levels(); ++l) {
    LevelGraph& g = levels_[l - 1];
    const uint64_t id1 = grid.cell_id(m.src, l).index;
    const uint64_t id2 = grid.cell_id(m.dst, l).index;

    NodeAcc& a = g.nodes[id1];
    a.partial.count += 1;
    a.partial.sum_lon += lon_s;
    a.partial.sum_lat += lat_s;
    a.partial.src_count += 1;
    a.partial.tt_sum += tt;
    AddToHistogram(a.partial.tb, bucket, 1);
    if (opts_.track_users) a.users.insert(m.user);

    NodeAcc& b = g.nodes[id2];
    b.partial.count += 1;
    b.partial.sum_lon += lon_d;
    b.partial.sum_lat += lat_d;
    AddToHistogram(b.partial.tb, bucket, 1);
    if (opts_.track_users) b.users.insert(m.user);

    if (dist < threshold_km_[l - 1]) {
      EdgePartial& e = g.edges[{id1, id2}];
      e.count += 1;
      e.tt_sum += tt;
      AddToHistogram(e.tb, bucket, 1);
    }
  }
  return true;
}

AggregateResult AggregateInMemory(std::span<const MovementRecord> movements,
                                  const GridConfig& config, const AggregateOptions& opts) {
  AggState state(config, opts);
  AggregateResult result;
  for (const auto& m : movements) {
    if (!state.Add(m)) ++result.dropped;
  }
  state.Drain([&](const std::string& key, const std::string& value) {
    DecodedKey k = DecodeKey(key);
    if (k.is_edge) {
      result.edges.push_back(EdgePartial::Decode(value).Finish(k.level, k.cell, k.dst));
    } else {
      result.nodes.push_back(NodePartial::Decode(value).Finish(k.level, k.cell, opts.track_users));
    }
  });
  std::sort(result.nodes.begin(), result.nodes.end(), [](const auto& a, const auto& b) {
    return std::tie(a.level, a.id) < std::tie(b.level, b.id);
  });
  std::sort(result.edges.begin(), result.edges.end(), [](const auto& a, const auto& b) {
    return std::tie(a.level, a.src, a.dst) < std::tie(b.level, b.src, b.dst);
  });
  return result;
}

std::string MakeAggBroadcast(const GridConfig& grid, const AggregateOptions& opts) {
  nlohmann::json j = {{"grid", grid.ToJson()},
                      {"alpha", opts.alpha},
                      {"track_users", opts.track_users}};
  return j.dump();
}

std::unique_ptr<mr::Mapper> MakeAggMapper(std::string_view broadcast) {
  auto j = nlohmann::json::parse(broadcast);
  AggregateOptions opts;
  opts.alpha = j.at("alpha").get<double>();
  opts.track_users = j.at("track_users").get<bool>();
  return std::make_unique<AggMapper>(GridConfig::FromJson(j.at("grid")), opts);
}

std::unique_ptr<mr::Reducer> MakeAggReducer(bool track_users) {
  return std::make_unique<AggReducer>(track_users);
}

mr::JobResult RunAggregateJob(std::span<const std::filesystem::path> movement_files,
                              const AggregateJobConfig& cfg) {
  if (cfg.scheme.region != cfg.grid.grid.region()) {
    throw DataError("partition scheme region differs from the grid region");
  }
  auto index = std::make_shared<partition::RectIndex>(cfg.scheme);
  auto grid = std::make_shared<GridHierarchy>(cfg.grid.grid);

  mr::JobSpec spec;
  spec.splits = mr::MakeSplits(movement_files, cfg.split_bytes);
  spec.broadcast = MakeAggBroadcast(cfg.grid, cfg.options);
  spec.make_mapper = MakeAggMapper;
  // Nodes go to the partition holding their cell center, edges to their
  // source cell's partition, so every key reduces in exactly one place.
  spec.partitioner = [index, grid](std::string_view key) {
    DecodedKey k = DecodeKey(key);
    return index->Locate(CellRoutingPoint(*grid, {k.level, k.cell}));
  };
  const bool track = cfg.options.track_users;
  spec.make_reducer = [track](uint32_t, std::string_view) { return MakeAggReducer(track); };
  spec.workers = cfg.workers;
  spec.partitions = static_cast<uint32_t>(cfg.scheme.size());
  spec.output_dir = cfg.output_dir;
  spec.shuffle_memory_bytes = cfg.shuffle_memory_bytes;
  return mr::RunJob(spec);
}

}  // namespace flowcube::aggregate
