#include "flowcube/cube.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_set>

#include <boost/geometry.hpp>
#include <boost/geometry/index/rtree.hpp>
#include <fmt/format.h>

#include "flowcube/errors.h"
#include "flowcube/io.h"

namespace flowcube::cube {

namespace bg = boost::geometry;
namespace bgi = boost::geometry::index;

namespace {

using BoostPoint = bg::model::point<double, 2, bg::cs::cartesian>;
using BoostBox = bg::model::box<BoostPoint>;
using IndexedPoint = std::pair<BoostPoint, uint32_t>;
using Bucket = std::pair<int64_t, uint64_t>;

constexpr size_t kMaxListedIds = 10;

std::string ListIds(const std::vector<std::string>& ids, size_t total) {
  std::string out;
  for (size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ", ";
    out += ids[i];
  }
  if (total > ids.size()) out += fmt::format(" (+{} more)", total - ids.size());
  return out;
}

void CheckLevel(int level, int levels) {
  if (level < 1 || level > levels) {
    throw QueryError(QueryErrorKind::kLevel,
                     fmt::format("level {} outside [1,{}]", level, levels));
  }
}

}  // namespace

struct Cube::Level {
  struct NodeRow {
    uint64_t id;
    double lon;
    double lat;
    uint64_t count;
    uint64_t src_count;
    uint64_t users;
    double rank;
    int64_t tt_sum;
    uint32_t tb_off;
    uint32_t tb_len;
    uint32_t edge_begin;
    uint32_t edge_end;
    bool has_users;
    bool has_rank;
  };
  struct EdgeRow {
    uint64_t src;
    uint64_t dst;
    uint64_t count;
    int64_t tt_sum;
    uint32_t src_row;
    uint32_t dst_row;
    uint32_t tb_off;
    uint32_t tb_len;
  };

  std::vector<NodeRow> nodes;
  std::vector<EdgeRow> edges;
  std::vector<Bucket> pool;
  bgi::rtree<IndexedPoint, bgi::rstar<16>> tree;

  uint32_t PoolAppend(const Histogram& h) {
    if (pool.size() + h.size() > UINT32_MAX) throw DataError("snapshot histogram pool overflow");
    const auto off = static_cast<uint32_t>(pool.size());
    pool.insert(pool.end(), h.begin(), h.end());
    return off;
  }

  std::span<const Bucket> Hist(uint32_t off, uint32_t len) const {
    return {pool.data() + off, len};
  }

  uint64_t WindowSum(uint32_t off, uint32_t len, const Window& w) const {
    auto h = Hist(off, len);
    auto it = std::lower_bound(h.begin(), h.end(), w.from,
                               [](const Bucket& b, int64_t v) { return b.first < v; });
    uint64_t total = 0;
    for (; it != h.end() && it->first <= w.to; ++it) total += it->second;
    return total;
  }

  std::optional<uint32_t> FindRow(uint64_t id) const {
    auto it = std::lower_bound(nodes.begin(), nodes.end(), id,
                               [](const NodeRow& r, uint64_t v) { return r.id < v; });
    if (it == nodes.end() || it->id != id) return std::nullopt;
    return static_cast<uint32_t>(it - nodes.begin());
  }

  NodeRecord ToRecord(int level, const NodeRow& r) const {
    NodeRecord n;
    n.level = level;
    n.id = r.id;
    n.centroid = {r.lon, r.lat};
    n.count = r.count;
    n.src_count = r.src_count;
    if (r.has_users) n.users = r.users;
    n.tt_sum = r.tt_sum;
    auto h = Hist(r.tb_off, r.tb_len);
    n.tb.assign(h.begin(), h.end());
    if (r.has_rank) n.rank = r.rank;
    return n;
  }

  EdgeRecord ToRecord(int level, const EdgeRow& r) const {
    EdgeRecord e;
    e.level = level;
    e.src = r.src;
    e.dst = r.dst;
    e.count = r.count;
    e.tt_sum = r.tt_sum;
    auto h = Hist(r.tb_off, r.tb_len);
    e.tb.assign(h.begin(), h.end());
    return e;
  }
};

TooLargeError::TooLargeError(uint64_t estimate, uint64_t cap)
    : std::runtime_error(
          fmt::format("query touches about {} elements, above the cap of {}", estimate, cap)),
      estimate_(estimate) {}

std::string EncodeSnapshot(std::vector<NodeRecord> nodes, std::vector<EdgeRecord> edges,
                           const SnapshotHeader& header) {
  const int levels = header.grid.grid.levels();
  std::sort(nodes.begin(), nodes.end(), [](const NodeRecord& a, const NodeRecord& b) {
    return std::tie(a.level, a.id) < std::tie(b.level, b.id);
  });
  std::sort(edges.begin(), edges.end(), [](const EdgeRecord& a, const EdgeRecord& b) {
    return std::tie(a.level, a.src, a.dst) < std::tie(b.level, b.src, b.dst);
  });

  for (size_t i = 0; i < nodes.size(); ++i) {
    const auto& n = nodes[i];
    if (n.level < 1 || n.level > levels) {
      throw DataError(fmt::format("node {}/{} has a level outside [1,{}]", n.level, n.id, levels));
    }
    if (i > 0 && nodes[i - 1].level == n.level && nodes[i - 1].id == n.id) {
      throw DataError(fmt::format("duplicate node {}/{}", n.level, n.id));
    }
  }
  auto has_node = [&](int level, uint64_t id) {
    auto it = std::lower_bound(nodes.begin(), nodes.end(), std::pair{level, id},
                               [](const NodeRecord& n, const std::pair<int, uint64_t>& k) {
                                 return std::pair{n.level, n.id} < k;
                               });
    return it != nodes.end() && it->level == level && it->id == id;
  };
  std::vector<std::string> dangling;
  size_t dangling_total = 0;
  for (size_t i = 0; i < edges.size(); ++i) {
    const auto& e = edges[i];
    if (e.level < 1 || e.level > levels) {
      throw DataError(fmt::format("edge {}/{}->{} has a level outside [1,{}]", e.level, e.src,
                                  e.dst, levels));
    }
    if (i > 0 && edges[i - 1].level == e.level && edges[i - 1].src == e.src &&
        edges[i - 1].dst == e.dst) {
      throw DataError(fmt::format("duplicate edge {}/{}->{}", e.level, e.src, e.dst));
    }
    if (!has_node(e.level, e.src) || !has_node(e.level, e.dst)) {
      if (dangling.size() < kMaxListedIds) {
        dangling.push_back(fmt::format("{}/{}->{}", e.level, e.src, e.dst));
      }
      ++dangling_total;
    }
  }
  if (dangling_total) {
    throw DataError(fmt::format("{} edges reference missing nodes: {}", dangling_total,
                                ListIds(dangling, dangling_total)));
  }

  std::optional<Window> range;
  for (const auto& n : nodes) {
    if (n.tb.empty()) continue;
    if (!range) range = Window{n.tb.front().first, n.tb.back().first};
    range->from = std::min(range->from, n.tb.front().first);
    range->to = std::max(range->to, n.tb.back().first);
  }

  nlohmann::json sections = nlohmann::json::array();
  std::string body;
  size_t ni = 0, ei = 0;
  for (int l = 1; l <= levels; ++l) {
    const size_t start_n = body.size();
    uint64_t rows = 0;
    for (; ni < nodes.size() && nodes[ni].level == l; ++ni, ++rows) {
      body += ToLine(nodes[ni]);
      body += '\n';
    }
    sections.push_back(
        {{"level", l}, {"kind", "nodes"}, {"rows", rows}, {"bytes", body.size() - start_n}});
    const size_t start_e = body.size();
    rows = 0;
    for (; ei < edges.size() && edges[ei].level == l; ++ei, ++rows) {
      body += ToLine(edges[ei]);
      body += '\n';
    }
    sections.push_back(
        {{"level", l}, {"kind", "edges"}, {"rows", rows}, {"bytes", body.size() - start_e}});
  }

  nlohmann::json h = {{"format", kSnapshotMagic},
                      {"grid", header.grid.ToJson()},
                      {"provenance", header.provenance},
                      {"sections", sections}};
  h["buckets"] = range ? nlohmann::json::array({range->from, range->to}) : nlohmann::json();
  const std::string hjson = h.dump();
  std::string out;
  out.reserve(body.size() + hjson.size() + 32);
  out += kSnapshotMagic;
  out += '\n';
  out += std::to_string(hjson.size());
  out += '\n';
  out += hjson;
  out += '\n';
  out += body;
  return out;
}

void WriteSnapshot(const std::filesystem::path& path, std::vector<NodeRecord> nodes,
                   std::vector<EdgeRecord> edges, const SnapshotHeader& header) {
  WriteFileAtomic(path, EncodeSnapshot(std::move(nodes), std::move(edges), header));
}

Cube::~Cube() = default;

std::shared_ptr<const Cube> Cube::Load(const std::filesystem::path& path) {
  return Parse(ReadFile(path));
}

std::shared_ptr<const Cube> Cube::Parse(std::string_view data) {
  auto next_line = [&](size_t& pos) {
    const size_t nl = data.find('\n', pos);
    if (nl == std::string_view::npos) throw DataError("truncated snapshot header");
    std::string_view line = data.substr(pos, nl - pos);
    pos = nl + 1;
    return line;
  };
  size_t pos = 0;
  if (next_line(pos) != kSnapshotMagic) throw DataError("not a cube snapshot (bad magic)");
  const auto hlen = ParseNumber<uint64_t>(next_line(pos));
  if (!hlen || pos + *hlen + 1 > data.size() || data[pos + *hlen] != '\n') {
    throw DataError("bad snapshot header length");
  }
  nlohmann::json h = nlohmann::json::parse(data.substr(pos, *hlen), nullptr, false);
  if (!h.is_object()) throw DataError("snapshot header is not a JSON object");
  pos += *hlen + 1;

  std::shared_ptr<Cube> cube(new Cube());
  try {
    cube->header_.grid = GridConfig::FromJson(h.at("grid"));
    cube->header_.provenance = h.value("provenance", nlohmann::json::object());
    if (auto it = h.find("buckets"); it != h.end() && it->is_array()) {
      cube->bucket_range_ = Window{it->at(0).get<int64_t>(), it->at(1).get<int64_t>()};
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(fmt::format("bad snapshot header: {}", e.what()));
  }
  const int levels = cube->levels();
  for (int l = 1; l <= levels; ++l) cube->levels_.push_back(std::make_unique<Level>());

  const auto& sections = h.at("sections");
  if (!sections.is_array() || sections.size() != static_cast<size_t>(2 * levels)) {
    throw DataError("snapshot section table does not match the level count");
  }
  for (size_t s = 0; s < sections.size(); ++s) {
    const auto& sec = sections[s];
    const int level = sec.at("level").get<int>();
    const std::string kind = sec.at("kind").get<std::string>();
    const auto rows = sec.at("rows").get<uint64_t>();
    const auto bytes = sec.at("bytes").get<uint64_t>();
    const bool want_nodes = s % 2 == 0;
    if (level != static_cast<int>(s / 2) + 1 || kind != (want_nodes ? "nodes" : "edges")) {
      throw DataError(fmt::format("unexpected snapshot section {} ({}, level {})", s, kind, level));
    }
    if (pos + bytes > data.size()) throw DataError("truncated snapshot section");
    std::string_view body = data.substr(pos, bytes);
    pos += bytes;

    Level& lv = *cube->levels_[static_cast<size_t>(level - 1)];
    uint64_t seen = 0;
    size_t p = 0;
    while (p < body.size()) {
      size_t nl = body.find('\n', p);
      if (nl == std::string_view::npos) nl = body.size();
      std::string_view line = body.substr(p, nl - p);
      p = nl + 1;
      if (line.empty()) continue;
      ++seen;
      if (want_nodes) {
        NodeRecord n = ParseNodeLine(line);
        if (n.level != level) throw DataError("node row in the wrong level section");
        if (!lv.nodes.empty() && lv.nodes.back().id >= n.id) {
          throw DataError(fmt::format("node rows out of order at {}/{}", level, n.id));
        }
        Level::NodeRow r{};
        r.id = n.id;
        r.lon = n.centroid.lon;
        r.lat = n.centroid.lat;
        r.count = n.count;
        r.src_count = n.src_count;
        r.has_users = n.users.has_value();
        r.users = n.users.value_or(0);
        r.has_rank = n.rank.has_value();
        r.rank = n.rank.value_or(0.0);
        r.tt_sum = n.tt_sum;
        r.tb_off = lv.PoolAppend(n.tb);
        r.tb_len = static_cast<uint32_t>(n.tb.size());
        lv.nodes.push_back(r);
      } else {
        EdgeRecord e = ParseEdgeLine(line);
        if (e.level != level) throw DataError("edge row in the wrong level section");
        if (!lv.edges.empty() &&
            std::pair{lv.edges.back().src, lv.edges.back().dst} >= std::pair{e.src, e.dst}) {
          throw DataError(fmt::format("edge rows out of order at {}/{}->{}", level, e.src, e.dst));
        }
        const auto src_row = lv.FindRow(e.src);
        const auto dst_row = lv.FindRow(e.dst);
        if (!src_row || !dst_row) {
          throw DataError(
              fmt::format("edge {}/{}->{} references a missing node", level, e.src, e.dst));
        }
        Level::EdgeRow r{};
        r.src = e.src;
        r.dst = e.dst;
        r.count = e.count;
        r.tt_sum = e.tt_sum;
        r.src_row = *src_row;
        r.dst_row = *dst_row;
        r.tb_off = lv.PoolAppend(e.tb);
        r.tb_len = static_cast<uint32_t>(e.tb.size());
        lv.edges.push_back(r);
      }
    }
    if (seen != rows) {
      throw DataError(fmt::format("section {} declares {} rows but holds {}", s, rows, seen));
    }
  }
  if (pos != data.size()) throw DataError("trailing bytes after the last snapshot section");

  for (auto& lvp : cube->levels_) {
    Level& lv = *lvp;
    size_t e = 0;
    for (auto& n : lv.nodes) {
      while (e < lv.edges.size() && lv.edges[e].src < n.id) ++e;
      n.edge_begin = static_cast<uint32_t>(e);
      while (e < lv.edges.size() && lv.edges[e].src == n.id) ++e;
      n.edge_end = static_cast<uint32_t>(e);
    }
    std::vector<IndexedPoint> pts;
    pts.reserve(lv.nodes.size());
    for (uint32_t i = 0; i < lv.nodes.size(); ++i) {
      pts.emplace_back(BoostPoint(lv.nodes[i].lon, lv.nodes[i].lat), i);
    }
    lv.tree = decltype(lv.tree)(pts.begin(), pts.end());
  }
  return cube;
}

const Cube::Level& Cube::level_data(int level) const {
  CheckLevel(level, levels());
  return *levels_[static_cast<size_t>(level - 1)];
}

uint64_t Cube::node_count(int level) const { return level_data(level).nodes.size(); }
uint64_t Cube::edge_count(int level) const { return level_data(level).edges.size(); }

uint64_t Cube::total_nodes() const {
  uint64_t t = 0;
  for (const auto& l : levels_) t += l->nodes.size();
  return t;
}

uint64_t Cube::total_edges() const {
  uint64_t t = 0;
  for (const auto& l : levels_) t += l->edges.size();
  return t;
}

uint64_t Cube::Estimate(int level, const Region& box) const {
  const Level& lv = level_data(level);
  uint64_t est = 0;
  const BoostBox q({box.lon_min, box.lat_min}, {box.lon_max, box.lat_max});
  for (auto it = lv.tree.qbegin(bgi::intersects(q)); it != lv.tree.qend(); ++it) {
    const auto& r = lv.nodes[it->second];
    est += 1 + (r.edge_end - r.edge_begin);
  }
  return est;
}

SubgraphResult Cube::QueryBbox(int level, const Region& box, const Window& window,
                               const QueryOptions& opts) const {
  const Level& lv = level_data(level);
  const bool finite = std::isfinite(box.lon_min) && std::isfinite(box.lat_min) &&
                      std::isfinite(box.lon_max) && std::isfinite(box.lat_max);
  if (!finite || box.lon_min > box.lon_max || box.lat_min > box.lat_max) {
    throw QueryError(QueryErrorKind::kBox, "bbox must satisfy w <= e and s <= n");
  }
  if (!box.Intersects(grid().region())) {
    throw QueryError(QueryErrorKind::kBox, "bbox does not intersect the grid region");
  }
  if (window.from > window.to) {
    throw QueryError(QueryErrorKind::kWindow,
                     fmt::format("window start {} after end {}", window.from, window.to));
  }

  std::vector<uint32_t> candidates;
  const BoostBox q({box.lon_min, box.lat_min}, {box.lon_max, box.lat_max});
  for (auto it = lv.tree.qbegin(bgi::intersects(q)); it != lv.tree.qend(); ++it) {
    candidates.push_back(it->second);
  }
  if (opts.hard_cap) {
    uint64_t est = 0;
    for (uint32_t i : candidates) est += 1 + (lv.nodes[i].edge_end - lv.nodes[i].edge_begin);
    if (est > opts.hard_cap) throw TooLargeError(est, opts.hard_cap);
  }
  std::sort(candidates.begin(), candidates.end());

  struct Hit {
    uint32_t row;
    uint64_t count;
  };
  std::vector<Hit> primary;
  for (uint32_t i : candidates) {
    const auto& r = lv.nodes[i];
    if (uint64_t c = lv.WindowSum(r.tb_off, r.tb_len, window)) primary.push_back({i, c});
  }
  std::vector<Hit> edges;
  for (const auto& p : primary) {
    const auto& r = lv.nodes[p.row];
    for (uint32_t e = r.edge_begin; e < r.edge_end; ++e) {
      const auto& er = lv.edges[e];
      if (uint64_t c = lv.WindowSum(er.tb_off, er.tb_len, window)) edges.push_back({e, c});
    }
  }
  auto in_rows = [](const std::vector<uint32_t>& sorted, uint32_t row) {
    return std::binary_search(sorted.begin(), sorted.end(), row);
  };

  std::vector<uint32_t> node_rows;  // sorted
  node_rows.reserve(primary.size());
  for (const auto& p : primary) node_rows.push_back(p.row);
  std::vector<uint32_t> extra_rows;
  for (const auto& e : edges) {
    const uint32_t d = lv.edges[e.row].dst_row;
    if (!in_rows(node_rows, d)) extra_rows.push_back(d);
  }
  std::sort(extra_rows.begin(), extra_rows.end());
  extra_rows.erase(std::unique(extra_rows.begin(), extra_rows.end()), extra_rows.end());

  SubgraphResult out;
  out.level = level;
  out.box = box;
  out.window = window;
  std::vector<uint32_t> edge_rows;

  const uint64_t total = primary.size() + edges.size() + extra_rows.size();
  if (total <= opts.limit) {
    edge_rows.reserve(edges.size());
    for (const auto& e : edges) edge_rows.push_back(e.row);
  } else {
    out.truncated = true;
    auto by_count = [](const Hit& a, const Hit& b) {
      return a.count != b.count ? a.count > b.count : a.row < b.row;
    };
    std::vector<Hit> ranked = primary;
    std::sort(ranked.begin(), ranked.end(), by_count);
    const uint64_t node_cap = std::min<uint64_t>(ranked.size(), (opts.limit + 1) / 2);
    node_rows.clear();
    for (uint64_t i = 0; i < node_cap; ++i) node_rows.push_back(ranked[i].row);
    std::sort(node_rows.begin(), node_rows.end());

    // Edge rows sort by (src, dst), so row order breaks count ties.
    std::vector<Hit> ranked_edges = edges;
    std::sort(ranked_edges.begin(), ranked_edges.end(), by_count);
    uint64_t budget = opts.limit - node_rows.size();
    std::unordered_set<uint32_t> chosen_extra;
    for (const auto& e : ranked_edges) {
      const auto& er = lv.edges[e.row];
      if (!in_rows(node_rows, er.src_row)) continue;
      const bool need_dst =
          !in_rows(node_rows, er.dst_row) && !chosen_extra.contains(er.dst_row);
      const uint64_t cost = need_dst ? 2 : 1;
      if (cost > budget) continue;
      budget -= cost;
      edge_rows.push_back(e.row);
      if (need_dst) chosen_extra.insert(er.dst_row);
    }
    std::sort(edge_rows.begin(), edge_rows.end());
    extra_rows.assign(chosen_extra.begin(), chosen_extra.end());
    std::sort(extra_rows.begin(), extra_rows.end());
  }

  auto make_node = [&](uint32_t row, bool context) {
    const auto& r = lv.nodes[row];
    ResultNode n;
    n.id = r.id;
    n.centroid = {r.lon, r.lat};
    n.count = lv.WindowSum(r.tb_off, r.tb_len, window);
    if (r.has_users) n.users = r.users;
    n.avg_tt = r.src_count ? static_cast<double>(r.tt_sum) / static_cast<double>(r.src_count) : 0.0;
    if (r.has_rank) n.rank = r.rank;
    n.context = context;
    return n;
  };
  out.nodes.reserve(node_rows.size() + extra_rows.size());
  size_t a = 0, b = 0;
  while (a < node_rows.size() || b < extra_rows.size()) {
    if (b == extra_rows.size() || (a < node_rows.size() && node_rows[a] < extra_rows[b])) {
      out.nodes.push_back(make_node(node_rows[a++], false));
    } else {
      const uint32_t row = extra_rows[b++];
      const auto& r = lv.nodes[row];
      out.nodes.push_back(make_node(row, !box.Contains({r.lon, r.lat})));
    }
  }
  out.edges.reserve(edge_rows.size());
  for (uint32_t e : edge_rows) {
    const auto& er = lv.edges[e];
    ResultEdge re;
    re.src = er.src;
    re.dst = er.dst;
    re.count = lv.WindowSum(er.tb_off, er.tb_len, window);
    re.avg_tt = er.count ? static_cast<double>(er.tt_sum) / static_cast<double>(er.count) : 0.0;
    out.edges.push_back(re);
  }
  return out;
}

NodeRecord Cube::NodeDetail(int level, uint64_t id) const {
  const Level& lv = level_data(level);
  const auto row = lv.FindRow(id);
  if (!row) throw NotFoundError(fmt::format("no node {} at level {}", id, level));
  return lv.ToRecord(level, lv.nodes[*row]);
}

std::vector<NodeRecord> Cube::Nodes(int level) const {
  const Level& lv = level_data(level);
  std::vector<NodeRecord> out;
  out.reserve(lv.nodes.size());
  for (const auto& r : lv.nodes) out.push_back(lv.ToRecord(level, r));
  return out;
}

std::vector<EdgeRecord> Cube::Edges(int level) const {
  const Level& lv = level_data(level);
  std::vector<EdgeRecord> out;
  out.reserve(lv.edges.size());
  for (const auto& r : lv.edges) out.push_back(lv.ToRecord(level, r));
  return out;
}

}  // namespace flowcube::cube
