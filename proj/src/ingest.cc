#include "flowcube/ingest.h"

#include <algorithm>
#include <fstream>
#include <numeric>

#include <fmt/format.h>

#include "flowcube/errors.h"
#include "flowcube/io.h"
#include "flowcube/parallel.h"

namespace flowcube::ingest {

namespace {

constexpr size_t kMaxReportedLines = 10;

std::optional<GeoEvent> ParseEventLine(std::string_view line) {
  auto f = SplitFields(line, ',');
  if (f.size() != 4) return std::nullopt;
  auto user = ParseNumber<uint64_t>(f[0]);
  auto t = ParseNumber<int64_t>(f[1]);
  auto lon = ParseNumber<double>(f[2]);
  auto lat = ParseNumber<double>(f[3]);
  if (!user || !t || !lon || !lat) return std::nullopt;
  GeoEvent e{*user, *t, {*lon, *lat}};
  if (e.t < 0 || !IsValid(e.point)) return std::nullopt;
  return e;
}

bool LooksNumeric(std::string_view field) {
  return ParseNumber<double>(field).has_value();
}

void Merge(ParseStats& into, const ParseStats& from) {
  into.lines += from.lines;
  into.events += from.events;
  into.malformed += from.malformed;
  into.header = into.header || from.header;
  for (uint64_t l : from.malformed_lines) {
    if (into.malformed_lines.size() < kMaxReportedLines) into.malformed_lines.push_back(l);
  }
}

}  // namespace

std::vector<GeoEvent> ParseEvents(std::istream& in, ParseStats* stats,
                                  const ParseOptions& opts,
                                  std::string_view source) {
  if (!in) throw DataError(fmt::format("cannot read {}", source));
  ParseStats local;
  std::vector<GeoEvent> events;
  std::string line;
  uint64_t lineno = 0;
  uint64_t data_lines = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string_view view(line);
    if (!view.empty() && view.back() == '\r') view.remove_suffix(1);
    if (view.empty()) continue;
    ++local.lines;
    if (lineno == 1) {
      const auto comma = view.find(',');
      if (!LooksNumeric(view.substr(0, comma))) {
        local.header = true;
        continue;
      }
    }
    ++data_lines;
    if (auto e = ParseEventLine(view)) {
      events.push_back(*e);
    } else {
      ++local.malformed;
      if (local.malformed_lines.size() < kMaxReportedLines) {
        local.malformed_lines.push_back(lineno);
      }
    }
  }
  if (in.bad()) throw DataError(fmt::format("read error on {}", source));
  local.events = events.size();
  if (data_lines > 0 &&
      static_cast<double>(local.malformed) >
          opts.max_malformed_fraction * static_cast<double>(data_lines)) {
    std::string where;
    for (uint64_t l : local.malformed_lines) where += fmt::format(" {}", l);
    throw DataError(fmt::format(
        "{}: {} of {} lines malformed (limit {:.1f}%); first bad lines:{}", source,
        local.malformed, data_lines, opts.max_malformed_fraction * 100, where));
  }
  if (stats) Merge(*stats, local);
  return events;
}

std::vector<GeoEvent> ParseEventFiles(std::span<const std::filesystem::path> files,
                                      int workers, ParseStats* stats,
                                      const ParseOptions& opts) {
  std::vector<std::vector<GeoEvent>> per_file(files.size());
  std::vector<ParseStats> per_stats(files.size());
  ParallelFor(files.size(), workers, [&](size_t i) {
    std::ifstream in(files[i], std::ios::binary);
    if (!in) throw DataError(fmt::format("cannot open {}", files[i].string()));
    per_file[i] = ParseEvents(in, &per_stats[i], opts, files[i].string());
  });
  std::vector<GeoEvent> all;
  for (size_t i = 0; i < files.size(); ++i) {
    all.insert(all.end(), per_file[i].begin(), per_file[i].end());
    if (stats) Merge(*stats, per_stats[i]);
  }
  return all;
}

std::vector<MovementRecord> BuildMovements(std::span<const GeoEvent> events,
                                           const Region& region,
                                           const BuildOptions& opts,
                                           BuildStats* stats) {
  BuildStats local;
  std::vector<uint32_t> order;
  order.reserve(events.size());
  for (uint32_t i = 0; i < events.size(); ++i) {
    if (region.Contains(events[i].point)) {
      order.push_back(i);
    } else {
      ++local.dropped_out_of_region;
    }
  }
  std::stable_sort(order.begin(), order.end(), [&](uint32_t a, uint32_t b) {
    if (events[a].user != events[b].user) return events[a].user < events[b].user;
    return events[a].t < events[b].t;
  });

  // [begin, end) ranges of `order`, one per user.
  std::vector<std::pair<size_t, size_t>> groups;
  for (size_t i = 0; i < order.size();) {
    size_t j = i + 1;
    while (j < order.size() && events[order[j]].user == events[order[i]].user) ++j;
    groups.emplace_back(i, j);
    i = j;
  }
  local.users = groups.size();

  struct GroupOut {
    std::vector<MovementRecord> moves;
    uint64_t collapsed = 0;
    uint64_t gap_breaks = 0;
  };
  std::vector<GroupOut> outs(groups.size());
  ParallelFor(groups.size(), opts.workers, [&](size_t g) {
    auto [begin, end] = groups[g];
    GroupOut& out = outs[g];
    const GeoEvent* first = &events[order[begin]];
    GeoPoint here = first->point;
    int64_t depart = first->t;
    for (size_t i = begin + 1; i < end; ++i) {
      const GeoEvent& e = events[order[i]];
      if (e.point == here) {
        depart = e.t;
        ++out.collapsed;
        continue;
      }
      if (opts.max_gap_seconds && e.t - depart > *opts.max_gap_seconds) {
        ++out.gap_breaks;
      } else {
        out.moves.push_back({e.user, here, e.point, depart, e.t});
      }
      here = e.point;
      depart = e.t;
    }
  });

  std::vector<MovementRecord> moves;
  for (auto& out : outs) {
    moves.insert(moves.end(), out.moves.begin(), out.moves.end());
    local.collapsed += out.collapsed;
    local.gap_breaks += out.gap_breaks;
  }
  if (stats) *stats = local;
  return moves;
}

}  // namespace flowcube::ingest
