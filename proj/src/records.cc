#include "flowcube/records.h"

#include <algorithm>
#include <charconv>
#include <iterator>
#include <optional>

#include <fmt/format.h>
#include <json.hpp>

#include "flowcube/errors.h"

namespace flowcube {

void AddToHistogram(Histogram& h, int64_t bucket, uint64_t count) {
  auto it = std::lower_bound(h.begin(), h.end(), bucket,
                             [](const auto& e, int64_t b) { return e.first < b; });
  if (it != h.end() && it->first == bucket) {
    it->second += count;
  } else {
    h.insert(it, {bucket, count});
  }
}

void MergeHistogram(Histogram& into, const Histogram& from) {
  if (from.empty()) return;
  if (into.empty()) {
    into = from;
    return;
  }
  Histogram merged;
  merged.reserve(into.size() + from.size());
  auto a = into.begin();
  auto b = from.begin();
  while (a != into.end() || b != from.end()) {
    if (b == from.end() || (a != into.end() && a->first < b->first)) {
      merged.push_back(*a++);
    } else if (a == into.end() || b->first < a->first) {
      merged.push_back(*b++);
    } else {
      merged.emplace_back(a->first, a->second + b->second);
      ++a;
      ++b;
    }
  }
  into = std::move(merged);
}

uint64_t HistogramSum(const Histogram& h, int64_t from, int64_t to) {
  uint64_t total = 0;
  auto it = std::lower_bound(h.begin(), h.end(), from,
                             [](const auto& e, int64_t b) { return e.first < b; });
  for (; it != h.end() && it->first <= to; ++it) total += it->second;
  return total;
}

uint64_t HistogramTotal(const Histogram& h) {
  uint64_t total = 0;
  for (const auto& [b, c] : h) total += c;
  return total;
}

namespace {

template <typename T>
void AppendNumber(std::string& out, T v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  out.append(buf, ptr);
}

void AppendHistogram(std::string& out, const Histogram& h) {
  out += '[';
  for (size_t i = 0; i < h.size(); ++i) {
    if (i) out += ',';
    out += '[';
    AppendNumber(out, h[i].first);
    out += ',';
    AppendNumber(out, h[i].second);
    out += ']';
  }
  out += ']';
}

// Reads lines in exactly the layout ToLine writes; anything else makes the
// caller fall back to the general JSON parser.
class Cursor {
 public:
  explicit Cursor(std::string_view s) : s_(s) {}

  bool Lit(std::string_view lit) {
    if (s_.substr(i_, lit.size()) != lit) return false;
    i_ += lit.size();
    return true;
  }
  template <typename T>
  bool Num(T& v) {
    const char* b = s_.data() + i_;
    auto [ptr, ec] = std::from_chars(b, s_.data() + s_.size(), v);
    if (ec != std::errc() || ptr == b) return false;
    i_ += static_cast<size_t>(ptr - b);
    return true;
  }
  bool Hist(Histogram& h) {
    if (!Lit("[")) return false;
    if (Lit("]")) return true;
    do {
      std::pair<int64_t, uint64_t> e;
      if (!Lit("[") || !Num(e.first) || !Lit(",") || !Num(e.second) || !Lit("]")) return false;
      if (!h.empty() && h.back().first >= e.first) return false;
      h.push_back(e);
    } while (Lit(","));
    return Lit("]");
  }
  bool Done() const { return i_ == s_.size(); }

 private:
  std::string_view s_;
  size_t i_ = 0;
};

std::optional<NodeRecord> FastNode(std::string_view line) {
  Cursor c(line);
  NodeRecord n;
  if (!c.Lit(R"({"t":"n","l":)") || !c.Num(n.level) || !c.Lit(R"(,"id":)") || !c.Num(n.id) ||
      !c.Lit(R"(,"lon":)") || !c.Num(n.centroid.lon) || !c.Lit(R"(,"lat":)") ||
      !c.Num(n.centroid.lat) || !c.Lit(R"(,"c":)") || !c.Num(n.count) || !c.Lit(R"(,"sc":)") ||
      !c.Num(n.src_count)) {
    return std::nullopt;
  }
  if (c.Lit(R"(,"u":)")) {
    uint64_t u = 0;
    if (!c.Num(u)) return std::nullopt;
    n.users = u;
  }
  if (!c.Lit(R"(,"tt":)") || !c.Num(n.tt_sum) || !c.Lit(R"(,"tb":)") || !c.Hist(n.tb)) {
    return std::nullopt;
  }
  if (c.Lit(R"(,"rank":)")) {
    double r = 0;
    if (!c.Num(r)) return std::nullopt;
    n.rank = r;
  }
  if (!c.Lit("}") || !c.Done()) return std::nullopt;
  return n;
}

std::optional<EdgeRecord> FastEdge(std::string_view line) {
  Cursor c(line);
  EdgeRecord e;
  if (!c.Lit(R"({"t":"e","l":)") || !c.Num(e.level) || !c.Lit(R"(,"s":)") || !c.Num(e.src) ||
      !c.Lit(R"(,"d":)") || !c.Num(e.dst) || !c.Lit(R"(,"c":)") || !c.Num(e.count) ||
      !c.Lit(R"(,"tt":)") || !c.Num(e.tt_sum) || !c.Lit(R"(,"tb":)") || !c.Hist(e.tb) ||
      !c.Lit("}") || !c.Done()) {
    return std::nullopt;
  }
  return e;
}

Histogram ParseHistogram(const nlohmann::json& j) {
  Histogram h;
  h.reserve(j.size());
  for (const auto& pair : j) {
    if (!pair.is_array() || pair.size() != 2) throw DataError("bad histogram entry");
    h.emplace_back(pair[0].get<int64_t>(), pair[1].get<uint64_t>());
  }
  if (!std::is_sorted(h.begin(), h.end())) throw DataError("histogram not sorted");
  return h;
}

nlohmann::json ParseObject(std::string_view line) {
  auto j = nlohmann::json::parse(line, nullptr, /*allow_exceptions=*/false);
  if (!j.is_object()) {
    throw DataError(fmt::format("malformed record line: {}", line.substr(0, 120)));
  }
  return j;
}

}  // namespace

std::string ToLine(const NodeRecord& n) {
  std::string out;
  out.reserve(128 + n.tb.size() * 16);
  out += R"({"t":"n","l":)";
  AppendNumber(out, n.level);
  out += R"(,"id":)";
  AppendNumber(out, n.id);
  out += R"(,"lon":)";
  AppendNumber(out, n.centroid.lon);
  out += R"(,"lat":)";
  AppendNumber(out, n.centroid.lat);
  out += R"(,"c":)";
  AppendNumber(out, n.count);
  out += R"(,"sc":)";
  AppendNumber(out, n.src_count);
  if (n.users) {
    out += R"(,"u":)";
    AppendNumber(out, *n.users);
  }
  out += R"(,"tt":)";
  AppendNumber(out, n.tt_sum);
  out += R"(,"tb":)";
  AppendHistogram(out, n.tb);
  if (n.rank) {
    out += R"(,"rank":)";
    AppendNumber(out, *n.rank);
  }
  out += '}';
  return out;
}

std::string ToLine(const EdgeRecord& e) {
  std::string out;
  out.reserve(96 + e.tb.size() * 16);
  out += R"({"t":"e","l":)";
  AppendNumber(out, e.level);
  out += R"(,"s":)";
  AppendNumber(out, e.src);
  out += R"(,"d":)";
  AppendNumber(out, e.dst);
  out += R"(,"c":)";
  AppendNumber(out, e.count);
  out += R"(,"tt":)";
  AppendNumber(out, e.tt_sum);
  out += R"(,"tb":)";
  AppendHistogram(out, e.tb);
  out += '}';
  return out;
}

LineKind ClassifyLine(std::string_view line) {
  if (line.starts_with(R"({"t":"n")")) return LineKind::kNode;
  if (line.starts_with(R"({"t":"e")")) return LineKind::kEdge;
  return LineKind::kOther;
}

NodeRecord ParseNodeLine(std::string_view line) {
  if (auto n = FastNode(line)) return std::move(*n);
  auto j = ParseObject(line);
  try {
    if (j.at("t") != "n") throw DataError("not a node line");
    NodeRecord n;
    n.level = j.at("l").get<int>();
    n.id = j.at("id").get<uint64_t>();
    n.centroid = {j.at("lon").get<double>(), j.at("lat").get<double>()};
    n.count = j.at("c").get<uint64_t>();
    n.src_count = j.value("sc", uint64_t{0});
    if (auto it = j.find("u"); it != j.end() && !it->is_null()) n.users = it->get<uint64_t>();
    n.tt_sum = j.value("tt", int64_t{0});
    if (auto it = j.find("tb"); it != j.end()) n.tb = ParseHistogram(*it);
    if (auto it = j.find("rank"); it != j.end() && !it->is_null()) n.rank = it->get<double>();
    return n;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(fmt::format("bad node line ({}): {}", e.what(), line.substr(0, 120)));
  }
}

EdgeRecord ParseEdgeLine(std::string_view line) {
  if (auto e = FastEdge(line)) return std::move(*e);
  auto j = ParseObject(line);
  try {
    if (j.at("t") != "e") throw DataError("not an edge line");
    EdgeRecord e;
    e.level = j.at("l").get<int>();
    e.src = j.at("s").get<uint64_t>();
    e.dst = j.at("d").get<uint64_t>();
    e.count = j.at("c").get<uint64_t>();
    e.tt_sum = j.value("tt", int64_t{0});
    if (auto it = j.find("tb"); it != j.end()) e.tb = ParseHistogram(*it);
    return e;
  } catch (const nlohmann::json::exception& ex) {
    throw DataError(fmt::format("bad edge line ({}): {}", ex.what(), line.substr(0, 120)));
  }
}

}  // namespace flowcube
