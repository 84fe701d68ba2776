#include "flowcube/movement.h"

#include <fmt/format.h>

#include "flowcube/errors.h"
#include "flowcube/io.h"

namespace flowcube {

std::string FormatMovement(const MovementRecord& m) {
  return fmt::format("{},{},{},{},{},{},{}", m.user, m.t_src, m.t_dst, m.src.lon,
                     m.src.lat, m.dst.lon, m.dst.lat);
}

std::optional<MovementRecord> ParseMovement(std::string_view line) {
  if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
  auto f = SplitFields(line, ',');
  if (f.size() != 7) return std::nullopt;
  auto user = ParseNumber<uint64_t>(f[0]);
  auto ts = ParseNumber<int64_t>(f[1]);
  auto td = ParseNumber<int64_t>(f[2]);
  auto lon_s = ParseNumber<double>(f[3]);
  auto lat_s = ParseNumber<double>(f[4]);
  auto lon_d = ParseNumber<double>(f[5]);
  auto lat_d = ParseNumber<double>(f[6]);
  if (!user || !ts || !td || !lon_s || !lat_s || !lon_d || !lat_d) return std::nullopt;
  MovementRecord m{*user, {*lon_s, *lat_s}, {*lon_d, *lat_d}, *ts, *td};
  if (!IsValid(m.src) || !IsValid(m.dst) || m.t_src > m.t_dst) return std::nullopt;
  return m;
}

void WriteMovements(const std::filesystem::path& path,
                    std::span<const MovementRecord> movements) {
  std::string out;
  out.reserve(movements.size() * 64);
  for (const auto& m : movements) {
    out += FormatMovement(m);
    out += '\n';
  }
  WriteFileAtomic(path, out);
}

std::vector<MovementRecord> ReadMovements(const std::filesystem::path& path) {
  std::vector<MovementRecord> out;
  uint64_t lineno = 0;
  ForEachLine({path}, [&](std::string_view line) {
    ++lineno;
    if (line.empty()) return;
    auto m = ParseMovement(line);
    if (!m) {
      throw DataError(fmt::format("{}:{}: malformed movement line", path.string(), lineno));
    }
    out.push_back(*m);
  });
  return out;
}

}  // namespace flowcube
