#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace flowcube {

// Writes via a sibling temp file and rename, so readers never see a partial
// file.
void WriteFileAtomic(const std::filesystem::path& path, std::string_view data);
std::string ReadFile(const std::filesystem::path& path);

// Sorted list of `part-*` files in a stage output directory.
std::vector<std::filesystem::path> ListPartFiles(
    const std::filesystem::path& dir);

// Calls `fn(line)` for each line of each file, in order. Lines exclude '\n'.
template <typename Fn>
void ForEachLine(const std::vector<std::filesystem::path>& files, Fn&& fn);

uint64_t Fnv1a64(std::string_view bytes, uint64_t seed = 0xcbf29ce484222325ULL);
// FNV-1a over a file's bytes; used as the provenance input hash.
uint64_t HashFile(const std::filesystem::path& path);

// Parses an entire field as a number; nullopt on any trailing garbage.
template <typename T>
std::optional<T> ParseNumber(std::string_view s) {
  T value{};
  const char* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, value);
  if (ec != std::errc() || ptr != end || s.empty()) return std::nullopt;
  return value;
}

// Splits on a single-character delimiter without allocating.
std::vector<std::string_view> SplitFields(std::string_view line, char delim);

}  // namespace flowcube

#include <fstream>

#include "flowcube/errors.h"

namespace flowcube {

template <typename Fn>
void ForEachLine(const std::vector<std::filesystem::path>& files, Fn&& fn) {
  std::string line;
  for (const auto& f : files) {
    std::ifstream in(f, std::ios::binary);
    if (!in) throw DataError("cannot open " + f.string());
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      fn(std::string_view(line));
    }
  }
}

}  // namespace flowcube
