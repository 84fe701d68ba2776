#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace flowcube::bloom {

// Standard sizing: m = ceil(-n ln p / (ln 2)^2), k = max(1, round(m/n ln 2)).
std::pair<uint64_t, uint32_t> OptimalParams(uint64_t n, double p);

// 64-bit MurmurHash2 (MurmurHash64A) of a byte string.
uint64_t Murmur64(std::string_view bytes, uint64_t seed);

// Bit array of length m probed by k positions per key via double hashing,
// h_i = (h1 + i * h2) mod m, where h1 and h2 are two independently seeded
// 64-bit hashes of the key bytes (arithmetic wraps at 2^64).
//
// File layout (little endian): "BLM1", u32 level, u64 m, u32 k, u64 n,
// then ceil(m/8) bytes of bits, bit i stored in byte i/8 at position i%8.
class BloomFilter {
 public:
  BloomFilter(uint64_t m, uint32_t k, uint32_t level = 0);
  // Sized for n keys at false-positive rate p. n == 0 yields a filter that
  // answers false for everything until something is inserted.
  static BloomFilter ForCapacity(uint64_t n, double p, uint32_t level = 0);

  void Insert(std::string_view key);
  bool MayContain(std::string_view key) const;

  // Keys are the 12-byte (u32 level, u64 cell index) encoding.
  void InsertCell(uint32_t level, uint64_t index) { Insert(CellKey(level, index)); }
  bool MayContainCell(uint32_t level, uint64_t index) const {
    return MayContain(CellKey(level, index));
  }
  static std::string CellKey(uint32_t level, uint64_t index);

  uint64_t m() const { return m_; }
  uint32_t k() const { return k_; }
  uint64_t n_inserted() const { return n_; }
  uint32_t level() const { return level_; }
  size_t bits_set() const;

  std::string Serialize() const;
  // Throws DataError on a bad magic, size mismatch or truncation.
  static BloomFilter Deserialize(std::string_view data);
  void Save(const std::filesystem::path& path) const;
  static BloomFilter Load(const std::filesystem::path& path);

  friend bool operator==(const BloomFilter&, const BloomFilter&) = default;

 private:
  uint64_t m_;
  uint32_t k_;
  uint32_t level_;
  uint64_t n_ = 0;
  std::vector<uint64_t> words_;
};

}  // namespace flowcube::bloom
