#include "flowcube/bloom.h"

#include <bit>
#include <cmath>
#include <cstring>
#include <numbers>

#include <fmt/format.h>

#include "flowcube/bytes.h"
#include "flowcube/errors.h"
#include "flowcube/io.h"

namespace flowcube::bloom {

namespace {

constexpr char kMagic[4] = {'B', 'L', 'M', '1'};
constexpr uint64_t kSeed1 = 0x8445d61a4e774912ULL;
constexpr uint64_t kSeed2 = 0x2b7e151628aed2a6ULL;
constexpr size_t kHeaderBytes = 4 + 4 + 8 + 4 + 8;

}  // namespace

std::pair<uint64_t, uint32_t> OptimalParams(uint64_t n, double p) {
  if (!(p > 0.0 && p < 1.0)) throw InvalidArgument(fmt::format("bloom p={} outside (0,1)", p));
  if (n == 0) return {1, 1};
  const double ln2 = std::numbers::ln2;
  const double m = std::ceil(-static_cast<double>(n) * std::log(p) / (ln2 * ln2));
  const auto bits = static_cast<uint64_t>(std::max(1.0, m));
  const double k = std::round(static_cast<double>(bits) / static_cast<double>(n) * ln2);
  return {bits, static_cast<uint32_t>(std::max(1.0, k))};
}

uint64_t Murmur64(std::string_view data, uint64_t seed) {
  constexpr uint64_t m = 0xc6a4a7935bd1e995ULL;
  constexpr int r = 47;
  const size_t len = data.size();
  uint64_t h = seed ^ (len * m);
  const size_t blocks = len / 8;
  for (size_t i = 0; i < blocks; ++i) {
    uint64_t k;
    std::memcpy(&k, data.data() + i * 8, 8);
    k *= m;
    k ^= k >> r;
    k *= m;
    h ^= k;
    h *= m;
  }
  const auto* tail = reinterpret_cast<const unsigned char*>(data.data() + blocks * 8);
  switch (len & 7) {
    case 7: h ^= uint64_t{tail[6]} << 48; [[fallthrough]];
    case 6: h ^= uint64_t{tail[5]} << 40; [[fallthrough]];
    case 5: h ^= uint64_t{tail[4]} << 32; [[fallthrough]];
    case 4: h ^= uint64_t{tail[3]} << 24; [[fallthrough]];
    case 3: h ^= uint64_t{tail[2]} << 16; [[fallthrough]];
    case 2: h ^= uint64_t{tail[1]} << 8; [[fallthrough]];
    case 1:
      h ^= uint64_t{tail[0]};
      h *= m;
  }
  h ^= h >> r;
  h *= m;
  h ^= h >> r;
  return h;
}

BloomFilter::BloomFilter(uint64_t m, uint32_t k, uint32_t level)
    : m_(m), k_(k), level_(level), words_((m + 63) / 64, 0) {
  if (m_ == 0 || k_ == 0) throw InvalidArgument("bloom filter needs m > 0 and k > 0");
}

BloomFilter BloomFilter::ForCapacity(uint64_t n, double p, uint32_t level) {
  auto [m, k] = OptimalParams(n, p);
  return BloomFilter(m, k, level);
}

std::string BloomFilter::CellKey(uint32_t level, uint64_t index) {
  std::string key;
  key.reserve(12);
  bytes::PutLE<uint32_t>(key, level);
  bytes::PutLE<uint64_t>(key, index);
  return key;
}

void BloomFilter::Insert(std::string_view key) {
  const uint64_t h1 = Murmur64(key, kSeed1);
  const uint64_t h2 = Murmur64(key, kSeed2);
  for (uint32_t i = 0; i < k_; ++i) {
    const uint64_t bit = (h1 + i * h2) % m_;
    words_[bit / 64] |= uint64_t{1} << (bit % 64);
  }
  ++n_;
}

bool BloomFilter::MayContain(std::string_view key) const {
  const uint64_t h1 = Murmur64(key, kSeed1);
  const uint64_t h2 = Murmur64(key, kSeed2);
  for (uint32_t i = 0; i < k_; ++i) {
    const uint64_t bit = (h1 + i * h2) % m_;
    if (!(words_[bit / 64] >> (bit % 64) & 1)) return false;
  }
  return true;
}

size_t BloomFilter::bits_set() const {
  size_t total = 0;
  for (uint64_t w : words_) total += static_cast<size_t>(std::popcount(w));
  return total;
}

std::string BloomFilter::Serialize() const {
  std::string out(kMagic, 4);
  bytes::PutLE<uint32_t>(out, level_);
  bytes::PutLE<uint64_t>(out, m_);
  bytes::PutLE<uint32_t>(out, k_);
  bytes::PutLE<uint64_t>(out, n_);
  const size_t nbytes = (m_ + 7) / 8;
  for (size_t i = 0; i < nbytes; ++i) {
    out.push_back(static_cast<char>((words_[i / 8] >> (8 * (i % 8))) & 0xff));
  }
  return out;
}

BloomFilter BloomFilter::Deserialize(std::string_view data) {
  if (data.size() < kHeaderBytes || std::memcmp(data.data(), kMagic, 4) != 0) {
    throw DataError("not a bloom filter file (bad magic)");
  }
  bytes::Reader r(data.substr(4, kHeaderBytes - 4));
  const auto level = r.Get<uint32_t>();
  const auto m = r.Get<uint64_t>();
  const auto k = r.Get<uint32_t>();
  const auto n = r.Get<uint64_t>();
  if (m == 0 || k == 0) throw DataError("bloom filter header has m or k of zero");
  const size_t nbytes = (m + 7) / 8;
  if (data.size() != kHeaderBytes + nbytes) {
    throw DataError(fmt::format("bloom filter size mismatch: expected {} bytes, got {}",
                                kHeaderBytes + nbytes, data.size()));
  }
  BloomFilter f(m, k, level);
  f.n_ = n;
  for (size_t i = 0; i < nbytes; ++i) {
    f.words_[i / 8] |= uint64_t{static_cast<unsigned char>(data[kHeaderBytes + i])}
                       << (8 * (i % 8));
  }
  return f;
}

void BloomFilter::Save(const std::filesystem::path& path) const {
  WriteFileAtomic(path, Serialize());
}

BloomFilter BloomFilter::Load(const std::filesystem::path& path) {
  return Deserialize(ReadFile(path));
}

}  // namespace flowcube::bloom
