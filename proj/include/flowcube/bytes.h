#pragma once

// Fixed-width binary encoding helpers for shuffle keys and values. Keys are
// big-endian so byte order equals numeric order; values are little-endian.

#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>

#include "flowcube/errors.h"

namespace flowcube::bytes {

inline void PutBE64(std::string& out, uint64_t v) {
  for (int i = 7; i >= 0; --i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline uint64_t GetBE64(std::string_view s, size_t pos) {
  uint64_t v = 0;
  for (size_t i = 0; i < 8; ++i) v = (v << 8) | static_cast<unsigned char>(s[pos + i]);
  return v;
}

template <typename T>
void PutLE(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));  // little-endian hosts only
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string_view data) : data_(data) {}

  template <typename T>
  T Get() {
    if (pos_ + sizeof(T) > data_.size()) throw DataError("truncated binary record");
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  std::string_view data_;
  size_t pos_ = 0;
};

}  // namespace flowcube::bytes
