#pragma once

#include <cstdint>
#include <cstring>
#include <string>

namespace reinseg {

/// Incremental FNV-1a 64-bit hash. Used for parameter snapshot digests; the
/// frozen-backbone contract compares these bitwise.
class Digest {
 public:
  void update(const void* bytes, std::size_t len) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < len; ++i) {
      state_ ^= p[i];
      state_ *= 0x100000001b3ULL;
    }
  }

  void update(const std::string& s) { update(s.data(), s.size()); }

  template <class T>
  void update_value(const T& v) {
    static_assert(std::is_trivially_copyable_v<T>);
    update(&v, sizeof(T));
  }

  std::uint64_t value() const { return state_; }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

std::string digest_hex(std::uint64_t v);

}  // namespace reinseg
