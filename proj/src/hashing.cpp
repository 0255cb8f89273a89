#include "skd/hashing.hpp"

#include <cstdio>

namespace skd {

void Fnv1a::update(std::span<const std::byte> bytes) {
  for (std::byte b : bytes) {
    h_ ^= static_cast<std::uint64_t>(b);
    h_ *= 0x100000001b3ULL;
  }
}

void Fnv1a::update(std::string_view s) { update(std::as_bytes(std::span(s.data(), s.size()))); }

std::string Fnv1a::hex() const { return to_hex(h_); }

std::string to_hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace skd
