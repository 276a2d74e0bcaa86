#include "dtgap/seeding.hpp"

#include <array>
#include <cstdio>
#include <string>

namespace dtgap {

namespace {
std::uint32_t lo(std::uint64_t v) { return static_cast<std::uint32_t>(v); }
std::uint32_t hi(std::uint64_t v) { return static_cast<std::uint32_t>(v >> 32); }
}  // namespace

Seed derive_seed(Seed parent, std::string_view label, std::uint64_t index) {
  const std::uint64_t tag = fnv1a(label);
  std::seed_seq seq{lo(parent), hi(parent), lo(tag), hi(tag), lo(index), hi(index)};
  std::array<std::uint32_t, 2> out{};
  seq.generate(out.begin(), out.end());
  return (static_cast<std::uint64_t>(out[1]) << 32) | out[0];
}

Rng make_rng(Seed seed) {
  std::seed_seq seq{lo(seed), hi(seed)};
  return Rng(seq);
}

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t basis) {
  std::uint64_t h = basis;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(value));
  return buf;
}

}  // namespace dtgap
