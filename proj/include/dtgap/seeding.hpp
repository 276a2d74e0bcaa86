#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace dtgap {

using Seed = std::uint64_t;
using Rng = std::mt19937_64;

// Derives an independent child seed from a parent seed, a stream label and
// an index. All randomness in a run descends from one master seed through
// this function, so every stream is addressable by (label, index) and
// worker count never changes the draws.
//
//   child = first 64 bits of std::seed_seq{parent.lo, parent.hi,
//                                          fnv1a(label).lo, fnv1a(label).hi,
//                                          index.lo, index.hi}
Seed derive_seed(Seed parent, std::string_view label, std::uint64_t index = 0);

Rng make_rng(Seed seed);

// 64-bit FNV-1a. Used for payload digests and file hashes in run manifests.
std::uint64_t fnv1a(std::string_view bytes,
                    std::uint64_t basis = 0xcbf29ce484222325ULL);

std::string hex64(std::uint64_t value);

}  // namespace dtgap
