#pragma once

#include <cstdint>
#include <random>

namespace qkbf {

using Rng = std::mt19937_64;

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Independent sub-streams of one Monte Carlo run.
enum class Stream : std::uint64_t {
  kTrajectory = 1,
  kNoise = 2,
  kInitialState = 3,
  kTraining = 4,
  kEvaluation = 5,
};

/// Seed for run `index` on `stream`, a pure function of its arguments so a
/// parallel schedule never changes what a run sees.
inline constexpr std::uint64_t derive_seed(std::uint64_t root,
                                           std::uint64_t index,
                                           Stream stream) {
  return splitmix64(splitmix64(root ^ splitmix64(index)) +
                    static_cast<std::uint64_t>(stream));
}

inline Rng make_rng(std::uint64_t root, std::uint64_t index, Stream stream) {
  return Rng(derive_seed(root, index, stream));
}

/// 64-bit FNV-1a, used for artifact checksums and model hashes.
inline std::uint64_t fnv1a(const void* data, std::size_t n,
                           std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace qkbf
