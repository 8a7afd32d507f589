#pragma once

#include <cstdint>
#include <random>

namespace protodiff {

/// Independent generator for (seed, stream). Streams of one seed do not overlap
/// in practice because seed_seq mixes all four words.
inline std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return std::mt19937_64(seq);
}

// Fixed stream ids so different consumers of one seed never share a stream.
namespace streams {
inline constexpr std::uint64_t params = 0x70617261;  // init_params uses its own keyed streams
inline constexpr std::uint64_t bank = 0x62616e6b;
inline constexpr std::uint64_t train = 0x74726169;
inline constexpr std::uint64_t shots = 0x73686f74;
}  // namespace streams

}  // namespace protodiff
