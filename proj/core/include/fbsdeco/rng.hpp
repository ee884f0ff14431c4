#pragma once

#include <cstdint>

namespace fbsdeco {

// Keyed, fully portable random stream (xoshiro256++ seeded via splitmix64).
// Distinct (seed, stream) pairs give statistically independent sequences;
// identical pairs give bit-identical sequences on every platform.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed, std::uint64_t stream = 0);

  std::uint64_t next_u64();

  // Uniform on [0, 1).
  double uniform();
  // Uniform on [lo, hi).
  double uniform(double lo, double hi);
  // Standard normal via Box-Muller (pairs, one cached).
  double normal();

 private:
  std::uint64_t s_[4];
  double cached_ = 0.0;
  bool has_cached_ = false;
};

std::uint64_t splitmix64(std::uint64_t& state);

// Stream tags keeping training draws, test draws and parameter
// initialisation on provably disjoint substreams of one run seed.
namespace stream_tag {
inline constexpr std::uint64_t kTrain = 0x1000000000000000ull;
inline constexpr std::uint64_t kTest = 0x2000000000000000ull;
inline constexpr std::uint64_t kInit = 0x3000000000000000ull;
}  // namespace stream_tag

}  // namespace fbsdeco
