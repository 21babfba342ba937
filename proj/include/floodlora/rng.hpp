#pragma once

#include <cstdint>
#include <random>
#include <utility>
#include <vector>

namespace floodlora {

// Seedable generator shared by every stochastic operation. Draws are
// produced from raw 64-bit engine output so sequences are identical across
// standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0);

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal(double mean = 0.0, double stddev = 1.0);
  // Uniform integer in [0, n).
  std::size_t below(std::size_t n);

  // Independent child stream; deterministic in (this state's seed, stream).
  Rng fork(std::uint64_t stream) const;

  template <class T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::swap(items[i - 1], items[below(i)]);
    }
  }

  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Well-known stream identifiers so independent consumers never overlap.
namespace streams {
inline constexpr std::uint64_t kInit = 1;
inline constexpr std::uint64_t kAdapterInit = 2;
inline constexpr std::uint64_t kDropout = 3;
inline constexpr std::uint64_t kShuffle = 4;
inline constexpr std::uint64_t kMaeMask = 5;
inline constexpr std::uint64_t kSynthInDist = 6;
inline constexpr std::uint64_t kSynthOod = 7;
}  // namespace streams

}  // namespace floodlora
