#ifndef ENVROBUST_RANDOM_HPP_
#define ENVROBUST_RANDOM_HPP_

#include <cstdint>
#include <initializer_list>
#include <random>

namespace envrobust {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Child seed from a parent seed and a path of stream identifiers. Distinct
/// paths give statistically independent streams.
inline std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
  std::uint64_t h = splitmix64(seed);
  for (const std::uint64_t p : path) h = splitmix64(h ^ splitmix64(p + 0x632be59bd9b4e019ULL));
  return h;
}

// Stream tags used with derive_seed.
enum class Stream : std::uint64_t {
  Init = 1,
  Rollout,
  InitialState,
  Shuffle,
  Partner,
  Attack,
  Split,
  Eval,
  Dataset,
  RandomStates,
  Agent,
};

inline std::uint64_t tag(Stream s) { return static_cast<std::uint64_t>(s); }

inline std::mt19937_64 make_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
  return std::mt19937_64(derive_seed(seed, path));
}

/// Uniform double in [0, 1) from the top 53 bits, identical on every platform.
inline double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

/// Index drawn from unnormalized nonnegative weights.
template <class Container>
std::size_t sample_index(const Container& weights, std::mt19937_64& rng) {
  double total = 0.0;
  for (const double w : weights) total += w;
  const double u = uniform01(rng) * total;
  double acc = 0.0;
  std::size_t last = 0;
  std::size_t i = 0;
  for (const double w : weights) {
    if (w > 0.0) {
      acc += w;
      last = i;
      if (u < acc) return i;
    }
    ++i;
  }
  return last;
}

/// Uniform integer in [0, n) without modulo bias.
inline std::uint64_t uniform_below(std::mt19937_64& rng, std::uint64_t n) {
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x = rng();
  while (x >= limit) x = rng();
  return x % n;
}

}  // namespace envrobust

#endif  // ENVROBUST_RANDOM_HPP_
