#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <utility>
#include <vector>

namespace malaudit {

// splitmix64 finalizer; used to whiten seed material.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s,
                             std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace detail {
inline void seed_feed(std::uint64_t& h, std::uint64_t v) {
  h = splitmix64(h ^ v);
}
inline void seed_feed(std::uint64_t& h, std::int64_t v) {
  seed_feed(h, static_cast<std::uint64_t>(v));
}
inline void seed_feed(std::uint64_t& h, int v) {
  seed_feed(h, static_cast<std::uint64_t>(static_cast<std::int64_t>(v)));
}
inline void seed_feed(std::uint64_t& h, std::string_view s) {
  seed_feed(h, fnv1a64(s));
}
}  // namespace detail

// Deterministic seed fan-out. Every randomness consumer derives its seed
// through this, so results do not depend on evaluation order or thread
// scheduling.
template <class... Parts>
std::uint64_t seed_mix(std::uint64_t base, Parts&&... parts) {
  std::uint64_t h = splitmix64(base ^ 0x9e3779b97f4a7c15ULL);
  (detail::seed_feed(h, std::forward<Parts>(parts)), ...);
  return h;
}

// mt19937_64 with hand-rolled derivations. std::uniform_*_distribution is
// implementation-defined, so none of it is used here; every byte produced
// is pinned by the standard-specified engine plus the arithmetic below.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t u64() { return eng_(); }

  // [0,1) with 53 random bits.
  double real01() { return static_cast<double>(u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * real01(); }

  bool bernoulli(double p) { return real01() < p; }

  // Unbiased integer in [0,n). Lemire's multiply-shift rejection.
  std::uint64_t below(std::uint64_t n) {
    unsigned __int128 m = static_cast<unsigned __int128>(u64()) * n;
    auto low = static_cast<std::uint64_t>(m);
    if (low < n) {
      std::uint64_t cutoff = (0 - n) % n;
      while (low < cutoff) {
        m = static_cast<unsigned __int128>(u64()) * n;
        low = static_cast<std::uint64_t>(m);
      }
    }
    return static_cast<std::uint64_t>(m >> 64);
  }

  // Inclusive bounds.
  std::int64_t range(std::int64_t lo, std::int64_t hi) {
    return lo + static_cast<std::int64_t>(
                    below(static_cast<std::uint64_t>(hi - lo) + 1));
  }

  // Fisher-Yates.
  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      using std::swap;
      swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 eng_;
};

}  // namespace malaudit
