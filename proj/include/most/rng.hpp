#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

#include "most/common.hpp"

namespace most {

// Deterministic RNG with explicit value derivation. std::mt19937_64's output
// sequence is fixed by the standard; the helpers below avoid the
// implementation-defined std distributions so that runs are reproducible
// across standard libraries, not just across invocations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t next_u64() { return eng_(); }

  // uniform in [0, 1) with 53 random bits
  double u01() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * u01(); }

  // uniform integer in [0, n)
  int64_t randint(int64_t n) {
    if (n <= 0) fail("Rng::randint: n must be positive, got ", n);
    return static_cast<int64_t>(eng_() % static_cast<uint64_t>(n));
  }

  bool bernoulli(double p) { return u01() < p; }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(randint(static_cast<int64_t>(i)));
      std::swap(v[i - 1], v[j]);
    }
  }

  // k distinct indices drawn from [0, n), order randomized
  std::vector<int> sample_indices(int n, int k) {
    std::vector<int> idx(n);
    for (int i = 0; i < n; ++i) idx[i] = i;
    shuffle(idx);
    idx.resize(static_cast<size_t>(std::min(n, k)));
    return idx;
  }

 private:
  std::mt19937_64 eng_;
};

namespace detail {
inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}
}  // namespace detail

// Derives an independent stream from a base seed, a purpose tag and up to two
// indices (stage, epoch, subject id, ...). Streams with distinct tags never
// interact, which keeps e.g. buffer sampling out of the data-order stream.
inline uint64_t derive_seed(uint64_t seed, std::string_view tag, uint64_t a = 0, uint64_t b = 0) {
  uint64_t h = fnv1a(tag.data(), tag.size());
  h = detail::splitmix64(h ^ detail::splitmix64(seed));
  h = detail::splitmix64(h ^ detail::splitmix64(a + 0x51ed2701));
  h = detail::splitmix64(h ^ detail::splitmix64(b + 0xa3417cb5));
  return h;
}

inline Rng derive_rng(uint64_t seed, std::string_view tag, uint64_t a = 0, uint64_t b = 0) {
  return Rng(derive_seed(seed, tag, a, b));
}

}  // namespace most
