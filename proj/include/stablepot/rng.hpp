// Counter-based RNG (Philox4x32-10) with splittable per-sample streams.
//
// Reproducibility contract: a draw sequence is a pure function of
// (seed, stream_id, sample_index), so estimates are bit-identical for any
// thread count and any scheduling. Workers own whole chunks of the sample
// index space and chunk partials are merged in index order.
#pragma once

#include <array>
#include <atomic>
#include <cstdint>
#include <thread>
#include <vector>

#include "stablepot/common.hpp"

namespace stablepot {

namespace detail {

// SplitMix64 mix, used only to derive Philox keys from user seeds.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace detail

// One 10-round Philox4x32 block. Reference constants from Salmon et al.,
// "Parallel random numbers: as easy as 1, 2, 3" (SC'11).
inline std::array<std::uint32_t, 4> philox4x32_10(
    std::array<std::uint32_t, 4> ctr, std::array<std::uint32_t, 2> key) {
  constexpr std::uint32_t M0 = 0xD2511F53u, M1 = 0xCD9E8D57u;
  constexpr std::uint32_t W0 = 0x9E3779B9u, W1 = 0xBB67AE85u;
  for (int round = 0; round < 10; ++round) {
    const std::uint64_t p0 = static_cast<std::uint64_t>(M0) * ctr[0];
    const std::uint64_t p1 = static_cast<std::uint64_t>(M1) * ctr[2];
    const std::array<std::uint32_t, 4> next = {
        static_cast<std::uint32_t>(p1 >> 32) ^ ctr[1] ^ key[0],
        static_cast<std::uint32_t>(p1),
        static_cast<std::uint32_t>(p0 >> 32) ^ ctr[3] ^ key[1],
        static_cast<std::uint32_t>(p0)};
    ctr = next;
    key[0] += W0;
    key[1] += W1;
  }
  return ctr;
}

// Identifies an independent stream of randomness. Identical (seed, stream_id)
// reproduce identical draws regardless of thread scheduling.
struct RngStream {
  std::uint64_t seed = 0;
  std::uint64_t stream_id = 0;
};

// Draw engine for one sample substream. Cheap to construct; holds a 128-bit
// counter so a single sample may consume up to 2^64 blocks.
class RngEngine {
 public:
  RngEngine(RngStream s, std::uint64_t sample_index) {
    std::uint64_t st = s.seed;
    detail::splitmix64(st);
    st ^= 0x5851F42D4C957F2DULL * s.stream_id;
    const std::uint64_t h1 = detail::splitmix64(st);
    st ^= 0xD1342543DE82EF95ULL * sample_index;
    const std::uint64_t h2 = detail::splitmix64(st);
    key_ = {static_cast<std::uint32_t>(h1),
            static_cast<std::uint32_t>(h1 >> 32)};
    nonce_ = {static_cast<std::uint32_t>(h2),
              static_cast<std::uint32_t>(h2 >> 32)};
  }

  std::uint64_t next_u64() {
    if (have_ == 0) refill();
    --have_;
    const std::uint64_t v = buf_[have_];
    return v;
  }

  // Uniform in (0,1]; never returns 0 so logs are safe.
  double u01() {
    return (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
  }

  // Uniform in [0,1).
  double u01_left() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Standard normal via Box-Muller (uses two uniforms, caches the pair).
  double normal() {
    if (has_normal_) {
      has_normal_ = false;
      return cached_normal_;
    }
    const double u = u01(), v = u01_left();
    const double m = std::sqrt(-2.0 * std::log(u));
    has_normal_ = true;
    cached_normal_ = m * std::sin(2.0 * kPi * v);
    return m * std::cos(2.0 * kPi * v);
  }

  // Uniform direction on S^{n-1}, written into d.
  void unit_sphere(int n, Point& d) {
    d.resize(n);
    if (n == 1) {
      d[0] = (next_u64() & 1u) ? 1.0 : -1.0;
      return;
    }
    if (n == 2) {
      const double t = 2.0 * kPi * u01_left();
      d[0] = std::cos(t);
      d[1] = std::sin(t);
      return;
    }
    double m2 = 0.0;
    do {
      m2 = 0.0;
      for (int i = 0; i < n; ++i) {
        d[i] = normal();
        m2 += d[i] * d[i];
      }
    } while (m2 == 0.0);
    const double inv = 1.0 / std::sqrt(m2);
    for (int i = 0; i < n; ++i) d[i] *= inv;
  }

 private:
  void refill() {
    const auto block = philox4x32_10(
        {static_cast<std::uint32_t>(ctr_), static_cast<std::uint32_t>(ctr_ >> 32),
         nonce_[0], nonce_[1]},
        key_);
    ++ctr_;
    buf_[0] =
        (static_cast<std::uint64_t>(block[0]) << 32) | block[1];
    buf_[1] =
        (static_cast<std::uint64_t>(block[2]) << 32) | block[3];
    have_ = 2;
  }

  std::array<std::uint32_t, 2> key_{};
  std::array<std::uint32_t, 2> nonce_{};
  std::uint64_t ctr_ = 0;
  std::array<std::uint64_t, 2> buf_{};
  int have_ = 0;
  bool has_normal_ = false;
  double cached_normal_ = 0.0;
};

// ---------------------------------------------------------------------------
// Deterministic chunked parallel reduction over a sample index space.
//
// fn(sample_index, acc) accumulates one sample into a chunk-local Acc;
// merge(total, part) folds chunk partials in ascending chunk order, so the
// result is independent of the number of workers.

inline int effective_threads(int requested) {
  if (requested > 0) return requested;
  const unsigned hc = std::thread::hardware_concurrency();
  return hc == 0 ? 1 : static_cast<int>(hc);
}

template <class Acc, class Fn, class Merge>
Acc chunked_reduce(std::uint64_t n_samples, int threads, std::uint64_t chunk,
                   Fn&& fn, Merge&& merge, Acc init = Acc{}) {
  if (chunk == 0) chunk = 8192;
  const std::uint64_t n_chunks = (n_samples + chunk - 1) / chunk;
  std::vector<Acc> parts(n_chunks, init);
  const int nt = std::min<std::uint64_t>(effective_threads(threads),
                                         n_chunks == 0 ? 1 : n_chunks);
  if (n_chunks > 0) {
    std::atomic<std::uint64_t> next{0};
    auto worker = [&]() {
      for (;;) {
        const std::uint64_t c = next.fetch_add(1);
        if (c >= n_chunks) return;
        const std::uint64_t lo = c * chunk;
        const std::uint64_t hi = std::min(n_samples, lo + chunk);
        Acc acc = init;
        for (std::uint64_t i = lo; i < hi; ++i) fn(i, acc);
        parts[c] = std::move(acc);
      }
    };
    if (nt <= 1) {
      worker();
    } else {
      std::vector<std::thread> pool;
      pool.reserve(nt);
      for (int t = 0; t < nt; ++t) pool.emplace_back(worker);
      for (auto& t : pool) t.join();
    }
  }
  Acc total = init;
  for (std::uint64_t c = 0; c < n_chunks; ++c) merge(total, parts[c]);
  return total;
}

}  // namespace stablepot
