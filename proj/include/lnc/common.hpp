#pragma once

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

namespace lnc {

static_assert(std::endian::native == std::endian::little,
              "on-disk formats are little-endian; big-endian hosts are not supported");

using idx_t = std::uint32_t;
inline constexpr idx_t kNoId = std::numeric_limits<idx_t>::max();

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Raised by deserializers when the magic string or version does not match.
class FormatError : public Error {
public:
    using Error::Error;
};

namespace detail {

template <typename... Args>
[[noreturn]] void fail(Args&&... parts) {
    std::ostringstream os;
    (os << ... << parts);
    throw Error(os.str());
}

template <typename... Args>
void require(bool cond, Args&&... parts) {
    if (!cond) {
        fail(std::forward<Args>(parts)...);
    }
}

} // namespace detail

/// A (distance, id) pair. Ordering is by distance, then by ascending id, which
/// is the tie-break rule used for every ranked list in the library.
struct Neighbor {
    float distance = 0.f;
    idx_t id = kNoId;

    friend bool operator<(const Neighbor& a, const Neighbor& b) {
        return a.distance < b.distance || (a.distance == b.distance && a.id < b.id);
    }
    friend bool operator>(const Neighbor& a, const Neighbor& b) { return b < a; }
    friend bool operator==(const Neighbor& a, const Neighbor& b) = default;
};

/// SplitMix64 finalizer; used to derive independent seeds and per-id draws.
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    return mix64(seed ^ mix64(stream + 0x5851f42d4c957f2dULL));
}

// Worker count used by parallel_for. Results never depend on it: every
// parallel loop writes disjoint outputs indexed by the loop variable.
inline std::atomic<int>& thread_count_slot() {
    static std::atomic<int> n{1};
    return n;
}

inline void set_num_threads(int n) { thread_count_slot() = std::max(1, n); }
inline int num_threads() { return thread_count_slot(); }

template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
    const auto workers = static_cast<std::size_t>(num_threads());
    if (workers <= 1 || n < 2) {
        for (std::size_t i = 0; i < n; ++i) {
            fn(i);
        }
        return;
    }
    std::atomic<std::size_t> next{0};
    constexpr std::size_t chunk = 64;
    auto body = [&] {
        for (;;) {
            const std::size_t begin = next.fetch_add(chunk);
            if (begin >= n) {
                return;
            }
            const std::size_t end = std::min(n, begin + chunk);
            for (std::size_t i = begin; i < end; ++i) {
                fn(i);
            }
        }
    };
    std::vector<std::thread> pool;
    const std::size_t spawn = std::min(workers, (n + chunk - 1) / chunk);
    pool.reserve(spawn);
    for (std::size_t t = 1; t < spawn; ++t) {
        pool.emplace_back(body);
    }
    body();
    for (auto& t : pool) {
        t.join();
    }
}

} // namespace lnc
