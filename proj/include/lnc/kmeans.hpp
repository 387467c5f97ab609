#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include "lnc/common.hpp"
#include "lnc/dataset.hpp"
#include "lnc/distance.hpp"

namespace lnc {

struct KMeansCodebook {
    std::size_t k = 0;
    std::size_t dim = 0;
    std::vector<float> centroids; // k x dim

    std::span<const float> centroid(std::size_t i) const { return {centroids.data() + i * dim, dim}; }
    const float* ptr(std::size_t i) const { return centroids.data() + i * dim; }

    idx_t assign(const float* x, float* distance = nullptr) const {
        idx_t label = 0;
        assign_nearest(x, 1, centroids.data(), k, dim, &label, distance);
        return label;
    }
};

struct KMeansOptions {
    std::size_t iters = 25;
    std::uint64_t seed = 1234;
    /// Subsample the training set to k * this many points (0 keeps everything).
    std::size_t max_points_per_centroid = 0;
    /// Centroid 0 is fixed at the origin and never updated.
    bool pin_zero = false;
};

struct KMeansResult {
    KMeansCodebook codebook;
    /// Mean squared distance to the nearest centroid: entry 0 is for the
    /// initial centroids, entry t for the centroids after t Lloyd updates.
    std::vector<double> objective;
};

namespace detail {

inline std::vector<float> kmeanspp_init(const float* x, std::size_t n, std::size_t d, std::size_t k,
                                        bool pin_zero, std::mt19937_64& rng) {
    std::vector<float> cent(k * d, 0.f);
    std::vector<float> mind(n, std::numeric_limits<float>::infinity());
    std::size_t start = 0;
    if (pin_zero) {
        start = 1;
        for (std::size_t i = 0; i < n; ++i) {
            mind[i] = norm_sqr(x + i * d, d);
        }
    } else {
        std::uniform_int_distribution<std::size_t> pick(0, n - 1);
        const std::size_t first = pick(rng);
        std::copy_n(x + first * d, d, cent.data());
        for (std::size_t i = 0; i < n; ++i) {
            mind[i] = l2sqr(x + i * d, cent.data(), d);
        }
        start = 1;
    }
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    double total = 0.0;
    for (float v : mind) {
        total += v;
    }
    for (std::size_t c = start; c < k; ++c) {
        std::size_t chosen = 0;
        if (total > 0.0) {
            const double target = unif(rng) * total;
            double acc = 0.0;
            chosen = n - 1;
            for (std::size_t i = 0; i < n; ++i) {
                acc += mind[i];
                if (acc > target && mind[i] > 0.f) {
                    chosen = i;
                    break;
                }
            }
        } else {
            chosen = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
        }
        float* dst = cent.data() + c * d;
        std::copy_n(x + chosen * d, d, dst);
        total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const float dist = l2sqr(x + i * d, dst, d);
            mind[i] = std::min(mind[i], dist);
            total += mind[i];
        }
    }
    return cent;
}

// Lloyd iterations from the given centroids; appends the objective after the
// initial assignment and after every update.
inline void lloyd(const float* x, std::size_t n, std::size_t d, std::size_t k, std::vector<float>& cent,
                  std::size_t iters, bool pin_zero, std::vector<double>& objective) {
    std::vector<idx_t> labels(n);
    std::vector<float> dist(n);
    std::vector<double> sums(k * d);
    std::vector<std::size_t> counts(k);

    auto assign_all = [&] {
        assign_nearest(x, n, cent.data(), k, d, labels.data(), dist.data());
        double obj = 0.0;
        for (float v : dist) {
            obj += v;
        }
        objective.push_back(obj / static_cast<double>(n));
    };

    assign_all();
    for (std::size_t it = 0; it < iters; ++it) {
        std::fill(sums.begin(), sums.end(), 0.0);
        std::fill(counts.begin(), counts.end(), 0);
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t c = labels[i];
            ++counts[c];
            const float* xi = x + i * d;
            double* s = sums.data() + c * d;
            for (std::size_t j = 0; j < d; ++j) {
                s[j] += xi[j];
            }
        }
        for (std::size_t c = 0; c < k; ++c) {
            if (counts[c] == 0 || (pin_zero && c == 0)) {
                continue;
            }
            const double inv = 1.0 / static_cast<double>(counts[c]);
            for (std::size_t j = 0; j < d; ++j) {
                cent[c * d + j] = static_cast<float>(sums[c * d + j] * inv);
            }
        }
        for (std::size_t c = 0; c < k; ++c) {
            if (counts[c] != 0 || (pin_zero && c == 0)) {
                continue;
            }
            const auto largest = static_cast<std::size_t>(
                std::max_element(counts.begin(), counts.end()) - counts.begin());
            if (counts[largest] < 2) {
                break;
            }
            std::size_t far = n;
            float far_d = -1.f;
            for (std::size_t i = 0; i < n; ++i) {
                if (labels[i] == largest && dist[i] > far_d) {
                    far_d = dist[i];
                    far = i;
                }
            }
            std::copy_n(x + far * d, d, cent.data() + c * d);
            labels[far] = static_cast<idx_t>(c);
            dist[far] = 0.f;
            --counts[largest];
            counts[c] = 1;
        }
        assign_all();
    }
}

} // namespace detail

/// Lloyd k-means from kmeans++ seeding. Empty clusters are re-seeded with the
/// point farthest from its centroid inside the currently largest cluster.
inline KMeansResult kmeans_train(const float* data, std::size_t n, std::size_t d, std::size_t k,
                                 const KMeansOptions& opt = {}) {
    detail::require(k > 0, "kmeans: k must be positive");
    detail::require(n >= k, "kmeans: k=", k, " exceeds the number of training points ", n);
    for (std::size_t i = 0; i < n * d; ++i) {
        detail::require(std::isfinite(data[i]), "kmeans: non-finite training input");
    }
    std::mt19937_64 rng(opt.seed);

    std::vector<float> sampled;
    const float* x = data;
    if (opt.max_points_per_centroid > 0 && n > k * opt.max_points_per_centroid) {
        const std::size_t keep = k * opt.max_points_per_centroid;
        std::vector<idx_t> perm(n);
        std::iota(perm.begin(), perm.end(), 0);
        for (std::size_t i = 0; i < keep; ++i) {
            std::uniform_int_distribution<std::size_t> pick(i, n - 1);
            std::swap(perm[i], perm[pick(rng)]);
        }
        std::sort(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(keep));
        sampled.resize(keep * d);
        for (std::size_t i = 0; i < keep; ++i) {
            std::copy_n(data + static_cast<std::size_t>(perm[i]) * d, d, sampled.data() + i * d);
        }
        x = sampled.data();
        n = keep;
    }

    KMeansResult res;
    res.codebook.k = k;
    res.codebook.dim = d;
    res.codebook.centroids = detail::kmeanspp_init(x, n, d, k, opt.pin_zero, rng);
    detail::lloyd(x, n, d, k, res.codebook.centroids, opt.iters, opt.pin_zero, res.objective);
    return res;
}

/// Continue Lloyd iterations from an existing codebook.
inline std::vector<double> kmeans_refine(const float* data, std::size_t n, KMeansCodebook& cb, std::size_t iters,
                                         bool pin_zero = false) {
    detail::require(n >= cb.k, "kmeans: k=", cb.k, " exceeds the number of training points ", n);
    std::vector<double> objective;
    detail::lloyd(data, n, cb.dim, cb.k, cb.centroids, iters, pin_zero, objective);
    return objective;
}

inline KMeansCodebook kmeans_train(const VectorSet& data, std::size_t k, std::size_t iters, std::uint64_t seed) {
    KMeansOptions opt;
    opt.iters = iters;
    opt.seed = seed;
    return kmeans_train(data.data().data(), data.size(), data.dim(), k, opt).codebook;
}

/// Two-stage k-means for very large k: `first_level` clusters, then each one
/// split into a number of children proportional to its population. The total
/// is exactly k.
inline KMeansCodebook kmeans_train_hierarchical(const float* data, std::size_t n, std::size_t d, std::size_t k,
                                                const KMeansOptions& opt, std::size_t first_level = 256) {
    detail::require(n >= k, "kmeans: k=", k, " exceeds the number of training points ", n);
    first_level = std::min(first_level, k);
    KMeansOptions top_opt = opt;
    top_opt.pin_zero = false;
    auto top = kmeans_train(data, n, d, first_level, top_opt).codebook;
    std::vector<idx_t> labels(n);
    assign_nearest(data, n, top.centroids.data(), first_level, d, labels.data(), nullptr);
    std::vector<std::vector<idx_t>> members(first_level);
    for (std::size_t i = 0; i < n; ++i) {
        members[labels[i]].push_back(static_cast<idx_t>(i));
    }

    // Largest-remainder apportionment of k children, capped by cluster size
    // and at least one per non-empty cluster.
    std::vector<std::size_t> quota(first_level, 0);
    std::size_t assigned = 0;
    std::vector<std::pair<double, std::size_t>> remainders;
    for (std::size_t c = 0; c < first_level; ++c) {
        if (members[c].empty()) {
            continue;
        }
        const double exact = static_cast<double>(k) * static_cast<double>(members[c].size()) / static_cast<double>(n);
        quota[c] = std::clamp<std::size_t>(static_cast<std::size_t>(exact), 1, members[c].size());
        assigned += quota[c];
        remainders.emplace_back(exact - std::floor(exact), c);
    }
    std::sort(remainders.begin(), remainders.end(), [](auto& a, auto& b) {
        return a.first > b.first || (a.first == b.first && a.second < b.second);
    });
    while (assigned < k) {
        bool progressed = false;
        for (auto& [r, c] : remainders) {
            if (assigned == k) {
                break;
            }
            if (quota[c] < members[c].size()) {
                ++quota[c];
                ++assigned;
                progressed = true;
            }
        }
        detail::require(progressed, "kmeans: cannot place ", k, " centroids");
    }
    while (assigned > k) {
        const auto c = static_cast<std::size_t>(std::max_element(quota.begin(), quota.end()) - quota.begin());
        --quota[c];
        --assigned;
    }

    KMeansCodebook out;
    out.k = k;
    out.dim = d;
    out.centroids.reserve(k * d);
    std::vector<float> local;
    for (std::size_t c = 0; c < first_level; ++c) {
        if (quota[c] == 0) {
            continue;
        }
        local.resize(members[c].size() * d);
        for (std::size_t i = 0; i < members[c].size(); ++i) {
            std::copy_n(data + static_cast<std::size_t>(members[c][i]) * d, d, local.data() + i * d);
        }
        KMeansOptions sub = opt;
        sub.seed = derive_seed(opt.seed, c + 1);
        sub.pin_zero = false;
        auto child = kmeans_train(local.data(), members[c].size(), d, quota[c], sub).codebook;
        out.centroids.insert(out.centroids.end(), child.centroids.begin(), child.centroids.end());
    }
    if (opt.pin_zero) {
        std::fill_n(out.centroids.begin(), d, 0.f);
    }
    return out;
}

} // namespace lnc
