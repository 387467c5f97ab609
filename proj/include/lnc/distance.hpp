#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "lnc/common.hpp"

namespace lnc {

// All distances in the library are squared Euclidean.
inline float l2sqr(const float* a, const float* b, std::size_t d) {
    float s = 0.f;
    if (d < 8) {
        // vector setup costs more than it saves on short sub-vectors
        for (std::size_t i = 0; i < d; ++i) {
            const float t = a[i] - b[i];
            s += t * t;
        }
        return s;
    }
#pragma omp simd reduction(+ : s)
    for (std::size_t i = 0; i < d; ++i) {
        const float t = a[i] - b[i];
        s += t * t;
    }
    return s;
}

inline float l2sqr(std::span<const float> a, std::span<const float> b) {
    return l2sqr(a.data(), b.data(), a.size());
}

inline float inner_product(const float* a, const float* b, std::size_t d) {
    float s = 0.f;
    if (d < 8) {
        for (std::size_t i = 0; i < d; ++i) {
            s += a[i] * b[i];
        }
        return s;
    }
#pragma omp simd reduction(+ : s)
    for (std::size_t i = 0; i < d; ++i) {
        s += a[i] * b[i];
    }
    return s;
}

inline float norm_sqr(const float* a, std::size_t d) { return inner_product(a, a, d); }

using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstRowMap = Eigen::Map<const RowMatrix>;
using RowMap = Eigen::Map<RowMatrix>;

namespace detail {

// Index of the first minimum: block minima first, then a scan of the first
// block holding the overall minimum.
inline idx_t argmin(const float* v, std::size_t n) {
    constexpr std::size_t block = 16;
    std::size_t best_block = 0;
    float m = std::numeric_limits<float>::infinity();
    std::size_t i = 0;
    for (; i + block <= n; i += block) {
        float bm = v[i];
#pragma omp simd reduction(min : bm)
        for (std::size_t l = 0; l < block; ++l) {
            bm = std::min(bm, v[i + l]);
        }
        if (bm < m) {
            m = bm;
            best_block = i;
        }
    }
    std::size_t arg = n;
    if (m < std::numeric_limits<float>::infinity()) {
        for (std::size_t l = best_block; l < best_block + block; ++l) {
            if (v[l] == m) {
                arg = l;
                break;
            }
        }
    }
    for (; i < n; ++i) {
        if (arg == n || v[i] < v[arg]) {
            arg = i;
        }
    }
    return static_cast<idx_t>(arg == n ? 0 : arg);
}

} // namespace detail

/// Nearest centroid for each of n rows of x (row-major, n x d) among k
/// centroids (k x d). Candidates are ranked through a GEMM expansion of the
/// squared distance; the reported distance is recomputed directly.
inline void assign_nearest(const float* x, std::size_t n, const float* centroids, std::size_t k,
                           std::size_t d, idx_t* labels, float* distances) {
    if (n == 0) {
        return;
    }
    detail::require(k > 0, "assign_nearest: empty centroid set");
    if (k * d <= 64 || n < 8) {
        for (std::size_t i = 0; i < n; ++i) {
            float best = std::numeric_limits<float>::infinity();
            idx_t arg = 0;
            for (std::size_t c = 0; c < k; ++c) {
                const float dist = l2sqr(x + i * d, centroids + c * d, d);
                if (dist < best) {
                    best = dist;
                    arg = static_cast<idx_t>(c);
                }
            }
            labels[i] = arg;
            if (distances) {
                distances[i] = best;
            }
        }
        return;
    }

    ConstRowMap cmat(centroids, static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(d));
    Eigen::VectorXf cnorm = cmat.rowwise().squaredNorm();

    if (d <= 16) {
        // Short vectors: centroids transposed so the scan runs along centroids.
        std::vector<float> ct(d * k);
        for (std::size_t c = 0; c < k; ++c) {
            for (std::size_t j = 0; j < d; ++j) {
                ct[j * k + c] = centroids[c * d + j];
            }
        }
        std::vector<float> buf(k);
        for (std::size_t i = 0; i < n; ++i) {
            const float* xi = x + i * d;
            std::copy_n(cnorm.data(), k, buf.data());
            for (std::size_t j = 0; j < d; ++j) {
                const float w = -2.f * xi[j];
                const float* col = ct.data() + j * k;
                float* out = buf.data();
#pragma omp simd
                for (std::size_t c = 0; c < k; ++c) {
                    out[c] += w * col[c];
                }
            }
            labels[i] = detail::argmin(buf.data(), k);
            if (distances) {
                distances[i] = l2sqr(xi, centroids + labels[i] * d, d);
            }
        }
        return;
    }

    constexpr std::size_t block = 256;
    const std::size_t cblock = std::min<std::size_t>(k, 8192);
    RowMatrix dots;
    std::vector<float> best(block);
    for (std::size_t b0 = 0; b0 < n; b0 += block) {
        const std::size_t nb = std::min(block, n - b0);
        ConstRowMap xmat(x + b0 * d, static_cast<Eigen::Index>(nb), static_cast<Eigen::Index>(d));
        std::fill(best.begin(), best.begin() + static_cast<std::ptrdiff_t>(nb),
                  std::numeric_limits<float>::infinity());
        for (std::size_t c0 = 0; c0 < k; c0 += cblock) {
            const std::size_t nc = std::min(cblock, k - c0);
            dots.noalias() = xmat * cmat.middleRows(static_cast<Eigen::Index>(c0),
                                                    static_cast<Eigen::Index>(nc))
                                        .transpose();
            const float* cn = cnorm.data() + c0;
            for (std::size_t i = 0; i < nb; ++i) {
                float* row = dots.data() + i * nc;
#pragma omp simd
                for (std::size_t c = 0; c < nc; ++c) {
                    row[c] = cn[c] - 2.f * row[c];
                }
                const idx_t arg = detail::argmin(row, nc);
                if (row[arg] < best[i]) {
                    best[i] = row[arg];
                    labels[b0 + i] = static_cast<idx_t>(c0 + arg);
                }
            }
        }
        if (distances) {
            for (std::size_t i = 0; i < nb; ++i) {
                distances[b0 + i] =
                    l2sqr(x + (b0 + i) * d, centroids + labels[b0 + i] * d, d);
            }
        }
    }
}

} // namespace lnc
