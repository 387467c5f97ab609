#pragma once

#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <vector>

#include "lnc/common.hpp"
#include "lnc/distance.hpp"
#include "lnc/io.hpp"
#include "lnc/kmeans.hpp"

namespace lnc {

// Sub-codes are packed little-endian in bit order: sub-code j occupies bits
// [j*bits, (j+1)*bits) of the code, bit 0 being the LSB of byte 0.
class BitPacker {
public:
    BitPacker(std::uint8_t* code, std::size_t bits) : code_(code), bits_(bits) {}

    void put(std::size_t j, std::uint32_t value) {
        if (bits_ == 8) {
            code_[j] = static_cast<std::uint8_t>(value);
            return;
        }
        std::size_t bit = j * bits_;
        for (std::size_t b = 0; b < bits_; ++b, ++bit) {
            const auto mask = static_cast<std::uint8_t>(1u << (bit & 7));
            if ((value >> b) & 1u) {
                code_[bit >> 3] |= mask;
            } else {
                code_[bit >> 3] &= static_cast<std::uint8_t>(~mask);
            }
        }
    }

private:
    std::uint8_t* code_;
    std::size_t bits_;
};

inline std::uint32_t unpack_subcode(const std::uint8_t* code, std::size_t bits, std::size_t j) {
    if (bits == 8) {
        return code[j];
    }
    const std::size_t bit = j * bits;
    // read up to 4 bytes covering [bit, bit + bits)
    std::uint64_t window = 0;
    const std::size_t first = bit >> 3;
    const std::size_t last = (bit + bits - 1) >> 3;
    for (std::size_t b = first; b <= last; ++b) {
        window |= static_cast<std::uint64_t>(code[b]) << (8 * (b - first));
    }
    return static_cast<std::uint32_t>((window >> (bit & 7)) & ((1ULL << bits) - 1));
}

struct PQTrainOptions {
    std::size_t iters = 25;
    std::uint64_t seed = 1234;
    std::size_t max_points_per_centroid = 256;
    /// Train 2^16-entry sub-codebooks directly instead of two-stage.
    bool exact_large = false;
    /// Keep a zero sub-centroid in every sub-codebook (residual quantizers).
    bool pin_zero = false;
};

/// m sub-quantizers with 2^bits centroids each over contiguous sub-vectors.
class ProductQuantizer {
public:
    ProductQuantizer() = default;

    ProductQuantizer(std::size_t dim, std::size_t m, std::size_t bits) : dim_(dim), m_(m), bits_(bits) {
        detail::require(m > 0 && dim > 0, "PQ: dim and m must be positive");
        detail::require(dim % m == 0, "PQ: dim ", dim, " is not divisible by m=", m);
        detail::require(bits >= 1 && bits <= 16, "PQ: bits must be in [1,16], got ", bits);
        sub_dim_ = dim / m;
        ksub_ = std::size_t{1} << bits;
        centroids_.assign(m_ * ksub_ * sub_dim_, 0.f);
    }

    std::size_t dim() const { return dim_; }
    std::size_t m() const { return m_; }
    std::size_t bits() const { return bits_; }
    std::size_t sub_dim() const { return sub_dim_; }
    std::size_t ksub() const { return ksub_; }
    std::size_t code_size() const { return (m_ * bits_ + 7) / 8; }

    const float* centroid(std::size_t j, std::size_t c) const {
        return centroids_.data() + (j * ksub_ + c) * sub_dim_;
    }
    float* centroid(std::size_t j, std::size_t c) { return centroids_.data() + (j * ksub_ + c) * sub_dim_; }
    std::vector<float>& centroids() { return centroids_; }
    const std::vector<float>& centroids() const { return centroids_; }

    /// Independent k-means per sub-space.
    void train(const float* x, std::size_t n, const PQTrainOptions& opt = {}) {
        detail::require(n >= ksub_, "PQ: need at least ", ksub_, " training points, got ", n);
        std::vector<float> sub(n * sub_dim_);
        for (std::size_t j = 0; j < m_; ++j) {
            extract_subspace(x, n, j, sub.data());
            KMeansOptions ko;
            ko.iters = opt.iters;
            ko.seed = derive_seed(opt.seed, j);
            ko.max_points_per_centroid = opt.max_points_per_centroid;
            ko.pin_zero = opt.pin_zero;
            KMeansCodebook cb;
            if (bits_ >= 16 && !opt.exact_large) {
                cb = kmeans_train_hierarchical(sub.data(), n, sub_dim_, ksub_, ko);
            } else {
                cb = kmeans_train(sub.data(), n, sub_dim_, ksub_, ko).codebook;
            }
            std::copy(cb.centroids.begin(), cb.centroids.end(), centroid(j, 0));
        }
    }

    /// Lloyd iterations from the current codebooks (warm start). Returns the
    /// mean squared reconstruction error of x under the final codebooks.
    double refine(const float* x, std::size_t n, std::size_t iters, bool pin_zero = false) {
        std::vector<float> sub(n * sub_dim_);
        double error = 0.0;
        for (std::size_t j = 0; j < m_; ++j) {
            extract_subspace(x, n, j, sub.data());
            KMeansCodebook cb{ksub_, sub_dim_,
                              std::vector<float>(centroid(j, 0), centroid(j, 0) + ksub_ * sub_dim_)};
            error += kmeans_refine(sub.data(), n, cb, iters, pin_zero).back();
            std::copy(cb.centroids.begin(), cb.centroids.end(), centroid(j, 0));
        }
        return error;
    }

    void encode(const float* x, std::uint8_t* code) const { encode_batch(x, 1, code); }

    void encode_batch(const float* x, std::size_t n, std::uint8_t* codes) const {
        const std::size_t cs = code_size();
        std::memset(codes, 0, n * cs);
        constexpr std::size_t block = 4096;
        std::vector<float> sub;
        std::vector<idx_t> labels;
        for (std::size_t b0 = 0; b0 < n; b0 += block) {
            const std::size_t nb = std::min(block, n - b0);
            sub.resize(nb * sub_dim_);
            labels.resize(nb);
            for (std::size_t j = 0; j < m_; ++j) {
                extract_subspace(x + b0 * dim_, nb, j, sub.data());
                assign_nearest(sub.data(), nb, centroid(j, 0), ksub_, sub_dim_, labels.data(), nullptr);
                for (std::size_t i = 0; i < nb; ++i) {
                    BitPacker(codes + (b0 + i) * cs, bits_).put(j, labels[i]);
                }
            }
        }
    }

    std::uint32_t subcode(const std::uint8_t* code, std::size_t j) const { return unpack_subcode(code, bits_, j); }

    void decode(const std::uint8_t* code, float* x) const {
        for (std::size_t j = 0; j < m_; ++j) {
            std::copy_n(centroid(j, subcode(code, j)), sub_dim_, x + j * sub_dim_);
        }
    }

    /// table[j * ksub + c] = ||x_j - centroid(j, c)||^2
    void compute_distance_table(const float* x, float* table) const {
        for (std::size_t j = 0; j < m_; ++j) {
            const float* xj = x + j * sub_dim_;
            for (std::size_t c = 0; c < ksub_; ++c) {
                table[j * ksub_ + c] = l2sqr(xj, centroid(j, c), sub_dim_);
            }
        }
    }

    /// table[j * ksub + c] = <x_j, centroid(j, c)>
    void compute_inner_product_table(const float* x, float* table) const {
        for (std::size_t j = 0; j < m_; ++j) {
            const float* xj = x + j * sub_dim_;
            for (std::size_t c = 0; c < ksub_; ++c) {
                table[j * ksub_ + c] = inner_product(xj, centroid(j, c), sub_dim_);
            }
        }
    }

    float lookup(const float* table, const std::uint8_t* code) const {
        float s = 0.f;
        if (bits_ == 8) {
            for (std::size_t j = 0; j < m_; ++j) {
                s += table[j * 256 + code[j]];
            }
        } else {
            for (std::size_t j = 0; j < m_; ++j) {
                s += table[j * ksub_ + subcode(code, j)];
            }
        }
        return s;
    }

    void save(std::ostream& os) const {
        BinaryWriter w(os);
        w.magic("LPQ1");
        w.i32(static_cast<std::int64_t>(dim_));
        w.i32(static_cast<std::int64_t>(m_));
        w.i32(static_cast<std::int64_t>(bits_));
        w.array(std::span<const float>(centroids_));
        w.check();
    }

    static ProductQuantizer load(std::istream& is) {
        BinaryReader r(is);
        r.expect_magic("LPQ1");
        const auto dim = r.i32();
        const auto m = r.i32();
        const auto bits = r.i32();
        if (dim <= 0 || m <= 0 || bits <= 0 || bits > 16) {
            throw FormatError("corrupt PQ header");
        }
        ProductQuantizer pq(static_cast<std::size_t>(dim), static_cast<std::size_t>(m), static_cast<std::size_t>(bits));
        auto c = r.array<float>();
        if (c.size() != pq.centroids_.size()) {
            throw FormatError("PQ centroid block has wrong size");
        }
        pq.centroids_ = std::move(c);
        return pq;
    }

private:
    void extract_subspace(const float* x, std::size_t n, std::size_t j, float* out) const {
        for (std::size_t i = 0; i < n; ++i) {
            std::copy_n(x + i * dim_ + j * sub_dim_, sub_dim_, out + i * sub_dim_);
        }
    }

    std::size_t dim_ = 0, m_ = 0, bits_ = 0, sub_dim_ = 0, ksub_ = 0;
    std::vector<float> centroids_;
};

} // namespace lnc
