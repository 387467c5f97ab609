#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <numeric>
#include <random>
#include <vector>

#include "lnc/common.hpp"
#include "lnc/distance.hpp"
#include "lnc/pq.hpp"

namespace lnc {

struct OpqOptions {
    std::size_t outer_iters = 20;
    std::size_t pq_iters = 25;        // initial PQ training
    std::size_t pq_refine_iters = 4;  // Lloyd iterations per outer iteration
    std::size_t max_train_points = 65536;
    std::uint64_t seed = 1234;
    bool pin_zero = false;
    /// Start from a random orthogonal matrix instead of the identity. Needed
    /// when the input was zero-padded: from the identity the padded
    /// coordinates never receive any energy.
    bool random_init = false;
};

struct OpqResult {
    RowMatrix rotation; // dim x dim, y = rotation * x
    ProductQuantizer pq;
    /// Mean squared reconstruction error after initialization and after each
    /// outer iteration.
    std::vector<double> error;
};

/// Haar-distributed random orthogonal matrix (QR of a Gaussian matrix with
/// the signs of R's diagonal folded into Q).
inline RowMatrix random_orthogonal(std::size_t d, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const auto n = static_cast<Eigen::Index>(d);
    Eigen::MatrixXd g(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < n; ++j) {
            g(i, j) = gauss(rng);
        }
    }
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    Eigen::MatrixXd q = qr.householderQ();
    const Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
    for (Eigen::Index j = 0; j < n; ++j) {
        if (r(j, j) < 0) {
            q.col(j) *= -1.0;
        }
    }
    return q.cast<float>();
}

/// Rotated copy: out = x * R^T, both row-major (n x d).
inline void apply_rotation(const RowMatrix& rotation, const float* x, std::size_t n, float* out) {
    const auto d = rotation.rows();
    ConstRowMap xm(x, static_cast<Eigen::Index>(n), d);
    RowMap om(out, static_cast<Eigen::Index>(n), d);
    om.noalias() = xm * rotation.transpose();
}

inline double pq_mean_error(const ProductQuantizer& pq, const float* x, std::size_t n) {
    std::vector<std::uint8_t> codes(n * pq.code_size());
    pq.encode_batch(x, n, codes.data());
    std::vector<float> rec(pq.dim());
    double err = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        pq.decode(codes.data() + i * pq.code_size(), rec.data());
        err += l2sqr(x + i * pq.dim(), rec.data(), pq.dim());
    }
    return n ? err / static_cast<double>(n) : 0.0;
}

/// Alternating minimization of sum ||R x - decode(encode(R x))||^2: with R
/// fixed the sub-codebooks get Lloyd updates; with the codes fixed R is the
/// orthogonal Procrustes solution U V^T of svd(sum rec_i x_i^T).
/// `x` must already have a dimension divisible by m.
inline OpqResult opq_train(const float* x, std::size_t n, std::size_t d, std::size_t m, std::size_t bits,
                           const OpqOptions& opt = {}) {
    detail::require(d % m == 0, "OPQ: dim ", d, " not divisible by m=", m);
    detail::require(n >= (std::size_t{1} << bits), "OPQ: need at least ", std::size_t{1} << bits,
                    " training points, got ", n);
    std::vector<float> sampled;
    if (n > opt.max_train_points) {
        std::mt19937_64 rng(derive_seed(opt.seed, 99));
        std::vector<idx_t> perm(n);
        std::iota(perm.begin(), perm.end(), 0);
        for (std::size_t i = 0; i < opt.max_train_points; ++i) {
            std::swap(perm[i], perm[std::uniform_int_distribution<std::size_t>(i, n - 1)(rng)]);
        }
        std::sort(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(opt.max_train_points));
        sampled.resize(opt.max_train_points * d);
        for (std::size_t i = 0; i < opt.max_train_points; ++i) {
            std::copy_n(x + static_cast<std::size_t>(perm[i]) * d, d, sampled.data() + i * d);
        }
        x = sampled.data();
        n = opt.max_train_points;
    }

    OpqResult res;
    res.rotation = RowMatrix::Identity(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
    std::vector<float> rotated(x, x + n * d);
    if (opt.random_init && opt.outer_iters > 0) {
        res.rotation = random_orthogonal(d, derive_seed(opt.seed, 7));
        apply_rotation(res.rotation, x, n, rotated.data());
    }
    res.pq = ProductQuantizer(d, m, bits);
    PQTrainOptions po;
    po.iters = opt.pq_iters;
    po.seed = opt.seed;
    po.pin_zero = opt.pin_zero;
    res.pq.train(rotated.data(), n, po);
    res.error.push_back(pq_mean_error(res.pq, rotated.data(), n));
    if (opt.outer_iters == 0) {
        return res;
    }

    std::vector<std::uint8_t> codes(n * res.pq.code_size());
    RowMatrix rec(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
    ConstRowMap xm(x, static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
    for (std::size_t it = 0; it < opt.outer_iters; ++it) {
        res.pq.encode_batch(rotated.data(), n, codes.data());
        for (std::size_t i = 0; i < n; ++i) {
            res.pq.decode(codes.data() + i * res.pq.code_size(), rec.data() + i * d);
        }
        const Eigen::MatrixXd cross = (rec.transpose() * xm).cast<double>();
        Eigen::JacobiSVD<Eigen::MatrixXd> svd(cross, Eigen::ComputeFullU | Eigen::ComputeFullV);
        res.rotation = (svd.matrixU() * svd.matrixV().transpose()).cast<float>();
        apply_rotation(res.rotation, x, n, rotated.data());
        res.error.push_back(res.pq.refine(rotated.data(), n, opt.pq_refine_iters, opt.pin_zero));
    }
    return res;
}

} // namespace lnc
