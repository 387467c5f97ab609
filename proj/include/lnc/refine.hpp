#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <numeric>
#include <ostream>
#include <span>
#include <vector>

#include "lnc/common.hpp"
#include "lnc/dataset.hpp"
#include "lnc/distance.hpp"
#include "lnc/graph.hpp"
#include "lnc/io.hpp"
#include "lnc/kmeans.hpp"

namespace lnc {

// A design matrix G(x) is (k+1) x d, row-major: row 0 is the reconstruction
// of x, rows 1..k the reconstructions of its neighbors. An estimate of x is
// beta^T G(x).

/// Row indices of G(x) for node `id`: the node itself, then its base-level
/// links ordered by increasing distance between reconstructions (ties by id),
/// truncated to k. Missing rows repeat the node itself.
template <typename Recon>
void design_ids(const LayeredGraph& graph, idx_t id, std::size_t k, Recon&& recon_of, std::size_t dim,
                idx_t* out) {
    out[0] = id;
    const auto links = graph.links(id, 0);
    const float* self = recon_of(id);
    std::vector<Neighbor> nb;
    nb.reserve(links.size());
    for (idx_t j : links) {
        nb.push_back({l2sqr(self, recon_of(j), dim), j});
    }
    std::sort(nb.begin(), nb.end());
    for (std::size_t i = 0; i < k; ++i) {
        out[i + 1] = i < nb.size() ? nb[i].id : id;
    }
}

/// out = beta^T G for a row-major (k+1) x dim design.
inline void combine_rows(const float* beta, const float* G, std::size_t rows, std::size_t dim, float* out) {
    std::fill_n(out, dim, 0.f);
    for (std::size_t r = 0; r < rows; ++r) {
        const float b = beta[r];
        const float* g = G + r * dim;
        for (std::size_t s = 0; s < dim; ++s) {
            out[s] += b * g[s];
        }
    }
}

struct SharedBeta {
    std::vector<float> weights; // k + 1
    /// Set when the design was identically zero and e0 was returned.
    bool degenerate = false;

    std::size_t k() const { return weights.empty() ? 0 : weights.size() - 1; }
    static SharedBeta identity(std::size_t k) {
        SharedBeta b;
        b.weights.assign(k + 1, 0.f);
        b.weights[0] = 1.f;
        return b;
    }
};

/// Accumulates the normal equations of sum_i ||x_i - G_i^T beta||^2 in double.
class LeastSquaresAccumulator {
public:
    explicit LeastSquaresAccumulator(std::size_t rows)
        : rows_(rows), gram_(Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(rows))),
          rhs_(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(rows))) {}

    /// Adds one (target, design) pair restricted to `cols` columns starting at `col0`.
    void add(const float* x, const float* G, std::size_t dim, std::size_t col0, std::size_t cols) {
        for (std::size_t a = 0; a < rows_; ++a) {
            const float* ga = G + a * dim + col0;
            double r = 0.0;
            for (std::size_t s = 0; s < cols; ++s) {
                r += static_cast<double>(ga[s]) * x[col0 + s];
            }
            rhs_[static_cast<Eigen::Index>(a)] += r;
            for (std::size_t b = a; b < rows_; ++b) {
                const float* gb = G + b * dim + col0;
                double v = 0.0;
                for (std::size_t s = 0; s < cols; ++s) {
                    v += static_cast<double>(ga[s]) * gb[s];
                }
                gram_(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) += v;
            }
        }
        ++count_;
    }

    void add(const float* x, const float* G, std::size_t dim) { add(x, G, dim, 0, dim); }

    std::size_t count() const { return count_; }

    /// Ridge-damped solve with lambda = 1e-6 * trace / (k + 1). A zero design
    /// yields e0 with the degeneracy flag set.
    SharedBeta solve() const {
        const Eigen::Index n = static_cast<Eigen::Index>(rows_);
        Eigen::MatrixXd A = gram_.selfadjointView<Eigen::Upper>();
        const double trace = A.trace();
        if (!(trace > 0.0)) {
            auto b = SharedBeta::identity(rows_ - 1);
            b.degenerate = true;
            return b;
        }
        A.diagonal().array() += 1e-6 * trace / static_cast<double>(rows_);
        const Eigen::VectorXd beta = A.ldlt().solve(rhs_);
        SharedBeta out;
        out.weights.resize(rows_);
        for (Eigen::Index i = 0; i < n; ++i) {
            out.weights[static_cast<std::size_t>(i)] = static_cast<float>(beta[i]);
        }
        return out;
    }

private:
    std::size_t rows_;
    Eigen::MatrixXd gram_; // upper triangle
    Eigen::VectorXd rhs_;
    std::size_t count_ = 0;
};

/// beta minimizing sum_i ||x_i - G_i^T beta||^2. `targets` is n x d and
/// `designs` n stacked (k+1) x d blocks.
inline SharedBeta solve_least_squares(std::span<const float> targets, std::span<const float> designs,
                                      std::size_t n, std::size_t d, std::size_t k) {
    detail::require(targets.size() == n * d && designs.size() == n * (k + 1) * d,
                    "least squares: inconsistent input sizes");
    detail::require(n * d >= k + 1, "least squares: need n*d >= k+1 observations");
    LeastSquaresAccumulator acc(k + 1);
    for (std::size_t i = 0; i < n; ++i) {
        acc.add(targets.data() + i * d, designs.data() + i * (k + 1) * d, d);
    }
    return acc.solve();
}

/// sum_i ||x_i - G_i^T beta||^2 in double.
inline double least_squares_loss(std::span<const float> targets, std::span<const float> designs, std::size_t n,
                                 std::size_t d, std::span<const double> beta) {
    const std::size_t rows = beta.size();
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const float* x = targets.data() + i * d;
        const float* G = designs.data() + i * rows * d;
        for (std::size_t s = 0; s < d; ++s) {
            double e = x[s];
            for (std::size_t r = 0; r < rows; ++r) {
                e -= beta[r] * G[r * d + s];
            }
            loss += e * e;
        }
    }
    return loss;
}

// ---------------------------------------------------------------------------
// Regression codebook

struct RegressionTrainOptions {
    std::size_t M = 8;
    std::size_t B = 256;
    std::size_t iters = 10;
    std::size_t kmeans_iters = 10;
    std::uint64_t seed = 1234;
};

/// M sub-codebooks of B weight vectors each. Sub-space j covers columns
/// [j * sub_dim, (j + 1) * sub_dim) of the vectors.
class RegressionCodebook {
public:
    RegressionCodebook() = default;
    RegressionCodebook(std::size_t M, std::size_t B, std::size_t k, std::size_t dim)
        : M_(M), B_(B), k_(k), sub_dim_(M ? dim / M : 0), betas_(M * B * (k + 1), 0.f) {
        detail::require(M > 0 && dim % M == 0, "regression codebook: dim ", dim, " not divisible by M=", M);
        detail::require(B >= 1 && B <= 256, "regression codebook: B must be in [1,256]");
    }

    std::size_t M() const { return M_; }
    std::size_t B() const { return B_; }
    std::size_t k() const { return k_; }
    std::size_t sub_dim() const { return sub_dim_; }
    std::size_t dim() const { return M_ * sub_dim_; }
    const float* beta(std::size_t j, std::size_t b) const { return betas_.data() + (j * B_ + b) * (k_ + 1); }
    float* beta(std::size_t j, std::size_t b) { return betas_.data() + (j * B_ + b) * (k_ + 1); }
    const std::vector<float>& betas() const { return betas_; }

    /// Squared error of sub-space j of x under weight vector b.
    double term(const float* x, const float* G, std::size_t j, std::size_t b) const {
        return term_with(x, G, j, beta(j, b));
    }

    double term_with(const float* x, const float* G, std::size_t j, const float* w) const {
        const std::size_t d = dim();
        const std::size_t c0 = j * sub_dim_;
        double e[256];
        double* err = e;
        std::vector<double> big;
        if (sub_dim_ > 256) {
            big.resize(sub_dim_);
            err = big.data();
        }
        for (std::size_t s = 0; s < sub_dim_; ++s) {
            err[s] = x[c0 + s];
        }
        for (std::size_t r = 0; r <= k_; ++r) {
            const double wr = w[r];
            const float* g = G + r * d + c0;
            for (std::size_t s = 0; s < sub_dim_; ++s) {
                err[s] -= wr * g[s];
            }
        }
        double t = 0.0;
        for (std::size_t s = 0; s < sub_dim_; ++s) {
            t += err[s] * err[s];
        }
        return t;
    }

    /// Best entry for each sub-space (ties to the lowest index).
    void encode(const float* x, const float* G, std::uint8_t* code) const {
        for (std::size_t j = 0; j < M_; ++j) {
            double best = std::numeric_limits<double>::infinity();
            std::size_t arg = 0;
            for (std::size_t b = 0; b < B_; ++b) {
                const double t = term(x, G, j, b);
                if (t < best) {
                    best = t;
                    arg = b;
                }
            }
            code[j] = static_cast<std::uint8_t>(arg);
        }
    }

    /// Block-wise estimate [beta^1(x)^T G^1(x), ..., beta^M(x)^T G^M(x)].
    void reconstruct(const std::uint8_t* code, const float* G, float* out) const {
        const std::size_t d = dim();
        for (std::size_t j = 0; j < M_; ++j) {
            detail::require(code[j] < B_, "regression code entry out of range");
            const float* w = beta(j, code[j]);
            float* o = out + j * sub_dim_;
            std::fill_n(o, sub_dim_, 0.f);
            for (std::size_t r = 0; r <= k_; ++r) {
                const float* g = G + r * d + j * sub_dim_;
                for (std::size_t s = 0; s < sub_dim_; ++s) {
                    o[s] += w[r] * g[s];
                }
            }
        }
    }

    void save(std::ostream& os) const {
        BinaryWriter w(os);
        w.magic("LCR1");
        w.i32(static_cast<std::int64_t>(M_));
        w.i32(static_cast<std::int64_t>(B_));
        w.i32(static_cast<std::int64_t>(k_));
        w.i32(static_cast<std::int64_t>(sub_dim_));
        w.array(std::span<const float>(betas_));
        w.check();
    }

    static RegressionCodebook load(std::istream& is) {
        BinaryReader r(is);
        r.expect_magic("LCR1");
        const auto M = r.i32();
        const auto B = r.i32();
        const auto k = r.i32();
        const auto sd = r.i32();
        if (M <= 0 || B <= 0 || B > 256 || k < 0 || sd <= 0) {
            throw FormatError("corrupt regression codebook header");
        }
        RegressionCodebook book(static_cast<std::size_t>(M), static_cast<std::size_t>(B), static_cast<std::size_t>(k),
                                static_cast<std::size_t>(M) * static_cast<std::size_t>(sd));
        auto betas = r.array<float>();
        if (betas.size() != book.betas_.size()) {
            throw FormatError("regression codebook block has wrong size");
        }
        book.betas_ = std::move(betas);
        return book;
    }

private:
    friend class RegressionTrainer;

    std::size_t M_ = 0, B_ = 0, k_ = 0, sub_dim_ = 0;
    std::vector<float> betas_;
};

/// Training data for a regression codebook: n targets (n x d) and their
/// designs, given by (k+1) row ids into a reconstruction table.
struct RegressionSample {
    const float* targets = nullptr;
    std::size_t n = 0;
    std::size_t dim = 0;
    std::size_t k = 0;
    const float* recon = nullptr;    // reconstruction table, one row per id
    const idx_t* design = nullptr;   // n x (k+1) row ids

    void gather(std::size_t i, float* G) const {
        for (std::size_t r = 0; r <= k; ++r) {
            std::copy_n(recon + static_cast<std::size_t>(design[i * (k + 1) + r]) * dim, dim, G + r * dim);
        }
    }
};

struct RegressionTrainResult {
    RegressionCodebook book;
    /// L'(B) after the initial assignment and after each EM round.
    std::vector<double> loss;
    std::vector<std::uint8_t> codes; // n x M assignments of the sample
};

/// EM training of the product regression codebook. Each sub-space starts from
/// k-means over per-vector least-squares weights, then alternates an
/// assignment step (a vector moves only to a strictly better entry) and a
/// closed-form update per entry (kept only if it does not increase that
/// entry's loss). Loss sums use fixed point so they are exactly monotone.
class RegressionTrainer {
public:
    static RegressionTrainResult train(const RegressionSample& s, const RegressionTrainOptions& opt) {
        detail::require(s.n > 0, "regression training needs samples");
        RegressionTrainResult res{RegressionCodebook(opt.M, opt.B, s.k, s.dim), {}, {}};
        RegressionCodebook& book = res.book;
        const std::size_t M = opt.M;
        const std::size_t B = opt.B;
        const std::size_t rows = s.k + 1;
        const std::size_t sd = book.sub_dim();
        detail::require(s.n >= B, "regression training: ", s.n, " samples for B=", B, " entries");

        std::vector<std::uint8_t>& codes = res.codes;
        codes.assign(s.n * M, 0);
        std::vector<double> terms(s.n * M, 0.0);

        // per-vector weights and k-means initialization, one sub-space at a time
        std::vector<float> local(s.n * rows);
        for (std::size_t j = 0; j < M; ++j) {
            parallel_for(s.n, [&](std::size_t i) {
                std::vector<float> G(rows * s.dim);
                s.gather(i, G.data());
                LeastSquaresAccumulator acc(rows);
                acc.add(s.targets + i * s.dim, G.data(), s.dim, j * sd, sd);
                const auto b = acc.solve();
                std::copy(b.weights.begin(), b.weights.end(), local.begin() + static_cast<std::ptrdiff_t>(i * rows));
            });
            KMeansOptions ko;
            ko.iters = opt.kmeans_iters;
            ko.seed = derive_seed(opt.seed, j);
            auto km = kmeans_train(local.data(), s.n, rows, B, ko);
            std::copy(km.codebook.centroids.begin(), km.codebook.centroids.end(), book.beta(j, 0));
        }
        if (opt.iters == 0) {
            assign_all(s, book, codes, terms, true);
            res.loss.push_back(fixed_sum(terms));
            return res;
        }

        assign_all(s, book, codes, terms, true);
        res.loss.push_back(fixed_sum(terms));
        for (std::size_t it = 0; it < opt.iters; ++it) {
            assign_all(s, book, codes, terms, false);
            reseed_empty(s, book, codes, terms);
            update(s, book, codes, terms);
            res.loss.push_back(fixed_sum(terms));
        }
        return res;
    }

    /// Fixed-point sum (2^-32 resolution) of non-negative terms. Each term is
    /// floored first, so lowering any term never raises the sum.
    static std::int64_t to_fixed(double t) { return static_cast<std::int64_t>(std::floor(t * 4294967296.0)); }

    static double fixed_sum(const std::vector<double>& terms) {
        __int128 acc = 0;
        for (double t : terms) {
            acc += to_fixed(t);
        }
        return static_cast<double>(acc) / 4294967296.0;
    }

private:
    // full: argmin over entries; otherwise move only on strict improvement
    static void assign_all(const RegressionSample& s, const RegressionCodebook& book, std::vector<std::uint8_t>& codes,
                           std::vector<double>& terms, bool full) {
        const std::size_t M = book.M();
        const std::size_t rows = s.k + 1;
        parallel_for(s.n, [&](std::size_t i) {
            std::vector<float> G(rows * s.dim);
            s.gather(i, G.data());
            const float* x = s.targets + i * s.dim;
            for (std::size_t j = 0; j < M; ++j) {
                std::size_t arg = codes[i * M + j];
                double best = full ? std::numeric_limits<double>::infinity() : book.term(x, G.data(), j, arg);
                for (std::size_t b = 0; b < book.B(); ++b) {
                    const double t = book.term(x, G.data(), j, b);
                    if (t < best) {
                        best = t;
                        arg = b;
                    }
                }
                codes[i * M + j] = static_cast<std::uint8_t>(arg);
                terms[i * M + j] = best;
            }
        });
    }

    // An unused entry takes the per-vector weights of the worst-reconstructed
    // vector of that sub-space, which then moves to it if that is better.
    static void reseed_empty(const RegressionSample& s, RegressionCodebook& book, std::vector<std::uint8_t>& codes,
                             std::vector<double>& terms) {
        const std::size_t M = book.M();
        const std::size_t B = book.B();
        const std::size_t rows = s.k + 1;
        const std::size_t sd = book.sub_dim();
        std::vector<float> G(rows * s.dim);
        for (std::size_t j = 0; j < M; ++j) {
            std::vector<std::size_t> counts(B, 0);
            for (std::size_t i = 0; i < s.n; ++i) {
                ++counts[codes[i * M + j]];
            }
            std::vector<std::size_t> order;
            for (std::size_t b = 0; b < B; ++b) {
                if (counts[b] != 0) {
                    continue;
                }
                if (order.empty()) {
                    order.resize(s.n);
                    std::iota(order.begin(), order.end(), 0);
                    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t c) {
                        return terms[a * M + j] > terms[c * M + j];
                    });
                }
                // next worst vector not yet used for reseeding
                std::size_t pick = s.n;
                for (std::size_t t = 0; t < order.size(); ++t) {
                    if (order[t] != s.n) {
                        pick = order[t];
                        order[t] = s.n;
                        break;
                    }
                }
                if (pick == s.n) {
                    break;
                }
                s.gather(pick, G.data());
                LeastSquaresAccumulator acc(rows);
                acc.add(s.targets + pick * s.dim, G.data(), s.dim, j * sd, sd);
                const auto w = acc.solve();
                std::copy(w.weights.begin(), w.weights.end(), book.beta(j, b));
                const double t = book.term(s.targets + pick * s.dim, G.data(), j, b);
                if (t < terms[pick * M + j]) {
                    --counts[codes[pick * M + j]];
                    codes[pick * M + j] = static_cast<std::uint8_t>(b);
                    terms[pick * M + j] = t;
                    counts[b] = 1;
                }
            }
        }
    }

    static void update(const RegressionSample& s, RegressionCodebook& book, const std::vector<std::uint8_t>& codes,
                       std::vector<double>& terms) {
        const std::size_t M = book.M();
        const std::size_t B = book.B();
        const std::size_t rows = s.k + 1;
        const std::size_t sd = book.sub_dim();
        std::vector<LeastSquaresAccumulator> acc;
        acc.reserve(M * B);
        for (std::size_t e = 0; e < M * B; ++e) {
            acc.emplace_back(rows);
        }
        std::vector<float> G(rows * s.dim);
        for (std::size_t i = 0; i < s.n; ++i) {
            s.gather(i, G.data());
            for (std::size_t j = 0; j < M; ++j) {
                acc[j * B + codes[i * M + j]].add(s.targets + i * s.dim, G.data(), s.dim, j * sd, sd);
            }
        }
        // candidate weights, then per-entry old and new fixed-point losses
        std::vector<float> cand(M * B * rows);
        for (std::size_t e = 0; e < M * B; ++e) {
            if (acc[e].count() == 0) {
                std::copy_n(book.beta(e / B, e % B), rows, cand.data() + e * rows);
                continue;
            }
            const auto w = acc[e].solve();
            std::copy(w.weights.begin(), w.weights.end(), cand.begin() + static_cast<std::ptrdiff_t>(e * rows));
        }
        std::vector<double> new_terms(s.n * M);
        parallel_for(s.n, [&](std::size_t i) {
            std::vector<float> Gi(rows * s.dim);
            s.gather(i, Gi.data());
            for (std::size_t j = 0; j < M; ++j) {
                const std::size_t e = j * B + codes[i * M + j];
                new_terms[i * M + j] = book.term_with(s.targets + i * s.dim, Gi.data(), j, cand.data() + e * rows);
            }
        });
        std::vector<__int128> old_sum(M * B, 0), new_sum(M * B, 0);
        for (std::size_t i = 0; i < s.n; ++i) {
            for (std::size_t j = 0; j < M; ++j) {
                const std::size_t e = j * B + codes[i * M + j];
                old_sum[e] += to_fixed(terms[i * M + j]);
                new_sum[e] += to_fixed(new_terms[i * M + j]);
            }
        }
        std::vector<char> accept(M * B, 0);
        for (std::size_t e = 0; e < M * B; ++e) {
            if (acc[e].count() > 0 && new_sum[e] <= old_sum[e]) {
                accept[e] = 1;
                std::copy_n(cand.data() + e * rows, rows, book.beta(e / B, e % B));
            }
        }
        for (std::size_t i = 0; i < s.n; ++i) {
            for (std::size_t j = 0; j < M; ++j) {
                if (accept[j * B + codes[i * M + j]]) {
                    terms[i * M + j] = new_terms[i * M + j];
                }
            }
        }
    }
};

inline RegressionTrainResult train_regression_codebook(const RegressionSample& sample,
                                                       const RegressionTrainOptions& opt = {}) {
    return RegressionTrainer::train(sample, opt);
}

// ---------------------------------------------------------------------------
// Estimators over exact neighbors

struct EstimatorErrors {
    std::vector<float> centroid;       // q(x), codebook trained on the evaluated set
    std::vector<float> centroid_star;  // q(x)*, codebook trained on a distinct set
    std::vector<float> nearest;        // n1(x)
    std::vector<float> shared;         // x-bar: shared weights over N(x)
    std::vector<float> per_vector;     // x-hat: per-vector least squares over N(x)
    SharedBeta shared_beta;
};

/// Squared reconstruction errors of every estimator for each vector of `set`.
/// `knn` lists each vector's exact neighbors excluding itself (depth >= k).
/// Either codebook may be empty, in which case its column is left empty.
inline EstimatorErrors estimator_suite(const VectorSet& set, const GroundTruth& knn, std::size_t k,
                                       const KMeansCodebook& codebook, const KMeansCodebook& codebook_star) {
    detail::require(knn.query_count == set.size(), "estimators: neighbor table does not cover the set");
    detail::require(knn.depth >= k && k >= 1, "estimators: need ", k, " neighbors per vector, have ", knn.depth);
    const std::size_t n = set.size();
    const std::size_t d = set.dim();
    EstimatorErrors out;

    auto quantize_errors = [&](const KMeansCodebook& cb, std::vector<float>& err) {
        if (cb.k == 0) {
            return;
        }
        err.resize(n);
        std::vector<idx_t> labels(n);
        assign_nearest(set.data().data(), n, cb.centroids.data(), cb.k, d, labels.data(), err.data());
    };
    quantize_errors(codebook, out.centroid);
    quantize_errors(codebook_star, out.centroid_star);

    out.nearest.resize(n);
    LeastSquaresAccumulator acc(k);
    std::vector<float> G(k * d);
    for (std::size_t i = 0; i < n; ++i) {
        const auto nb = knn.row(i);
        for (std::size_t r = 0; r < k; ++r) {
            std::copy_n(set.ptr(nb[r]), d, G.data() + r * d);
        }
        out.nearest[i] = l2sqr(set.ptr(i), G.data(), d);
        acc.add(set.ptr(i), G.data(), d);
    }
    out.shared_beta = acc.solve();

    out.shared.resize(n);
    out.per_vector.resize(n);
    parallel_for(n, [&](std::size_t i) {
        std::vector<float> Gi(k * d), est(d);
        const auto nb = knn.row(i);
        for (std::size_t r = 0; r < k; ++r) {
            std::copy_n(set.ptr(nb[r]), d, Gi.data() + r * d);
        }
        combine_rows(out.shared_beta.weights.data(), Gi.data(), k, d, est.data());
        out.shared[i] = l2sqr(set.ptr(i), est.data(), d);
        // per-vector optimum through a pivoted QR (no damping)
        Eigen::MatrixXd A(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(k));
        Eigen::VectorXd b(static_cast<Eigen::Index>(d));
        for (std::size_t s = 0; s < d; ++s) {
            b[static_cast<Eigen::Index>(s)] = set.ptr(i)[s];
            for (std::size_t r = 0; r < k; ++r) {
                A(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(r)) = Gi[r * d + s];
            }
        }
        const Eigen::VectorXd w = A.colPivHouseholderQr().solve(b);
        out.per_vector[i] = static_cast<float>((A * w - b).squaredNorm());
    });
    return out;
}

} // namespace lnc
