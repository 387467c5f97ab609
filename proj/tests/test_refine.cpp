#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "lnc/graph.hpp"
#include "lnc/kmeans.hpp"
#include "lnc/refine.hpp"
#include "test_util.hpp"

using namespace lnc;

namespace {

struct Problem {
    std::size_t n, d, k;
    std::vector<float> x, G;
};

Problem random_problem(std::size_t n, std::size_t d, std::size_t k, std::uint64_t seed) {
    Problem p{n, d, k, {}, {}};
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> g;
    p.x.resize(n * d);
    p.G.resize(n * (k + 1) * d);
    for (auto& v : p.x) {
        v = g(rng);
    }
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t r = 0; r <= k; ++r) {
            for (std::size_t s = 0; s < d; ++s) {
                // rows correlated with the target so the optimum is non-trivial
                p.G[(i * (k + 1) + r) * d + s] = 0.3f * p.x[i * d + s] + g(rng);
            }
        }
    }
    return p;
}

// Coordinate descent on the normal equations, run to convergence.
std::vector<double> iterative_oracle(const Problem& p) {
    const std::size_t rows = p.k + 1;
    std::vector<double> A(rows * rows, 0.0), b(rows, 0.0), w(rows, 0.0);
    for (std::size_t i = 0; i < p.n; ++i) {
        const float* G = p.G.data() + i * rows * p.d;
        const float* x = p.x.data() + i * p.d;
        for (std::size_t a = 0; a < rows; ++a) {
            for (std::size_t s = 0; s < p.d; ++s) {
                b[a] += static_cast<double>(G[a * p.d + s]) * x[s];
            }
            for (std::size_t c = 0; c < rows; ++c) {
                for (std::size_t s = 0; s < p.d; ++s) {
                    A[a * rows + c] += static_cast<double>(G[a * p.d + s]) * G[c * p.d + s];
                }
            }
        }
    }
    for (int sweep = 0; sweep < 20000; ++sweep) {
        double change = 0.0;
        for (std::size_t a = 0; a < rows; ++a) {
            double r = b[a];
            for (std::size_t c = 0; c < rows; ++c) {
                if (c != a) {
                    r -= A[a * rows + c] * w[c];
                }
            }
            const double nw = r / A[a * rows + a];
            change = std::max(change, std::abs(nw - w[a]));
            w[a] = nw;
        }
        if (change < 1e-14) {
            break;
        }
    }
    return w;
}

std::vector<double> as_double(const SharedBeta& b) { return {b.weights.begin(), b.weights.end()}; }

// Sample whose targets are exact block-wise combinations with planted weights.
struct Planted {
    std::vector<float> recon, targets;
    std::vector<idx_t> design;
    RegressionSample sample;
};

Planted planted_sample(std::size_t n, std::size_t d, std::size_t k, std::size_t M,
                       const std::vector<std::vector<std::vector<float>>>& weights, std::uint64_t seed) {
    Planted p;
    const std::size_t pool = 2000;
    p.recon = test::random_set(pool, d, seed).data();
    std::mt19937_64 rng(seed + 1);
    p.design.resize(n * (k + 1));
    for (auto& id : p.design) {
        id = static_cast<idx_t>(rng() % pool);
    }
    p.targets.assign(n * d, 0.f);
    const std::size_t sd = d / M;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < M; ++j) {
            const auto& w = weights[j][rng() % weights[j].size()];
            for (std::size_t r = 0; r <= k; ++r) {
                const float* g = p.recon.data() + p.design[i * (k + 1) + r] * d;
                for (std::size_t s = j * sd; s < (j + 1) * sd; ++s) {
                    p.targets[i * d + s] += w[r] * g[s];
                }
            }
        }
    }
    p.sample = {p.targets.data(), n, d, k, p.recon.data(), p.design.data()};
    return p;
}

Planted random_sample(std::size_t n, std::size_t d, std::size_t k, std::uint64_t seed) {
    Planted p;
    p.recon = test::random_set(n, d, seed).data();
    p.targets = p.recon;
    std::mt19937_64 rng(seed + 1);
    std::normal_distribution<float> g(0.f, 0.3f);
    for (auto& v : p.targets) {
        v += g(rng);
    }
    p.design.resize(n * (k + 1));
    for (std::size_t i = 0; i < n; ++i) {
        p.design[i * (k + 1)] = static_cast<idx_t>(i);
        for (std::size_t r = 1; r <= k; ++r) {
            p.design[i * (k + 1) + r] = static_cast<idx_t>(rng() % n);
        }
    }
    p.sample = {p.targets.data(), n, d, k, p.recon.data(), p.design.data()};
    return p;
}

double sample_loss(const RegressionSample& s, const RegressionCodebook& book, const std::vector<std::uint8_t>& codes) {
    std::vector<float> G((s.k + 1) * s.dim), est(s.dim);
    double loss = 0.0;
    for (std::size_t i = 0; i < s.n; ++i) {
        s.gather(i, G.data());
        book.reconstruct(codes.data() + i * book.M(), G.data(), est.data());
        loss += test::sq_dist_double(s.targets + i * s.dim, est.data(), s.dim);
    }
    return loss;
}

} // namespace

TEST(LeastSquares, DesignEqualToTargetHasZeroLoss) {
    const std::size_t n = 50, d = 8, k = 3;
    const auto x = test::random_set(n, d, 1);
    std::vector<float> G;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t r = 0; r <= k; ++r) {
            G.insert(G.end(), x.ptr(i), x.ptr(i) + d);
        }
    }
    const auto beta = solve_least_squares(x.data(), G, n, d, k);
    EXPECT_FALSE(beta.degenerate);
    double sum = 0.0;
    for (float w : beta.weights) {
        sum += w;
    }
    EXPECT_NEAR(sum, 1.0, 1e-5);
    const auto w = as_double(beta);
    double energy = 0.0;
    for (float v : x.data()) {
        energy += static_cast<double>(v) * v;
    }
    EXPECT_LE(least_squares_loss(x.data(), G, n, d, w), 1e-9 * energy);
}

TEST(LeastSquares, SingleRowMatchesClosedForm) {
    const auto p = random_problem(200, 12, 0, 2);
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < p.n * p.d; ++i) {
        num += static_cast<double>(p.x[i]) * p.G[i];
        den += static_cast<double>(p.G[i]) * p.G[i];
    }
    const auto beta = solve_least_squares(p.x, p.G, p.n, p.d, 0);
    ASSERT_EQ(beta.weights.size(), 1u);
    EXPECT_NEAR(beta.weights[0], num / den, 1e-5 * std::abs(num / den));
}

TEST(LeastSquares, MatchesIterativeOracle) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto p = random_problem(500, 16, 8, 10 + seed);
        const auto beta = as_double(solve_least_squares(p.x, p.G, p.n, p.d, p.k));
        const auto oracle = iterative_oracle(p);
        const double l = least_squares_loss(p.x, p.G, p.n, p.d, beta);
        const double lo = least_squares_loss(p.x, p.G, p.n, p.d, oracle);
        EXPECT_NEAR(l, lo, 1e-5 * lo) << "seed " << seed;
        for (std::size_t r = 0; r <= p.k; ++r) {
            EXPECT_NEAR(beta[r], oracle[r], 1e-4) << "seed " << seed << " row " << r;
        }
    }
}

TEST(LeastSquares, ZeroDesignReturnsFirstUnitVector) {
    const std::size_t n = 10, d = 4, k = 2;
    const auto x = test::random_set(n, d, 3);
    const std::vector<float> G(n * (k + 1) * d, 0.f);
    const auto beta = solve_least_squares(x.data(), G, n, d, k);
    EXPECT_TRUE(beta.degenerate);
    EXPECT_EQ(beta.weights, (std::vector<float>{1.f, 0.f, 0.f}));
}

TEST(LeastSquares, InconsistentSizesRejected) {
    const std::vector<float> x(8), G(20);
    EXPECT_THROW(solve_least_squares(x, G, 2, 4, 2), Error);
}

TEST(LeastSquares, ExactFirstRowGivesFirstUnitVector) {
    // row 0 equals the target: the optimum puts all weight on it
    auto p = random_problem(300, 8, 4, 4);
    for (std::size_t i = 0; i < p.n; ++i) {
        std::copy_n(p.x.data() + i * p.d, p.d, p.G.data() + i * (p.k + 1) * p.d);
    }
    const auto beta = solve_least_squares(p.x, p.G, p.n, p.d, p.k);
    EXPECT_NEAR(beta.weights[0], 1.f, 1e-4);
    for (std::size_t r = 1; r <= p.k; ++r) {
        EXPECT_NEAR(beta.weights[r], 0.f, 1e-4);
    }
}

TEST(DesignIds, SelfThenLinksByReconstructionDistance) {
    const auto data = test::random_set(400, 6, 5);
    GraphConfig cfg;
    cfg.k_base = 8;
    cfg.ef_construction = 40;
    LayeredGraph g(cfg);
    g.build(FlatStorage(data.data().data(), data.size(), 6));
    auto recon = [&](idx_t i) { return data.ptr(i); };
    for (idx_t id = 0; id < 400; id += 37) {
        const std::size_t k = 12; // more than the degree bound
        std::vector<idx_t> ids(k + 1);
        design_ids(g, id, k, recon, 6, ids.data());
        EXPECT_EQ(ids[0], id);
        const auto links = g.links(id, 0);
        std::vector<std::pair<double, idx_t>> expect;
        for (idx_t j : links) {
            expect.emplace_back(test::sq_dist_double(data.ptr(id), data.ptr(j), 6), j);
        }
        std::sort(expect.begin(), expect.end());
        for (std::size_t r = 0; r < k; ++r) {
            EXPECT_EQ(ids[r + 1], r < expect.size() ? expect[r].second : id);
        }
    }
}

TEST(RegressionCodebook, UnitWeightReproducesFirstRow) {
    const std::size_t d = 8, k = 4;
    RegressionCodebook book(1, 1, k, d);
    book.beta(0, 0)[0] = 1.f;
    const auto G = test::random_set(k + 1, d, 6);
    const std::uint8_t code = 0;
    std::vector<float> out(d);
    book.reconstruct(&code, G.data().data(), out.data());
    for (std::size_t s = 0; s < d; ++s) {
        EXPECT_EQ(out[s], G.ptr(0)[s]);
    }
}

TEST(RegressionCodebook, BlockwiseReconstructionAndEncoding) {
    const std::size_t d = 12, k = 3, M = 4, B = 5;
    RegressionCodebook book(M, B, k, d);
    std::mt19937_64 rng(7);
    std::normal_distribution<float> g;
    for (std::size_t j = 0; j < M; ++j) {
        for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t r = 0; r <= k; ++r) {
                book.beta(j, b)[r] = g(rng);
            }
        }
    }
    const auto G = test::random_set(k + 1, d, 8);
    const auto x = test::random_set(1, d, 9);
    const std::size_t sd = d / M;

    auto block_estimate = [&](std::size_t j, std::size_t b, std::size_t s) {
        double v = 0.0;
        for (std::size_t r = 0; r <= k; ++r) {
            v += static_cast<double>(book.beta(j, b)[r]) * G.ptr(r)[s];
        }
        return v;
    };

    std::vector<std::uint8_t> code(M);
    book.encode(x.ptr(0), G.data().data(), code.data());
    for (std::size_t j = 0; j < M; ++j) {
        double best = 1e300;
        std::size_t arg = 0;
        for (std::size_t b = 0; b < B; ++b) {
            double e = 0.0;
            for (std::size_t s = j * sd; s < (j + 1) * sd; ++s) {
                const double t = x.ptr(0)[s] - block_estimate(j, b, s);
                e += t * t;
            }
            if (e < best) {
                best = e;
                arg = b;
            }
        }
        EXPECT_EQ(code[j], arg) << "block " << j;
    }

    const std::vector<std::uint8_t> fixed{4, 0, 2, 1};
    std::vector<float> out(d);
    book.reconstruct(fixed.data(), G.data().data(), out.data());
    for (std::size_t s = 0; s < d; ++s) {
        EXPECT_NEAR(out[s], block_estimate(s / sd, fixed[s / sd], s), 1e-5);
    }
}

TEST(RegressionCodebook, ConstructorValidation) {
    EXPECT_THROW(RegressionCodebook(3, 4, 2, 8), Error);
    EXPECT_THROW(RegressionCodebook(2, 257, 2, 8), Error);
    EXPECT_THROW(RegressionCodebook(2, 0, 2, 8), Error);
}

TEST(RegressionCodebook, SerializationRoundTrip) {
    auto p = random_sample(600, 8, 3, 10);
    RegressionTrainOptions opt;
    opt.M = 2;
    opt.B = 8;
    opt.iters = 2;
    const auto res = train_regression_codebook(p.sample, opt);
    std::stringstream ss;
    res.book.save(ss);
    const auto back = RegressionCodebook::load(ss);
    EXPECT_EQ(back.M(), 2u);
    EXPECT_EQ(back.B(), 8u);
    EXPECT_EQ(back.k(), 3u);
    EXPECT_EQ(back.betas(), res.book.betas());

    std::string bytes = ss.str();
    bytes[0] = 'X';
    std::stringstream bad(bytes);
    EXPECT_THROW(RegressionCodebook::load(bad), FormatError);
}

TEST(RegressionTraining, RecoversPlantedWeights) {
    const std::size_t d = 16, k = 3, M = 2;
    const std::vector<std::vector<std::vector<float>>> weights{
        {{0.9f, 0.1f, 0.f, 0.f}, {0.2f, 0.3f, 0.3f, 0.2f}},
        {{1.f, -0.5f, 0.5f, 0.f}, {0.f, 0.f, 0.f, 1.f}},
    };
    auto p = planted_sample(2000, d, k, M, weights, 11);
    RegressionTrainOptions opt;
    opt.M = M;
    opt.B = 2;
    opt.iters = 5;
    const auto res = train_regression_codebook(p.sample, opt);
    double energy = 0.0;
    for (float v : p.targets) {
        energy += static_cast<double>(v) * v;
    }
    EXPECT_LE(res.loss.back(), 1e-6 * energy);
    for (std::size_t j = 0; j < M; ++j) {
        for (const auto& w : weights[j]) {
            double best = 1e300;
            for (std::size_t b = 0; b < 2; ++b) {
                double e = 0.0;
                for (std::size_t r = 0; r <= k; ++r) {
                    e += std::pow(res.book.beta(j, b)[r] - w[r], 2);
                }
                best = std::min(best, e);
            }
            EXPECT_LE(best, 1e-6) << "block " << j;
        }
    }
}

TEST(RegressionTraining, ZeroIterationsKeepsInitialization) {
    auto p = random_sample(1500, 8, 4, 12);
    RegressionTrainOptions opt;
    opt.M = 2;
    opt.B = 16;
    opt.iters = 0;
    const auto a = train_regression_codebook(p.sample, opt);
    opt.iters = 3;
    const auto b = train_regression_codebook(p.sample, opt);
    ASSERT_EQ(a.loss.size(), 1u);
    ASSERT_EQ(b.loss.size(), 4u);
    EXPECT_EQ(a.loss[0], b.loss[0]);
    // the reported loss is the loss of the returned codes
    EXPECT_NEAR(a.loss[0], sample_loss(p.sample, a.book, a.codes), 1e-6 * a.loss[0]);
    EXPECT_NEAR(b.loss.back(), sample_loss(p.sample, b.book, b.codes), 1e-5 * b.loss.back());
}

TEST(RegressionTraining, LossNeverIncreases) {
    for (std::uint64_t seed : {13u, 14u, 15u}) {
        auto p = random_sample(3000, 16, 6, seed);
        RegressionTrainOptions opt;
        opt.M = 4;
        opt.B = 32;
        opt.iters = 8;
        opt.seed = seed;
        const auto res = train_regression_codebook(p.sample, opt);
        for (std::size_t t = 1; t < res.loss.size(); ++t) {
            EXPECT_LE(res.loss[t], res.loss[t - 1]) << "seed " << seed << " iteration " << t;
        }
    }
}

TEST(RegressionTraining, FinerBlocksNeverWorseWithOneEntry) {
    // B = 1: one EM round gives the least-squares optimum of each block, and
    // per-block optima can only beat one shared weight vector
    auto p = random_sample(2000, 16, 4, 16);
    RegressionTrainOptions opt;
    opt.B = 1;
    opt.iters = 1;
    opt.M = 1;
    const auto one = train_regression_codebook(p.sample, opt);
    opt.M = 8;
    const auto eight = train_regression_codebook(p.sample, opt);
    EXPECT_LE(eight.loss.back(), one.loss.back() * (1 + 1e-6));

    std::vector<float> designs(p.sample.n * (p.sample.k + 1) * p.sample.dim);
    for (std::size_t i = 0; i < p.sample.n; ++i) {
        p.sample.gather(i, designs.data() + i * (p.sample.k + 1) * p.sample.dim);
    }
    const auto shared = solve_least_squares(p.targets, designs, p.sample.n, p.sample.dim, p.sample.k);
    const double ls = least_squares_loss(p.targets, designs, p.sample.n, p.sample.dim, as_double(shared));
    EXPECT_NEAR(one.loss.back(), ls, 1e-5 * ls);
}

TEST(RegressionTraining, RejectsTooFewSamples) {
    auto p = random_sample(10, 8, 2, 17);
    RegressionTrainOptions opt;
    opt.M = 2;
    opt.B = 16;
    EXPECT_THROW(train_regression_codebook(p.sample, opt), Error);
}

TEST(FixedPointSum, LoweringATermNeverRaisesTheSum) {
    std::mt19937_64 rng(18);
    std::uniform_real_distribution<double> u(0.0, 10.0);
    std::vector<double> t(1000);
    for (auto& v : t) {
        v = u(rng);
    }
    double prev = RegressionTrainer::fixed_sum(t);
    for (int step = 0; step < 500; ++step) {
        auto& v = t[rng() % t.size()];
        v = std::nextafter(v, 0.0) * (rng() % 2 ? 1.0 : 0.999);
        const double s = RegressionTrainer::fixed_sum(t);
        EXPECT_LE(s, prev);
        prev = s;
    }
}

namespace {

struct Neighborhood {
    VectorSet set;
    GroundTruth knn;
};

Neighborhood neighborhood(std::size_t n, std::size_t d, std::size_t k, std::uint64_t seed) {
    Neighborhood h{LocalSubspaceModel(d, 10, 4, 0.05f, seed).sample(n, seed + 1), {}};
    KnnOptions ko;
    ko.exclude_self = true;
    h.knn = brute_force_knn(h.set, h.set, k, ko);
    return h;
}

} // namespace

TEST(Estimators, VectorInNeighborSpanHasZeroPerVectorError) {
    // x = 0.5 n1 + 0.5 n2 is reproduced exactly by per-vector weights
    VectorSet set(4, 0);
    const std::vector<float> a{1, 0, 0, 0}, b{0, 1, 0, 0}, c{0.5f, 0.5f, 0, 0};
    set.append(a);
    set.append(b);
    set.append(c);
    GroundTruth knn;
    knn.query_count = 3;
    knn.depth = 2;
    knn.ids = {2, 1, 2, 0, 0, 1};
    knn.distances.assign(6, 0.f);
    const auto e = estimator_suite(set, knn, 2, {}, {});
    EXPECT_NEAR(e.per_vector[2], 0.f, 1e-10);
    EXPECT_TRUE(e.centroid.empty());
}

TEST(Estimators, OrderingAndOptimality) {
    const std::size_t k = 6;
    const auto h = neighborhood(3000, 16, k, 19);
    KMeansOptions ko;
    ko.iters = 10;
    const auto cb = kmeans_train(h.set.data().data(), h.set.size(), 16, 64, ko).codebook;
    const auto e = estimator_suite(h.set, h.knn, k, cb, {});
    ASSERT_EQ(e.per_vector.size(), h.set.size());
    EXPECT_TRUE(e.centroid_star.empty());

    double sum_shared = 0.0, sum_pv = 0.0;
    std::mt19937_64 rng(20);
    std::normal_distribution<double> g(0.0, 0.05);
    for (std::size_t i = 0; i < h.set.size(); ++i) {
        // per-vector weights beat the nearest neighbour alone and shared weights
        EXPECT_LE(e.per_vector[i], e.nearest[i] * (1 + 1e-4) + 1e-6);
        EXPECT_LE(e.per_vector[i], e.shared[i] * (1 + 1e-4) + 1e-6);
        sum_shared += e.shared[i];
        sum_pv += e.per_vector[i];
        EXPECT_NEAR(e.nearest[i], h.knn.row_distances(i)[0], 1e-4 * (1 + e.nearest[i]));
        // centroid error is the minimum over the codebook
        double best = 1e300;
        for (std::size_t c = 0; c < cb.k; ++c) {
            best = std::min(best, test::sq_dist_double(h.set.ptr(i), cb.centroid(c).data(), 16));
        }
        EXPECT_NEAR(e.centroid[i], best, 1e-4 * (1 + best));
    }
    EXPECT_LE(sum_pv, sum_shared);

    // shared weights are a stationary point of the summed error
    std::vector<float> targets = h.set.data(), designs;
    for (std::size_t i = 0; i < h.set.size(); ++i) {
        for (std::size_t r = 0; r < k; ++r) {
            const float* v = h.set.ptr(h.knn.row(i)[r]);
            designs.insert(designs.end(), v, v + 16);
        }
    }
    const auto w = as_double(e.shared_beta);
    const double base = least_squares_loss(targets, designs, h.set.size(), 16, w);
    EXPECT_NEAR(base, sum_shared, 1e-4 * base);
    for (int t = 0; t < 20; ++t) {
        auto p = w;
        for (auto& v : p) {
            v += g(rng);
        }
        EXPECT_GE(least_squares_loss(targets, designs, h.set.size(), 16, p), base * (1 - 1e-9));
    }
}

TEST(Estimators, RejectsShallowNeighborTable) {
    const auto h = neighborhood(200, 8, 3, 21);
    EXPECT_THROW(estimator_suite(h.set, h.knn, 4, {}, {}), Error);
}
