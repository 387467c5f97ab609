// Acceptance checks. Each criterion prints exactly one line starting with
// PASS or FAIL; the exit status is non-zero when any selected criterion fails.
//
//   acceptance [--criterion N]... [--deep1m-dir DIR] [--seed S]
//
// Without --criterion every criterion runs in order. DIR (or the environment
// variable LNC_DEEP1M_DIR) may hold deep1M_{base,learn,query}.fvecs and
// deep1M_groundtruth.ivecs; criteria 2, 4, 5 and 6 then use them.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <sstream>

#include "lnc/lnc.hpp"

using namespace lnc;
using namespace lnc::bench;

namespace {

// Pinned tolerances and sizes.
constexpr double kLsRelTol = 1e-5;          // criterion 1
constexpr std::size_t kLsInstances = 100;
constexpr std::size_t kEstimatorN = 100000;  // criterion 2
constexpr std::size_t kEstimatorCentroids = 16384;
constexpr std::size_t kEstimatorNeighbors = 8;
constexpr std::size_t kEmSample = 250000;    // criterion 3
constexpr std::size_t kEmIters = 10;
constexpr double kEmTol = 1e-9;
constexpr std::size_t kLargeN = 1000000;     // criteria 4 and 6
constexpr double kSpotTol = 0.03;            // criterion 5 (Deep1M)
constexpr double kSpotOpq32 = 0.604;
constexpr double kSpotTwoLevel = 0.731;
constexpr double kSpotTwoLevelR10 = 0.99;
constexpr std::size_t kCodecClusters = 16384; // criterion 5 (synthetic)
constexpr std::size_t kCodecLearn = 300000;
constexpr std::size_t kCodecQueries = 10000;  // Deep1M query set size
constexpr double kSelectivityRatio = 2.0;    // criterion 6
constexpr double kSelectivityRecall = 0.9;
constexpr double kFileSizeTol = 0.10;        // criterion 9

constexpr std::size_t kDim = 96;
constexpr std::size_t kQueries = 1000;

struct Outcome {
    bool pass;
    std::string detail;
};

std::string fmt(double v, int precision = 4) { return format_double(v, precision); }

struct Context {
    std::uint64_t seed = 1234;
    std::string deep1m;

    bool has_deep1m() const {
        if (deep1m.empty()) {
            return false;
        }
        for (const char* f : {"deep1M_base.fvecs", "deep1M_learn.fvecs", "deep1M_query.fvecs"}) {
            if (!std::filesystem::exists(std::filesystem::path(deep1m) / f)) {
                return false;
            }
        }
        return true;
    }
    std::string file(const char* name) const { return (std::filesystem::path(deep1m) / name).string(); }

    // Clustered data on local 48-dimensional patches; distinct draws per role.
    LocalSubspaceModel model() const { return LocalSubspaceModel(kDim, 10, 48, 0.1f, seed); }
    VectorSet synth(std::size_t n, std::uint64_t role) const { return model().sample(n, derive_seed(seed, role)); }

    VectorSet base(std::size_t n) const {
        if (has_deep1m()) {
            ReadOptions ro;
            ro.max_count = n;
            return read_vectors(file("deep1M_base.fvecs"), ro);
        }
        return synth(n, 1);
    }
    VectorSet learn(std::size_t n) const {
        if (has_deep1m()) {
            ReadOptions ro;
            ro.max_count = n;
            return read_vectors(file("deep1M_learn.fvecs"), ro);
        }
        return synth(n, 2);
    }
    VectorSet queries(std::size_t n) const {
        if (has_deep1m()) {
            ReadOptions ro;
            ro.max_count = n;
            return read_vectors(file("deep1M_query.fvecs"), ro);
        }
        return synth(n, 3);
    }
    std::string source() const { return has_deep1m() ? "Deep1M" : "synthetic 96-d"; }
};

// --------------------------------------------------------------------------
// 1. least squares against an independent iterative minimizer

// Conjugate gradient on the normal equations in long double.
std::vector<double> cg_minimizer(const std::vector<float>& x, const std::vector<float>& G, std::size_t n,
                                 std::size_t d, std::size_t k) {
    const std::size_t rows = k + 1;
    std::vector<long double> A(rows * rows, 0), b(rows, 0);
    for (std::size_t i = 0; i < n; ++i) {
        const float* g = G.data() + i * rows * d;
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t s = 0; s < d; ++s) {
                b[r] += static_cast<long double>(g[r * d + s]) * x[i * d + s];
            }
            for (std::size_t c = 0; c < rows; ++c) {
                long double v = 0;
                for (std::size_t s = 0; s < d; ++s) {
                    v += static_cast<long double>(g[r * d + s]) * g[c * d + s];
                }
                A[r * rows + c] += v;
            }
        }
    }
    std::vector<long double> w(rows, 0), res = b, p = b, Ap(rows);
    long double rr = 0;
    for (auto v : res) {
        rr += v * v;
    }
    for (std::size_t it = 0; it < 10 * rows && rr > 1e-40L; ++it) {
        long double pAp = 0;
        for (std::size_t r = 0; r < rows; ++r) {
            Ap[r] = 0;
            for (std::size_t c = 0; c < rows; ++c) {
                Ap[r] += A[r * rows + c] * p[c];
            }
            pAp += p[r] * Ap[r];
        }
        const long double alpha = rr / pAp;
        long double nrr = 0;
        for (std::size_t r = 0; r < rows; ++r) {
            w[r] += alpha * p[r];
            res[r] -= alpha * Ap[r];
            nrr += res[r] * res[r];
        }
        for (std::size_t r = 0; r < rows; ++r) {
            p[r] = res[r] + (nrr / rr) * p[r];
        }
        rr = nrr;
    }
    return {w.begin(), w.end()};
}

Outcome least_squares_oracle(const Context& ctx) {
    const std::size_t n = 500, d = 16, k = 8;
    double worst = 0.0;
    for (std::size_t inst = 0; inst < kLsInstances; ++inst) {
        std::mt19937_64 rng(derive_seed(ctx.seed, 100 + inst));
        std::normal_distribution<float> g;
        std::vector<float> x(n * d), G(n * (k + 1) * d);
        for (auto& v : x) {
            v = g(rng);
        }
        // neighbors are noisy copies of the target, as in the index
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t r = 0; r <= k; ++r) {
                for (std::size_t s = 0; s < d; ++s) {
                    G[(i * (k + 1) + r) * d + s] = x[i * d + s] + 0.5f * g(rng);
                }
            }
        }
        const auto beta = solve_least_squares(x, G, n, d, k);
        const std::vector<double> w(beta.weights.begin(), beta.weights.end());
        const double loss = least_squares_loss(x, G, n, d, w);
        const double ref = least_squares_loss(x, G, n, d, cg_minimizer(x, G, n, d, k));
        worst = std::max(worst, std::abs(loss - ref) / ref);
    }
    return {worst <= kLsRelTol, "worst relative loss gap " + fmt(worst, 3) + " over " + std::to_string(kLsInstances) +
                                    " instances (tolerance " + fmt(kLsRelTol, 2) + ")"};
}

// --------------------------------------------------------------------------
// 2. estimator ordering

Outcome estimator_ordering(const Context& ctx) {
    const auto set = ctx.base(kEstimatorN);
    const auto other = ctx.has_deep1m() ? ctx.learn(kEstimatorN) : ctx.synth(kEstimatorN, 4);
    EstimatorOptions eo;
    eo.centroids = kEstimatorCentroids;
    eo.neighbors = kEstimatorNeighbors;
    eo.seed = ctx.seed;
    const auto rep = run_estimators(set, other, eo);
    const double hat = EstimatorReport::median(rep.errors.per_vector);
    const double bar = EstimatorReport::median(rep.errors.shared);
    const double q = EstimatorReport::median(rep.errors.centroid);
    const double qs = EstimatorReport::median(rep.errors.centroid_star);
    const double n1 = EstimatorReport::median(rep.errors.nearest);
    const bool ok = hat < bar && bar < q && q < n1 && rep.centroids == kEstimatorCentroids;
    return {ok, "medians on " + std::to_string(set.size()) + " " + ctx.source() + " vectors: x_hat " + fmt(hat) +
                    " < x_bar " + fmt(bar) + " < q(x) " + fmt(q) + " < n1(x) " + fmt(n1) + " (q(x)* " + fmt(qs) +
                    ")"};
}

// --------------------------------------------------------------------------
// 3. EM monotonicity

Outcome em_monotone(const Context& ctx) {
    const auto base = ctx.synth(kEmSample, 1);
    const auto learn = ctx.synth(100000, 2);
    auto cfg = LCConfig::parse("L6&OPQ32,M=8");
    cfg.regression_sample = kEmSample;
    cfg.regression_iters = kEmIters;
    cfg.seed = ctx.seed;
    const auto idx = LCIndex::build(learn, base, cfg);
    const auto& loss = idx.regression_loss();
    double worst = -std::numeric_limits<double>::infinity();
    for (std::size_t t = 1; t < loss.size(); ++t) {
        worst = std::max(worst, loss[t] - loss[t - 1]);
    }
    const bool ok = loss.size() == kEmIters + 1 && worst <= kEmTol;
    return {ok, std::to_string(loss.size() - 1) + " iterations on " + std::to_string(kEmSample) +
                    " vectors, loss " + fmt(loss.front(), 8) + " -> " + fmt(loss.back(), 8) +
                    ", largest step change " + fmt(worst, 3) + " (tolerance " + fmt(kEmTol, 2) + ")"};
}

// --------------------------------------------------------------------------
// 4. error ordering under a 64-byte budget

Outcome error_ordering(const Context& ctx) {
    const auto base = ctx.base(kLargeN);
    const auto learn = ctx.learn(100000);
    auto refined = LCConfig::parse("L6&OPQ32,M=8");
    auto shared = LCConfig::parse("L6&OPQ40 M=0");
    refined.seed = shared.seed = ctx.seed;
    detail::require(refined.bytes_per_vector(base.dim()) == 64 && shared.bytes_per_vector(base.dim()) == 64,
                    "budget mismatch");
    double e8, e0, plain;
    {
        const auto idx = LCIndex::build(learn, base, refined);
        e8 = index_mean_error(idx, base, Reconstruction::codebook);
    }
    {
        // the unrefined index is the same codes and links, decoded plainly
        const auto idx = LCIndex::build(learn, base, shared);
        e0 = index_mean_error(idx, base, Reconstruction::shared);
        plain = index_mean_error(idx, base, Reconstruction::plain);
    }
    return {e8 < e0 && e0 < plain, "mean squared error on " + std::to_string(base.size()) + " " + ctx.source() +
                                       " vectors at 64 bytes: M=8 " + fmt(e8) + " < M=0 " + fmt(e0) +
                                       " < no refinement " + fmt(plain)};
}

// --------------------------------------------------------------------------
// 5. exhaustive codec comparison

Outcome codec_table(const Context& ctx) {
    if (ctx.has_deep1m()) {
        const auto base = ctx.base(kLargeN);
        const auto learn = ctx.learn(std::numeric_limits<std::size_t>::max());
        const auto queries = ctx.queries(std::numeric_limits<std::size_t>::max());
        const auto gt = ground_truth_or_compute(base, queries, ctx.file("deep1M_groundtruth.ivecs"));
        CodecTrainOptions co;
        co.seed = ctx.seed;
        const auto a = codec_eval(CodecSpec::parse("OPQ32x8"), learn, base, queries, gt, co);
        const auto b = codec_eval(CodecSpec::parse("PQ1x16+OPQ30x8"), learn, base, queries, gt, co);
        const double ra = a.metrics.recall_at.at(1), rb = b.metrics.recall_at.at(1),
                     rb10 = b.metrics.recall_at.at(10);
        const bool ok = std::abs(ra - kSpotOpq32) <= kSpotTol && std::abs(rb - kSpotTwoLevel) <= kSpotTol &&
                        rb10 >= kSpotTwoLevelR10;
        return {ok, "Deep1M recall@1 OPQ32x8 " + fmt(ra) + " (expected " + fmt(kSpotOpq32) + "), PQ1x16+OPQ30x8 " +
                        fmt(rb) + " (expected " + fmt(kSpotTwoLevel) + "), its recall@10 " + fmt(rb10)};
    }
    // A coarse level only pays off on data with more modes than a 256-entry
    // sub-quantizer resolves, so this check draws from many tight clusters
    // rather than the ten broad patches of the default model.
    const LocalSubspaceModel clustered(kDim, kCodecClusters, 16, 0.1f, ctx.seed, 2.f);
    const auto base = clustered.sample(100000, derive_seed(ctx.seed, 1));
    const auto learn = clustered.sample(kCodecLearn, derive_seed(ctx.seed, 2));
    const auto queries = clustered.sample(kCodecQueries, derive_seed(ctx.seed, 3));
    const auto gt = brute_force_knn(base, queries, 100);
    CodecTrainOptions co;
    co.seed = ctx.seed;
    std::map<std::string, double> r;
    for (const char* spec : {"PQ1x16+OPQ30x8", "PQ2x16+OPQ28x8", "OPQ32x8", "PCA8"}) {
        r[spec] = codec_eval(CodecSpec::parse(spec), learn, base, queries, gt, co).metrics.recall_at.at(1);
    }
    const bool ok = r["PQ1x16+OPQ30x8"] > r["PQ2x16+OPQ28x8"] && r["PQ2x16+OPQ28x8"] >= r["OPQ32x8"] &&
                    r["OPQ32x8"] > r["PCA8"];
    return {ok, "no Deep1M, ordering on " + std::to_string(kCodecClusters) + "-cluster synthetic data, exhaustive recall@1: PQ1x16+OPQ30x8 " +
                    fmt(r["PQ1x16+OPQ30x8"]) + " > PQ2x16+OPQ28x8 " + fmt(r["PQ2x16+OPQ28x8"]) + " >= OPQ32x8 " +
                    fmt(r["OPQ32x8"]) + " > PCA8 " + fmt(r["PCA8"])};
}

// --------------------------------------------------------------------------
// 6. selectivity of the graph against the inverted multi-index

Outcome selectivity_check(const Context& ctx) {
    const auto base = ctx.base(kLargeN);
    const auto learn = ctx.learn(100000);
    const auto queries = ctx.queries(kQueries);
    const auto gt = brute_force_knn(base, queries, 1);
    SelectivityOptions so;
    so.seed = ctx.seed;
    so.target_recall = kSelectivityRecall;
    const auto res = selectivity(learn, base, queries, gt, so);
    const double ratio = res.imi_evals_at_target / res.hnsw_evals_at_target;
    return {std::isfinite(ratio) && ratio >= kSelectivityRatio,
            "distance evaluations for recall@1 " + fmt(kSelectivityRecall, 2) + " on " + std::to_string(base.size()) +
                " " + ctx.source() + " vectors: graph " + fmt(res.hnsw_evals_at_target, 5) + ", multi-index " +
                fmt(res.imi_evals_at_target, 5) + ", ratio " + fmt(ratio, 3) + " (required " +
                fmt(kSelectivityRatio, 2) + ")"};
}

// --------------------------------------------------------------------------
// 7. budget semantics

Outcome budget_semantics(const Context& ctx) {
    const auto base = ctx.synth(100000, 1);
    const auto learn = ctx.synth(100000, 2);
    const auto queries = ctx.synth(kQueries, 3);
    const auto gt = brute_force_knn(base, queries, 1);
    std::vector<std::size_t> Ts;
    for (std::size_t T = 64; T <= 16384; T *= 2) {
        Ts.push_back(T);
    }
    const std::size_t beam = Ts.back();

    std::vector<std::pair<std::string, std::function<std::vector<Neighbor>(const float*, std::size_t, VisitStats&)>>>
        methods;

    GraphConfig gc;
    gc.k_base = 32;
    gc.ef_construction = 100;
    gc.seed = ctx.seed;
    LayeredGraph flat(gc);
    FlatStorage storage(base.data().data(), base.size(), base.dim());
    flat.build(storage);
    methods.emplace_back("graph exact", [&](const float* q, std::size_t T, VisitStats& st) {
        SearchParams sp;
        sp.T = T;
        sp.ef = beam;
        sp.k = 1;
        return flat.search(storage, q, sp, &st);
    });

    auto stage1 = LCConfig::parse("L16&OPQ32");
    auto refined = LCConfig::parse("L6&OPQ32,M=8");
    stage1.seed = refined.seed = ctx.seed;
    const auto idx1 = LCIndex::build(learn, base, stage1);
    const auto idx2 = LCIndex::build(learn, base, refined);
    for (const LCIndex* idx : {&idx1, &idx2}) {
        methods.emplace_back(idx->config().str(), [idx, beam](const float* q, std::size_t T, VisitStats& st) {
            IndexSearchParams p;
            p.T = T;
            p.ef = beam;
            p.k = 1;
            return idx->search(q, p, &st);
        });
    }

    ImiConfig ic;
    ic.K = 256;
    ic.fine = "OPQ32";
    ic.seed = ctx.seed;
    const auto imi = ImiIndex::build(learn, base, ic);
    methods.emplace_back("IMI K=256 OPQ32", [&](const float* q, std::size_t T, VisitStats& st) {
        return imi.search(q, T, 1, &st);
    });

    bool ok = true;
    std::string detail;
    for (auto& [name, search] : methods) {
        std::size_t over = 0;
        bool monotone = true;
        double prev = -1.0;
        std::string curve;
        for (std::size_t T : Ts) {
            std::vector<std::vector<idx_t>> ids(queries.size());
            for (std::size_t q = 0; q < queries.size(); ++q) {
                VisitStats st;
                ids[q] = ids_of(search(queries.ptr(q), T, st));
                over += st.base_distance_evals > T ? 1 : 0;
            }
            const double r = recall_at(ids, gt, {1}).recall_at.at(1);
            monotone = monotone && r >= prev;
            prev = r;
            curve += (curve.empty() ? "" : " ") + fmt(r, 3);
        }
        ok = ok && over == 0 && monotone;
        detail += (detail.empty() ? "" : "; ") + name + ": " + std::to_string(over) + " over budget, recall@1 [" +
                  curve + "]" + (monotone ? "" : " NOT monotone");
    }
    return {ok, "T=64..16384, " + std::to_string(queries.size()) + " queries; " + detail};
}

// --------------------------------------------------------------------------
// 8. exactness on small instances

Outcome small_exactness(const Context& ctx) {
    std::size_t mismatches = 0, instances = 0;
    for (std::size_t d : {8u, 32u, 96u}) {
        for (std::uint64_t s = 0; s < 3; ++s) {
            LocalSubspaceModel model(d, 5, std::max<std::size_t>(2, d / 4), 0.1f, derive_seed(ctx.seed, 200 + s));
            const auto base = model.sample(1000, 1);
            const auto queries = model.sample(100, 2);
            GraphConfig gc;
            gc.k_base = 16;
            gc.seed = derive_seed(ctx.seed, 300 + s);
            LayeredGraph g(gc);
            FlatStorage storage(base.data().data(), base.size(), d);
            g.build(storage);
            const auto gt = brute_force_knn(base, queries, 10);
            for (std::size_t q = 0; q < queries.size(); ++q) {
                SearchParams sp;  // unlimited budget
                sp.ef = base.size();
                sp.k = 10;
                const auto r = g.search(storage, queries.ptr(q), sp);
                for (std::size_t k = 0; k < 10; ++k) {
                    mismatches += (k >= r.size() || r[k].id != gt.row(q)[k]) ? 1 : 0;
                }
            }
            ++instances;
        }
    }
    return {mismatches == 0, std::to_string(instances) + " instances of 1000 points, 100 queries each: " +
                                 std::to_string(mismatches) + " top-10 entries differ from brute force"};
}

// --------------------------------------------------------------------------
// 9. serialization

Outcome serialization(const Context& ctx) {
    const auto base = ctx.synth(50000, 1);
    const auto learn = ctx.synth(50000, 2);
    const auto queries = ctx.synth(100, 3);
    auto cfg = LCConfig::parse("L6&OPQ32,M=8");
    cfg.seed = ctx.seed;
    const auto idx = LCIndex::build(learn, base, cfg);
    const auto dir = std::filesystem::temp_directory_path() / ("lnc_accept_" + std::to_string(ctx.seed));
    std::filesystem::create_directories(dir);
    const auto path = (dir / "index.lci").string();
    idx.save(path);
    const auto back = LCIndex::load(path);
    std::size_t differ = 0;
    for (std::size_t q = 0; q < queries.size(); ++q) {
        IndexSearchParams p;
        p.T = 4096;
        p.k = 10;
        const auto a = idx.search(queries.ptr(q), p);
        const auto b = back.search(queries.ptr(q), p);
        bool same = a.size() == b.size();
        for (std::size_t k = 0; same && k < a.size(); ++k) {
            same = a[k].id == b[k].id && a[k].distance == b[k].distance;
        }
        differ += same ? 0 : 1;
    }
    const auto size = static_cast<double>(std::filesystem::file_size(path));
    std::filesystem::remove_all(dir);
    std::ostringstream codec, book;
    idx.codec().save(codec);
    idx.regression()->save(book);
    const double overhead = static_cast<double>(codec.str().size() + book.str().size());
    const double expected =
        static_cast<double>(idx.size() * cfg.bytes_per_vector(base.dim())) + overhead;
    const double rel = std::abs(size - expected) / expected;
    return {differ == 0 && rel <= kFileSizeTol,
            std::to_string(differ) + " of 100 queries differ after reload; file " + fmt(size, 8) + " bytes vs " +
                fmt(expected, 8) + " from count*(code+4k+M) + codebooks, off by " + fmt(100 * rel, 3) +
                "% (tolerance " + fmt(100 * kFileSizeTol, 3) + "%)"};
}

const std::vector<std::pair<std::string, Outcome (*)(const Context&)>>& criteria() {
    static const std::vector<std::pair<std::string, Outcome (*)(const Context&)>> c{
        {"least-squares oracle", least_squares_oracle},
        {"estimator ordering", estimator_ordering},
        {"EM monotonicity", em_monotone},
        {"64-byte error ordering", error_ordering},
        {"codec comparison", codec_table},
        {"selectivity", selectivity_check},
        {"budget semantics", budget_semantics},
        {"small-instance exactness", small_exactness},
        {"serialization", serialization},
    };
    return c;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app("Acceptance checks for the lnc library");
    std::vector<int> which;
    Context ctx;
    if (const char* env = std::getenv("LNC_DEEP1M_DIR")) {
        ctx.deep1m = env;
    }
    app.add_option("--criterion", which, "Criterion number(s) to run (default: all)")->check(CLI::Range(1, 9));
    app.add_option("--deep1m-dir", ctx.deep1m, "Directory with the Deep1M files");
    app.add_option("--seed", ctx.seed, "Seed for data and training");
    CLI11_PARSE(app, argc, argv);
    if (which.empty()) {
        for (int i = 1; i <= 9; ++i) {
            which.push_back(i);
        }
    }
    bool all = true;
    for (int n : which) {
        const auto& [name, fn] = criteria()[static_cast<std::size_t>(n - 1)];
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o{false, ""};
        try {
            o = fn(ctx);
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
        }
        std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << n << " (" << name << "): " << o.detail << " ["
                  << fmt(seconds_since(t0), 3) << " s]" << std::endl;
        all = all && o.pass;
    }
    return all ? 0 : 1;
}
