// Build a small L&C index on synthetic data, search it, and compare the
// three reconstruction modes.

#include <cstdio>

#include "lnc/lnc.hpp"

int main() {
    using namespace lnc;

    const LocalSubspaceModel model(32, 50, 8, 0.05f, /*seed=*/7);
    const VectorSet learn = model.sample(10000, 1);
    const VectorSet base = model.sample(10000, 2);
    const VectorSet queries = model.sample(100, 3);

    LCConfig cfg = LCConfig::parse("L8&OPQ8,M=4");
    cfg.regression_sample = 10000;
    const LCIndex index = LCIndex::build(learn, base, cfg);

    const auto st = index.stats();
    std::printf("%s: %zu vectors, %zu bytes/vector\n", cfg.str().c_str(), st.count, st.bytes_per_vector);

    for (auto [name, mode] : {std::pair{"plain", Reconstruction::plain}, std::pair{"shared", Reconstruction::shared},
                              std::pair{"codebook", Reconstruction::codebook}}) {
        std::printf("mean squared error (%s): %.4f\n", name, bench::index_mean_error(index, base, mode));
    }

    const GroundTruth gt = brute_force_knn(base, queries, 10);
    std::vector<std::vector<idx_t>> results;
    IndexSearchParams p;
    p.T = 1024;
    p.k = 10;
    for (std::size_t q = 0; q < queries.size(); ++q) {
        results.push_back(bench::ids_of(index.search(queries.ptr(q), p)));
    }
    const std::size_t ranks[] = {1, 10};
    const EvalMetrics m = recall_at(results, gt, ranks);
    std::printf("T=%zu recall@1 %.3f recall@10 %.3f\n", p.T, m.recall_at.at(1), m.recall_at.at(10));
    return 0;
}
