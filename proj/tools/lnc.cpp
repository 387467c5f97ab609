// lnc: command-line front end for training, indexing, searching and the
// desk-scale experiments. Run `lnc --help` or `lnc <command> --help`.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "lnc/lnc.hpp"

namespace {

using namespace lnc;
using bench::format_double;

struct Globals {
    std::uint64_t seed = 1234;
    int threads = 1;
    std::string out;
};

// Datasets come either from files or from a preset.
struct DataArgs {
    std::string base, query, learn, gt;
    std::string preset;
    std::string data_dir = ".";
    std::size_t max_base = 0;
    std::size_t max_queries = 0;

    void add(CLI::App* app, bool need_query = true, bool need_learn = true) {
        app->add_option("--base", base, "Base vectors (.fvecs/.bvecs)");
        if (need_query) {
            app->add_option("--query", query, "Query vectors");
            app->add_option("--gt", gt, "Ground truth (.ivecs); computed when absent");
            app->add_option("--max-queries", max_queries, "Use only the first N queries");
        }
        if (need_learn) {
            app->add_option("--learn", learn, "Training vectors (disjoint from base)");
        }
        app->add_option("--preset", preset, "tiny (100k synthetic) or deep1m (files in --data-dir)")
            ->check(CLI::IsMember({"tiny", "deep1m"}));
        app->add_option("--data-dir", data_dir, "Directory holding deep1M_{base,learn,query,groundtruth} files");
        app->add_option("--max-base", max_base, "Use only the first N base vectors");
    }
};

struct Data {
    VectorSet base, query, learn;
    std::optional<GroundTruth> gt;
};

/// Synthetic stand-in for Deep1M: 96-d mixture of local linear subspaces.
inline LocalSubspaceModel tiny_model(std::uint64_t seed) { return LocalSubspaceModel(96, 10, 48, 0.1f, seed); }

Data load_data(const DataArgs& a, std::uint64_t seed, bool need_query, bool need_learn) {
    Data d;
    std::string base = a.base, query = a.query, learn = a.learn, gt = a.gt;
    if (a.preset == "tiny") {
        const auto model = tiny_model(seed);
        d.base = model.sample(a.max_base ? a.max_base : 100000, derive_seed(seed, 1));
        if (need_query) {
            d.query = model.sample(a.max_queries ? a.max_queries : 1000, derive_seed(seed, 2));
        }
        if (need_learn) {
            d.learn = model.sample(100000, derive_seed(seed, 3));
        }
        return d;
    }
    if (a.preset == "deep1m") {
        auto path = [&](const char* name) { return a.data_dir + "/" + name; };
        base = base.empty() ? path("deep1M_base.fvecs") : base;
        query = query.empty() ? path("deep1M_query.fvecs") : query;
        learn = learn.empty() ? path("deep1M_learn.fvecs") : learn;
        gt = gt.empty() ? path("deep1M_groundtruth.ivecs") : gt;
    }
    detail::require(!base.empty(), "--base (or --preset) is required");
    ReadOptions ro;
    ro.max_count = a.max_base ? a.max_base : ro.max_count;
    d.base = read_vectors(base, ro);
    if (need_query) {
        detail::require(!query.empty(), "--query is required");
        ReadOptions qo;
        qo.max_count = a.max_queries ? a.max_queries : qo.max_count;
        d.query = read_vectors(query, qo);
        detail::require(d.query.dim() == d.base.dim(), "query dimension ", d.query.dim(), " differs from base ",
                        d.base.dim());
        // A ground-truth file only matches the full base set.
        if (!gt.empty() && !a.max_base) {
            d.gt = read_ground_truth(gt, d.query.size());
        }
    }
    if (need_learn) {
        detail::require(!learn.empty(), "--learn is required");
        d.learn = read_vectors(learn);
        detail::require(d.learn.dim() == d.base.dim(), "learn dimension differs from base");
    }
    return d;
}

GroundTruth ensure_gt(Data& d) {
    if (!d.gt) {
        std::cerr << "warning: no ground truth given, computing it by brute force\n";
        d.gt = brute_force_knn(d.base, d.query, std::min<std::size_t>(100, d.base.size()));
    }
    return *d.gt;
}

// Writes CSV to --out, or stdout when empty.
struct Output {
    std::ofstream file;
    std::ostream* os = &std::cout;

    explicit Output(const std::string& path) {
        if (!path.empty()) {
            file = open_output(path);
            os = &file;
        }
    }
};

std::string recall_cell(const EvalMetrics& m, std::size_t r) {
    const auto it = m.recall_at.find(r);
    if (it == m.recall_at.end()) {
        return "nan";
    }
    return format_double(it->second, 4) + (m.is_lower_bound(r) ? "*" : "");
}

double now_seconds() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"lnc: graph index over quantized codes with neighbor-based refinement"};
    app.require_subcommand(1);
    Globals g;
    app.add_option("--seed", g.seed, "Random seed")->capture_default_str();
    app.add_option("--threads", g.threads, "Worker threads (results do not depend on it)")->capture_default_str();
    app.add_option("--out", g.out, "Output path (CSV commands write to stdout when empty)");

    // synth
    auto* synth = app.add_subcommand("synth", "Write a synthetic dataset");
    std::size_t syn_n = 10000, syn_d = 96, syn_clusters = 100, syn_latent = 0;
    float syn_noise = 0.1f;
    synth->add_option("--n", syn_n, "Vector count")->capture_default_str();
    synth->add_option("--d", syn_d, "Dimension")->capture_default_str();
    synth->add_option("--clusters", syn_clusters, "Mixture components")->capture_default_str();
    synth->add_option("--latent", syn_latent,
                      "Latent dimension per component (0: isotropic Gaussian mixture, sigma^2 = 0.1)");
    synth->add_option("--noise", syn_noise, "Isotropic noise std for --latent > 0")->capture_default_str();

    // gt
    auto* gtc = app.add_subcommand("gt", "Exact ground truth by brute force");
    DataArgs gt_data;
    gt_data.add(gtc, true, false);
    std::size_t gt_k = 100;
    gtc->add_option("--k", gt_k, "Depth")->capture_default_str();

    // train-codec
    auto* tc = app.add_subcommand("train-codec", "Train a vector codec");
    std::string tc_spec, tc_learn;
    bool coarse_exact = false;
    tc->add_option("--spec", tc_spec, "Codec, e.g. OPQ32x8, PQ1x16+OPQ30x8, SQ8, PCA8, none")->required();
    tc->add_option("--learn", tc_learn, "Training vectors")->required();
    tc->add_flag("--coarse-exact", coarse_exact, "Plain k-means for 16-bit coarse codebooks");

    // codec-eval
    auto* ce = app.add_subcommand("codec-eval", "Exhaustive-search recall of codecs");
    DataArgs ce_data;
    ce_data.add(ce);
    std::vector<std::string> ce_specs{"none", "SQ8", "PCA8", "PQ16x8", "OPQ16x8", "PQ1x16+OPQ14x8", "OPQ32x8",
                                      "PQ1x16+OPQ30x8", "PQ2x16+OPQ28x8"};
    ce->add_option("--specs", ce_specs, "Codecs to evaluate")->capture_default_str();
    ce->add_flag("--coarse-exact", coarse_exact, "Plain k-means for 16-bit coarse codebooks");

    // build-index
    auto* bi = app.add_subcommand("build-index", "Build an L&C index");
    DataArgs bi_data;
    bi_data.add(bi, false, true);
    std::string bi_config = "L6&OPQ32,M=8";
    std::size_t efc = 200, refine = 10, reg_sample = 250000, reg_iters = 10, reg_B = 256;
    bi->add_option("--config", bi_config, "Index notation, e.g. 'L6&OPQ40', 'L6&OPQ40,M=0', 'L6&OPQ32,M=8'")
        ->capture_default_str();
    bi->add_option("--efC", efc, "Construction beam")->capture_default_str();
    bi->add_option("--refine", refine, "Stage-2 shortlist length")->capture_default_str();
    bi->add_option("--sample", reg_sample, "Regression training sample")->capture_default_str();
    bi->add_option("--iters", reg_iters, "Regression EM iterations")->capture_default_str();
    bi->add_option("--B", reg_B, "Regression codebook entries")->capture_default_str();
    bi->add_flag("--coarse-exact", coarse_exact, "Plain k-means for 16-bit coarse codebooks");

    // train-regression
    auto* tr = app.add_subcommand("train-regression", "Refit the refinement of an existing index");
    std::string tr_index;
    DataArgs tr_data;
    tr_data.add(tr, false, false);
    std::size_t tr_M = 8;
    tr->add_option("--index", tr_index, "Index file")->required();
    tr->add_option("--M", tr_M, "Regression bytes per vector (0: shared weights)")->capture_default_str();
    tr->add_option("--B", reg_B, "Entries per sub-codebook")->capture_default_str();
    tr->add_option("--iters", reg_iters, "EM iterations")->capture_default_str();
    tr->add_option("--sample", reg_sample, "Training sample")->capture_default_str();

    // search
    auto* se = app.add_subcommand("search", "Search an L&C index");
    std::string se_index;
    DataArgs se_data;
    se->add_option("--index", se_index, "Index file")->required();
    se->add_option("--query", se_data.query, "Query vectors")->required();
    se->add_option("--gt", se_data.gt, "Ground truth for recall");
    std::size_t se_T = 16384, se_k = 100, se_ef = 0;
    std::optional<std::size_t> se_refine;
    se->add_option("--T", se_T, "Base distance evaluation budget")->capture_default_str();
    se->add_option("--k", se_k, "Results per query")->capture_default_str();
    se->add_option("--ef", se_ef, "Beam width (0: automatic)");
    se->add_option("--refine", se_refine, "Shortlist override");

    // estimators
    auto* es = app.add_subcommand("estimators", "Squared-error distribution of the vector estimators");
    DataArgs es_data;
    es_data.add(es, false, true);
    bench::EstimatorOptions eo;
    es->add_option("--centroids", eo.centroids, "Codebook size")->capture_default_str();
    es->add_option("--neighbors", eo.neighbors, "Exact neighbors per vector")->capture_default_str();
    es->add_option("--kmeans-iters", eo.kmeans_iters, "Lloyd iterations")->capture_default_str();

    // tradeoff-sweep
    auto* ts = app.add_subcommand("tradeoff-sweep", "Links/code/M splits under a byte budget");
    DataArgs ts_data;
    ts_data.add(ts);
    std::vector<std::string> ts_configs{"L6&OPQ40", "L6&OPQ40,M=0", "L6&OPQ32,M=8"};
    std::vector<std::size_t> ts_T{1024, 16384};
    std::size_t ts_budget = 64;
    ts->add_option("--configs", ts_configs, "Index configurations")->capture_default_str();
    ts->add_option("--T", ts_T, "Budgets")->delimiter(',')->capture_default_str();
    ts->add_option("--budget", ts_budget, "Bytes per vector every config must use (0: unchecked)")
        ->capture_default_str();
    ts->add_option("--efC", efc, "Construction beam")->capture_default_str();
    ts->add_option("--sample", reg_sample, "Regression training sample")->capture_default_str();

    // speed-recall
    auto* sr = app.add_subcommand("speed-recall", "Single-worker speed vs recall of L&C and IMI");
    DataArgs sr_data;
    sr_data.add(sr);
    std::vector<std::string> sr_configs{"L6&OPQ32,M=8"};
    std::vector<std::size_t> sr_T{64, 128, 256, 512, 1024, 2048, 4096, 8192, 16384};
    std::size_t sr_K = 1024, sr_repeats = 3;
    std::string sr_fine = "OPQ32";
    sr->add_option("--configs", sr_configs, "L&C configurations")->capture_default_str();
    sr->add_option("--T", sr_T, "Budgets")->delimiter(',')->capture_default_str();
    sr->add_option("--K", sr_K, "IMI centroids per half")->capture_default_str();
    sr->add_option("--fine", sr_fine, "IMI residual code")->capture_default_str();
    sr->add_option("--repeats", sr_repeats, "Timing passes (median reported)")->capture_default_str();
    sr->add_option("--efC", efc, "Construction beam")->capture_default_str();

    // selectivity
    auto* sl = app.add_subcommand("selectivity", "Distance evaluations vs recall@1, exact HNSW vs exact IMI");
    DataArgs sl_data;
    sl_data.add(sl);
    bench::SelectivityOptions so;
    sl->add_option("--links", so.k_base, "Base-level links")->capture_default_str();
    sl->add_option("--efC", so.ef_construction, "Construction beam")->capture_default_str();
    sl->add_option("--K", so.imi_K, "IMI centroids per half")->capture_default_str();
    sl->add_option("--target", so.target_recall, "Recall@1 at which to compare")->capture_default_str();

    // imi-build / imi-search
    auto* ib = app.add_subcommand("imi-build", "Build an inverted multi-index");
    DataArgs ib_data;
    ib_data.add(ib, false, true);
    ImiConfig ic;
    ib->add_option("--K", ic.K, "Centroids per half")->capture_default_str();
    ib->add_option("--fine", ic.fine, "Residual code: none, PQ<m> or OPQ<m>")->capture_default_str();
    ib->add_option("--max-lists", ic.max_lists, "Guard on K^2")->capture_default_str();

    auto* is = app.add_subcommand("imi-search", "Search an inverted multi-index");
    std::string is_index;
    DataArgs is_data;
    is->add_option("--index", is_index, "Index file")->required();
    is->add_option("--query", is_data.query, "Query vectors")->required();
    is->add_option("--gt", is_data.gt, "Ground truth for recall");
    std::size_t is_T = 16384, is_k = 100;
    is->add_option("--T", is_T, "Code comparison budget")->capture_default_str();
    is->add_option("--k", is_k, "Results per query")->capture_default_str();

    // plot
    auto* pl = app.add_subcommand("plot", "SVG line chart from a CSV");
    std::string pl_csv;
    bench::PlotOptions po;
    pl->add_option("--csv", pl_csv, "Input CSV")->required();
    pl->add_option("--x", po.x, "X column")->required();
    pl->add_option("--y", po.y, "Y column")->required();
    pl->add_option("--group", po.group, "Series column");
    pl->add_option("--title", po.title, "Chart title");
    pl->add_flag("--logx", po.log_x, "Logarithmic x axis");

    CLI11_PARSE(app, argc, argv);
    set_num_threads(g.threads);

    auto spec_for = [&](CLI::App* cmd) {
        bench::ExperimentSpec s;
        s.command = cmd->get_name();
        s.seed = g.seed;
        for (const CLI::Option* opt : cmd->get_options()) {
            if (opt->count() > 0 && opt->get_name() != "--help") {
                std::string v;
                for (const auto& r : opt->results()) {
                    v += (v.empty() ? "" : " ") + r;
                }
                s.set(opt->get_name(), v);
            }
        }
        return s;
    };
    auto need_out = [&](const char* what) { detail::require(!g.out.empty(), "--out is required for ", what); };

    try {
        if (*synth) {
            need_out("synth");
            VectorSet v = syn_latent == 0
                              ? synth_dataset(syn_n, syn_d, syn_clusters, g.seed)
                              : LocalSubspaceModel(syn_d, syn_clusters, syn_latent, syn_noise, g.seed)
                                    .sample(syn_n, derive_seed(g.seed, 1));
            write_vectors(g.out, v);
            std::cerr << "wrote " << v.size() << " x " << v.dim() << " to " << g.out << "\n";
        } else if (*gtc) {
            need_out("gt");
            auto d = load_data(gt_data, g.seed, true, false);
            write_ground_truth(g.out, brute_force_knn(d.base, d.query, std::min(gt_k, d.base.size())));
        } else if (*tc) {
            need_out("train-codec");
            CodecTrainOptions co;
            co.seed = g.seed;
            co.coarse_exact = coarse_exact;
            const auto codec = Codec::train(CodecSpec::parse(tc_spec), read_vectors(tc_learn), co);
            auto os = open_output(g.out);
            codec.save(os);
            std::cerr << codec.spec().str() << ": " << codec.code_size() << " bytes per vector\n";
        } else if (*ce) {
            auto d = load_data(ce_data, g.seed, true, true);
            const auto gt = ensure_gt(d);
            Output out(g.out);
            bench::CsvWriter csv(*out.os, spec_for(ce),
                                 {"codec", "bytes", "recall@1", "recall@10", "recall@100", "mean_error", "train_s"});
            CodecTrainOptions co;
            co.seed = g.seed;
            co.coarse_exact = coarse_exact;
            for (const auto& s : ce_specs) {
                const auto row = bench::codec_eval(CodecSpec::parse(s), d.learn, d.base, d.query, gt, co);
                csv.row({row.codec, std::to_string(row.bytes), recall_cell(row.metrics, 1),
                         recall_cell(row.metrics, 10), recall_cell(row.metrics, 100), format_double(row.mean_error),
                         format_double(row.train_seconds, 3)});
            }
        } else if (*bi) {
            need_out("build-index");
            auto d = load_data(bi_data, g.seed, false, true);
            auto cfg = LCConfig::parse(bi_config);
            cfg.seed = g.seed;
            cfg.ef_construction = efc;
            cfg.refine_shortlist = refine;
            cfg.regression_sample = reg_sample;
            cfg.regression_iters = reg_iters;
            cfg.B = reg_B;
            cfg.codec_options.seed = g.seed;
            cfg.codec_options.coarse_exact = coarse_exact;
            const double t0 = now_seconds();
            const auto idx = LCIndex::build(d.learn, d.base, cfg);
            const double secs = now_seconds() - t0;
            auto os = open_output(g.out);
            idx.save(os);
            const auto st = idx.stats();
            std::cerr << cfg.str() << ": " << st.count << " vectors, " << st.bytes_per_vector
                      << " bytes/vector (code " << st.code_bytes << ", links " << st.link_bytes << ", regression "
                      << st.regression_bytes << "), built in " << format_double(secs, 4) << " s ("
                      << format_double(static_cast<double>(st.count) / secs, 4) << " vectors/s)\n";
        } else if (*tr) {
            auto idx = LCIndex::load(tr_index);
            auto d = load_data(tr_data, g.seed, false, false);
            idx.refit_refinement(d.base, tr_M, reg_B, reg_iters, reg_sample);
            auto os = open_output(g.out.empty() ? tr_index : g.out);
            idx.save(os);
            std::cerr << idx.config().str() << ": regression loss";
            for (double l : idx.regression_loss()) {
                std::cerr << " " << format_double(l);
            }
            std::cerr << "\n";
        } else if (*se) {
            const auto idx = LCIndex::load(se_index);
            const auto q = read_vectors(se_data.query);
            IndexSearchParams p;
            p.T = se_T;
            p.k = se_k;
            p.ef = se_ef;
            p.refine_shortlist = se_refine;
            Output out(g.out);
            bench::CsvWriter csv(*out.os, spec_for(se), {"query", "rank", "id", "distance", "evals"});
            std::vector<std::vector<idx_t>> ids(q.size());
            for (std::size_t i = 0; i < q.size(); ++i) {
                VisitStats st;
                const auto r = idx.search(q.ptr(i), p, &st);
                for (std::size_t j = 0; j < r.size(); ++j) {
                    csv.row({std::to_string(i), std::to_string(j + 1), std::to_string(r[j].id),
                             format_double(r[j].distance, 8), std::to_string(st.base_distance_evals)});
                }
                ids[i] = bench::ids_of(r);
            }
            if (!se_data.gt.empty()) {
                const auto m = recall_at(ids, read_ground_truth(se_data.gt, q.size()), bench::standard_ranks());
                std::cerr << "recall@1 " << recall_cell(m, 1) << " recall@10 " << recall_cell(m, 10) << " recall@100 "
                          << recall_cell(m, 100) << "\n";
            }
        } else if (*es) {
            auto d = load_data(es_data, g.seed, false, true);
            eo.seed = g.seed;
            const auto rep = bench::run_estimators(d.base, d.learn, eo);
            for (const auto& w : rep.warnings) {
                std::cerr << "warning: " << w << "\n";
            }
            Output out(g.out);
            auto spec = spec_for(es);
            spec.set("effective_centroids", std::to_string(rep.centroids));
            bench::CsvWriter csv(*out.os, spec, {"estimator", "quantile", "squared_error"});
            const std::pair<const char*, const std::vector<float>*> cols[] = {
                {"q(x)", &rep.errors.centroid},   {"q(x)*", &rep.errors.centroid_star},
                {"n1(x)", &rep.errors.nearest},   {"xbar", &rep.errors.shared},
                {"xhat", &rep.errors.per_vector}};
            for (const auto& [name, errs] : cols) {
                if (errs->empty()) {
                    continue;
                }
                std::vector<float> s = *errs;
                std::sort(s.begin(), s.end());
                for (int qi = 0; qi <= 100; ++qi) {
                    const auto pos = std::min(s.size() - 1, static_cast<std::size_t>(qi / 100.0 * (s.size() - 1) + 0.5));
                    csv.row({name, format_double(qi / 100.0, 3), format_double(s[pos])});
                }
                std::cerr << name << " median " << format_double(bench::EstimatorReport::median(*errs)) << "\n";
            }
        } else if (*ts) {
            auto d = load_data(ts_data, g.seed, true, true);
            const auto gt = ensure_gt(d);
            std::vector<LCConfig> cfgs;
            for (const auto& c : ts_configs) {
                auto cfg = LCConfig::parse(c);
                if (ts_budget) {
                    detail::require(cfg.bytes_per_vector(d.base.dim()) == ts_budget, cfg.str(), " uses ",
                                    cfg.bytes_per_vector(d.base.dim()), " bytes per vector, budget is ", ts_budget);
                }
                cfg.seed = g.seed;
                cfg.ef_construction = efc;
                cfg.regression_sample = reg_sample;
                cfg.codec_options.seed = g.seed;
                cfgs.push_back(cfg);
            }
            Output out(g.out);
            bench::CsvWriter csv(*out.os, spec_for(ts),
                                 {"config", "links", "code_bytes", "M", "bytes", "T", "recall@1", "recall@10",
                                  "recall@100", "mean_error"});
            for (const auto& cfg : cfgs) {
                const auto idx = LCIndex::build(d.learn, d.base, cfg);
                const double err = bench::index_mean_error(idx, d.base);
                const std::size_t ef = *std::max_element(ts_T.begin(), ts_T.end());
                for (const auto& row : bench::sweep_index(idx, d.query, gt, ts_T, 100, ef)) {
                    csv.row({cfg.str(), std::to_string(cfg.links), std::to_string(idx.stats().code_bytes),
                             cfg.M ? std::to_string(*cfg.M) : "-", std::to_string(row.bytes), std::to_string(row.T),
                             recall_cell(row.metrics, 1), recall_cell(row.metrics, 10), recall_cell(row.metrics, 100),
                             format_double(err)});
                }
            }
        } else if (*sr) {
            detail::require(g.threads == 1, "speed-recall times a single worker; drop --threads");
            auto d = load_data(sr_data, g.seed, true, true);
            const auto gt = ensure_gt(d);
            Output out(g.out);
            bench::CsvWriter csv(*out.os, spec_for(sr),
                                 {"method", "bytes", "T", "ms_per_query", "recall@1", "recall@10", "recall@100",
                                  "mean_evals"});
            auto emit = [&](const std::vector<bench::SweepRow>& rows) {
                for (const auto& row : rows) {
                    csv.row({row.method, std::to_string(row.bytes), std::to_string(row.T),
                             format_double(row.metrics.wall_time_ms_per_query, 4), recall_cell(row.metrics, 1),
                             recall_cell(row.metrics, 10), recall_cell(row.metrics, 100),
                             format_double(row.metrics.mean_distance_evals, 6)});
                }
            };
            const std::size_t ef = *std::max_element(sr_T.begin(), sr_T.end());
            for (const auto& c : sr_configs) {
                auto cfg = LCConfig::parse(c);
                cfg.seed = g.seed;
                cfg.ef_construction = efc;
                cfg.codec_options.seed = g.seed;
                const auto idx = LCIndex::build(d.learn, d.base, cfg);
                emit(bench::sweep_index(idx, d.query, gt, sr_T, 100, ef, sr_repeats));
            }
            ImiConfig icfg;
            icfg.K = sr_K;
            icfg.fine = sr_fine;
            icfg.seed = g.seed;
            const auto imi = ImiIndex::build(d.learn, d.base, icfg);
            emit(bench::sweep_imi(imi, "IMI" + std::to_string(sr_K) + "&" + sr_fine, d.query, gt, sr_T, 100,
                                  sr_repeats));
        } else if (*sl) {
            auto d = load_data(sl_data, g.seed, true, true);
            const auto gt = ensure_gt(d);
            so.seed = g.seed;
            const auto res = bench::selectivity(d.learn, d.base, d.query, gt, so);
            Output out(g.out);
            auto spec = spec_for(sl);
            spec.set("hnsw_evals_at_target", format_double(res.hnsw_evals_at_target));
            spec.set("imi_evals_at_target", format_double(res.imi_evals_at_target));
            bench::CsvWriter csv(*out.os, spec, {"method", "param", "mean_evals", "recall@1"});
            for (std::size_t i = 0; i < res.hnsw.size(); ++i) {
                csv.row({"HNSW" + std::to_string(so.k_base), "ef=" + std::to_string(res.hnsw_ef[i]),
                         format_double(res.hnsw[i].first), format_double(res.hnsw[i].second, 4)});
            }
            for (std::size_t i = 0; i < res.imi.size(); ++i) {
                csv.row({"IMI" + std::to_string(so.imi_K), "T=" + std::to_string(res.imi_T[i]),
                         format_double(res.imi[i].first), format_double(res.imi[i].second, 4)});
            }
            std::cerr << "evaluations at recall@1=" << so.target_recall << ": HNSW "
                      << format_double(res.hnsw_evals_at_target) << ", IMI " << format_double(res.imi_evals_at_target)
                      << " (ratio " << format_double(res.imi_evals_at_target / res.hnsw_evals_at_target, 3) << ")\n";
        } else if (*ib) {
            need_out("imi-build");
            auto d = load_data(ib_data, g.seed, false, true);
            ic.seed = g.seed;
            const auto imi = ImiIndex::build(d.learn, d.base, ic);
            auto os = open_output(g.out);
            imi.save(os);
            std::cerr << "IMI " << ic.K << "x" << ic.K << " over " << imi.size() << " vectors, " << imi.code_size()
                      << " code bytes per vector\n";
        } else if (*is) {
            auto in = open_input(is_index);
            const auto imi = ImiIndex::load(in);
            const auto q = read_vectors(is_data.query);
            Output out(g.out);
            bench::CsvWriter csv(*out.os, spec_for(is), {"query", "rank", "id", "distance", "evals"});
            std::vector<std::vector<idx_t>> ids(q.size());
            for (std::size_t i = 0; i < q.size(); ++i) {
                VisitStats st;
                const auto r = imi.search(q.ptr(i), std::max(is_T, is_k), is_k, &st);
                for (std::size_t j = 0; j < r.size(); ++j) {
                    csv.row({std::to_string(i), std::to_string(j + 1), std::to_string(r[j].id),
                             format_double(r[j].distance, 8), std::to_string(st.base_distance_evals)});
                }
                ids[i] = bench::ids_of(r);
            }
            if (!is_data.gt.empty()) {
                const auto m = recall_at(ids, read_ground_truth(is_data.gt, q.size()), bench::standard_ranks());
                std::cerr << "recall@1 " << recall_cell(m, 1) << " recall@10 " << recall_cell(m, 10) << " recall@100 "
                          << recall_cell(m, 100) << "\n";
            }
        } else if (*pl) {
            need_out("plot");
            auto in = open_input(pl_csv);
            const auto svg = bench::plot_svg(bench::read_csv(in), po);
            auto os = open_output(g.out);
            os << svg;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
