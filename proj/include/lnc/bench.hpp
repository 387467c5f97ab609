#pragma once

// Experiment harness: CSV output with a '#' header echoing the run spec,
// the experiment drivers behind the CLI, and a minimal SVG line plotter.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "lnc/codec.hpp"
#include "lnc/dataset.hpp"
#include "lnc/graph.hpp"
#include "lnc/imi.hpp"
#include "lnc/index.hpp"
#include "lnc/kmeans.hpp"
#include "lnc/refine.hpp"

namespace lnc::bench {

// ---------------------------------------------------------------------------
// CSV

/// Everything needed to reproduce a run; echoed as CSV header comments.
struct ExperimentSpec {
    std::string command;
    std::uint64_t seed = 1234;
    std::vector<std::pair<std::string, std::string>> params;

    ExperimentSpec& set(std::string key, std::string value) {
        params.emplace_back(std::move(key), std::move(value));
        return *this;
    }
};

inline std::string format_double(double v, int precision = 6) {
    if (std::isnan(v)) {
        return "nan";
    }
    if (std::isinf(v)) {
        return v > 0 ? "inf" : "-inf";
    }
    std::ostringstream os;
    os << std::setprecision(precision) << v;
    return os.str();
}

inline std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) {
        return s;
    }
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') {
            out += '"';
        }
        out += c;
    }
    return out + "\"";
}

class CsvWriter {
public:
    CsvWriter(std::ostream& os, const ExperimentSpec& spec, std::vector<std::string> columns)
        : os_(os), columns_(std::move(columns)) {
        os_ << "# command: " << spec.command << "\n# seed: " << spec.seed << "\n";
        for (const auto& [k, v] : spec.params) {
            os_ << "# " << k << ": " << v << "\n";
        }
        write(columns_);
    }

    void row(const std::vector<std::string>& cells) {
        detail::require(cells.size() == columns_.size(), "csv: row has ", cells.size(), " cells, header has ",
                        columns_.size());
        write(cells);
    }

private:
    void write(const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) {
            os_ << (i ? "," : "") << csv_escape(cells[i]);
        }
        os_ << "\n";
        os_.flush();
    }

    std::ostream& os_;
    std::vector<std::string> columns_;
};

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    std::size_t column(const std::string& name) const {
        const auto it = std::find(header.begin(), header.end(), name);
        detail::require(it != header.end(), "csv: no column named '", name, "'");
        return static_cast<std::size_t>(it - header.begin());
    }
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                cur += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                cur += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.push_back(std::move(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(std::move(cur));
    return out;
}

inline CsvTable read_csv(std::istream& is) {
    CsvTable t;
    std::string line;
    while (std::getline(is, line)) {
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.empty() || line[0] == '#') {
            continue;
        }
        auto cells = split_csv_line(line);
        if (t.header.empty()) {
            t.header = std::move(cells);
        } else {
            detail::require(cells.size() == t.header.size(), "csv: ragged row");
            t.rows.push_back(std::move(cells));
        }
    }
    return t;
}

// ---------------------------------------------------------------------------
// Shared helpers

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline std::vector<idx_t> ids_of(const std::vector<Neighbor>& r) {
    std::vector<idx_t> out(r.size());
    for (std::size_t i = 0; i < r.size(); ++i) {
        out[i] = r[i].id;
    }
    return out;
}

inline const std::vector<std::size_t>& standard_ranks() {
    static const std::vector<std::size_t> r{1, 10, 100};
    return r;
}

/// Ground truth from a file when given, else by brute force.
inline GroundTruth ground_truth_or_compute(const VectorSet& base, const VectorSet& queries, const std::string& path,
                                           std::size_t depth = 100, std::ostream* warn = nullptr) {
    if (!path.empty()) {
        auto gt = read_ground_truth(path, queries.size());
        detail::require(gt.query_count == queries.size(), "ground truth covers ", gt.query_count, " queries, expected ",
                        queries.size());
        return gt;
    }
    if (warn) {
        *warn << "warning: no ground truth given, computing it by brute force\n";
    }
    return brute_force_knn(base, queries, std::min(depth, base.size()));
}

/// First value of x at which the piecewise-linear curve (x, recall) reaches
/// `target`; points must be ordered by increasing x. Infinity if never.
inline double cost_at_recall(const std::vector<std::pair<double, double>>& curve, double target) {
    for (std::size_t i = 0; i < curve.size(); ++i) {
        if (curve[i].second >= target) {
            if (i == 0) {
                return curve[0].first;
            }
            const auto [x0, y0] = curve[i - 1];
            const auto [x1, y1] = curve[i];
            return y1 == y0 ? x1 : x0 + (target - y0) * (x1 - x0) / (y1 - y0);
        }
    }
    return std::numeric_limits<double>::infinity();
}

// ---------------------------------------------------------------------------
// Exhaustive codec evaluation

struct CodecEvalRow {
    std::string codec;
    std::size_t bytes = 0;
    double mean_error = 0.0;
    EvalMetrics metrics;
    double train_seconds = 0.0;
};

/// Exhaustive search of every query against the whole coded base.
inline std::vector<std::vector<Neighbor>> exhaustive_search(const Codec& codec, const std::vector<std::uint8_t>& codes,
                                                            std::size_t n, const VectorSet& queries, std::size_t k) {
    std::vector<std::vector<Neighbor>> out(queries.size());
    const std::size_t cs = codec.code_size();
    parallel_for(queries.size(), [&](std::size_t q) {
        const AdcTable table = codec.adc_table(queries.ptr(q));
        detail::TopK top(std::min(k, n));
        for (std::size_t i = 0; i < n; ++i) {
            top.push(table.distance(codes.data() + i * cs), static_cast<idx_t>(i));
        }
        out[q] = std::move(top).sorted();
    });
    return out;
}

inline CodecEvalRow codec_eval(const CodecSpec& spec, const VectorSet& learn, const VectorSet& base,
                               const VectorSet& queries, const GroundTruth& gt, const CodecTrainOptions& opt) {
    CodecEvalRow row;
    row.codec = spec.str();
    const auto t0 = std::chrono::steady_clock::now();
    const Codec codec = Codec::train(spec, learn, opt);
    row.train_seconds = seconds_since(t0);
    row.bytes = codec.code_size();
    std::vector<std::uint8_t> codes(base.size() * row.bytes);
    codec.encode_batch(base.data().data(), base.size(), codes.data());

    std::vector<float> rec(base.dim());
    double err = 0.0;
    for (std::size_t i = 0; i < base.size(); ++i) {
        codec.decode(codes.data() + i * row.bytes, rec.data());
        err += l2sqr(base.ptr(i), rec.data(), base.dim());
    }
    row.mean_error = err / static_cast<double>(std::max<std::size_t>(1, base.size()));

    const auto t1 = std::chrono::steady_clock::now();
    const auto res = exhaustive_search(codec, codes, base.size(), queries, 100);
    std::vector<std::vector<idx_t>> ids(res.size());
    for (std::size_t q = 0; q < res.size(); ++q) {
        ids[q] = ids_of(res[q]);
    }
    row.metrics = recall_at(ids, gt, standard_ranks());
    row.metrics.wall_time_ms_per_query = 1e3 * seconds_since(t1) / static_cast<double>(std::max<std::size_t>(1, queries.size()));
    row.metrics.mean_distance_evals = static_cast<double>(base.size());
    return row;
}

// ---------------------------------------------------------------------------
// Estimators over exact neighbors

struct EstimatorOptions {
    std::size_t centroids = 16384;
    std::size_t neighbors = 8;
    std::size_t kmeans_iters = 10;
    std::uint64_t seed = 1234;
};

struct EstimatorReport {
    EstimatorErrors errors;
    std::size_t centroids = 0;  // after any scaling down
    std::vector<std::string> warnings;

    static double median(std::vector<float> v) {
        if (v.empty()) {
            return std::numeric_limits<double>::quiet_NaN();
        }
        const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
        std::nth_element(v.begin(), mid, v.end());
        return *mid;
    }
};

/// Errors of q(x), q(x)*, n1(x), x-bar and x-hat for each vector of `set`.
/// `distinct` trains the q(x)* codebook (may be empty to skip it).
inline EstimatorReport run_estimators(const VectorSet& set, const VectorSet& distinct, const EstimatorOptions& opt) {
    EstimatorReport rep;
    std::size_t k = opt.centroids;
    if (k > set.size()) {
        k = std::max<std::size_t>(1, set.size() / 8);
        rep.warnings.push_back("base too small for " + std::to_string(opt.centroids) + " centroids, using " +
                               std::to_string(k));
    }
    rep.centroids = k;
    KMeansOptions ko;
    ko.iters = opt.kmeans_iters;
    ko.seed = derive_seed(opt.seed, 1);
    const auto cb = kmeans_train(set.data().data(), set.size(), set.dim(), k, ko).codebook;
    KMeansCodebook cb_star;
    if (!distinct.empty() && distinct.size() >= k) {
        ko.seed = derive_seed(opt.seed, 2);
        cb_star = kmeans_train(distinct.data().data(), distinct.size(), distinct.dim(), k, ko).codebook;
    }
    const auto knn = brute_force_knn(set, set, opt.neighbors, KnnOptions{.exclude_self = true});
    rep.errors = estimator_suite(set, knn, opt.neighbors, cb, cb_star);
    return rep;
}

// ---------------------------------------------------------------------------
// Index sweeps

struct SweepRow {
    std::string method;
    std::size_t bytes = 0;
    std::size_t T = 0;
    double mean_error = std::numeric_limits<double>::quiet_NaN();
    EvalMetrics metrics;
    double max_evals = 0.0;
};

/// Mean squared error of the index's own refinement over its base vectors.
inline double index_mean_error(const LCIndex& idx, const VectorSet& base, std::optional<Reconstruction> mode = {}) {
    const Reconstruction m = mode ? *mode : idx.refinement().value_or(Reconstruction::plain);
    std::vector<double> err(base.size());
    parallel_for(base.size(), [&](std::size_t i) {
        std::vector<float> rec(base.dim());
        idx.reconstruct(static_cast<idx_t>(i), rec.data(), m);
        err[i] = l2sqr(base.ptr(i), rec.data(), base.dim());
    });
    double s = 0.0;
    for (double e : err) {
        s += e;
    }
    return s / static_cast<double>(std::max<std::size_t>(1, base.size()));
}

/// Runs every query once per T; `search(q, T, stats)` returns ranked results.
/// Wall time is the median of `repeats` single-worker passes.
template <typename SearchFn>
std::vector<SweepRow> sweep_budgets(const std::string& method, std::size_t bytes, const VectorSet& queries,
                                    const GroundTruth& gt, std::span<const std::size_t> Ts, SearchFn&& search,
                                    std::size_t repeats = 1) {
    std::vector<SweepRow> rows;
    for (std::size_t T : Ts) {
        SweepRow row;
        row.method = method;
        row.bytes = bytes;
        row.T = T;
        std::vector<std::vector<idx_t>> ids(queries.size());
        std::vector<double> times;
        double evals = 0.0;
        for (std::size_t rep = 0; rep < std::max<std::size_t>(1, repeats); ++rep) {
            evals = 0.0;
            row.max_evals = 0.0;
            const auto t0 = std::chrono::steady_clock::now();
            for (std::size_t q = 0; q < queries.size(); ++q) {
                VisitStats st;
                ids[q] = ids_of(search(queries.ptr(q), T, st));
                evals += static_cast<double>(st.base_distance_evals);
                row.max_evals = std::max(row.max_evals, static_cast<double>(st.base_distance_evals));
            }
            times.push_back(seconds_since(t0));
        }
        std::sort(times.begin(), times.end());
        row.metrics = recall_at(ids, gt, standard_ranks());
        row.metrics.mean_distance_evals = evals / static_cast<double>(std::max<std::size_t>(1, queries.size()));
        row.metrics.wall_time_ms_per_query =
            1e3 * times[times.size() / 2] / static_cast<double>(std::max<std::size_t>(1, queries.size()));
        rows.push_back(std::move(row));
    }
    return rows;
}

/// Budget sweep of an L&C index with a fixed beam (so that larger budgets
/// extend the same search trajectory).
inline std::vector<SweepRow> sweep_index(const LCIndex& idx, const VectorSet& queries, const GroundTruth& gt,
                                         std::span<const std::size_t> Ts, std::size_t k, std::size_t ef,
                                         std::size_t repeats = 1) {
    return sweep_budgets(idx.config().str(), idx.stats().bytes_per_vector, queries, gt, Ts,
                         [&](const float* q, std::size_t T, VisitStats& st) {
                             IndexSearchParams p;
                             p.T = T;
                             p.k = k;
                             p.ef = ef;
                             return idx.search(q, p, &st);
                         },
                         repeats);
}

inline std::vector<SweepRow> sweep_imi(const ImiIndex& imi, const std::string& name, const VectorSet& queries,
                                       const GroundTruth& gt, std::span<const std::size_t> Ts, std::size_t k,
                                       std::size_t repeats = 1) {
    const std::size_t bytes = imi.code_size() + 4;  // code plus stored id
    return sweep_budgets(name, bytes, queries, gt, Ts,
                         [&](const float* q, std::size_t T, VisitStats& st) {
                             return imi.search(q, std::max(T, k), k, &st);
                         },
                         repeats);
}

/// Selectivity comparison with exact distances: HNSW beam sweep against an
/// IMI budget sweep; each curve is (mean base distance evaluations, recall@1).
struct SelectivityResult {
    std::vector<std::pair<double, double>> hnsw, imi;
    std::vector<std::size_t> hnsw_ef, imi_T;
    double hnsw_evals_at_target = 0.0, imi_evals_at_target = 0.0;
    double build_seconds_hnsw = 0.0, build_seconds_imi = 0.0;
};

struct SelectivityOptions {
    std::size_t k_base = 64;
    std::size_t k_upper = 32;
    std::size_t ef_construction = 100;
    std::size_t imi_K = 1024;
    double target_recall = 0.9;
    std::vector<std::size_t> efs{1, 2, 3, 4, 6, 8, 12, 16, 24, 32, 48, 64, 96, 128, 192, 256, 384, 512};
    std::vector<std::size_t> Ts{16, 32, 64, 128, 256, 384, 512, 768, 1024, 1536, 2048, 3072, 4096, 6144, 8192,
                                12288, 16384, 24576, 32768, 49152, 65536, 131072};
    std::uint64_t seed = 1234;
};

inline SelectivityResult selectivity(const VectorSet& learn, const VectorSet& base, const VectorSet& queries,
                                     const GroundTruth& gt, const SelectivityOptions& opt) {
    SelectivityResult res;
    auto t0 = std::chrono::steady_clock::now();
    GraphConfig gc;
    gc.k_base = opt.k_base;
    gc.k_upper = opt.k_upper;
    gc.ef_construction = opt.ef_construction;
    gc.seed = derive_seed(opt.seed, 1);
    LayeredGraph graph(gc);
    FlatStorage storage(base.data().data(), base.size(), base.dim());
    graph.build(storage);
    res.build_seconds_hnsw = seconds_since(t0);

    auto recall1 = [&](const std::vector<std::vector<idx_t>>& ids) {
        const std::vector<std::size_t> r1{1};
        return recall_at(ids, gt, r1).recall_at.at(1);
    };
    std::vector<std::vector<idx_t>> ids(queries.size());
    for (std::size_t ef : opt.efs) {
        double evals = 0.0;
        for (std::size_t q = 0; q < queries.size(); ++q) {
            SearchParams sp;
            sp.ef = ef;
            sp.k = 1;
            VisitStats st;
            ids[q] = ids_of(graph.search(storage, queries.ptr(q), sp, &st));
            evals += static_cast<double>(st.base_distance_evals);
        }
        res.hnsw.emplace_back(evals / static_cast<double>(queries.size()), recall1(ids));
        res.hnsw_ef.push_back(ef);
    }

    t0 = std::chrono::steady_clock::now();
    ImiConfig ic;
    ic.K = opt.imi_K;
    ic.fine = "none";
    ic.seed = derive_seed(opt.seed, 2);
    const auto imi = ImiIndex::build(learn, base, ic);
    res.build_seconds_imi = seconds_since(t0);
    for (std::size_t T : opt.Ts) {
        double evals = 0.0;
        for (std::size_t q = 0; q < queries.size(); ++q) {
            VisitStats st;
            ids[q] = ids_of(imi.search(queries.ptr(q), T, 1, &st));
            evals += static_cast<double>(st.base_distance_evals);
        }
        res.imi.emplace_back(evals / static_cast<double>(queries.size()), recall1(ids));
        res.imi_T.push_back(T);
    }
    // interpolation needs curves ordered by cost
    auto by_cost = [](auto v) {
        std::sort(v.begin(), v.end());
        return v;
    };
    res.hnsw_evals_at_target = cost_at_recall(by_cost(res.hnsw), opt.target_recall);
    res.imi_evals_at_target = cost_at_recall(by_cost(res.imi), opt.target_recall);
    return res;
}

// ---------------------------------------------------------------------------
// SVG plotting

struct PlotOptions {
    std::string x, y, group;
    std::string title;
    bool log_x = false;
    int width = 720, height = 480;
};

inline std::string svg_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

/// One polyline per distinct value of the group column (or a single line).
inline std::string plot_svg(const CsvTable& table, const PlotOptions& opt) {
    const std::size_t cx = table.column(opt.x);
    const std::size_t cy = table.column(opt.y);
    const bool grouped = !opt.group.empty();
    const std::size_t cg = grouped ? table.column(opt.group) : 0;

    std::map<std::string, std::vector<std::pair<double, double>>> series;
    for (const auto& row : table.rows) {
        double x = std::stod(row[cx]);
        const double y = std::stod(row[cy]);
        if (opt.log_x) {
            detail::require(x > 0, "plot: log x-axis needs positive values");
            x = std::log10(x);
        }
        if (std::isfinite(x) && std::isfinite(y)) {
            series[grouped ? row[cg] : opt.y].emplace_back(x, y);
        }
    }
    double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
    for (auto& [name, pts] : series) {
        std::sort(pts.begin(), pts.end());
        for (auto [x, y] : pts) {
            x0 = std::min(x0, x);
            x1 = std::max(x1, x);
            y0 = std::min(y0, y);
            y1 = std::max(y1, y);
        }
    }
    if (series.empty()) {
        x0 = y0 = 0;
        x1 = y1 = 1;
    }
    if (x1 == x0) {
        x1 = x0 + 1;
    }
    if (y1 == y0) {
        y1 = y0 + 1;
    }
    const double left = 70, right = 180, top = 40, bottom = 50;
    const double pw = opt.width - left - right, ph = opt.height - top - bottom;
    auto px = [&](double x) { return left + (x - x0) / (x1 - x0) * pw; };
    auto py = [&](double y) { return top + (1.0 - (y - y0) / (y1 - y0)) * ph; };
    static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << opt.width << "\" height=\"" << opt.height
       << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << left << "\" y=\"22\" font-size=\"14\">" << svg_escape(opt.title) << "</text>\n";
    os << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
       << "\" fill=\"none\" stroke=\"black\"/>\n";
    for (int t = 0; t <= 4; ++t) {
        const double xv = x0 + (x1 - x0) * t / 4.0, yv = y0 + (y1 - y0) * t / 4.0;
        const std::string xl = opt.log_x ? format_double(std::pow(10.0, xv), 3) : format_double(xv, 3);
        os << "<text x=\"" << px(xv) << "\" y=\"" << top + ph + 18 << "\" text-anchor=\"middle\">" << xl
           << "</text>\n";
        os << "<text x=\"" << left - 6 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\">"
           << format_double(yv, 3) << "</text>\n";
    }
    os << "<text x=\"" << left + pw / 2 << "\" y=\"" << opt.height - 10 << "\" text-anchor=\"middle\">"
       << svg_escape(opt.x) << (opt.log_x ? " (log)" : "") << "</text>\n";
    os << "<text transform=\"translate(16," << top + ph / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
       << svg_escape(opt.y) << "</text>\n";
    std::size_t s = 0;
    for (const auto& [name, pts] : series) {
        const char* color = palette[s % 10];
        os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
        for (auto [x, y] : pts) {
            os << px(x) << "," << py(y) << " ";
        }
        os << "\"/>\n";
        const double ly = top + 14 + 18 * static_cast<double>(s);
        os << "<line x1=\"" << left + pw + 10 << "\" y1=\"" << ly - 4 << "\" x2=\"" << left + pw + 30 << "\" y2=\""
           << ly - 4 << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
        os << "<text x=\"" << left + pw + 36 << "\" y=\"" << ly << "\">" << svg_escape(name) << "</text>\n";
        ++s;
    }
    os << "</svg>\n";
    return os.str();
}

} // namespace lnc::bench
